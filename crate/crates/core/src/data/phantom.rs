//! Synthetic prostate phantoms with known labels.
//!
//! Each phantom has an ellipsoidal gland on a noisy background. Malignant
//! phantoms carry one spherical lesion inside the gland that is dark in ADC,
//! bright in DWI and iso-intense in T2W.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{GleasonReport, Quality, SEXTANTS};
use super::manifest::{Manifest, StudyEntry};
use super::volume::{write_rvol, Modality, RvolHeader, Sample, DEFAULT_SPACING};
use crate::error::{Error, Result};
use crate::tensor::{streams, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub n: usize,
    pub malignant_fraction: f64,
    /// (D, H, W)
    pub geometry: [usize; 3],
    /// (z, y, x) in mm
    pub spacing: [f64; 3],
    pub seed: u64,
    /// Standard deviation of the additive background/gland noise.
    pub noise: f64,
    /// Lesion radius as a fraction of the smaller in-plane gland radius.
    pub lesion_scale: [f64; 2],
}

impl PhantomConfig {
    pub fn new(n: usize, malignant_fraction: f64, geometry: [usize; 3], seed: u64) -> Self {
        PhantomConfig {
            n,
            malignant_fraction,
            geometry,
            spacing: DEFAULT_SPACING,
            seed,
            noise: 0.05,
            lesion_scale: [0.3, 0.45],
        }
    }

    pub fn positives(&self) -> usize {
        (self.n as f64 * self.malignant_fraction).round() as usize
    }
}

/// Channel means (T2W, ADC, DWI) per tissue class.
const BACKGROUND: [f64; 3] = [0.25, 0.35, 0.15];
const GLAND: [f64; 3] = [0.60, 0.70, 0.40];
const LESION: [f64; 3] = [0.60, 0.25, 0.90];

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub samples: Vec<Sample>,
    pub reports: Vec<GleasonReport>,
    /// Lesion voxels (`[D, H, W]`, 1 inside) for malignant phantoms.
    pub lesion_masks: Vec<Option<Tensor<f32>>>,
}

fn ellipsoid_contains(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Generates `n` phantoms, exactly `round(n * fraction)` of them malignant.
/// Output is a pure function of the config.
pub fn generate_phantom_dataset(config: &PhantomConfig) -> Result<Phantom> {
    if config.n < 4 {
        return Err(Error::Parameter(format!("phantom dataset needs n >= 4, got {}", config.n)));
    }
    if !(config.malignant_fraction > 0.0 && config.malignant_fraction < 1.0) {
        return Err(Error::Parameter(format!("malignant fraction {} outside (0, 1)", config.malignant_fraction)));
    }
    if config.spacing.iter().any(|s| !(*s > 0.0)) || config.noise < 0.0 {
        return Err(Error::Parameter("phantom spacing must be positive and noise non-negative".into()));
    }
    if config.lesion_scale[0] <= 0.0 || config.lesion_scale[0] > config.lesion_scale[1] {
        return Err(Error::Parameter(format!("lesion scale {:?} must be positive and ordered", config.lesion_scale)));
    }
    if config.lesion_scale[1] >= 1.0 {
        return Err(Error::Parameter("lesion would not fit inside the gland (lesion_scale >= 1)".into()));
    }
    let [d, h, w] = config.geometry;
    if d < 4 || h < 8 || w < 8 {
        return Err(Error::Parameter(format!("phantom geometry {:?} too small", config.geometry)));
    }

    let mut order: Vec<usize> = (0..config.n).collect();
    Rng::for_stream(config.seed, streams::PHANTOM, 0).shuffle(&mut order);
    let mut malignant = vec![false; config.n];
    for &i in &order[..config.positives()] {
        malignant[i] = true;
    }

    let mut out = Phantom { samples: Vec::new(), reports: Vec::new(), lesion_masks: Vec::new() };
    for (i, &is_malignant) in malignant.iter().enumerate() {
        let study_id = format!("phantom{i:04}");
        let mut rng = Rng::for_item(config.seed, streams::PHANTOM, &study_id, 1);
        let (sample, lesion, sextant) = make_one(config, &study_id, is_malignant, &mut rng)?;
        let mut sextants = vec![Some((3u8, 3u8)); SEXTANTS];
        if let Some(k) = sextant {
            sextants[k] = Some((4, 3));
        }
        out.reports.push(GleasonReport { study_id: study_id.clone(), sextants, quality: Quality::Ok });
        out.samples.push(sample);
        out.lesion_masks.push(lesion);
    }
    Ok(out)
}

type Made = (Sample, Option<Tensor<f32>>, Option<usize>);

fn make_one(config: &PhantomConfig, study_id: &str, malignant: bool, rng: &mut Rng) -> Result<Made> {
    let [d, h, w] = config.geometry;
    let dims = [d as f64, h as f64, w as f64];
    let centre = [0, 1, 2].map(|a| (dims[a] - 1.0) / 2.0 + rng.uniform_in(-0.05, 0.05) * dims[a]);
    let radii = [rng.uniform_in(0.25, 0.35) * dims[0], rng.uniform_in(0.22, 0.3) * dims[1], rng.uniform_in(0.22, 0.3) * dims[2]];

    // Lesion radius is physical: in-plane voxels convert to z voxels by the spacing ratio.
    let lesion = if malignant {
        let r_in = rng.uniform_in(config.lesion_scale[0], config.lesion_scale[1]) * radii[1].min(radii[2]);
        let r = [(r_in * config.spacing[1] / config.spacing[0]).max(0.75), r_in, r_in];
        if (0..3).any(|a| r[a] >= radii[a]) {
            return Err(Error::Parameter(format!("lesion radius {r:?} exceeds gland radius {radii:?}")));
        }
        // Uniform direction and radius inside the gland shrunk by the lesion size.
        let room = [0, 1, 2].map(|a| radii[a] - r[a]);
        let (mut u, mut norm) = ([0.0; 3], 2.0);
        while norm > 1.0 {
            u = [0, 1, 2].map(|_| rng.uniform_in(-1.0, 1.0));
            norm = u.iter().map(|v| v * v).sum::<f64>();
        }
        let c = [0, 1, 2].map(|a| centre[a] + 0.8 * u[a] * room[a]);
        Some((c, r))
    } else {
        None
    };

    let plane = h * w;
    let vox = d * plane;
    let mut image = vec![0.0f32; 3 * vox];
    let mut gland = vec![0.0f32; vox];
    let mut lesion_mask = vec![0.0f32; vox];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let i = z * plane + y * w + x;
                let mut means = BACKGROUND;
                if ellipsoid_contains(p, centre, radii) {
                    gland[i] = 1.0;
                    means = GLAND;
                    if let Some((c, r)) = lesion {
                        if ellipsoid_contains(p, c, r) {
                            lesion_mask[i] = 1.0;
                            means = LESION;
                        }
                    }
                }
                for ch in 0..3 {
                    image[ch * vox + i] = (means[ch] + config.noise * rng.normal()) as f32;
                }
            }
        }
    }
    let lesion_voxels = lesion_mask.iter().filter(|&&v| v > 0.0).count();
    if malignant && lesion_voxels == 0 {
        return Err(Error::Parameter(format!("lesion of {study_id} covers no voxel at this geometry")));
    }
    // Sextant: left/right half by x, base/mid/apex third by z.
    let sextant = lesion.map(|(c, _)| {
        let side = usize::from(c[2] >= centre[2]);
        let level = (((c[0] - (centre[0] - radii[0])) / (2.0 * radii[0]) * 3.0).floor().clamp(0.0, 2.0)) as usize;
        side * 3 + level
    });
    let sample = Sample {
        study_id: study_id.to_string(),
        image: Tensor::from_vec(&[3, d, h, w], image)?,
        spacing: config.spacing,
        label: u8::from(malignant),
        mask: Some(Tensor::from_vec(&[d, h, w], gland)?),
    };
    let lesion_tensor = if malignant { Some(Tensor::from_vec(&[d, h, w], lesion_mask)?) } else { None };
    Ok((sample, lesion_tensor, sextant))
}

/// Writes RVOL files for every phantom plus `manifest.json` into `dir`.
pub fn write_phantom_dataset(phantom: &Phantom, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut studies = Vec::new();
    for (sample, report) in phantom.samples.iter().zip(&phantom.reports) {
        let [d, h, w] = sample.dims();
        let header = |modality| RvolHeader {
            shape: [d, h, w],
            spacing_mm: sample.spacing,
            modality,
            study_id: sample.study_id.clone(),
        };
        let mut sequences = std::collections::BTreeMap::new();
        for (c, modality) in Modality::CHANNELS.into_iter().enumerate() {
            let file = format!("{}_{}.raw", sample.study_id, format!("{modality:?}").to_lowercase());
            write_rvol(&dir.join(&file), &sample.image.index_axis0(c)?, &header(modality))?;
            sequences.insert(modality, file);
        }
        let mask = match &sample.mask {
            Some(m) => {
                let file = format!("{}_mask.raw", sample.study_id);
                write_rvol(&dir.join(&file), m, &header(Modality::MASK))?;
                Some(file)
            }
            None => None,
        };
        studies.push(StudyEntry {
            study_id: sample.study_id.clone(),
            sequences,
            mask,
            sextants: report.sextants.clone(),
            quality: report.quality,
        });
    }
    let manifest = Manifest { channel_order: Modality::CHANNELS.to_vec(), studies };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

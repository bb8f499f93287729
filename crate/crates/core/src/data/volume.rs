//! Samples, channel stacking, cropping, normalization and RVOL volume files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default volume geometry (D, H, W) and spacing (z, y, x) in mm.
pub const DEFAULT_GEOMETRY: [usize; 3] = [32, 149, 149];
pub const DEFAULT_SPACING: [f64; 3] = [3.0, 0.75, 0.75];

/// Default crop margin in voxels along (D, H, W).
pub const DEFAULT_CROP_MARGIN: [usize; 3] = [2, 8, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T2W,
    ADC,
    DWI,
    MASK,
}

impl Modality {
    /// Input channel order.
    pub const CHANNELS: [Modality; 3] = [Modality::T2W, Modality::ADC, Modality::DWI];
}

/// One study: stacked image `[3, D, H, W]`, spacing, label and optional
/// prostate mask `[D, H, W]` (nonzero inside the gland).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub study_id: String,
    pub image: Tensor<f32>,
    pub spacing: [f64; 3],
    pub label: u8,
    pub mask: Option<Tensor<f32>>,
}

impl Sample {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 4 || s[0] != 3 {
            return Err(Error::Shape(format!("study '{}': image must be [3, D, H, W], got {s:?}", self.study_id)));
        }
        if self.spacing.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Data(format!("study '{}': spacing must be positive", self.study_id)));
        }
        if self.label > 1 {
            return Err(Error::Data(format!("study '{}': label {} is not binary", self.study_id, self.label)));
        }
        if let Some(m) = &self.mask {
            if m.shape() != &s[1..] {
                return Err(Error::Shape(format!(
                    "study '{}': mask {:?} does not match image {s:?}",
                    self.study_id,
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Stacks T2W, ADC and DWI volumes into channels 0, 1, 2.
pub fn stack_sequences(t2w: &Tensor<f32>, adc: &Tensor<f32>, dwi: &Tensor<f32>) -> Result<Tensor<f32>> {
    if t2w.rank() != 3 || adc.shape() != t2w.shape() || dwi.shape() != t2w.shape() {
        return Err(Error::Shape(format!(
            "sequences must share one [D, H, W] geometry: T2W {:?}, ADC {:?}, DWI {:?}",
            t2w.shape(),
            adc.shape(),
            dwi.shape()
        )));
    }
    Tensor::stack(&[t2w, adc, dwi])
}

/// Bounding box `[lo, hi)` per axis of the nonzero voxels of a `[D, H, W]` mask.
pub fn mask_bbox(mask: &Tensor<f32>) -> Option<([usize; 3], [usize; 3])> {
    let [d, h, w] = [mask.shape()[0], mask.shape()[1], mask.shape()[2]];
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.data()[(z * h + y) * w + x] != 0.0 {
                    for (a, v) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v + 1);
                    }
                }
            }
        }
    }
    (lo[0] != usize::MAX).then_some((lo, hi))
}

/// Copies the box `[lo, hi)` over the last three axes of a rank-3 or rank-4 tensor.
pub fn crop_box(t: &Tensor<f32>, lo: [usize; 3], hi: [usize; 3]) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (c, dims) = match s.len() {
        3 => (1, [s[0], s[1], s[2]]),
        4 => (s[0], [s[1], s[2], s[3]]),
        _ => return Err(Error::Shape(format!("crop expects rank 3 or 4, got {s:?}"))),
    };
    if (0..3).any(|a| lo[a] >= hi[a] || hi[a] > dims[a]) {
        return Err(Error::Shape(format!("crop box {lo:?}..{hi:?} outside volume {dims:?}")));
    }
    let out_dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut out = Vec::with_capacity(c * out_dims.iter().product::<usize>());
    for ch in 0..c {
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                let start = ((ch * dims[0] + z) * dims[1] + y) * dims[2];
                out.extend_from_slice(&t.data()[start + lo[2]..start + hi[2]]);
            }
        }
    }
    let shape: Vec<usize> = if s.len() == 4 { vec![c, out_dims[0], out_dims[1], out_dims[2]] } else { out_dims.to_vec() };
    Tensor::from_vec(&shape, out)
}

/// Crops image and mask to the mask's bounding box grown by `margin`,
/// clamped to the volume.
pub fn crop_to_mask(sample: &Sample, margin: [usize; 3]) -> Result<Sample> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("study '{}': crop needs a prostate mask", sample.study_id)))?;
    let (lo, hi) = mask_bbox(mask)
        .ok_or_else(|| Error::Data(format!("study '{}': prostate mask is empty", sample.study_id)))?;
    let dims = sample.dims();
    let lo = [0, 1, 2].map(|a| lo[a].saturating_sub(margin[a]));
    let hi = [0, 1, 2].map(|a| (hi[a] + margin[a]).min(dims[a]));
    Ok(Sample {
        study_id: sample.study_id.clone(),
        image: crop_box(&sample.image, lo, hi)?,
        spacing: sample.spacing,
        label: sample.label,
        mask: Some(crop_box(mask, lo, hi)?),
    })
}

/// Per-channel mean and standard deviation used for z-scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Z-scores each channel of a `[C, ...]` image over its own voxels. A constant
/// channel is only centered.
pub fn normalize_zscore(image: &Tensor<f32>) -> Result<(Tensor<f32>, ChannelStats)> {
    let c = image.shape()[0];
    let per = image.len() / c;
    let mut out = image.clone();
    let mut stats = ChannelStats { mean: Vec::with_capacity(c), std: Vec::with_capacity(c) };
    for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
        let std = var.sqrt();
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::Numeric(format!("channel {ch} has non-finite intensities")));
        }
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) * scale) as f32;
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    Ok((out, stats))
}

/// JSON sidecar of an RVOL volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RvolHeader {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub modality: Modality,
    pub study_id: String,
}

/// Sidecar path for a raw volume path: same stem, `.json` extension.
pub fn rvol_sidecar(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Writes `<path>` (raw little-endian f32) and its JSON sidecar.
pub fn write_rvol(path: &Path, volume: &Tensor<f32>, header: &RvolHeader) -> Result<()> {
    if volume.shape() != header.shape {
        return Err(Error::Shape(format!(
            "volume {:?} does not match header shape {:?}",
            volume.shape(),
            header.shape
        )));
    }
    let mut bytes = Vec::with_capacity(volume.len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = rvol_sidecar(path);
    fs::write(&sidecar, serde_json::to_vec_pretty(header)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

/// Reads a raw volume and its sidecar, checking size and spacing.
pub fn read_rvol(path: &Path) -> Result<(Tensor<f32>, RvolHeader)> {
    let sidecar = rvol_sidecar(path);
    let text = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let header: RvolHeader =
        serde_json::from_slice(&text).map_err(|e| Error::from(e).context(format!("sidecar {}", sidecar.display())))?;
    if header.spacing_mm.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Data(format!("{}: spacing must be positive", sidecar.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if n == 0 || bytes.len() != n * 4 {
        return Err(Error::Data(format!(
            "{}: {} bytes for shape {:?} (expected {})",
            path.display(),
            bytes.len(),
            header.shape,
            n * 4
        )));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok((Tensor::from_vec(&header.shape, data)?, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn vol(shape: [usize; 3], v: f32) -> Tensor<f32> {
        Tensor::new(&shape, v).unwrap()
    }

    #[test]
    fn stack_keeps_channel_order() {
        let s = stack_sequences(&vol([2, 3, 4], 1.0), &vol([2, 3, 4], 2.0), &vol([2, 3, 4], 3.0)).unwrap();
        assert_eq!(s.shape(), &[3, 2, 3, 4]);
        for c in 0..3 {
            assert_eq!(s.index_axis0(c).unwrap().mean(), (c + 1) as f64);
        }
        let adc = Tensor::rand_normal(&[2, 3, 4], 0.0, 1.0, &mut Rng::new(1, 1)).unwrap();
        let s = stack_sequences(&vol([2, 3, 4], 0.0), &adc, &vol([2, 3, 4], 0.0)).unwrap();
        assert_eq!(s.index_axis0(1).unwrap(), adc);
        assert!(stack_sequences(&vol([2, 3, 4], 0.0), &vol([3, 3, 4], 0.0), &vol([2, 3, 4], 0.0)).is_err());
    }

    fn sample_with_mask(mask: Tensor<f32>) -> Sample {
        let [d, h, w] = [mask.shape()[0], mask.shape()[1], mask.shape()[2]];
        let image = Tensor::rand_normal(&[3, d, h, w], 0.0, 1.0, &mut Rng::new(2, 2)).unwrap();
        Sample { study_id: "s".into(), image, spacing: DEFAULT_SPACING, label: 1, mask: Some(mask) }
    }

    #[test]
    fn full_mask_crop_is_identity() {
        let s = sample_with_mask(vol([4, 5, 6], 1.0));
        assert_eq!(crop_to_mask(&s, [0, 0, 0]).unwrap(), s);
    }

    #[test]
    fn single_voxel_crop_is_two_margins_plus_one() {
        let mut mask = vol([10, 30, 30], 0.0);
        mask.set(&[5, 15, 14], 1.0);
        let s = sample_with_mask(mask);
        let c = crop_to_mask(&s, [2, 8, 8]).unwrap();
        assert_eq!(c.dims(), [5, 17, 17]);
        assert_eq!(c.label, 1);
        assert_eq!(c.image.at(&[1, 2, 8, 8]), s.image.at(&[1, 5, 15, 14]));
    }

    #[test]
    fn edge_crop_is_clamped() {
        let mut mask = vol([6, 10, 10], 0.0);
        mask.set(&[0, 9, 0], 1.0);
        let c = crop_to_mask(&sample_with_mask(mask), [2, 8, 8]).unwrap();
        assert_eq!(c.dims(), [3, 9, 9]);
    }

    #[test]
    fn empty_or_missing_mask_is_error() {
        assert!(crop_to_mask(&sample_with_mask(vol([3, 3, 3], 0.0)), [0, 0, 0]).is_err());
        let mut s = sample_with_mask(vol([3, 3, 3], 1.0));
        s.mask = None;
        assert!(crop_to_mask(&s, [0, 0, 0]).is_err());
    }

    #[test]
    fn zscore_per_channel() {
        let img = Tensor::rand_normal(&[3, 4, 8, 8], 5.0, 3.0, &mut Rng::new(3, 3)).unwrap();
        let (z, stats) = normalize_zscore(&img).unwrap();
        for c in 0..3 {
            let ch = z.index_axis0(c).unwrap();
            assert!(ch.mean().abs() < 1e-5);
            let var = ch.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / ch.len() as f64;
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.mean.len(), 3);
        let (flat, _) = normalize_zscore(&Tensor::new(&[1, 2, 2, 2], 4.0).unwrap()).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rvol_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a_t2w.raw");
        let v = Tensor::rand_normal(&[2, 3, 4], 0.0, 1.0, &mut Rng::new(4, 4)).unwrap();
        let header = RvolHeader { shape: [2, 3, 4], spacing_mm: [3.0, 0.75, 0.75], modality: Modality::T2W, study_id: "a".into() };
        write_rvol(&path, &v, &header).unwrap();
        let (back, h) = read_rvol(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(h, header);
        let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(rvol_sidecar(&path)).unwrap()).unwrap();
        assert_eq!(sidecar["modality"], "T2W");
        assert_eq!(sidecar["spacing_mm"][0], 3.0);

        std::fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_rvol(&path), Err(Error::Data(_))));
    }
}

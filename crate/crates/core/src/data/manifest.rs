//! Dataset manifest: the only surface through which labels enter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{condense_report, Condensed, GleasonReport, Quality};
use super::volume::{read_rvol, stack_sequences, Modality, Sample};
use crate::error::{Error, Result, ResultExt};

/// One study: sequence files per modality (relative to the manifest), an
/// optional prostate mask, six sextant grades and the quality flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub study_id: String,
    pub sequences: BTreeMap<Modality, String>,
    #[serde(default)]
    pub mask: Option<String>,
    pub sextants: Vec<Option<(u8, u8)>>,
    pub quality: Quality,
}

impl StudyEntry {
    pub fn report(&self) -> GleasonReport {
        GleasonReport { study_id: self.study_id.clone(), sextants: self.sextants.clone(), quality: self.quality }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub channel_order: Vec<Modality>,
    pub studies: Vec<StudyEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&text)
            .map_err(Error::from)
            .context_with(|| format!("manifest {}", path.display()))?;
        if m.channel_order != Modality::CHANNELS {
            return Err(Error::Data(format!(
                "manifest channel order {:?} must be {:?}",
                m.channel_order,
                Modality::CHANNELS
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Labeled samples plus the studies dropped with their reasons.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub excluded: Vec<(String, String)>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<(String, u8)> {
        self.samples.iter().map(|s| (s.study_id.clone(), s.label)).collect()
    }

    pub fn get(&self, study_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.study_id == study_id)
    }
}

/// Reads every study of a manifest, condensing reports into labels and
/// stacking T2W/ADC/DWI. All included studies must share one geometry.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples: Vec<Sample> = Vec::new();
    let mut excluded = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for entry in &manifest.studies {
        if !seen.insert(entry.study_id.clone()) {
            return Err(Error::Data(format!("duplicate study id '{}' in manifest", entry.study_id)));
        }
        let label = match condense_report(&entry.report()).context_with(|| format!("study '{}'", entry.study_id))? {
            Condensed::Label(l) => l,
            Condensed::Excluded(why) => {
                excluded.push((entry.study_id.clone(), why.to_string()));
                continue;
            }
        };
        let sample = load_study(root, entry, label).context_with(|| format!("study '{}'", entry.study_id))?;
        if let Some(first) = samples.first() {
            if first.dims() != sample.dims() {
                return Err(Error::Data(format!(
                    "study '{}' has geometry {:?}, dataset uses {:?}",
                    sample.study_id,
                    sample.dims(),
                    first.dims()
                )));
            }
        }
        samples.push(sample);
    }
    Ok(Dataset { samples, excluded })
}

fn load_study(root: &Path, entry: &StudyEntry, label: u8) -> Result<Sample> {
    let mut vols = Vec::new();
    let mut spacing = None;
    for modality in Modality::CHANNELS {
        let file = entry
            .sequences
            .get(&modality)
            .ok_or_else(|| Error::Data(format!("missing {modality:?} sequence")))?;
        let (vol, header) = read_rvol(&root.join(file))?;
        if header.modality != modality {
            return Err(Error::Data(format!("{file} is labeled {:?}, expected {modality:?}", header.modality)));
        }
        match spacing {
            None => spacing = Some(header.spacing_mm),
            Some(s) if s != header.spacing_mm => {
                return Err(Error::Data(format!("{file} spacing {:?} differs from {s:?}", header.spacing_mm)))
            }
            _ => {}
        }
        vols.push(vol);
    }
    let image = stack_sequences(&vols[0], &vols[1], &vols[2])?;
    let mask = match &entry.mask {
        Some(file) => {
            let (m, header) = read_rvol(&root.join(file))?;
            if header.modality != Modality::MASK {
                return Err(Error::Data(format!("{file} is not a MASK volume")));
            }
            Some(m)
        }
        None => None,
    };
    let sample = Sample {
        study_id: entry.study_id.clone(),
        image,
        spacing: spacing.unwrap_or_default(),
        label,
        mask,
    };
    sample.validate()?;
    Ok(sample)
}

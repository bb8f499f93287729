//! Per-study preparation applied once before training or scoring.

use serde::{Deserialize, Serialize};

use super::volume::{crop_box, mask_bbox, normalize_zscore, Sample};
use crate::error::{Error, Result};

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Preprocess {
    /// Per-channel z-score over each study's own voxels.
    #[serde(default = "yes")]
    pub zscore: bool,
    /// Fixed `(D, H, W)` window centred on the prostate mask. A fixed size
    /// keeps every study batchable.
    #[serde(default)]
    pub crop_size: Option<[usize; 3]>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess { zscore: true, crop_size: None }
    }
}

/// Window of `size` centred on the mask bounding box, shifted to stay
/// inside the volume.
pub fn crop_around_mask(sample: &Sample, size: [usize; 3]) -> Result<Sample> {
    let dims = sample.dims();
    if (0..3).any(|a| size[a] == 0 || size[a] > dims[a]) {
        return Err(Error::Shape(format!("crop size {size:?} does not fit volume {dims:?}")));
    }
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::Data(format!("study '{}': crop needs a prostate mask", sample.study_id)))?;
    let (lo, hi) = mask_bbox(mask)
        .ok_or_else(|| Error::Data(format!("study '{}': prostate mask is empty", sample.study_id)))?;
    let start = [0, 1, 2].map(|a| ((lo[a] + hi[a]) / 2).saturating_sub(size[a] / 2).min(dims[a] - size[a]));
    let end = [0, 1, 2].map(|a| start[a] + size[a]);
    Ok(Sample {
        study_id: sample.study_id.clone(),
        image: crop_box(&sample.image, start, end)?,
        spacing: sample.spacing,
        label: sample.label,
        mask: Some(crop_box(mask, start, end)?),
    })
}

impl Preprocess {
    pub fn apply(&self, sample: &Sample) -> Result<Sample> {
        let mut out = match self.crop_size {
            Some(size) => crop_around_mask(sample, size)?,
            None => sample.clone(),
        };
        if self.zscore {
            out.image = normalize_zscore(&out.image)?.0;
        }
        Ok(out)
    }

    pub fn apply_all(&self, samples: &[Sample]) -> Result<Vec<Sample>> {
        samples.iter().map(|s| self.apply(s)).collect()
    }
}

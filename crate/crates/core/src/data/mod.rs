//! Labels, volumes, splitting, augmentation and the synthetic phantom set.

mod augment;
mod labels;
mod manifest;
mod phantom;
mod preprocess;
mod split;
mod volume;

pub use augment::{augment, mirror, resample_trilinear, AugmentationSpec, Axis, Step, Transform};
pub use labels::{condense_report, gleason_significant, Condensed, Exclusion, GleasonReport, Quality, SEXTANTS};
pub use manifest::{load_dataset, Dataset, Manifest, StudyEntry};
pub use phantom::{generate_phantom_dataset, write_phantom_dataset, Phantom, PhantomConfig};
pub use preprocess::{crop_around_mask, Preprocess};
pub use split::{class_weight_fractions, class_weights, partition_sizes, split_dataset, DatasetSplit, LabelCounts, DEFAULT_RATIOS};
pub use volume::{
    crop_box, crop_to_mask, mask_bbox, normalize_zscore, read_rvol, rvol_sidecar, stack_sequences, write_rvol,
    ChannelStats, Modality, RvolHeader, Sample, DEFAULT_CROP_MARGIN, DEFAULT_GEOMETRY, DEFAULT_SPACING,
};

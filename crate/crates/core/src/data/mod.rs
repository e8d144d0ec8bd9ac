//! Synthetic samples, image files, annotations and dataset splits.

pub mod annotations;
pub mod pnm;
pub mod synth;

pub use annotations::{
    load_annotations, parse_annotations, split_assignments, split_dataset, write_synthetic_dataset,
    DatasetManifest, Entry, Split,
};
pub use pnm::{load_image, save_image};
pub use synth::{gen_synthetic_sample, synthetic_samples, Sample};

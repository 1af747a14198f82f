//! Disentangled anatomy/modality segmentation with resolution and
//! factor-based augmentation, a synthetic multi-vendor phantom generator,
//! training and per-vendor Dice evaluation.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod factor;
mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod resolution;
pub mod training;

pub use data::{
    center_crop_or_pad, load_manifest, normalize_intensity, read_sample, DatasetManifest, Image2D,
    Phase, Sample, SampleRecord, SegMask,
};
pub use error::{Error, Result};
pub use model::{AnatomyFactor, ArchDescriptor, Model, ModalityFactor, ModelKind};
pub use phantom::{default_desk_config, generate_phantom_dataset, PhantomConfig, VendorProfile};
pub use resolution::{apply_ra, resample_to_area, resolution_histogram, RAConfig};

//! Dataset manifests, composition reports, cross-validation splits,
//! augmentation and the synthetic site-biased data generator.

pub mod augment;
pub mod composition;
pub mod findings;
pub mod folds;
pub mod image;
pub mod manifest;
pub mod store;
pub mod synth;

pub use augment::{augment, AugmentConfig, AugmentError, Crop};
pub use composition::{site_composition_report, CompositionReport, SiteComposition};
pub use findings::{FindingsTable, UncertainPolicy};
pub use folds::{stratified_kfold, FoldAssignment, FoldError, Stratification};
pub use image::{GrayImage, ImageError};
pub use manifest::{load_manifest, DatasetManifest, ImageRecord, Label, ManifestError, Modality};
pub use store::{PixelStore, StoredImage};
pub use synth::{generate_synthetic_biased, SampleMeta, SyntheticConfig, SyntheticDataset};

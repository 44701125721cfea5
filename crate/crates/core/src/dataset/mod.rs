//! File formats, case discovery, train/validation splitting and synthetic cases.

pub mod manifest;
pub mod nifti;
pub mod phantom;
pub mod raw;

pub use manifest::{
    scan_dataset, split_train_val, CaseEntry, DatasetManifest, IncompleteCase, ManifestError,
    ScanReport, Split, SuffixTable, DEFAULT_TRAIN_FRACTION,
};
pub use nifti::{
    read_nifti, read_nifti_labels, write_nifti, write_nifti_labels, NiftiError, NiftiMeta,
};
pub use phantom::{generate_phantom, write_case, PhantomConfig, PhantomError};
pub use raw::{decode_raw, encode_raw, read_raw, write_raw, RawError};

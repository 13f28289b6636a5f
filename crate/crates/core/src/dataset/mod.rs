//! Misalignment simulation over a cohort, landmark-centred patch extraction,
//! the on-disk patch container and subject-wise splits.

mod build;
mod patches;
mod simulate;
mod split;
pub mod synthetic;

use thiserror::Error;

pub use build::{
    build_dataset, load_case, load_manifest, manifest_hash, prepare_case, BuildOptions, CaseDescriptor,
    DatasetManifest, RecordEntry, MANIFEST_FILE,
};
pub use patches::{extract_patches, normalize_min_max, read_record, write_record, PatchContext, PatchRecord};
pub use simulate::{simulate_case, simulate_deformation, CaseVolumes, Deformation};
pub use split::{make_split, Split, SplitManifest, PUBLISHED_FRACTIONS};

/// Published default: every co-registered iUS scan is deformed ten times.
pub const DEFAULT_DEFORMATIONS: usize = 10;
/// Published default patch edge (voxels).
pub const DEFAULT_PATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Ffd(#[from] crate::ffd::FfdError),
    #[error(transparent)]
    Landmark(#[from] crate::landmarks::LandmarkError),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("need at least 3 patients for a three-way split, got {0}")]
    TooFewPatients(usize),
    #[error("patch record {path}: {msg}")]
    Record { path: String, msg: String },
    #[error("case {patient}: {source}")]
    Case {
        patient: String,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
}

impl DatasetError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.display().to_string(), source }
    }
}

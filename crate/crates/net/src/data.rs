//! Indexed access to patch records for training and evaluation.

use std::path::{Path, PathBuf};

use regerr_core::dataset::{DatasetManifest, PatchRecord, RecordEntry, Split};

use crate::NetError;

pub trait DataSource: Sync {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<PatchRecord, NetError>;
    /// Stable identifier of record `i`.
    fn id(&self, i: usize) -> String;
    fn patient(&self, i: usize) -> String;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records of one split, read from disk on demand.
pub struct ManifestSplit<'a> {
    manifest: &'a DatasetManifest,
    dir: PathBuf,
    entries: Vec<&'a RecordEntry>,
}

impl<'a> ManifestSplit<'a> {
    pub fn new(manifest: &'a DatasetManifest, dir: &Path, split: Split) -> Self {
        ManifestSplit { manifest, dir: dir.to_path_buf(), entries: manifest.records_in(split) }
    }
}

impl DataSource for ManifestSplit<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn load(&self, i: usize) -> Result<PatchRecord, NetError> {
        Ok(self.manifest.load_record(&self.dir, self.entries[i])?)
    }
    fn id(&self, i: usize) -> String {
        let f = &self.entries[i].file;
        Path::new(f).file_stem().map_or_else(|| f.clone(), |s| s.to_string_lossy().into_owned())
    }
    fn patient(&self, i: usize) -> String {
        self.entries[i].patient_id.clone()
    }
}

/// Records held in memory.
pub struct MemorySource(pub Vec<PatchRecord>);

impl DataSource for MemorySource {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn load(&self, i: usize) -> Result<PatchRecord, NetError> {
        Ok(self.0[i].clone())
    }
    fn id(&self, i: usize) -> String {
        let r = &self.0[i];
        format!("{}_{}_{}", r.patient_id, r.landmark_id, r.deformation_index)
    }
    fn patient(&self, i: usize) -> String {
        self.0[i].patient_id.clone()
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::patches::{extract_patches, read_record, write_record, PatchContext, PatchRecord};
use super::simulate::{simulate_deformation, CaseVolumes};
use super::split::{make_split, Split, SplitManifest, PUBLISHED_FRACTIONS};
use super::{DatasetError, DEFAULT_DEFORMATIONS, DEFAULT_PATCH_SIZE};
use crate::ffd::{dense_field, fit_landmark_bspline, save_grid, warp_volume, DeformationSpec, FitSpec};
use crate::landmarks::{load_landmark_pairs, load_landmarks};
use crate::volume::{crop_to_fov, load_volume_auto, resample_isotropic, resample_to_geometry, Geometry, Modality};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

/// One subject. Relative paths in a descriptor file resolve against the
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDescriptor {
    pub patient_id: String,
    pub mri: PathBuf,
    pub ius: PathBuf,
    pub landmarks: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmark_pairs: Option<PathBuf>,
}

pub fn load_case(path: impl AsRef<Path>) -> Result<CaseDescriptor, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    let mut d: CaseDescriptor =
        serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    fix(&mut d.mri);
    fix(&mut d.ius);
    fix(&mut d.landmarks);
    if let Some(p) = d.landmark_pairs.as_mut() {
        fix(p);
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// `seed` is the cohort seed; per-deformation seeds derive from it.
    pub deformation: DeformationSpec,
    pub n_deformations: usize,
    pub patch_size: usize,
    /// Isotropic resampling target; `None` keeps the iUS grid as is.
    pub isotropic_spacing_mm: Option<f64>,
    pub fov_margin_mm: f64,
    pub fit: FitSpec,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    #[serde(skip)]
    pub jobs: usize,
}

impl BuildOptions {
    pub fn published(seed: u64) -> Self {
        BuildOptions {
            deformation: DeformationSpec::published(seed),
            n_deformations: DEFAULT_DEFORMATIONS,
            patch_size: DEFAULT_PATCH_SIZE,
            isotropic_spacing_mm: Some(0.5),
            fov_margin_mm: 0.0,
            fit: FitSpec::default(),
            split_fractions: PUBLISHED_FRACTIONS,
            split_seed: seed,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        self.deformation.validate()?;
        if self.n_deformations == 0 {
            return Err(DatasetError::InvalidOption("n_deformations must be >= 1".into()));
        }
        if self.patch_size == 0 || self.patch_size % 32 != 0 {
            return Err(DatasetError::InvalidOption(format!(
                "patch size must be a positive multiple of 32, got {}",
                self.patch_size
            )));
        }
        if let Some(s) = self.isotropic_spacing_mm {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DatasetError::InvalidOption(format!("isotropic spacing must be > 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInfo {
    /// Grid of the cropped, co-registered volumes the patches were cut from.
    pub geometry: Geometry,
    pub landmarks: usize,
    pub silver_fit: bool,
    /// Control grid of each deformation, relative to the dataset directory.
    pub grids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub file: String,
    pub patient_id: String,
    pub landmark_id: String,
    pub deformation_index: usize,
    pub seed: u64,
    pub center_world_mm: [f64; 3],
    pub start_voxel: [usize; 3],
    pub offsets: [u64; 3],
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub patch_size: usize,
    pub options: BuildOptions,
    pub cases: BTreeMap<String, CaseInfo>,
    pub records: Vec<RecordEntry>,
    pub split: SplitManifest,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> Vec<&RecordEntry> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Reads one record's arrays and fills in its manifest metadata.
    pub fn load_record(&self, dir: &Path, entry: &RecordEntry) -> Result<PatchRecord, DatasetError> {
        let mut r = read_record(&dir.join(&entry.file))?;
        if r.size != self.patch_size || r.seed != entry.seed || r.deformation_index != entry.deformation_index {
            return Err(DatasetError::Record {
                path: entry.file.clone(),
                msg: "header disagrees with manifest".into(),
            });
        }
        r.patient_id = entry.patient_id.clone();
        r.landmark_id = entry.landmark_id.clone();
        r.center_world_mm = entry.center_world_mm;
        r.start_voxel = entry.start_voxel;
        Ok(r)
    }
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest, DatasetError> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DatasetError::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(DatasetError::Manifest(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Hex SHA-256 of `manifest.json`.
pub fn manifest_hash(dir: impl AsRef<Path>) -> Result<String, DatasetError> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| DatasetError::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Loads a case and brings it onto one cropped grid: optional isotropic
/// resampling of the iUS, MRI resampled onto the iUS grid, optional
/// landmark-driven silver-standard warp of the iUS, then both cropped to the
/// iUS field of view.
pub fn prepare_case(desc: &CaseDescriptor, opts: &BuildOptions) -> Result<(CaseVolumes, bool), DatasetError> {
    let mri = load_volume_auto(&desc.mri)?.with_modality(Modality::Mri);
    let mut ius = load_volume_auto(&desc.ius)?.with_modality(Modality::Ius);
    let landmarks = load_landmarks(&desc.landmarks)?;
    if let Some(s) = opts.isotropic_spacing_mm {
        ius = resample_isotropic(&ius, s)?;
    }
    let mri = resample_to_geometry(&mri, ius.geometry());
    let mut silver = false;
    if let Some(pp) = &desc.landmark_pairs {
        let pairs = load_landmark_pairs(pp)?;
        if !pairs.is_empty() {
            let grid = fit_landmark_bspline(&pairs, ius.geometry(), &opts.fit)?;
            let field = dense_field(&grid, ius.geometry())?;
            ius = warp_volume(&ius, &field)?;
            silver = true;
        }
    }
    let mri = crop_to_fov(&ius, &mri, opts.fov_margin_mm)?;
    let ius = crop_to_fov(&ius, &ius, opts.fov_margin_mm)?;
    Ok((CaseVolumes { patient_id: desc.patient_id.clone(), mri, ius, landmarks }, silver))
}

fn file_token(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

struct CaseOutput {
    info: CaseInfo,
    records: Vec<RecordEntry>,
}

fn build_case(desc: &CaseDescriptor, opts: &BuildOptions, out_dir: &Path) -> Result<CaseOutput, DatasetError> {
    let (case, silver_fit) = prepare_case(desc, opts)?;
    let patient = file_token(&case.patient_id);
    let n = opts.patch_size.pow(3) as u64;
    let mut records = Vec::new();
    let mut grids = Vec::with_capacity(opts.n_deformations);
    for k in 0..opts.n_deformations {
        let def = simulate_deformation(&case, &opts.deformation, k)?;
        let grid_file = format!("grids/{patient}_{k}");
        save_grid(&def.grid, out_dir.join(&grid_file))?;
        grids.push(grid_file);
        let ctx = PatchContext { patient_id: case.patient_id.clone(), deformation_index: k, seed: def.seed };
        for rec in extract_patches(&case.mri, &def.warped_ius, &def.error, &case.landmarks, opts.patch_size, &ctx)? {
            let file = format!("records/{patient}_{}_{k}.pr", file_token(&rec.landmark_id));
            write_record(&rec, &out_dir.join(&file))?;
            records.push(RecordEntry {
                file,
                patient_id: rec.patient_id,
                landmark_id: rec.landmark_id,
                deformation_index: k,
                seed: rec.seed,
                center_world_mm: rec.center_world_mm,
                start_voxel: rec.start_voxel,
                offsets: [64, 64 + 4 * n, 64 + 8 * n],
                split: Split::Train,
            });
        }
    }
    log::info!("patient {}: {} records", case.patient_id, records.len());
    let info = CaseInfo { geometry: *case.mri.geometry(), landmarks: case.landmarks.len(), silver_fit, grids };
    Ok(CaseOutput { info, records })
}

/// Builds every case, writes one `.pr` file per patch plus `manifest.json`,
/// and returns the manifest. The output is a pure function of the inputs
/// and options, independent of `opts.jobs`.
pub fn build_dataset(
    cases: &[CaseDescriptor],
    opts: &BuildOptions,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest, DatasetError> {
    opts.validate()?;
    let out_dir = out_dir.as_ref();
    let ids: Vec<String> = cases.iter().map(|c| c.patient_id.clone()).collect();
    let split = make_split(&ids, opts.split_fractions, opts.split_seed)?;
    let tokens: BTreeSet<String> = ids.iter().map(|i| file_token(i)).collect();
    if tokens.len() != ids.len() {
        return Err(DatasetError::InvalidOption("patient ids collide after file-name sanitizing".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| DatasetError::InvalidOption(e.to_string()))?;
    let outputs: Vec<Result<CaseOutput, DatasetError>> =
        pool.install(|| cases.par_iter().map(|d| build_case(d, opts, out_dir)).collect());

    let mut case_info = BTreeMap::new();
    let mut records = Vec::new();
    for (desc, out) in cases.iter().zip(outputs) {
        let out = out.map_err(|e| DatasetError::Case { patient: desc.patient_id.clone(), source: Box::new(e) })?;
        case_info.insert(desc.patient_id.clone(), out.info);
        records.extend(out.records);
    }
    records.sort_by(|a, b| {
        (&a.patient_id, &a.landmark_id, a.deformation_index).cmp(&(&b.patient_id, &b.landmark_id, b.deformation_index))
    });
    let mut files = BTreeSet::new();
    for r in records.iter_mut() {
        if !files.insert(r.file.clone()) {
            return Err(DatasetError::InvalidOption(format!("record file {} produced twice", r.file)));
        }
        r.split = split.assignment[&r.patient_id];
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        patch_size: opts.patch_size,
        options: opts.clone(),
        cases: case_info,
        records,
        split,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| DatasetError::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{write_cohort, SyntheticSpec};
    use crate::ffd::{brute_force_field, load_grid};

    fn small_opts() -> BuildOptions {
        BuildOptions {
            n_deformations: 3,
            patch_size: 32,
            isotropic_spacing_mm: None,
            ..BuildOptions::published(11)
        }
    }

    fn cohort(dir: &Path, n: usize, lms: usize) -> Vec<CaseDescriptor> {
        let spec = SyntheticSpec { subjects: n, landmarks_per_subject: lms, dims: 48, ..SyntheticSpec::default() };
        write_cohort(&spec, dir).unwrap().iter().map(|p| load_case(p).unwrap()).collect()
    }

    #[test]
    fn counts_hash_and_spot_check() {
        let tmp = tempfile::tempdir().unwrap();
        let cases = cohort(&tmp.path().join("in"), 3, 2);
        let out = tmp.path().join("out");
        let m = build_dataset(&cases[..1], &small_opts(), &out).unwrap_err();
        assert!(matches!(m, DatasetError::TooFewPatients(1)));
        let mut m = build_dataset(&cases, &small_opts(), &out).unwrap();
        assert_eq!(m.records.len(), 3 * 2 * 3);
        let h1 = manifest_hash(&out).unwrap();
        build_dataset(&cases, &BuildOptions { jobs: 2, ..small_opts() }, &out).unwrap();
        assert_eq!(h1, manifest_hash(&out).unwrap());
        m.options.jobs = 0;
        assert_eq!(load_manifest(&out).unwrap(), m);

        let e = &m.records[4];
        let rec = m.load_record(&out, e).unwrap();
        assert!(rec.error.iter().all(|&v| v >= 0.0));
        let info = &m.cases[&e.patient_id];
        let grid = load_grid(out.join(&info.grids[e.deformation_index])).unwrap();
        let g = info.geometry;
        let sub = Geometry::new([32; 3], g.spacing, g.world(e.start_voxel[0], e.start_voxel[1], e.start_voxel[2]))
            .unwrap();
        let exact = brute_force_field(&grid, &sub).unwrap();
        for (v, d) in rec.error.iter().zip(exact.vectors()) {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let tol = 1e-6f64.max(norm * f32::EPSILON as f64);
            assert!((*v as f64 - norm).abs() <= tol, "{v} vs {norm}");
        }
    }

    #[test]
    fn relative_descriptor_paths() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(
            tmp.path().join("c.json"),
            r#"{"patient_id":"p","mri":"a.json","ius":"/abs/b.json","landmarks":"l.csv"}"#,
        )
        .unwrap();
        let d = load_case(tmp.path().join("c.json")).unwrap();
        assert_eq!(d.mri, tmp.path().join("a.json"));
        assert_eq!(d.ius, PathBuf::from("/abs/b.json"));
        assert!(d.landmark_pairs.is_none());
    }

    #[test]
    fn failing_case_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cases = cohort(&tmp.path().join("in"), 3, 1);
        cases[1].mri = tmp.path().join("missing.json");
        match build_dataset(&cases, &small_opts(), tmp.path().join("out")) {
            Err(DatasetError::Case { patient, .. }) => assert_eq!(patient, cases[1].patient_id),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_bad_patch_size() {
        let opts = BuildOptions { patch_size: 48, ..small_opts() };
        assert!(matches!(opts.validate(), Err(DatasetError::InvalidOption(_))));
    }
}

//! synth, simulate, build-dataset and split.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args};
use regerr_core::dataset::synthetic::{write_cohort, SyntheticSpec};
use regerr_core::dataset::{
    build_dataset, load_case, load_manifest, make_split, manifest_hash, prepare_case, simulate_deformation,
    BuildOptions, Split, DEFAULT_DEFORMATIONS, DEFAULT_PATCH_SIZE, PUBLISHED_FRACTIONS,
};
use regerr_core::ffd::{save_grid, FitSpec};
use regerr_core::volume::save_volume;
use regerr_core::DeformationSpec;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, write_json};
use crate::error::CliError;

/// Name of the resolved-configuration file written into every `--out`.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing required option --{flag}")))
}

fn spacing(mm: f64) -> Option<f64> {
    (mm != 0.0).then_some(mm)
}

fn fractions(v: &[f64]) -> Result<[f64; 3], CliError> {
    v.try_into().map_err(|_| CliError::Config(format!("--fractions needs three values, got {}", v.len())))
}

fn mkdir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    /// Number of subjects.
    #[arg(long, default_value_t = 8)]
    pub subjects: usize,
    /// Landmarks rendered per subject.
    #[arg(long, default_value_t = 2)]
    pub landmarks: usize,
    /// Cubic volume edge in voxels.
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    /// Voxel spacing in mm.
    #[arg(long, default_value_t = 1.0)]
    pub spacing_mm: f64,
    /// Soft ellipsoids in the shared template.
    #[arg(long, default_value_t = 40)]
    pub blobs: usize,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value = "cohort")]
    pub out: PathBuf,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Writes a procedural MRI/iUS cohort with case descriptors.
pub fn synth(args: &SynthArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let spec = SyntheticSpec {
        subjects: a.subjects,
        landmarks_per_subject: a.landmarks,
        dims: a.dims,
        spacing_mm: a.spacing_mm,
        blobs: a.blobs,
        seed: a.seed,
    };
    write_json(&a.out.join(RESOLVED_CONFIG), &a)?;
    let paths = write_cohort(&spec, &a.out)?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// Case descriptor JSON (patient_id, mri, ius, landmarks).
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Cohort seed; each deformation's seed derives from it, the patient id and the index.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deformations drawn per case (paper).
    #[arg(long, default_value_t = DEFAULT_DEFORMATIONS)]
    pub n_deformations: usize,
    /// Upper bound on interior control points per axis (paper).
    #[arg(long, default_value_t = DeformationSpec::PUBLISHED_MAX_POINTS)]
    pub max_points: usize,
    /// Upper bound on each control-point displacement component in mm (paper).
    #[arg(long, default_value_t = DeformationSpec::PUBLISHED_MAX_DISPLACEMENT_MM)]
    pub max_disp_mm: f64,
    /// Isotropic iUS resampling in mm, 0 keeps the native grid (paper).
    #[arg(long, default_value_t = 0.5)]
    pub spacing_mm: f64,
    #[arg(long, default_value = "simulated")]
    pub out: PathBuf,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Writes `mri.json`, `ius.json`, then per deformation `deformation_KK/`
/// with the warped iUS, the error map and the control grid.
pub fn simulate(args: &SimulateArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let case_path = require(&a.case, "case")?;
    let spec = DeformationSpec { seed: a.seed, max_points_per_axis: a.max_points, max_displacement_mm: a.max_disp_mm };
    spec.validate()?;
    let opts = BuildOptions { isotropic_spacing_mm: spacing(a.spacing_mm), ..BuildOptions::published(a.seed) };
    if a.n_deformations == 0 {
        return Err(CliError::Config("--n-deformations must be >= 1".into()));
    }
    opts.validate()?;
    write_json(&a.out.join(RESOLVED_CONFIG), &a)?;

    let desc = load_case(case_path)?;
    let (case, _) = prepare_case(&desc, &opts)?;
    save_volume(&case.mri, a.out.join("mri.json"))?;
    save_volume(&case.ius, a.out.join("ius.json"))?;
    for k in 0..a.n_deformations {
        let def = simulate_deformation(&case, &spec, k)?;
        let dir = a.out.join(format!("deformation_{k:02}"));
        mkdir(&dir)?;
        save_volume(&def.warped_ius, dir.join("ius_warped.json"))?;
        save_volume(&def.error, dir.join("error.json"))?;
        save_grid(&def.grid, dir.join("grid.json"))?;
        log::info!("deformation {k}: seed {}, max error {:.3} mm", def.seed, def.error.data().iter().cloned().fold(0.0f32, f32::max));
    }
    println!("{}: {} deformations written to {}", case.patient_id, a.n_deformations, a.out.display());
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BuildDatasetArgs {
    /// Case descriptors, or directories holding `*/case.json`.
    #[arg(long, num_args = 1..)]
    pub cases: Vec<PathBuf>,
    /// Cohort seed for deformations; also the split seed unless --split-seed is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deformations per case (paper).
    #[arg(long, default_value_t = DEFAULT_DEFORMATIONS)]
    pub n_deformations: usize,
    /// Upper bound on interior control points per axis (paper).
    #[arg(long, default_value_t = DeformationSpec::PUBLISHED_MAX_POINTS)]
    pub max_points: usize,
    /// Upper bound on each control-point displacement component in mm (paper).
    #[arg(long, default_value_t = DeformationSpec::PUBLISHED_MAX_DISPLACEMENT_MM)]
    pub max_disp_mm: f64,
    /// Patch edge in voxels, a multiple of 32 (paper).
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    pub patch_size: usize,
    /// Isotropic iUS resampling in mm, 0 keeps the native grid (paper).
    #[arg(long, default_value_t = 0.5)]
    pub spacing_mm: f64,
    /// Margin around the iUS field of view kept when cropping, in mm.
    #[arg(long, default_value_t = 0.0)]
    pub fov_margin_mm: f64,
    /// Interior control points per axis of the landmark silver-standard fit.
    #[arg(long, default_value_t = FitSpec::default().interior_counts[0])]
    pub fit_points: usize,
    /// Ridge weight of the landmark fit.
    #[arg(long, default_value_t = FitSpec::default().ridge)]
    pub fit_ridge: f64,
    /// Train/val/test fractions over patients (paper).
    #[arg(long, value_delimiter = ',', default_values_t = PUBLISHED_FRACTIONS)]
    pub fractions: Vec<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Worker threads; the output does not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "dataset")]
    pub out: PathBuf,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Expands directories into their `case.json` descriptors, sorted.
fn descriptor_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let mut found = Vec::new();
        if p.join("case.json").is_file() {
            found.push(p.join("case.json"));
        }
        for entry in fs::read_dir(p).map_err(|e| CliError::io(p, e))? {
            let sub = entry.map_err(|e| CliError::io(p, e))?.path().join("case.json");
            if sub.is_file() {
                found.push(sub);
            }
        }
        if found.is_empty() {
            return Err(CliError::Data(format!("{}: no case.json descriptors found", p.display())));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

pub fn build_options(a: &BuildDatasetArgs) -> Result<BuildOptions, CliError> {
    let fit = FitSpec { interior_counts: [a.fit_points; 3], ridge: a.fit_ridge };
    if a.fit_points == 0 || !(a.fit_ridge >= 0.0) {
        return Err(CliError::Config("landmark fit needs --fit-points >= 1 and --fit-ridge >= 0".into()));
    }
    let opts = BuildOptions {
        deformation: DeformationSpec { seed: a.seed, max_points_per_axis: a.max_points, max_displacement_mm: a.max_disp_mm },
        n_deformations: a.n_deformations,
        patch_size: a.patch_size,
        isotropic_spacing_mm: spacing(a.spacing_mm),
        fov_margin_mm: a.fov_margin_mm,
        fit,
        split_fractions: fractions(&a.fractions)?,
        split_seed: a.split_seed.unwrap_or(a.seed),
        jobs: a.jobs.max(1),
    };
    opts.validate()?;
    Ok(opts)
}

pub fn build(args: &BuildDatasetArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    if a.cases.is_empty() {
        return Err(CliError::Config("missing required option --cases".into()));
    }
    let opts = build_options(&a)?;
    write_json(&a.out.join(RESOLVED_CONFIG), &a)?;
    let cases = descriptor_paths(&a.cases)?.iter().map(load_case).collect::<Result<Vec<_>, _>>()?;
    let manifest = build_dataset(&cases, &opts, &a.out)?;
    let [tr, va, te] = manifest.split.counts();
    let per = |s: Split| manifest.records_in(s).len();
    println!(
        "{} records from {} patients; train {tr} ({}), val {va} ({}), test {te} ({}) patients (records)",
        manifest.records.len(),
        cases.len(),
        per(Split::Train),
        per(Split::Val),
        per(Split::Test)
    );
    println!("manifest sha256 {}", manifest_hash(&a.out)?);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    /// Split N placeholder ids P01..PNN.
    #[arg(long)]
    pub patients: Option<usize>,
    /// Text file with one patient id per line.
    #[arg(long)]
    pub ids: Option<PathBuf>,
    /// Dataset directory; splits the patients in its manifest.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Train/val/test fractions over patients (paper).
    #[arg(long, value_delimiter = ',', default_values_t = PUBLISHED_FRACTIONS)]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the split manifest JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn split(args: &SplitArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let ids: Vec<String> = match (&a.patients, &a.ids, &a.dataset) {
        (Some(n), None, None) => (1..=*n).map(|i| format!("P{i:02}")).collect(),
        (None, Some(path), None) => fs::read_to_string(path)
            .map_err(|e| CliError::io(path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        (None, None, Some(dir)) => load_manifest(dir)?.cases.keys().cloned().collect(),
        _ => return Err(CliError::Config("give exactly one of --patients, --ids, --dataset".into())),
    };
    let s = make_split(&ids, fractions(&a.fractions)?, a.seed)?;
    let [tr, va, te] = s.counts();
    println!("train {tr} val {va} test {te}");
    for split in Split::ALL {
        println!("{}: {}", split.as_str(), s.patients(split).join(" "));
    }
    if let Some(out) = &a.out {
        write_json(out, &s)?;
    }
    Ok(())
}

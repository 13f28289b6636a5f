//! Patch, subject and cohort MAE, runtime measurement and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regerr_core::dataset::PatchRecord;
use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::model::{ErrorNet, ParamStore};
use crate::NetError;

/// `REGERR_DETERMINISTIC=1` (or `true`) forces deterministic mode.
pub fn deterministic_from_env() -> bool {
    std::env::var("REGERR_DETERMINISTIC").is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true"))
}

/// Mean of `|φ − f|` over voxels.
pub fn patch_mae(phi: &[f32], f: &[f32]) -> Result<f64, NetError> {
    if phi.len() != f.len() || phi.is_empty() {
        return Err(NetError::Shape(format!("MAE over {} and {} values", phi.len(), f.len())));
    }
    let s: f64 = phi.iter().zip(f).map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs()).sum();
    Ok(s / phi.len() as f64)
}

pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, rec: &PatchRecord) -> Result<Vec<f32>, NetError>;
}

pub struct ModelPredictor<'a> {
    pub net: &'a ErrorNet,
    pub params: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        "model".into()
    }
    fn predict(&self, rec: &PatchRecord) -> Result<Vec<f32>, NetError> {
        self.net.predict(self.params, &rec.mri, &rec.ius)
    }
}

/// Returns the ground truth itself.
pub struct GroundTruth;

impl Predictor for GroundTruth {
    fn name(&self) -> String {
        "ground-truth".into()
    }
    fn predict(&self, rec: &PatchRecord) -> Result<Vec<f32>, NetError> {
        Ok(rec.error.clone())
    }
}

/// Predicts one value everywhere.
pub struct ConstantPredictor(pub f32);

impl ConstantPredictor {
    /// Mean ground-truth error over every voxel of `source`.
    pub fn mean_of(source: &dyn DataSource) -> Result<Self, NetError> {
        if source.is_empty() {
            return Err(NetError::EmptySplit("no records to average".into()));
        }
        let (mut sum, mut n) = (0.0f64, 0usize);
        for i in 0..source.len() {
            let r = source.load(i)?;
            sum += r.error.iter().map(|&v| f64::from(v)).sum::<f64>();
            n += r.error.len();
        }
        Ok(ConstantPredictor((sum / n as f64) as f32))
    }
}

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }
    fn predict(&self, rec: &PatchRecord) -> Result<Vec<f32>, NetError> {
        Ok(vec![self.0; rec.error.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub record: String,
    pub patient_id: String,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub patient_id: String,
    pub mean: f64,
    pub std: f64,
    pub patches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub device: String,
    pub threads: usize,
    pub deterministic: bool,
    pub std_convention: String,
}

impl Environment {
    pub fn detect(threads: usize, deterministic: bool) -> Self {
        let cpu = fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()));
        Environment {
            device: format!("cpu ({})", cpu.unwrap_or_else(|| std::env::consts::ARCH.to_string())),
            threads,
            deterministic,
            std_convention: "population".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub per_patch: Vec<PatchScore>,
    pub per_subject: Vec<SubjectScore>,
    pub cohort_patch: MeanStd,
    pub cohort_subject: MeanStd,
    pub avg_runtime_s: f64,
    pub environment: Environment,
}

impl EvalReport {
    /// Aggregates per-patch scores; subject mean row is the unweighted mean
    /// of subject means (and of subject stds).
    pub fn from_scores(predictor: String, per_patch: Vec<PatchScore>, avg_runtime_s: f64, environment: Environment) -> Result<Self, NetError> {
        if per_patch.is_empty() {
            return Err(NetError::EmptySplit("no patches evaluated".into()));
        }
        let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for p in &per_patch {
            by.entry(&p.patient_id).or_default().push(p.mae);
        }
        let per_subject: Vec<SubjectScore> = by
            .into_iter()
            .map(|(id, v)| {
                let ms = MeanStd::of(&v);
                SubjectScore { patient_id: id.to_string(), mean: ms.mean, std: ms.std, patches: v.len() }
            })
            .collect();
        let maes: Vec<f64> = per_patch.iter().map(|p| p.mae).collect();
        let cohort_patch = MeanStd::of(&maes);
        let ns = per_subject.len() as f64;
        let cohort_subject = MeanStd {
            mean: per_subject.iter().map(|s| s.mean).sum::<f64>() / ns,
            std: per_subject.iter().map(|s| s.std).sum::<f64>() / ns,
        };
        Ok(EvalReport { predictor, per_patch, per_subject, cohort_patch, cohort_subject, avg_runtime_s, environment })
    }
}

/// Per-record MAE in source order, using up to `jobs` threads.
pub fn patch_maes(predictor: &dyn Predictor, source: &dyn DataSource, jobs: usize) -> Result<(Vec<f64>, f64), NetError> {
    let run = |i: usize| -> Result<(f64, f64), NetError> {
        let rec = source.load(i)?;
        let t0 = Instant::now();
        let phi = predictor.predict(&rec)?;
        let dt = t0.elapsed().as_secs_f64();
        Ok((patch_mae(&phi, &rec.error)?, dt))
    };
    let results: Vec<(f64, f64)> = if jobs <= 1 {
        (0..source.len()).map(run).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build().expect("thread pool");
        pool.install(|| (0..source.len()).into_par_iter().map(run).collect::<Result<_, _>>())?
    };
    let time = results.iter().map(|r| r.1).sum::<f64>() / results.len().max(1) as f64;
    Ok((results.into_iter().map(|r| r.0).collect(), time))
}

/// Mean patch MAE over `source`.
pub fn mean_mae(predictor: &dyn Predictor, source: &dyn DataSource) -> Result<f64, NetError> {
    if source.is_empty() {
        return Err(NetError::EmptySplit("no records".into()));
    }
    let (m, _) = patch_maes(predictor, source, 1)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

pub fn evaluate(predictor: &dyn Predictor, source: &dyn DataSource, jobs: usize, deterministic: bool) -> Result<EvalReport, NetError> {
    if source.is_empty() {
        return Err(NetError::EmptySplit("evaluation split has no records".into()));
    }
    let (maes, runtime) = patch_maes(predictor, source, jobs)?;
    let per_patch = maes
        .into_iter()
        .enumerate()
        .map(|(i, mae)| PatchScore { record: source.id(i), patient_id: source.patient(i), mae })
        .collect();
    EvalReport::from_scores(predictor.name(), per_patch, runtime, Environment::detect(jobs.max(1), deterministic))
}

/// Mean wall-clock seconds of `n` single-patch forward passes after
/// `warmup` discarded ones.
pub fn measure_runtime(net: &ErrorNet, params: &ParamStore<f32>, n: usize, warmup: usize) -> Result<f64, NetError> {
    if n == 0 {
        return Err(NetError::Config("runtime measurement needs at least one call".into()));
    }
    let p = net.config().patch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut patch = || (0..p * p * p).map(|_| rng.random_range(0.0f32..1.0)).collect::<Vec<_>>();
    let (mri, ius) = (patch(), patch());
    for _ in 0..warmup {
        net.predict(params, &mri, &ius)?;
    }
    let mut total = 0.0;
    for _ in 0..n {
        let t0 = Instant::now();
        std::hint::black_box(net.predict(params, &mri, &ius)?);
        total += t0.elapsed().as_secs_f64();
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other} (json, csv, markdown)")),
        }
    }
}

pub fn render_markdown(r: &EvalReport) -> Result<String, NetError> {
    if r.per_subject.is_empty() {
        return Err(NetError::EmptySplit("report has no subjects".into()));
    }
    let mut s = String::new();
    let _ = writeln!(s, "# Registration error estimation ({})\n", r.predictor);
    let _ = writeln!(s, "Standard deviations use the population convention (divide by N).\n");
    let _ = writeln!(s, "## Case-by-case results\n\n| Patient ID | MAE (mm) |\n|---|---|");
    for sub in &r.per_subject {
        let _ = writeln!(s, "| {} | {:.3} ± {:.3} |", sub.patient_id, sub.mean, sub.std);
    }
    let _ = writeln!(s, "| **Mean** | **{:.3}** ± **{:.3}** |\n", r.cohort_subject.mean, r.cohort_subject.std);
    let _ = writeln!(s, "## Summary\n\n| MAE (mm) | Average run time (s) |\n|---|---|");
    let _ = writeln!(s, "| {:.3} ± {:.3} | {:.3} |\n", r.cohort_patch.mean, r.cohort_patch.std, r.avg_runtime_s);
    let e = &r.environment;
    let _ = writeln!(s, "Device: {}; threads: {}; deterministic: {}.", e.device, e.threads, e.deterministic);
    Ok(s)
}

pub fn render_csv(r: &EvalReport) -> Result<String, NetError> {
    if r.per_subject.is_empty() {
        return Err(NetError::EmptySplit("report has no subjects".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut row = |fields: [String; 6]| w.write_record(&fields).expect("in-memory csv");
    row(["kind", "id", "patient_id", "mae_mean", "mae_std", "count"].map(String::from));
    for p in &r.per_patch {
        row(["patch".into(), p.record.clone(), p.patient_id.clone(), p.mae.to_string(), String::new(), "1".into()]);
    }
    for sub in &r.per_subject {
        row(["subject".into(), sub.patient_id.clone(), sub.patient_id.clone(), sub.mean.to_string(), sub.std.to_string(), sub.patches.to_string()]);
    }
    let n = r.per_patch.len().to_string();
    row(["cohort_patch".into(), String::new(), String::new(), r.cohort_patch.mean.to_string(), r.cohort_patch.std.to_string(), n]);
    let ns = r.per_subject.len().to_string();
    row(["cohort_subject".into(), String::new(), String::new(), r.cohort_subject.mean.to_string(), r.cohort_subject.std.to_string(), ns]);
    row(["runtime_s".into(), String::new(), String::new(), r.avg_runtime_s.to_string(), String::new(), String::new()]);
    Ok(String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8"))
}

pub fn emit_report(r: &EvalReport, path: &Path, format: ReportFormat) -> Result<(), NetError> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("report serializes"),
        ReportFormat::Csv => render_csv(r)?,
        ReportFormat::Markdown => render_markdown(r)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| NetError::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport, NetError> {
    let text = fs::read_to_string(path).map_err(|e| NetError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NetError::corrupt(path, format!("report: {e}")))
}

//! train, predict, evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{ArgMatches, Args};
use regerr_core::dataset::{extract_patches, load_manifest, normalize_min_max, PatchContext, Split};
use regerr_core::landmarks::load_landmarks;
use regerr_core::volume::{load_volume_auto, resample_to_geometry, save_volume};
use regerr_core::{Geometry, Modality, Volume};
use regerr_net::checkpoint::{load_params, load_pretrained, KeyMapping};
use regerr_net::data::{DataSource, ManifestSplit};
use regerr_net::eval::{
    deterministic_from_env, emit_report, evaluate, measure_runtime, read_report, render_csv, render_markdown,
    ConstantPredictor, GroundTruth, ModelPredictor, Predictor, ReportFormat,
};
use regerr_net::loss::SmoothNorm;
use regerr_net::train::{TrainConfig, Trainer};
use regerr_net::{ErrorNet, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, write_json};
use crate::data_cmds::RESOLVED_CONFIG;
use crate::error::CliError;
use crate::histogram::{Histogram, Recording};

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing required option --{flag}")))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory written by build-dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory for the resolved config, history and checkpoints.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Mini-batch size (paper).
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Training epochs (paper).
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// AdamW learning rate (paper).
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Weight of the smoothness term (paper).
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    /// Norm of the finite-difference smoothness term.
    #[arg(long, default_value = "l2", value_parser = ["l2", "l1"])]
    pub smooth_norm: String,
    /// AdamW decoupled weight decay.
    #[arg(long, default_value_t = 0.01)]
    pub weight_decay: f64,
    /// Seed for initialisation and batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model preset; the patch size always follows the dataset.
    #[arg(long, default_value = "swin-unetr", value_parser = ["swin-unetr", "toy"])]
    pub model: String,
    /// Full model configuration JSON, replacing the preset.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint whose encoder weights initialise the Swin encoder.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Key-mapping file (`source_prefix = target_prefix` lines) for --pretrained.
    #[arg(long)]
    pub key_map: Option<PathBuf>,
    /// Force deterministic mode (also REGERR_DETERMINISTIC=1).
    #[arg(long)]
    pub deterministic: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    #[serde(skip)]
    pub print_config: bool,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub args: TrainArgs,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn model_config(a: &TrainArgs, patch_size: Option<usize>) -> Result<ModelConfig, CliError> {
    let mut cfg = match &a.model_config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None if a.model == "toy" => ModelConfig::toy(),
        None => ModelConfig::default(),
    };
    if let Some(p) = patch_size {
        cfg.patch_size = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves flags, config file and dataset patch size into one document.
pub fn resolve_train(a: &TrainArgs) -> Result<RunConfig, CliError> {
    let patch = match &a.dataset {
        Some(dir) => Some(load_manifest(dir)?.patch_size),
        None => None,
    };
    let model = model_config(a, patch)?;
    let smooth_norm: SmoothNorm = serde_json::from_value(serde_json::Value::String(a.smooth_norm.clone()))
        .map_err(|e| CliError::Config(format!("smooth norm: {e}")))?;
    let train = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.lr,
        lambda_smooth: a.lambda,
        smooth_norm,
        weight_decay: a.weight_decay,
        patch_size: model.patch_size,
        seed: a.seed,
        deterministic: a.deterministic || deterministic_from_env(),
        checkpoint_dir: Some(a.out.clone()),
        ..TrainConfig::default()
    };
    train.validate()?;
    Ok(RunConfig { args: a.clone(), model, train })
}

pub fn train(args: &TrainArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let run = resolve_train(&a)?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&run).expect("config serializes"));
        return Ok(());
    }
    let dir = require(&a.dataset, "dataset")?;
    if a.pretrained.is_some() && a.resume.is_some() {
        return Err(CliError::Config("--pretrained and --resume are exclusive".into()));
    }
    write_json(&a.out.join(RESOLVED_CONFIG), &run)?;

    let manifest = load_manifest(dir)?;
    let train_src = ManifestSplit::new(&manifest, dir, Split::Train);
    let val_src = ManifestSplit::new(&manifest, dir, Split::Val);
    let net = ErrorNet::new(run.model.clone())?;
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::resume(&net, ck, &train_src, &val_src, run.train.clone())?,
        None => {
            let mut params = net.init_params(a.seed);
            if let Some(src) = &a.pretrained {
                let mapping = match &a.key_map {
                    Some(p) => KeyMapping::parse(&fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)?,
                    None => KeyMapping::identity(),
                };
                params = load_pretrained(&params, src, &mapping)?;
            }
            Trainer::new(&net, params, &train_src, &val_src, run.train.clone())?
        }
    };
    log::info!("{} train / {} val records, {} batches per epoch", train_src.len(), val_src.len(), trainer.batches_per_epoch());
    trainer.run(Some(&a.out))?;
    let s = trainer.state();
    match (s.best_epoch, s.best_val_mae) {
        (Some(e), Some(v)) => println!("best val MAE {v:.4} mm at epoch {e}; checkpoints in {}", a.out.display()),
        _ => println!("no epochs run; checkpoints in {}", a.out.display()),
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Model checkpoint (`best.ckpt`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// MRI patch, or a whole MRI volume when --landmarks is given.
    #[arg(long)]
    pub mri: Option<PathBuf>,
    /// Deformed iUS patch, or a whole iUS volume when --landmarks is given.
    #[arg(long)]
    pub ius: Option<PathBuf>,
    /// Landmark CSV; one patch is cut and predicted around each landmark.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    #[arg(long, default_value = "prediction")]
    pub out: PathBuf,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Writes predicted error maps (raw_json) under `--out`.
pub fn predict(args: &PredictArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let ck = require(&a.checkpoint, "checkpoint")?;
    let (mri_path, ius_path) = (require(&a.mri, "mri")?, require(&a.ius, "ius")?);
    write_json(&a.out.join(RESOLVED_CONFIG), &a)?;
    let (net, params) = load_params(ck)?;
    let p = net.config().patch_size;
    let mri = load_volume_auto(mri_path)?;
    let ius = load_volume_auto(ius_path)?;
    let mut written = Vec::new();
    match &a.landmarks {
        None => {
            if mri.dims() != [p; 3] || ius.dims() != [p; 3] {
                return Err(CliError::Data(format!(
                    "patch mode needs {p}^3 inputs, got {:?} and {:?}; pass --landmarks for whole volumes",
                    mri.dims(),
                    ius.dims()
                )));
            }
            let (mut m, mut u) = (mri.data().to_vec(), ius.data().to_vec());
            normalize_min_max(&mut m);
            normalize_min_max(&mut u);
            let phi = net.predict(&params, &m, &u)?;
            let path = a.out.join("prediction.json");
            save_volume(&Volume::new(*ius.geometry(), Modality::Error, phi)?, &path)?;
            written.push(path);
        }
        Some(lm_path) => {
            let landmarks = load_landmarks(lm_path)?;
            let mri = if mri.geometry() == ius.geometry() { mri } else { resample_to_geometry(&mri, ius.geometry()) };
            let zeros = Volume::zeros(*ius.geometry(), Modality::Error)?;
            let ctx = PatchContext { patient_id: "predict".into(), deformation_index: 0, seed: 0 };
            let g = *ius.geometry();
            for rec in extract_patches(&mri, &ius, &zeros, &landmarks, p, &ctx)? {
                let phi = net.predict(&params, &rec.mri, &rec.ius)?;
                let [i, j, k] = rec.start_voxel;
                let pg = Geometry::new([p; 3], g.spacing, g.world(i, j, k))?;
                let path = a.out.join(format!("{}.json", rec.landmark_id));
                save_volume(&Volume::new(pg, Modality::Error, phi)?, &path)?;
                written.push(path);
            }
            if written.is_empty() {
                return Err(CliError::Data(format!("{}: no landmark yields a full patch", lm_path.display())));
            }
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Dataset directory written by build-dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
    /// Model checkpoint; required for --predictor model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `constant-mean` predicts the mean training-split error everywhere.
    #[arg(long, default_value = "model", value_parser = ["model", "ground-truth", "constant-mean"])]
    pub predictor: String,
    /// Single-patch forward passes timed for the runtime column.
    #[arg(long, default_value_t = 20)]
    pub runtime_patches: usize,
    /// Untimed forward passes before timing.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Histogram bin width in mm.
    #[arg(long, default_value_t = 0.25)]
    pub bin_mm: f64,
    /// Worker threads for per-patch MAE.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Force deterministic mode (also REGERR_DETERMINISTIC=1).
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value = "evaluation")]
    pub out: PathBuf,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Writes `report.{json,md,csv}` and `histogram.svg` under `--out`.
pub fn evaluate_cmd(args: &EvaluateArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let dir = require(&a.dataset, "dataset")?;
    let split: Split = a.split.parse().map_err(CliError::Config)?;
    if !(a.bin_mm > 0.0) {
        return Err(CliError::Config("--bin-mm must be > 0".into()));
    }
    if a.predictor == "model" && a.checkpoint.is_none() {
        return Err(CliError::Config("--predictor model needs --checkpoint".into()));
    }
    write_json(&a.out.join(RESOLVED_CONFIG), &a)?;
    let deterministic = a.deterministic || deterministic_from_env();
    let manifest = load_manifest(dir)?;
    let src = ManifestSplit::new(&manifest, dir, split);

    let model = match (&a.predictor[..], &a.checkpoint) {
        ("model", Some(ck)) => {
            let (net, params) = load_params(ck)?;
            if net.config().patch_size != manifest.patch_size {
                return Err(CliError::Config(format!(
                    "checkpoint patch size {} differs from dataset patch size {}",
                    net.config().patch_size,
                    manifest.patch_size
                )));
            }
            Some((net, params))
        }
        _ => None,
    };
    let inner: Box<dyn Predictor + '_> = match (&a.predictor[..], &model) {
        ("ground-truth", _) => Box::new(GroundTruth),
        ("constant-mean", _) => Box::new(ConstantPredictor::mean_of(&ManifestSplit::new(&manifest, dir, Split::Train))?),
        (_, Some((net, params))) => Box::new(ModelPredictor { net, params }),
        _ => unreachable!("predictor validated above"),
    };
    let rec = Recording { inner: inner.as_ref(), hist: Mutex::new(Histogram::new(a.bin_mm)) };
    let mut report = evaluate(&rec, &src, a.jobs.max(1), deterministic)?;
    if let Some((net, params)) = &model {
        report.avg_runtime_s = measure_runtime(net, params, a.runtime_patches, a.warmup)?;
    }
    emit_report(&report, &a.out.join("report.json"), ReportFormat::Json)?;
    emit_report(&report, &a.out.join("report.md"), ReportFormat::Markdown)?;
    emit_report(&report, &a.out.join("report.csv"), ReportFormat::Csv)?;
    let hist = rec.hist.into_inner().expect("histogram lock");
    let svg_path = a.out.join("histogram.svg");
    let title = format!("{} on {} split: predicted vs true voxel error", report.predictor, split.as_str());
    fs::write(&svg_path, hist.to_svg(&title)).map_err(|e| CliError::io(&svg_path, e))?;
    println!(
        "{}: patch MAE {:.4} ± {:.4} mm over {} patches; subject mean {:.4} ± {:.4} mm over {} subjects; {:.4} s per patch",
        report.predictor,
        report.cohort_patch.mean,
        report.cohort_patch.std,
        report.per_patch.len(),
        report.cohort_subject.mean,
        report.cohort_subject.std,
        report.per_subject.len(),
        report.avg_runtime_s
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// `report.json` written by evaluate.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value = "markdown", value_parser = ["json", "csv", "markdown"])]
    pub format: String,
    /// Output file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of these options; command-line flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn report(args: &ReportArgs, m: &ArgMatches) -> Result<(), CliError> {
    let a = resolve(args, m, args.config.as_deref())?;
    let r = read_report(require(&a.report, "report")?)?;
    let format: ReportFormat = a.format.parse().map_err(CliError::Config)?;
    match &a.out {
        Some(path) => emit_report(&r, Path::new(path), format)?,
        None => {
            let text = match format {
                ReportFormat::Json => serde_json::to_string_pretty(&r).expect("report serializes"),
                ReportFormat::Csv => render_csv(&r)?,
                ReportFormat::Markdown => render_markdown(&r)?,
            };
            print!("{text}");
        }
    }
    Ok(())
}

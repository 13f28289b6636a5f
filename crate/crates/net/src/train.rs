//! AdamW training on `sim + λ·smooth`, with per-epoch validation, best-model
//! selection and batch-granular checkpoint/resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regerr_core::seed::derive;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::DataSource;
use crate::eval::{mean_mae, ModelPredictor};
use crate::loss::{loss_and_grad, LossTerms, SmoothNorm};
use crate::model::{ErrorNet, ParamStore};
use crate::tensor::Tensor;
use crate::{NetError, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub lambda_smooth: f64,
    pub smooth_norm: SmoothNorm,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub patch_size: usize,
    pub seed: u64,
    pub device: String,
    pub deterministic: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 200,
            optimizer: Optimizer::AdamW,
            learning_rate: 1e-4,
            lambda_smooth: 0.01,
            smooth_norm: SmoothNorm::L2,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            patch_size: 64,
            seed: 0,
            device: "cpu".into(),
            deterministic: true,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let err = |m: &str| Err(NetError::TrainConfig(m.into()));
        if !(self.lambda_smooth >= 0.0 && self.lambda_smooth.is_finite()) {
            return err("lambda_smooth must be >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be > 0");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return err("batch_size and epochs must be >= 1");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return err("betas must lie in [0, 1), eps > 0, weight_decay >= 0");
        }
        if self.device != "cpu" {
            return err("only the cpu device is available");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_total: f64,
    pub train_sim: f64,
    pub train_smooth: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed batches of the current epoch.
    pub batch: usize,
    pub step: u64,
    pub best_val_mae: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Running loss sums over the current epoch, and their sample count.
    pub sums: [f64; 3],
    pub samples: usize,
    pub history: Vec<HistoryRow>,
    pub seed: u64,
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamW { lr: cfg.learning_rate, betas: cfg.betas, eps: cfg.eps, weight_decay: cfg.weight_decay }
    }

    /// Applies update number `done + 1` in place and returns it.
    pub fn step(&self, params: &mut ParamStore<f32>, m: &mut [Tensor<f32>], v: &mut [Tensor<f32>], grads: &[Tensor<f32>], done: u64) -> u64 {
        let t = done + 1;
        let [b1, b2] = self.betas;
        let decay = (1.0 - self.lr * self.weight_decay) as f32;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2_sqrt = (1.0 - b2.powi(t as i32)).sqrt() as f32;
        let step = (self.lr / bc1) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.tensor_mut(i).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m[i].data_mut()).zip(v[i].data_mut()).zip(g.data()) {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        t
    }
}

pub struct Trainer<'a> {
    net: &'a ErrorNet,
    cfg: TrainConfig,
    train: &'a dyn DataSource,
    val: &'a dyn DataSource,
    params: ParamStore<f32>,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    best: Option<ParamStore<f32>>,
    state: TrainState,
}

pub fn zeros_like(p: &ParamStore<f32>) -> Vec<Tensor<f32>> {
    (0..p.len()).map(|i| Tensor::zeros(p.tensor(i).shape())).collect()
}

impl<'a> Trainer<'a> {
    pub fn new(
        net: &'a ErrorNet,
        params: ParamStore<f32>,
        train: &'a dyn DataSource,
        val: &'a dyn DataSource,
        cfg: TrainConfig,
    ) -> Result<Self, NetError> {
        cfg.validate()?;
        net.check_params(&params)?;
        if cfg.patch_size != net.config().patch_size {
            return Err(NetError::TrainConfig(format!(
                "train patch_size {} differs from model patch_size {}",
                cfg.patch_size,
                net.config().patch_size
            )));
        }
        if train.is_empty() {
            return Err(NetError::EmptySplit("train split has no records".into()));
        }
        if val.is_empty() {
            return Err(NetError::EmptySplit("val split has no records".into()));
        }
        let (m, v) = (zeros_like(&params), zeros_like(&params));
        let state = TrainState { seed: cfg.seed, ..TrainState::default() };
        Ok(Trainer { net, cfg, train, val, params, m, v, best: None, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Parameters of the best validation epoch so far.
    pub fn best_params(&self) -> Option<&ParamStore<f32>> {
        self.best.as_ref()
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    /// Sample order of `epoch`, a pure function of the seed.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive(self.cfg.seed, &[b"epoch", &(epoch as u64).to_le_bytes()]));
        idx.shuffle(&mut rng);
        idx
    }

    /// Mean loss terms and summed parameter gradients of the batch mean.
    fn batch_gradients(&self, ids: &[usize]) -> Result<(LossTerms, Vec<Tensor<f32>>), NetError> {
        let p = self.net.config().patch_size;
        let dims = [p; 3];
        let scale = 1.0 / ids.len() as f64;
        let mut acc = zeros_like(&self.params);
        let mut terms = LossTerms::default();
        for (k, &i) in ids.iter().enumerate() {
            let rec = self.train.load(i)?;
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let mri = tape.constant(Tensor::new(vec![1, p, p, p], rec.mri));
            let ius = tape.constant(Tensor::new(vec![1, p, p, p], rec.ius));
            let y = self.net.forward(&tape, &bound, &mri, &ius)?;
            let (t, g) = loss_and_grad(y.data(), &rec.error, dims, self.cfg.lambda_smooth, self.cfg.smooth_norm)?;
            if !t.total.is_finite() {
                let records: Vec<String> = ids.iter().map(|&j| self.train.id(j)).collect();
                return Err(NetError::NonFiniteLoss {
                    epoch: self.state.epoch + 1,
                    batch: self.state.batch + 1,
                    records: format!("{} (first bad: {})", records.join(", "), records[k]),
                });
            }
            terms.total += t.total * scale;
            terms.sim += t.sim * scale;
            terms.smooth += t.smooth * scale;
            let seed = Tensor::new(y.shape().to_vec(), g.into_iter().map(|v| v * scale as f32).collect());
            let mut grads = tape.backward(&y, seed);
            for (a, var) in acc.iter_mut().zip(bound.vars()) {
                if let Some(g) = grads.take(var) {
                    a.add_assign(&g);
                }
            }
        }
        Ok((terms, acc))
    }

    /// Runs the next batch; closes the epoch (validation, history) when it
    /// was the last one. Returns the batch loss and the closed epoch's row.
    pub fn step(&mut self) -> Result<(LossTerms, Option<HistoryRow>), NetError> {
        assert!(!self.finished(), "training already finished");
        let order = self.order(self.state.epoch);
        let bs = self.cfg.batch_size;
        let ids = &order[self.state.batch * bs..((self.state.batch + 1) * bs).min(order.len())];
        let (terms, grads) = self.batch_gradients(ids)?;
        let opt = AdamW::from_config(&self.cfg);
        self.state.step = opt.step(&mut self.params, &mut self.m, &mut self.v, &grads, self.state.step);
        let n = ids.len() as f64;
        self.state.sums[0] += terms.total * n;
        self.state.sums[1] += terms.sim * n;
        self.state.sums[2] += terms.smooth * n;
        self.state.samples += ids.len();
        self.state.batch += 1;
        let row = if self.state.batch == self.batches_per_epoch() { Some(self.end_epoch()?) } else { None };
        Ok((terms, row))
    }

    fn end_epoch(&mut self) -> Result<HistoryRow, NetError> {
        let val_mae = self.validation_mae()?;
        let n = self.state.samples as f64;
        let s = &mut self.state;
        s.epoch += 1;
        let row = HistoryRow {
            epoch: s.epoch,
            train_total: s.sums[0] / n,
            train_sim: s.sums[1] / n,
            train_smooth: s.sums[2] / n,
            val_mae,
        };
        s.history.push(row);
        s.batch = 0;
        s.sums = [0.0; 3];
        s.samples = 0;
        if s.best_val_mae.is_none_or(|b| val_mae < b) {
            s.best_val_mae = Some(val_mae);
            s.best_epoch = Some(s.epoch);
            self.best = Some(self.params.clone());
        }
        log::info!("epoch {} train {:.5} val MAE {:.5}", row.epoch, row.train_total, row.val_mae);
        Ok(row)
    }

    pub fn validation_mae(&self) -> Result<f64, NetError> {
        mean_mae(&ModelPredictor { net: self.net, params: &self.params }, self.val)
    }

    /// Parameters, optimizer moments, best parameters and loop state.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NetError> {
        let names = self.params.names();
        let keys: Vec<[String; 3]> = names.iter().map(|n| [format!("adam.m.{n}"), format!("adam.v.{n}"), format!("best.{n}")]).collect();
        let mut arrays: Vec<(&str, &Tensor<f32>)> = self.params.iter().collect();
        for (i, k) in keys.iter().enumerate() {
            arrays.push((&k[0], &self.m[i]));
            arrays.push((&k[1], &self.v[i]));
            if let Some(b) = &self.best {
                arrays.push((&k[2], b.tensor(i)));
            }
        }
        let extra = serde_json::json!({ "train": self.cfg, "state": self.state });
        checkpoint::save(path, self.net.config(), &arrays, extra)
    }

    /// Continues the run stored at `path`; the model config must match.
    pub fn resume(
        net: &'a ErrorNet,
        path: &Path,
        train: &'a dyn DataSource,
        val: &'a dyn DataSource,
        cfg: TrainConfig,
    ) -> Result<Self, NetError> {
        let ck = checkpoint::load(path)?;
        checkpoint::ensure_config(net.config(), &ck.model)?;
        let state: TrainState = serde_json::from_value(ck.extra.get("state").cloned().unwrap_or_default())
            .map_err(|e| NetError::corrupt(path, format!("trainer state: {e}")))?;
        if state.seed != cfg.seed {
            return Err(NetError::VersionMismatch { field: "train.seed".into(), expected: cfg.seed.to_string(), found: state.seed.to_string() });
        }
        let mut lookup: std::collections::HashMap<String, Tensor<f32>> = ck.arrays.into_iter().collect();
        let specs = net.param_specs();
        let mut take = |key: String| lookup.remove(&key).ok_or_else(|| NetError::KeyMismatch(format!("checkpoint lacks {key}")));
        let mut values = Vec::with_capacity(specs.len());
        let (mut m, mut v, mut best) = (Vec::new(), Vec::new(), Vec::new());
        for s in &specs {
            values.push(take(s.name.clone())?);
            m.push(take(format!("adam.m.{}", s.name))?);
            v.push(take(format!("adam.v.{}", s.name))?);
            if state.best_epoch.is_some() {
                best.push(take(format!("best.{}", s.name))?);
            }
        }
        let names: Vec<String> = specs.iter().map(|s| s.name.clone()).collect();
        let params = ParamStore::from_parts(names.clone(), values);
        let mut t = Trainer::new(net, params, train, val, cfg)?;
        t.m = m;
        t.v = v;
        t.best = state.best_epoch.map(|_| ParamStore::from_parts(names, best));
        if t.best.as_ref().is_some_and(|b| net.check_params(b).is_err()) || t.m.iter().zip(t.params.iter()).any(|(a, (_, p))| a.shape() != p.shape()) {
            return Err(NetError::corrupt(path, "optimizer state shapes disagree with the model"));
        }
        t.state = state;
        Ok(t)
    }

    /// Trains to the configured epoch count. With a run directory, writes
    /// `config.json` first, then after every epoch `history.csv`,
    /// `last.ckpt` and (on improvement) `best.ckpt`.
    pub fn run(&mut self, run_dir: Option<&Path>) -> Result<TrainOutcome, NetError> {
        if let Some(dir) = run_dir {
            fs::create_dir_all(dir).map_err(|e| NetError::io(dir, e))?;
            let resolved = serde_json::json!({ "model": self.net.config(), "train": self.cfg });
            let p = dir.join("config.json");
            fs::write(&p, serde_json::to_string_pretty(&resolved).unwrap()).map_err(|e| NetError::io(&p, e))?;
        }
        while !self.finished() {
            let (_, row) = self.step()?;
            if let (Some(dir), Some(_)) = (run_dir, row) {
                write_history(&dir.join("history.csv"), &self.state.history)?;
                if self.state.best_epoch == Some(self.state.epoch) {
                    checkpoint::save_params(&dir.join("best.ckpt"), self.net, &self.params)?;
                }
                self.save_checkpoint(&dir.join("last.ckpt"))?;
            }
        }
        Ok(TrainOutcome {
            best_params: self.best.clone().unwrap_or_else(|| self.params.clone()),
            final_params: self.params.clone(),
            history: self.state.history.clone(),
        })
    }
}

pub struct TrainOutcome {
    pub best_params: ParamStore<f32>,
    pub final_params: ParamStore<f32>,
    pub history: Vec<HistoryRow>,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<(), NetError> {
    let mut s = String::from("epoch,train_total,train_sim,train_smooth,val_mae\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_total, r.train_sim, r.train_smooth, r.val_mae);
    }
    fs::write(path, s).map_err(|e| NetError::io(path, e))
}

/// Builds a trainer and runs it to completion.
pub fn train(
    net: &ErrorNet,
    params: ParamStore<f32>,
    train: &dyn DataSource,
    val: &dyn DataSource,
    cfg: TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome, NetError> {
    Trainer::new(net, params, train, val, cfg)?.run(run_dir)
}

//! Optimisation loop: Adam, step-decay schedule, frame batching, checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ScanFrame;
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::neural_sdf::{UnifModel, FORMAT_TAG};
use crate::objective::{loss_and_grad, sample_batch, LossReport, LossWeights, SampleCounts};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Training aborts once the total loss exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const LOG_HEADER: &str = "epoch,recon,unit,lim,sec,perim,total,lr";

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub frames_per_batch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub counts: SampleCounts,
    pub sigma_local: f64,
    pub box_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            lr: 1e-3,
            lr_decay: 0.3,
            decay_epochs: vec![1000, 2000, 3000],
            frames_per_batch: 4,
            seed: 0,
            weights: LossWeights::default(),
            counts: SampleCounts::default(),
            sigma_local: 0.1,
            box_scale: 1.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr decay must lie in (0, 1), got {}", self.lr_decay)));
        }
        if self.frames_per_batch == 0 {
            return Err(Error::Config("frames per batch must be positive".into()));
        }
        if self.counts.surface == 0 {
            return Err(Error::Config("need at least one surface sample".into()));
        }
        let w = &self.weights;
        if [w.unit, w.lim, w.sec, w.perim].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Learning rate at `epoch`: `lr · decay^k` after the `k`-th decay epoch.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let k = config.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    config.lr * config.lr_decay.powi(k as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub report: LossReport,
    pub lr: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{},{},{}", self.epoch, r.recon, r.unit, r.lim, r.sec, r.perim, r.total, self.lr)
    }
}

pub fn log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(out, "{}", l.csv_row());
    }
    out
}

/// Model, optimiser state and the next epoch to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: UnifModel,
    pub adam: AdamState,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    epoch: usize,
    model: serde_json::Value,
    adam: AdamState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format: FORMAT_TAG.to_string(),
            epoch: self.epoch,
            model: self.model.to_value()?,
            adam: self.adam.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format != FORMAT_TAG {
            return Err(Error::format(path, format!("unsupported format `{}`", file.format)));
        }
        let model = UnifModel::from_value(file.model)?;
        if file.adam.m.len() != model.param_count() || file.adam.v.len() != model.param_count() {
            return Err(Error::format(path, "optimiser state does not match the model"));
        }
        Ok(Self { model, adam: file.adam, epoch: file.epoch })
    }
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: UnifModel,
    pub adam: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    frames: &'a [ScanFrame],
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, model: UnifModel, frames: &'a [ScanFrame]) -> Result<Self> {
        let adam = AdamState::new(model.param_count());
        Self::resume(config, Checkpoint { model, adam, epoch: 0 }, frames)
    }

    pub fn resume(config: TrainConfig, checkpoint: Checkpoint, frames: &'a [ScanFrame]) -> Result<Self> {
        config.validate()?;
        if frames.is_empty() {
            return Err(Error::Empty("training frames"));
        }
        for f in frames {
            f.validate()?;
            f.pose.validate(checkpoint.model.part_count())?;
        }
        Ok(Self { config, model: checkpoint.model, adam: checkpoint.adam, epoch: checkpoint.epoch, frames })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), adam: self.adam.clone(), epoch: self.epoch }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One shuffled pass over the frames in batches; everything random is
    /// derived from `(seed, epoch, frame)` so a resumed run replays exactly.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = lr_at(&self.config, epoch);
        let epoch_seed = mix_seed(self.config.seed, epoch as u64);
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut reports = Vec::with_capacity(order.len());
        for chunk in order.chunks(self.config.frames_per_batch) {
            let mut grad = vec![0.0; self.model.param_count()];
            for &fi in chunk {
                let frame = &self.frames[fi];
                let batch = sample_batch(
                    frame,
                    self.config.counts,
                    self.config.sigma_local,
                    self.config.box_scale,
                    mix_seed(epoch_seed, fi as u64 + 1),
                )?;
                let (report, g) = loss_and_grad(&self.model, &batch, &frame.pose, &self.config.weights)?;
                if !(report.total <= DIVERGENCE_LIMIT) {
                    return Err(Error::Diverged { epoch, total: report.total });
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b / chunk.len() as f64;
                }
                reports.push(report);
            }
            let mut params = self.model.params_flat();
            self.adam.step(&mut params, &grad, lr)?;
            self.model.set_params_flat(&params)?;
        }
        self.epoch += 1;
        let log = EpochLog { epoch, report: LossReport::mean(&reports), lr };
        log::debug!("{}", log.csv_row());
        Ok(log)
    }

    /// Runs to the configured epoch count, calling `on_epoch` after each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.finished() {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Trains `model` on `frames` and returns it with the per-epoch log.
pub fn train(config: &TrainConfig, frames: &[ScanFrame], model: UnifModel) -> Result<(UnifModel, Vec<EpochLog>)> {
    let mut t = Trainer::new(config.clone(), model, frames)?;
    let logs = t.run(|_, _| Ok(()))?;
    Ok((t.model, logs))
}

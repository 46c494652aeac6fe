//! L1 training with a decoupled-weight-decay Adam optimizer and per-step
//! cosine annealing.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::checkpoint::save_checkpoint;
use crate::cube::HsiCube;
use crate::degradations::{derive_seed, DegradationSpec};
use crate::error::{config_err, Error, Result};
use crate::metrics::{MetricsReport, SSIM_WINDOW};
use crate::model::{forward_graph, model_input, restore_cube, ModelConfig, ModelState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Fraction of pairs held out for validation.
    pub val_fraction: f64,
    /// Validate every this many epochs (0 disables).
    pub validate_every: usize,
    /// Checkpoint every this many epochs (0 disables; needs a run directory).
    pub checkpoint_every: usize,
    /// Overrides the schedule horizon `epochs × steps_per_epoch`.
    pub total_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 8,
            lr_max: 3e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
            seed: 0,
            val_fraction: 0.05,
            validate_every: 1,
            checkpoint_every: 10,
            total_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lr_min && self.lr_min <= self.lr_max) {
            return Err(config_err!(
                "learning rates must satisfy 0 <= lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min,
                self.lr_max
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(config_err!("eps must be positive and weight_decay non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            ));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(config_err!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// First and second moment accumulators mirroring the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (k, t) in params.iter() {
            m.insert(k.clone(), Tensor::zeros(t.shape()));
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// Mean absolute difference over all voxels.
pub fn l1_loss(pred: &HsiCube, target: &HsiCube) -> Result<f64> {
    pred.same_shape(target)?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / n)
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π t/T))`, clamped to `lr_min` past `T`.
pub fn cosine_lr(t: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return if total == 0 && t == 0 { lr_max } else { lr_min };
    }
    let x = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// One AdamW update. Every gradient is checked before any parameter moves.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    opt: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (k, p) in params.iter() {
        let g = grads
            .get(k)
            .ok_or_else(|| config_err!("no gradient for parameter `{k}`"))?;
        if g.shape() != p.shape() {
            return Err(config_err!(
                "gradient for `{k}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            ));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter `{k}`")));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, p) in params.iter_mut() {
        let g = grads.get(k).expect("checked above").data();
        let m = opt
            .m
            .get_mut(k)
            .ok_or_else(|| config_err!("optimizer lacks `{k}`"))?
            .data_mut();
        let v = opt
            .v
            .get_mut(k)
            .ok_or_else(|| config_err!("optimizer lacks `{k}`"))?
            .data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// A degraded observation, its optional mask and the clean target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub degraded: HsiCube,
    pub mask: Option<HsiCube>,
    pub clean: HsiCube,
}

/// Degrades each clean cube with its own index-derived random stream.
pub fn make_pairs(clean: &[HsiCube], spec: &DegradationSpec) -> Result<Vec<TrainingPair>> {
    clean
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let d = spec.apply(c, i as u64)?;
            Ok(TrainingPair {
                degraded: d.cube,
                mask: d.mask,
                clean: c.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<TrainingPair>,
    pub val: Vec<TrainingPair>,
}

impl Dataset {
    /// Holds out `floor(n · fraction)` pairs, chosen by a seeded shuffle.
    pub fn split(mut pairs: Vec<TrainingPair>, fraction: f64, seed: u64) -> Self {
        let n_val = (pairs.len() as f64 * fraction).floor() as usize;
        if n_val == 0 {
            return Self {
                train: pairs,
                val: Vec::new(),
            };
        }
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held: std::collections::BTreeSet<usize> = idx[..n_val].iter().copied().collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, p) in pairs.drain(..).enumerate() {
            if held.contains(&i) {
                val.push(p);
            } else {
                train.push(p);
            }
        }
        Self { train, val }
    }

    /// Pairs used for validation: the holdout, or the training pairs when
    /// nothing was held out.
    pub fn validation_pairs(&self) -> &[TrainingPair] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step after the epoch's last update.
    pub step: u64,
    pub lr: f64,
    pub train_l1: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Global step of the first entry of `losses`.
    pub first_step: u64,
    /// Batch loss per step, before the update of that step.
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
}

/// Passed to the observer after every update.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub step: u64,
    pub total: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Loss and parameter gradients for one pair.
pub fn pair_loss_and_grads(state: &ModelState, config: &ModelConfig, pair: &TrainingPair) -> Result<(f64, ParamStore)> {
    let input = model_input(config, &pair.degraded, pair.mask.as_ref())?;
    if pair.clean.dims() != (config.channels, pair.degraded.height(), pair.degraded.width()) {
        return Err(config_err!(
            "clean cube {:?} does not match degraded cube {:?}",
            pair.clean.dims(),
            pair.degraded.dims()
        ));
    }
    let mut g = Graph::new();
    let p = state.params.bind(&mut g);
    let x = g.input(input);
    let y = forward_graph(&mut g, &p, config, x)?;
    let loss = g.l1_loss(y, Arc::new(pair.clean.to_tensor()))?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    let mut out = ParamStore::new();
    for (k, v) in p.iter() {
        let t = grads
            .take(*v)
            .unwrap_or_else(|| Tensor::zeros(state.params.get(k).expect("bound key").shape()));
        out.insert(k.clone(), t);
    }
    Ok((value, out))
}

/// Mean loss and mean gradients over a batch; samples run in parallel and
/// are summed in batch order.
pub fn batch_loss_and_grads(
    state: &ModelState,
    config: &ModelConfig,
    batch: &[&TrainingPair],
) -> Result<(f64, ParamStore)> {
    let parts: Vec<(f64, ParamStore)> = batch
        .par_iter()
        .map(|p| pair_loss_and_grads(state, config, p))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or_else(|| config_err!("empty batch"))?;
    for (l, g) in iter {
        loss += l;
        for (k, t) in grads.iter_mut() {
            t.add_assign(g.get(k).expect("same layout"));
        }
    }
    for (_, t) in grads.iter_mut() {
        t.scale_assign(1.0 / n);
    }
    Ok((loss / n, grads))
}

fn clip_gradients(grads: &mut ParamStore, max_norm: f64) {
    let norm = grads
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.scale_assign(s);
        }
    }
}

/// Mean metrics over pairs, restoring each with the current state.
pub fn evaluate_pairs(
    state: &ModelState,
    config: &ModelConfig,
    pairs: &[TrainingPair],
) -> Result<Option<MetricsReport>> {
    let Some(first) = pairs.first() else {
        return Ok(None);
    };
    if first.clean.height() < SSIM_WINDOW || first.clean.width() < SSIM_WINDOW {
        return Ok(None);
    }
    let reports = pairs
        .iter()
        .map(|p| {
            let out = restore_cube(&p.degraded, p.mask.as_ref(), state, config)?;
            MetricsReport::compute(&p.clean, &out)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let bands = reports[0].per_band_psnr.len();
    let avg_band = |f: fn(&MetricsReport) -> &Vec<f64>| {
        (0..bands)
            .map(|b| reports.iter().map(|r| f(r)[b]).sum::<f64>() / n)
            .collect()
    };
    Ok(Some(MetricsReport {
        mpsnr: avg(|r| r.mpsnr),
        mssim: avg(|r| r.mssim),
        sam: avg(|r| r.sam),
        per_band_psnr: avg_band(|r| &r.per_band_psnr),
        per_band_ssim: avg_band(|r| &r.per_band_ssim),
    }))
}

/// Output directory of a training run.
///
/// ```text
/// <root>/config.toml          configuration snapshot
/// <root>/metrics.tsv          one row per epoch
/// <root>/checkpoints/*.ckpt   periodic checkpoints, plus last.ckpt
/// ```
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

pub const METRICS_HEADER: &str = "epoch\tlr\ttrain_l1\tval_mpsnr\tval_mssim\tval_sam";

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ck = root.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.tsv")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step:08}.ckpt"))
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("last.ckpt")
    }

    pub fn write_config(&self, text: &str) -> Result<()> {
        let p = self.config_path();
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn append_metrics(&self, rec: &EpochRecord) -> Result<()> {
        let p = self.metrics_path();
        let fresh = !p.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| Error::io(&p, e))?;
        let (ps, ss, sa) = match &rec.val {
            Some(r) => (
                format!("{:.4}", r.mpsnr),
                format!("{:.6}", r.mssim),
                format!("{:.4}", r.sam),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let mut text = String::new();
        if fresh {
            text.push_str(METRICS_HEADER);
            text.push('\n');
        }
        text.push_str(&format!(
            "{}\t{:.6e}\t{:.6}\t{ps}\t{ss}\t{sa}\n",
            rec.epoch, rec.lr, rec.train_l1
        ));
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&p, e))
    }
}

/// Training loop state shared across calls.
pub struct Trainer<'a> {
    pub model: &'a ModelConfig,
    pub config: &'a TrainConfig,
    pub data: &'a Dataset,
    pub run_dir: Option<RunDir>,
}

impl Trainer<'_> {
    pub fn steps_per_epoch(&self) -> u64 {
        self.data.train.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.config
            .total_steps
            .unwrap_or(self.config.epochs as u64 * self.steps_per_epoch())
    }

    /// Visiting order of the training pairs in `epoch`.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            self.config.seed,
            epoch as u64,
        )));
        idx
    }

    fn save(&self, path: PathBuf, state: &ModelState, opt: &OptimizerState) -> Result<()> {
        save_checkpoint(&path, self.model, state, Some(opt))?;
        info!("saved checkpoint {}", path.display());
        Ok(())
    }

    /// Trains from `opt.step` up to the schedule horizon. The observer may
    /// stop the run early by returning `Break`.
    pub fn run(
        &self,
        state: &mut ModelState,
        opt: &mut OptimizerState,
        mut observer: impl FnMut(&StepInfo) -> ControlFlow<()>,
    ) -> Result<TrainHistory> {
        self.config.validate()?;
        self.model.validate()?;
        if self.data.train.is_empty() {
            return Err(config_err!("training set is empty"));
        }
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let bs = self.config.batch_size;
        let mut history = TrainHistory {
            first_step: opt.step,
            ..Default::default()
        };
        info!(
            "training {} pairs, {} validation, {spe} steps/epoch, horizon {total} steps, weight_decay {}",
            self.data.train.len(),
            self.data.val.len(),
            self.config.weight_decay
        );
        let mut epoch_losses = Vec::new();
        let mut order_epoch = usize::MAX;
        let mut order = Vec::new();
        while opt.step < total {
            let step = opt.step;
            let epoch = (step / spe) as usize;
            let pos = (step % spe) as usize;
            if order_epoch != epoch {
                order = self.epoch_order(epoch);
                order_epoch = epoch;
            }
            let batch: Vec<&TrainingPair> = order[pos * bs..((pos + 1) * bs).min(order.len())]
                .iter()
                .map(|&i| &self.data.train[i])
                .collect();
            let lr = cosine_lr(step, total, self.config.lr_max, self.config.lr_min);
            let outcome = batch_loss_and_grads(state, self.model, &batch).and_then(|(loss, mut grads)| {
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss became non-finite at step {step}")));
                }
                if let Some(c) = self.config.grad_clip {
                    clip_gradients(&mut grads, c);
                }
                // leaves parameters untouched when it fails
                optimizer_step(&mut state.params, &grads, opt, lr, self.config)?;
                Ok(loss)
            });
            let loss = match outcome {
                Ok(l) => l,
                Err(Error::Numeric(msg)) => {
                    if let Some(rd) = &self.run_dir {
                        self.save(rd.last_checkpoint(), state, opt)?;
                    }
                    return Err(Error::Numeric(format!("{msg}; last good state kept")));
                }
                Err(e) => return Err(e),
            };
            state.step = opt.step;
            history.losses.push(loss);
            epoch_losses.push(loss);
            let info = StepInfo {
                step: opt.step,
                total,
                epoch,
                lr,
                loss,
            };
            let epoch_done = pos as u64 + 1 == spe || opt.step == total;
            if epoch_done {
                let validate = self.config.validate_every > 0 && (epoch + 1).is_multiple_of(self.config.validate_every);
                let val = if validate {
                    evaluate_pairs(state, self.model, self.data.validation_pairs())?
                } else {
                    None
                };
                let rec = EpochRecord {
                    epoch,
                    step: opt.step,
                    lr,
                    train_l1: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
                    val,
                };
                epoch_losses.clear();
                match &rec.val {
                    Some(v) => info!("epoch {epoch}: train_l1 {:.5}, val {}", rec.train_l1, v.table_row()),
                    None => info!("epoch {epoch}: train_l1 {:.5}", rec.train_l1),
                }
                if let Some(rd) = &self.run_dir {
                    rd.append_metrics(&rec)?;
                    let every = self.config.checkpoint_every;
                    if every > 0 && (epoch + 1).is_multiple_of(every) {
                        self.save(rd.checkpoint_path(opt.step), state, opt)?;
                    }
                }
                history.epochs.push(rec);
            }
            if observer(&info).is_break() {
                break;
            }
        }
        if let Some(rd) = &self.run_dir {
            self.save(rd.last_checkpoint(), state, opt)?;
        }
        if history.losses.is_empty() {
            warn!("nothing to train: step {} already at horizon {total}", opt.step);
        }
        Ok(history)
    }
}

/// Trains a fresh optimizer over the whole schedule without a run directory.
pub fn train(
    state: &mut ModelState,
    model: &ModelConfig,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    let mut opt = OptimizerState::new(&state.params);
    opt.step = state.step;
    Trainer {
        model,
        config,
        data,
        run_dir: None,
    }
    .run(state, &mut opt, |_| ControlFlow::Continue(()))
}

//! Training loop: per-sample step and corruption draws, the branch loss, AdamW updates
//! under polynomial learning-rate decay, and checkpoints.

mod checkpoint;
mod optimizer;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    channel_order, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, FORMAT_VERSION,
    MAGIC,
};
pub use optimizer::{AdamParams, AdamW};

use crate::conditioning::{extract_bundle, ConditionBundle, PyramidEncoder};
use crate::config::RunConfig;
use crate::data::Sample;
use crate::denoiser::{one_hot_chw, Denoiser};
use crate::diffusion::{
    bernoulli_loss, ce_loss, gaussian_loss, gaussian_q_sample, kl_loss, map_mask, q_sample,
    LossBranch, LossTarget, MaskState,
};
use crate::error::{invalid, Error, Result};
use crate::inference::MaskPredictor;
use crate::numerics::{Real, Tape};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;

const TAG_CORRUPT: u64 = 0x636f_7272;
const TAG_SHUFFLE: u64 = 0x7368_7566;
const TAG_DROPOUT: u64 = 0x6472_6f70;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Bernoulli,
    Gaussian,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(NoiseKind::Bernoulli),
            "gaussian" => Ok(NoiseKind::Gaussian),
            other => Err(invalid(format!(
                "unknown noise type '{other}' (bernoulli|gaussian)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_min: f64,
    /// Exponent of the polynomial decay.
    pub power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stops early; the decay is then stretched over this many steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 1e-4,
            lr_min: 1e-6,
            power: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_init", self.lr_init),
            ("lr_min", self.lr_min),
            ("power", self.power),
            ("eps", self.eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid(format!("{name} must be positive, got {v}")));
        }
        if self.lr_min > self.lr_init {
            return Err(invalid(format!(
                "lr_min {} exceeds lr_init {}",
                self.lr_min, self.lr_init
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid(format!(
                "weight_decay {} is negative",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return Err(invalid("batch_size, epochs and max_steps must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Optimizer steps in a full run over `n` samples (last batch of an epoch may be short).
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// `lr_min + (lr_init - lr_min) * (1 - step/total)^power`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(invalid(format!("step {step} outside 0..={total_steps}")));
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok(cfg.lr_min + (cfg.lr_init - cfg.lr_min) * frac.powf(cfg.power))
}

/// One row of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Updates completed, including this one.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Batch elements that took the KL branch (`t >= 2`).
    pub kl_count: usize,
    /// Batch elements that took the cross-entropy branch (`t = 1`).
    pub ce_count: usize,
    #[serde(skip)]
    pub grad_norm: f64,
    #[serde(skip)]
    pub steps_drawn: Vec<usize>,
}

/// CSV writer for [`StepRecord`]s.
pub struct LossLog<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> LossLog<W> {
    pub fn new(w: W) -> Self {
        LossLog {
            inner: csv::Writer::from_writer(w),
        }
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.inner
            .serialize(r)
            .and_then(|_| self.inner.flush().map_err(csv::Error::from))
            .map_err(|e| invalid(format!("loss log: {e}")))
    }
}

/// A training input after forward corruption.
#[derive(Debug, Clone)]
enum Corrupted {
    Bernoulli {
        t: usize,
        x_t: MaskState,
    },
    Gaussian {
        t: usize,
        x_t: Vec<f64>,
        eps: Vec<f64>,
    },
}

impl Corrupted {
    fn step(&self) -> usize {
        match self {
            Corrupted::Bernoulli { t, .. } | Corrupted::Gaussian { t, .. } => *t,
        }
    }
}

/// Draws `t` uniformly from `1..=T`, then the corrupted mask, from a stream keyed by
/// `(seed, epoch, sample seed)` so the draw does not depend on batch composition.
fn corrupt(
    sample: &Sample,
    cfg: &RunConfig,
    sched: &NoiseSchedule,
    epoch: usize,
) -> Result<Corrupted> {
    let mut rng = RngStream::keyed(&[TAG_CORRUPT, cfg.train.seed, epoch as u64, sample.seed]);
    let t = 1 + rng.below(sched.steps() as u64) as usize;
    Ok(match cfg.noise {
        crate::training::NoiseKind::Bernoulli => Corrupted::Bernoulli {
            t,
            x_t: q_sample(&sample.mask, t, sched, &mut rng)?,
        },
        crate::training::NoiseKind::Gaussian => {
            let (x_t, eps) = gaussian_q_sample(&map_mask(&sample.mask), t, sched, &mut rng)?;
            Corrupted::Gaussian { t, x_t, eps }
        }
    })
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::keyed(&[TAG_SHUFFLE, seed, epoch as u64]);
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

fn histogram(steps: &[usize]) -> String {
    let mut h = BTreeMap::new();
    for &t in steps {
        *h.entry(t).or_insert(0usize) += 1;
    }
    h.iter()
        .map(|(t, c)| format!("t={t}:{c}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Network, optimizer state and schedule for one run.
pub struct Trainer<T: Real> {
    cfg: RunConfig,
    net: Denoiser<T>,
    opt: AdamW,
    sched: NoiseSchedule,
    encoder: PyramidEncoder,
    step: usize,
}

impl<T: Real> Trainer<T> {
    /// Fresh run. Fails before any step on an inconsistent configuration.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let net = Denoiser::new(cfg.denoiser.clone(), cfg.init_seed)?;
        let opt = AdamW::new(cfg.train.adam(), net.weights());
        Self::assemble(cfg, net, opt, 0)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint<T>) -> Result<Self> {
        let cfg = ckpt.header.config.clone();
        ckpt.check_compatible(&cfg)?;
        let net = ckpt.denoiser()?;
        let opt = match &ckpt.optimizer {
            Some(o) => o.clone(),
            None => AdamW::new(cfg.train.adam(), net.weights()),
        };
        Self::assemble(cfg, net, opt, ckpt.header.step as usize)
    }

    fn assemble(cfg: RunConfig, net: Denoiser<T>, opt: AdamW, step: usize) -> Result<Self> {
        let sched = cfg.build_schedule()?;
        let encoder = PyramidEncoder::new(cfg.extractor_seed, cfg.denoiser.pyramid_channels)?;
        Ok(Trainer {
            cfg,
            net,
            opt,
            sched,
            encoder,
            step,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn denoiser(&self) -> &Denoiser<T> {
        &self.net
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn encoder(&self) -> &PyramidEncoder {
        &self.encoder
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Updates completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::new(&self.cfg, &self.net, Some(&self.opt), self.step as u64)
    }

    /// One optimizer update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Sample], epoch: usize, lr: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let corrupted = batch
            .iter()
            .map(|s| corrupt(s, &self.cfg, &self.sched, epoch))
            .collect::<Result<Vec<_>>>()?;
        let bundles = batch
            .iter()
            .map(|s| extract_bundle(&s.image, &self.encoder))
            .collect::<Result<Vec<ConditionBundle>>>()?;
        let steps: Vec<usize> = corrupted.iter().map(Corrupted::step).collect();
        let diverged = |reason: String, grad_norm: Option<f64>| {
            Error::Diverged(format!(
                "step {}: {reason}; t histogram [{}]; grad norm {}",
                self.step + 1,
                histogram(&steps),
                grad_norm.map_or("not computed".into(), |g| format!("{g:e}"))
            ))
        };

        let mut tape = Tape::<T>::new();
        let vars = self.net.weights().bind(&mut tape, true)?;
        let states: Vec<Vec<f64>> = corrupted
            .iter()
            .map(|c| match c {
                Corrupted::Bernoulli { x_t, .. } => one_hot_chw(x_t),
                Corrupted::Gaussian { x_t, .. } => x_t.clone(),
            })
            .collect();
        let brefs: Vec<&ConditionBundle> = bundles.iter().collect();
        let mut drng = RngStream::keyed(&[TAG_DROPOUT, self.cfg.train.seed, self.step as u64]);
        let forward = (|| -> Result<_> {
            let (input, pyr) = self.net.batch_inputs(&mut tape, &states, &brefs)?;
            let out = self
                .net
                .forward(&mut tape, &vars, input, &pyr, &steps, Some(&mut drng))?;
            let loss = match self.cfg.noise {
                NoiseKind::Bernoulli => {
                    let xs: Vec<&MaskState> = corrupted
                        .iter()
                        .map(|c| match c {
                            Corrupted::Bernoulli { x_t, .. } => x_t,
                            Corrupted::Gaussian { .. } => {
                                unreachable!("noise kind is fixed per run")
                            }
                        })
                        .collect();
                    let targets: Vec<LossTarget> = batch
                        .iter()
                        .zip(&xs)
                        .zip(&steps)
                        .map(|((s, x), &t)| LossTarget {
                            x0: &s.mask,
                            x_t: x,
                            t,
                        })
                        .collect();
                    bernoulli_loss(&mut tape, out, &targets, &self.sched)?.0
                }
                NoiseKind::Gaussian => {
                    let eps: Vec<Vec<f64>> = corrupted
                        .iter()
                        .map(|c| match c {
                            Corrupted::Gaussian { eps, .. } => eps.clone(),
                            Corrupted::Bernoulli { .. } => {
                                unreachable!("noise kind is fixed per run")
                            }
                        })
                        .collect();
                    gaussian_loss(&mut tape, out, &eps)?.0
                }
            };
            Ok(loss)
        })();
        let loss = match forward {
            Ok(l) => l,
            Err(Error::NonFinite { op }) => {
                return Err(diverged(format!("non-finite value in {op}"), None))
            }
            Err(e) => return Err(e),
        };
        let loss_value = tape.value(loss).data()[0].to_f64();
        if !loss_value.is_finite() {
            return Err(diverged(format!("loss {loss_value}"), None));
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(Error::NonFinite { op }) => {
                return Err(diverged(format!("non-finite gradient in {op}"), None))
            }
            Err(e) => return Err(e),
        };
        let grad_norm = vars
            .iter()
            .filter_map(|&v| grads.get(v))
            .flat_map(|g| g.data().iter().map(|&x| x.to_f64() * x.to_f64()))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(diverged("non-finite gradient".into(), Some(grad_norm)));
        }
        drop(tape);
        self.opt.step(self.net.weights_mut(), &vars, &grads, lr)?;
        self.step += 1;
        let ce_count = steps.iter().filter(|&&t| t == 1).count();
        Ok(StepRecord {
            step: self.step,
            epoch,
            loss: loss_value,
            lr,
            kl_count: steps.len() - ce_count,
            ce_count,
            grad_norm,
            steps_drawn: steps,
        })
    }

    /// Trains on `samples` from the current step to the configured total, calling
    /// `on_step` after every update. Resumed runs pick up at the same batch they would
    /// have reached without interruption.
    pub fn run(
        &mut self,
        samples: &[Sample],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        self.run_until(samples, usize::MAX, &mut on_step)
    }

    /// Like [`run`](Self::run) but stops after at most `limit` further updates.
    pub fn run_until(
        &mut self,
        samples: &[Sample],
        limit: usize,
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        if samples.is_empty() {
            return Err(invalid("no training samples"));
        }
        let tc = self.cfg.train.clone();
        let per_epoch = samples.len().div_ceil(tc.batch_size);
        let total = tc.total_steps(samples.len());
        let end = total.min(self.step.saturating_add(limit));
        let mut records = Vec::new();
        let mut order = Vec::new();
        let mut order_epoch = usize::MAX;
        while self.step < end {
            let epoch = self.step / per_epoch;
            let b = self.step % per_epoch;
            if order_epoch != epoch {
                order = epoch_order(samples.len(), tc.seed, epoch);
                order_epoch = epoch;
            }
            let idx = &order[b * tc.batch_size..((b + 1) * tc.batch_size).min(samples.len())];
            let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let lr = lr_at(self.step, total, &tc)?;
            let rec = self.train_step(&batch, epoch, lr)?;
            on_step(&rec)?;
            records.push(rec);
        }
        Ok(records)
    }
}

/// Mean batch loss of a categorical predictor against known targets, without gradients.
pub fn predictor_loss(
    predictor: &dyn MaskPredictor,
    targets: &[LossTarget<'_>],
    bundles: &[&ConditionBundle],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if targets.is_empty() || targets.len() != bundles.len() {
        return Err(invalid("predictor_loss needs one bundle per target"));
    }
    let xs: Vec<&MaskState> = targets.iter().map(|t| t.x_t).collect();
    let steps: Vec<usize> = targets.iter().map(|t| t.t).collect();
    let p0 = predictor.p0_batch(&xs, &steps, bundles)?;
    let mut total = 0.0;
    for (tg, p) in targets.iter().zip(&p0) {
        let v = if tg.t >= 2 {
            kl_loss(tg.x_t, tg.x0, p, tg.t, sched)?
        } else {
            ce_loss(tg.x0, p)?
        };
        debug_assert_eq!(v.branch == LossBranch::Kl, tg.t >= 2);
        total += v.value;
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 1e-4);
        assert!((lr_at(100, 100, &cfg).unwrap() - 1e-6).abs() < 1e-20);
        assert!((lr_at(50, 100, &cfg).unwrap() - 5.05e-5).abs() < 1e-18);
        assert!(lr_at(101, 100, &cfg).is_err());
        assert!(lr_at(0, 0, &cfg).is_err());
    }

    #[test]
    fn config_bounds() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_min = 1e-3;
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            weight_decay: -1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn total_steps_counts_short_batches() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.total_steps(10), 6);
        let capped = TrainConfig {
            max_steps: Some(5),
            ..cfg
        };
        assert_eq!(capped.total_steps(10), 5);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(37, 5, 2);
        assert_ne!(o, (0..37).collect::<Vec<_>>());
        assert_eq!(o, epoch_order(37, 5, 2));
        o.sort();
        assert_eq!(o, (0..37).collect::<Vec<_>>());
    }
}

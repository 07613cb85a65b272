//! Maximum-likelihood training and evaluation.

mod adam;
mod model;

pub use adam::{adam_step, global_norm, AdamConfig, AdamState, StepOutcome};
pub use model::{bits_per_dim, l2_step_loss, FlowModel, LossTerms, ModelOutput};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dequantize, preprocess, Checkpoint, ImageDataset, MetricsRecord, PointDataset, RngState};
use crate::error::{Error, Result};
use crate::prior::SEED_SAMPLE_LIMIT;
use crate::tensor::{Real, Tape, Tensor};

/// Consecutive skipped batches that abort training.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;

/// Offset mixed into the seed for the fixed validation dequantization.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;
/// Offset mixed into the seed for prior seeding.
const PRIOR_SEED_SALT: u64 = 0x70b1_c5ee;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_l2: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between validation passes; the final epoch is always evaluated.
    pub eval_every: usize,
    /// Fit grid-prior topics to the training latents before the first step.
    pub seed_prior: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 10,
            lambda_l2: 1e-3,
            clip_norm: 5.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 1,
            seed_prior: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("train.lr", self.lr), ("train.eps", self.eps)];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return Err(Error::config("train.lambda_l2", "must be non-negative"));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::config("train.clip_norm", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Training data: integer images go through dequantization and the arctanh
/// transform; real points are modeled directly as `N×D×1×1`.
#[derive(Clone, Debug)]
pub enum TrainData {
    Images(ImageDataset),
    Points(PointDataset),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Images(d) => d.len(),
            TrainData::Points(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> [usize; 3] {
        match self {
            TrainData::Images(d) => d.shape(),
            TrainData::Points(d) => [d.dim(), 1, 1],
        }
    }

    /// Model input `u` and the per-sample preprocessing log-det, if any.
    pub fn batch<T: Real>(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        match self {
            TrainData::Images(d) => {
                let x = dequantize::<T, _>(&d.gather(indices), d.shape(), rng)?;
                let (u, ld) = preprocess(&x)?;
                Ok((u, Some(ld)))
            }
            TrainData::Points(d) => {
                let [c, h, w] = self.shape();
                let rows = d.points.select_rows(indices)?.cast::<T>();
                Ok((rows.reshaped(&[indices.len(), c, h, w])?, None))
            }
        }
    }
}

/// Mean bits per dimension over `data`, dequantized with a fixed seed.
pub fn evaluate<T: Real>(model: &FlowModel<T>, data: &TrainData, seed: u64, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SEED_SALT);
    let d = model.dim() as f64 * std::f64::consts::LN_2;
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (u, pre) = data.batch::<T>(chunk, &mut rng)?;
        let lp = model.log_prob_values(&u, pre.as_ref())?;
        total += lp.data().iter().map(|v| -v.f64() / d).sum::<f64>();
    }
    let bpd = total / data.len() as f64;
    if !bpd.is_finite() {
        return Err(Error::NonFinite("evaluation".into()));
    }
    Ok(bpd)
}

/// Stateful optimizer loop over epochs. Everything that influences the
/// trajectory (parameters, moments, RNG, history) round-trips through a
/// checkpoint.
pub struct Trainer<T: Real> {
    pub model: FlowModel<T>,
    cfg: TrainConfig,
    adam: AdamState<T>,
    rng: ChaCha8Rng,
    epoch: usize,
    history: Vec<MetricsRecord>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: FlowModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        Ok(Trainer {
            adam: AdamState::new(&shapes),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer step on a prepared batch. Returns `None` when the batch
    /// was skipped (non-finite loss or gradient).
    pub fn step_batch(&mut self, u: &Tensor<T>, pre: Option<&Tensor<T>>) -> Result<Option<(f64, f64)>> {
        let (g, nll_bpd, l2) = {
            let tape = Tape::new();
            let pre_v = pre.map(|p| tape.constant(p.clone()));
            let terms = match self
                .model
                .total_loss(&tape, tape.constant(u.clone()), pre_v, self.cfg.lambda_l2)
            {
                Ok(t) => t,
                Err(Error::NonFinite(what)) => {
                    log::warn!("non-finite values in {what}; skipping batch");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            if !terms.loss.value().all_finite() {
                log::warn!("non-finite loss; skipping batch");
                return Ok(None);
            }
            let grads = tape.backward(terms.loss)?;
            let g: Vec<Tensor<T>> = self
                .model
                .named_params()
                .iter()
                .map(|(_, p)| grads.get_or_zeros(p))
                .collect();
            (g, terms.nll_bpd, terms.l2)
        };
        let adam = self.cfg.adam();
        let mut params = self.model.params_mut();
        match adam_step(&mut params, &g, &mut self.adam, &adam)? {
            StepOutcome::Applied { .. } => Ok(Some((nll_bpd, l2))),
            StepOutcome::Skipped => Ok(None),
        }
    }

    /// Runs one epoch and, on cadence, a validation pass.
    pub fn train_epoch(&mut self, train: &TrainData, val: Option<&TrainData>, last: bool) -> Result<MetricsRecord> {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut bpd_sum, mut l2_sum, mut seen, mut batches) = (0.0, 0.0, 0usize, 0usize);
        let mut skips = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let (u, pre) = train.batch::<T>(chunk, &mut self.rng)?;
            match self.step_batch(&u, pre.as_ref())? {
                Some((bpd, l2)) => {
                    skips = 0;
                    bpd_sum += bpd * chunk.len() as f64;
                    l2_sum += l2;
                    seen += chunk.len();
                    batches += 1;
                }
                None => {
                    skips += 1;
                    if skips >= MAX_CONSECUTIVE_SKIPS {
                        return Err(Error::Divergence {
                            epoch: self.epoch + 1,
                            batch: b,
                            message: format!("{skips} consecutive non-finite batches"),
                        });
                    }
                }
            }
        }
        self.epoch += 1;
        let due = self.epoch.is_multiple_of(self.cfg.eval_every) || last;
        let val_bpd = match val {
            Some(v) if due => Some(evaluate(&self.model, v, self.cfg.seed, self.cfg.batch_size.max(256))?),
            _ => None,
        };
        let record = MetricsRecord {
            epoch: self.epoch,
            train_bpd: if seen > 0 { bpd_sum / seen as f64 } else { f64::NAN },
            val_bpd,
            l2_loss: if batches > 0 { l2_sum / batches as f64 } else { 0.0 },
            seconds: start.elapsed().as_secs_f64(),
        };
        let level = if record.val_bpd.is_some() {
            log::Level::Info
        } else {
            log::Level::Debug
        };
        log::log!(
            level,
            "epoch {} train_bpd={:.4} val_bpd={} l2={:.4} ({:.1}s)",
            record.epoch,
            record.train_bpd,
            record.val_bpd.map_or("-".into(), |v| format!("{v:.4}")),
            record.l2_loss,
            record.seconds
        );
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `cfg.epochs` epochs have completed in total. `on_epoch`
    /// runs after each epoch (e.g. to write checkpoints).
    pub fn fit(
        &mut self,
        train: &TrainData,
        val: Option<&TrainData>,
        mut on_epoch: impl FnMut(&Trainer<T>) -> Result<()>,
    ) -> Result<&[MetricsRecord]> {
        if train.shape() != self.model.input_shape() {
            return Err(Error::config(
                "data",
                format!(
                    "data shape {:?} does not match model {:?}",
                    train.shape(),
                    self.model.input_shape()
                ),
            ));
        }
        if self.cfg.seed_prior && self.adam.step == 0 && self.epoch == 0 {
            self.seed_prior(train)?;
        }
        while self.epoch < self.cfg.epochs {
            let last = self.epoch + 1 == self.cfg.epochs;
            self.train_epoch(train, val, last)?;
            on_epoch(self)?;
        }
        Ok(&self.history)
    }

    /// Seeds the prior from up to [`SEED_SAMPLE_LIMIT`] training items. Uses
    /// its own RNG stream so batch order is unaffected.
    pub fn seed_prior(&mut self, train: &TrainData) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ PRIOR_SEED_SALT);
        let mut idx = rand::seq::index::sample(&mut rng, train.len(), train.len().min(SEED_SAMPLE_LIMIT)).into_vec();
        idx.sort_unstable();
        let (u, _) = train.batch::<T>(&idx, &mut rng)?;
        self.model.seed_prior(&u, &mut rng)
    }

    pub fn checkpoint(&self, config_echo: &str) -> Checkpoint<T> {
        let named = self.model.named_params();
        let mut tensors: Vec<(String, Tensor<T>)> = named.iter().map(|(n, t)| (n.clone(), (*t).clone())).collect();
        for (i, (n, _)) in named.iter().enumerate() {
            tensors.push((format!("adam.m.{n}"), self.adam.m[i].clone()));
            tensors.push((format!("adam.v.{n}"), self.adam.v[i].clone()));
        }
        Checkpoint {
            config_echo: config_echo.to_string(),
            epoch: self.epoch as u64,
            step: self.adam.step,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
            tensors,
        }
    }

    /// Rebuilds a trainer from a checkpoint written for the same
    /// architecture (`config_echo` must match).
    pub fn restore(mut model: FlowModel<T>, cfg: TrainConfig, ckpt: &Checkpoint<T>, config_echo: &str) -> Result<Self> {
        if ckpt.config_echo != config_echo {
            return Err(Error::config(
                "checkpoint",
                "architecture in checkpoint differs from the configuration",
            ));
        }
        model.load_params(&ckpt.tensors)?;
        let mut t = Trainer::new(model, cfg)?;
        let names: Vec<String> = t.model.named_params().into_iter().map(|(n, _)| n).collect();
        for (i, n) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut t.adam.m[i]), ("adam.v.", &mut t.adam.v[i])] {
                let key = format!("{prefix}{n}");
                let src = ckpt
                    .tensor(&key)
                    .ok_or_else(|| Error::config("checkpoint", format!("missing optimizer state `{key}`")))?;
                if src.shape() != slot.shape() {
                    return Err(Error::config(
                        "checkpoint",
                        format!("optimizer state `{key}` has wrong shape"),
                    ));
                }
                slot.set_values(src.to_vec())?;
            }
        }
        t.adam.step = ckpt.step;
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.epoch as usize;
        t.history = ckpt.history.clone();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, PriorConfig, Variant};
    use crate::data::make_moons;
    use crate::flow::SubnetKind;
    use crate::prior::PriorKind;

    fn moons_model(seed: u64) -> FlowModel<f64> {
        let cfg = ModelConfig {
            variant: Variant::Ldanf,
            couplings: 2,
            subnet: SubnetKind::Mlp,
            width: Some(8),
            fractal_schedule: vec![],
            steps_per_level: 2,
            squeeze_after: None,
            mix1x1: false,
            clamp: 2.0,
            prior: PriorConfig {
                kind: PriorKind::GridGmmLda,
                ..Default::default()
            },
        };
        FlowModel::from_config(&cfg, [2, 1, 1], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn run(epochs: usize) -> Vec<MetricsRecord> {
        let data = TrainData::Points(make_moons(64, 0.05, 1).unwrap());
        let cfg = TrainConfig {
            epochs,
            batch_size: 16,
            ..Default::default()
        };
        let mut t = Trainer::new(moons_model(0), cfg).unwrap();
        t.fit(&data, Some(&data), |_| Ok(())).unwrap().to_vec()
    }

    #[test]
    fn zero_epochs_and_determinism() {
        assert!(run(0).is_empty());
        let a = run(2);
        let b = run(2);
        assert_eq!(a.len(), 2);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_bpd.to_bits(), y.train_bpd.to_bits());
            assert_eq!(x.val_bpd.map(f64::to_bits), y.val_bpd.map(f64::to_bits));
        }
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_l2: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

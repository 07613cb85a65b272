use rand::Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::flow::{
    AffineCoupling, FlowSequence, ForwardOptions, FractalBlock, Layer, MaskKind, Mix1x1, Parity, SequenceOutput,
    Squeeze,
};
use crate::prior::{DiagGmmPrior, GridGmmLdaPrior, Prior, PriorKind, StandardGaussianPrior, WeightMode};
use crate::tensor::{Real, Tape, Tensor, Var};

/// A flow and the prior placed on its output.
#[derive(Clone, Debug)]
pub struct FlowModel<T: Real> {
    flow: FlowSequence<T>,
    prior: Prior<T>,
}

pub struct ModelOutput<'t, T: Real> {
    /// Per-sample log density `[N]`, including the preprocessing term.
    pub log_prob: Var<'t, T>,
    pub seq: SequenceOutput<'t, T>,
}

/// Scalar loss and its two logged parts.
pub struct LossTerms<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub nll_bpd: f64,
    pub l2: f64,
}

impl<T: Real> FlowModel<T> {
    pub fn new(flow: FlowSequence<T>, prior: Prior<T>) -> Result<Self> {
        let d: usize = flow.output_shape().iter().product();
        if prior.dim() != d {
            return Err(Error::config(
                "model.prior",
                format!("prior has {} dims, flow output has {d}", prior.dim()),
            ));
        }
        Ok(FlowModel { flow, prior })
    }

    pub fn from_config<R: Rng + ?Sized>(cfg: &ModelConfig, shape: [usize; 3], rng: &mut R) -> Result<Self> {
        cfg.validate(shape)?;
        let width = cfg.width();
        let mut layers = Vec::new();
        match cfg.variant {
            Variant::Realnvp | Variant::Ldanf => {
                let mut cur = shape;
                let mut squeezed = false;
                for i in 0..cfg.couplings {
                    if cfg.squeeze_after == Some(i) {
                        layers.push(Layer::Squeeze(Squeeze));
                        cur = [cur[0] * 4, cur[1] / 2, cur[2] / 2];
                        squeezed = true;
                    }
                    let kind = if squeezed { MaskKind::Channel } else { MaskKind::Auto };
                    layers.push(Layer::Coupling(AffineCoupling::with_mask_kind(
                        cur,
                        kind,
                        Parity::alternating(i),
                        cfg.subnet,
                        width,
                        cfg.clamp,
                        rng,
                    )?));
                    if cfg.mix1x1 && cur[0] >= 2 {
                        layers.push(Layer::Mix(Mix1x1::random(cur[0], rng)));
                    }
                }
            }
            Variant::Ldafnf => {
                layers.push(Layer::Fractal(FractalBlock::uniform(
                    shape,
                    &cfg.fractal_schedule,
                    cfg.steps_per_level,
                    cfg.subnet,
                    width,
                    cfg.clamp,
                    rng,
                )?));
                if cfg.mix1x1 && shape[0] >= 2 {
                    layers.push(Layer::Mix(Mix1x1::random(shape[0], rng)));
                }
            }
        }
        let flow = FlowSequence::new(shape, layers, false)?;
        let d: usize = shape.iter().product();
        let p = &cfg.prior;
        let prior = match p.kind {
            PriorKind::Gaussian => Prior::Gaussian(StandardGaussianPrior::new(d)),
            PriorKind::DiagGmm => Prior::DiagGmm(DiagGmmPrior::new(p.topics, d, 1.0, rng)?),
            PriorKind::GridGmmLda => Prior::GridGmmLda(GridGmmLdaPrior::new(p.topics, d, p.components, p.bound)?),
        };
        Self::new(flow, prior)
    }

    pub fn flow(&self) -> &FlowSequence<T> {
        &self.flow
    }

    pub fn prior(&self) -> &Prior<T> {
        &self.prior
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.flow.input_shape()
    }

    pub fn dim(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// `log p(u) + pre_logdet`: prior density of the flow output plus the
    /// flow's log-determinant and any preprocessing log-determinant.
    pub fn log_prob<'t>(
        &self,
        tape: &'t Tape<T>,
        u: Var<'t, T>,
        pre_logdet: Option<Var<'t, T>>,
        opts: ForwardOptions,
    ) -> Result<ModelOutput<'t, T>> {
        let n = u.shape()[0];
        let seq = self.flow.forward_with(tape, u, opts)?;
        if !seq.z.value().all_finite() {
            return Err(Error::NonFinite("flow output".into()));
        }
        let z = seq.z.reshape(&[n, self.dim()])?;
        let mut lp = self.prior.log_prob(tape, z)?.add(seq.logdet)?;
        if let Some(pre) = pre_logdet {
            lp = lp.add(pre)?;
        }
        Ok(ModelOutput { log_prob: lp, seq })
    }

    /// Mean bits-per-dim NLL plus `lambda · l2_step_loss`.
    pub fn total_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        u: Var<'t, T>,
        pre_logdet: Option<Var<'t, T>>,
        lambda: f64,
    ) -> Result<LossTerms<'t, T>> {
        let opts = ForwardOptions {
            record: lambda > 0.0,
            skip_mix: false,
        };
        let out = self.log_prob(tape, u, pre_logdet, opts)?;
        let nll = bits_per_dim(out.log_prob, self.dim()).mean_all();
        let nll_bpd = nll.value().data()[0].f64();
        if lambda > 0.0 {
            let l2 = l2_step_loss(&out.seq.intermediates)?;
            let l2v = l2.value().data()[0].f64();
            let loss = nll.add(l2.scale(T::c(lambda)))?;
            Ok(LossTerms { loss, nll_bpd, l2: l2v })
        } else {
            Ok(LossTerms {
                loss: nll,
                nll_bpd,
                l2: 0.0,
            })
        }
    }

    /// Per-sample log density of `u` without gradient tracking.
    pub fn log_prob_values(&self, u: &Tensor<T>, pre_logdet: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let pre = pre_logdet.map(|p| tape.constant(p.clone()));
        Ok(self
            .log_prob(&tape, tape.constant(u.clone()), pre, ForwardOptions::default())?
            .log_prob
            .value())
    }

    /// Draws latents from the prior and maps them back through the flow.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        n: usize,
        temperature: f64,
        mode: WeightMode,
        rng: &mut R,
    ) -> Result<Tensor<T>> {
        let z = self.prior.sample(n, temperature, mode, rng)?;
        self.decode(&z)
    }

    /// Flow inverse of flat latents `N×D`, returned as `N×C×H×W`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let n = z.shape()[0];
        let [c, h, w] = self.flow.output_shape();
        let tape = Tape::inference();
        let zv = tape.constant(z.reshaped(&[n, c, h, w])?);
        Ok(self.flow.inverse(&tape, zv)?.value())
    }

    /// Input followed by every recorded intermediate state, in input layout.
    pub fn intermediates(&self, u: &Tensor<T>, skip_mix: bool) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::inference();
        let seq = self.flow.forward_with(
            &tape,
            tape.constant(u.clone()),
            ForwardOptions { record: true, skip_mix },
        )?;
        Ok(seq.intermediates.iter().map(|v| v.value()).collect())
    }

    /// Seeds grid-prior topics from the latents of `u` (see
    /// [`GridGmmLdaPrior::seed_from_latents`]). Other priors are unchanged.
    pub fn seed_prior<R: Rng + ?Sized>(&mut self, u: &Tensor<T>, rng: &mut R) -> Result<()> {
        if !matches!(self.prior, Prior::GridGmmLda(_)) {
            return Ok(());
        }
        let n = u.shape()[0];
        let tape = Tape::inference();
        let z = self
            .flow
            .forward(&tape, tape.constant(u.clone()))?
            .z
            .value()
            .reshaped(&[n, self.dim()])?;
        if let Prior::GridGmmLda(p) = &mut self.prior {
            p.seed_from_latents(&z, rng)?;
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.flow.named_params("flow");
        out.extend(self.prior.named_params("prior"));
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.flow.params_mut();
        out.extend(self.prior.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter counts grouped by flow layer and prior.
    pub fn param_report(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.named_params() {
            let key = name
                .split('.')
                .take(if name.starts_with("flow") { 3 } else { 1 })
                .collect::<Vec<_>>()
                .join(".");
            match groups.last_mut() {
                Some((k, c)) if *k == key => *c += t.numel(),
                _ => groups.push((key, t.numel())),
            }
        }
        groups
    }

    /// Overwrites parameters from `(name, tensor)` pairs; every parameter must
    /// be present with a matching shape.
    pub fn load_params(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut values = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::config("checkpoint", format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(
                    "checkpoint",
                    format!("parameter `{name}` has shape {:?}, model expects {shape:?}", t.shape()),
                ));
            }
            values.push(t.to_vec());
        }
        for (p, v) in self.params_mut().into_iter().zip(values) {
            p.set_values(v)?;
        }
        Ok(())
    }
}

/// `−log p / (D ln 2)` per sample.
pub fn bits_per_dim<'t, T: Real>(log_prob: Var<'t, T>, dim: usize) -> Var<'t, T> {
    log_prob.scale(T::c(-1.0 / (dim as f64 * std::f64::consts::LN_2)))
}

/// `Σ_i ‖z_i − z_{i+1}‖²`, averaged over the batch.
pub fn l2_step_loss<'t, T: Real>(states: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if states.len() < 2 {
        return Err(Error::shape(format!(
            "step loss needs at least 2 states, got {}",
            states.len()
        )));
    }
    let n = states[0].shape()[0];
    let mut total: Option<Var<'t, T>> = None;
    for pair in states.windows(2) {
        if pair[0].shape() != pair[1].shape() {
            return Err(Error::shape(format!(
                "state shapes differ: {:?} vs {:?}",
                pair[0].shape(),
                pair[1].shape()
            )));
        }
        let term = pair[0].sub(pair[1])?.square().sum_all();
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    Ok(total.expect("at least one pair").scale(T::c(1.0 / n as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PriorConfig;
    use crate::flow::SubnetKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant, prior: PriorKind) -> ModelConfig {
        ModelConfig {
            variant,
            couplings: 3,
            subnet: SubnetKind::Mlp,
            width: Some(8),
            fractal_schedule: vec![4, 2],
            steps_per_level: 2,
            squeeze_after: None,
            mix1x1: false,
            clamp: 2.0,
            prior: PriorConfig {
                kind: prior,
                ..Default::default()
            },
        }
    }

    #[test]
    fn identity_model_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m =
            FlowModel::<f64>::from_config(&cfg(Variant::Realnvp, PriorKind::Gaussian), [1, 2, 2], &mut rng).unwrap();
        let lp = m.log_prob_values(&Tensor::zeros(&[1, 1, 2, 2]), None).unwrap();
        assert!((lp.data()[0] + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn bpd_and_step_loss_examples() {
        let tape = Tape::<f64>::new();
        let lp = tape.constant(Tensor::from_f64(&[2], &[-4.0 * std::f64::consts::LN_2, 0.0]).unwrap());
        assert_eq!(bits_per_dim(lp, 4).value().data(), &[1.0, -0.0]);

        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::full(&[2, 3], 1.0));
        assert_eq!(l2_step_loss(&[a, b]).unwrap().value().data(), &[3.0]);
        assert!(l2_step_loss(&[a]).is_err());
        let c = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(l2_step_loss(&[a, c]).is_err());
    }

    #[test]
    fn variant_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (v, p) in [
            (Variant::Realnvp, PriorKind::Gaussian),
            (Variant::Ldanf, PriorKind::GridGmmLda),
            (Variant::Ldafnf, PriorKind::DiagGmm),
        ] {
            let m = FlowModel::<f64>::from_config(&cfg(v, p), [1, 4, 4], &mut rng).unwrap();
            assert!(m.param_count() > 0);
            let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
            let mut dedup = names.clone();
            dedup.dedup();
            assert_eq!(names, dedup);
        }
        assert!(FlowModel::<f64>::from_config(&cfg(Variant::Ldanf, PriorKind::Gaussian), [1, 4, 4], &mut rng).is_err());
    }
}

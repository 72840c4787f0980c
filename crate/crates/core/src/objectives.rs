//! Training losses and the flow sampler.
//!
//! Text is trained with next-token cross-entropy, latents with flow matching
//! on the affine path `z_t = (1 - t) z0 + t z1` (data at `t = 0`, noise at
//! `t = 1`). The two are mixed as `w_ce * l_ntp + w_mse * l_flow`.

use crate::error::{bail, Result};
use crate::model::{build_sequence, Binder, Image, ModalityTag, SegmentInputs, SequenceMode, UnifiedModel};
use crate::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean negative log-likelihood of `targets` under `logits[n×V]`.
///
/// `None` targets are ignored and excluded from the mean.
pub fn ntp_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (n, v) = g.value(logits).dims2()?;
    if targets.len() != n {
        bail!(Shape, "{} targets for {n} logit rows", targets.len());
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            if t >= v {
                bail!(Index, "target {t} at position {i} outside vocabulary of {v}");
            }
            rows.push(i);
            ids.push(t);
        }
    }
    if rows.is_empty() {
        bail!(Contract, "every target position is ignored");
    }
    let kept = if rows.len() == n { logits } else { g.index_rows(logits, &rows)? };
    let lp = g.log_softmax(kept)?;
    let picked = g.pick_per_row(lp, &ids)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// One point on the straight path between a clean latent and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPair {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub v_target: Tensor,
}

impl FlowPair {
    /// Builds the pair from explicit noise.
    pub fn with_noise(z0: Tensor, z1: Tensor, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            bail!(Parameter, "flow time {t} outside [0, 1]");
        }
        if z0.shape() != z1.shape() {
            bail!(Shape, "clean latent {:?} and noise {:?} differ", z0.shape(), z1.shape());
        }
        let z_t = interpolate(&z0, &z1, t);
        let v: Vec<f64> = z1.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect();
        let v_target = Tensor::new(z0.shape(), v)?;
        Ok(Self { z0, z1, t, z_t, v_target })
    }
}

fn interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Tensor {
    let d = z0.data().iter().zip(z1.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    Tensor::new(z0.shape(), d).expect("same shape")
}

/// Draws `z1 ~ N(0, I)` from `noise_seed` and interpolates at `t`.
pub fn make_flow_pair(z0: &Tensor, t: f64, noise_seed: u64) -> Result<FlowPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let z1 = Tensor::randn(z0.shape(), 1.0, &mut rng);
    FlowPair::with_noise(z0.clone(), z1, t)
}

/// `‖v_pred − v_target‖² / numel`.
pub fn flow_loss(g: &mut Graph, v_pred: Var, v_target: Var) -> Result<Var> {
    let d = g.sub(v_pred, v_target)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_mse: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ce: 0.25, w_mse: 1.0 }
    }
}

impl LossWeights {
    pub fn new(w_ce: f64, w_mse: f64) -> Result<Self> {
        let w = Self { w_ce, w_mse };
        w.validate()?;
        Ok(w)
    }

    /// The single-coefficient form `L_ntp + alpha * L_flow`.
    pub fn from_alpha(alpha: f64) -> Result<Self> {
        Self::new(1.0, alpha)
    }

    /// `w_mse / w_ce`; infinite when text is switched off.
    pub fn alpha(&self) -> f64 {
        self.w_mse / self.w_ce
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_ce >= 0.0 && self.w_mse >= 0.0) || !self.w_ce.is_finite() || !self.w_mse.is_finite() {
            bail!(Parameter, "loss weights must be finite and nonnegative, got ({}, {})", self.w_ce, self.w_mse);
        }
        if self.w_ce == 0.0 && self.w_mse == 0.0 {
            bail!(Parameter, "loss weights cannot both be zero");
        }
        Ok(())
    }
}

pub fn combined_loss(l_ntp: f64, l_flow: f64, w: LossWeights) -> Result<f64> {
    if !l_ntp.is_finite() || !l_flow.is_finite() {
        bail!(Numeric, "non-finite component loss (ntp {l_ntp}, flow {l_flow})");
    }
    Ok(w.w_ce * l_ntp + w.w_mse * l_flow)
}

/// Graph form of [`combined_loss`]; absent terms contribute nothing.
pub fn combine(g: &mut Graph, l_ntp: Option<Var>, l_flow: Option<Var>, w: LossWeights) -> Result<Var> {
    for v in [l_ntp, l_flow].into_iter().flatten() {
        let x = g.value(v).item();
        if !x.is_finite() {
            bail!(Numeric, "non-finite component loss {x}");
        }
    }
    match (l_ntp, l_flow) {
        (Some(a), Some(b)) => {
            let a = g.scale(a, w.w_ce);
            let b = g.scale(b, w.w_mse);
            g.add(a, b)
        }
        (Some(a), None) => Ok(g.scale(a, w.w_ce)),
        (None, Some(b)) => Ok(g.scale(b, w.w_mse)),
        (None, None) => bail!(Contract, "no loss terms to combine"),
    }
}

/// Anything that predicts a velocity for a latent at a flow time.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self(z, t)
    }
}

/// Explicit Euler from `t = 1` down to `t = 0` in `steps` uniform steps.
pub fn euler_integrate(field: &dyn VelocityField, z1: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        bail!(Parameter, "sampler needs at least one step");
    }
    let dt = 1.0 / steps as f64;
    let mut z = z1.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.velocity(&z, t)?;
        if v.shape() != z.shape() {
            bail!(Shape, "velocity {:?} for latent {:?}", v.shape(), z.shape());
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
        if let Err(e) = z.check_finite("latent") {
            bail!(Numeric, "sampler step {i}: {e}");
        }
    }
    Ok(z)
}

/// The model's velocity for a fixed text condition, optionally preceded by
/// semantic image tokens.
pub struct ModelField<'a> {
    model: &'a UnifiedModel,
    text: Vec<u32>,
    vit: Option<Tensor>,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a UnifiedModel, text: &[u32]) -> Self {
        Self { model, text: text.to_vec(), vit: None }
    }

    /// Conditions on `vit[n×vit_dim]` as well, using the interleaved layout.
    pub fn with_vit(mut self, vit: Tensor) -> Self {
        self.vit = Some(vit);
        self
    }
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let cfg = self.model.config();
        let (mode, n_vit) = match &self.vit {
            Some(v) => (SequenceMode::Interleaved, v.rows()),
            None => (SequenceMode::Generate, 0),
        };
        let seq = build_sequence(&self.text, n_vit, z.rows(), mode, Some(t), cfg.sequence)?;
        let mut g = Graph::new(0);
        let mut b = Binder::inference(self.model.params());
        let zv = g.constant(z.clone());
        let vit = self.vit.as_ref().map(|v| g.constant(v.clone()));
        let h = self.model.forward(&mut g, &mut b, &seq, SegmentInputs { vit, vae: Some(zv) })?;
        let v = self.model.predict_velocity(&mut g, &mut b, h, &seq.indices_of(ModalityTag::Vae), Some(t))?;
        Ok(g.value(v).clone())
    }
}

/// Integrates `field` from noise drawn with `seed` in the model's latent shape.
pub fn sample_field(model: &UnifiedModel, field: &dyn VelocityField, steps: usize, seed: u64) -> Result<Tensor> {
    let cfg = model.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z1 = Tensor::randn(&[cfg.n_latents(), cfg.latent_dim], 1.0, &mut rng);
    euler_integrate(field, &z1, steps)
}

/// Latent sampled for `cond_text`, starting from noise drawn with `seed`.
pub fn sample_latent(model: &UnifiedModel, cond_text: &[u32], steps: usize, seed: u64) -> Result<Tensor> {
    sample_field(model, &ModelField::new(model, cond_text), steps, seed)
}

pub fn euler_sample(model: &UnifiedModel, cond_text: &[u32], steps: usize, seed: u64) -> Result<Image> {
    let z = sample_latent(model, cond_text, steps, seed)?;
    model.vae_decode(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn ntp_closed_forms() {
        let mut g = Graph::new(0);
        let l = g.constant(Tensor::zeros(&[1, 4]));
        let loss = ntp_loss(&mut g, l, &[Some(2)]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let l = g.constant(Tensor::new(&[1, 3], vec![0.0, 30.0, 0.0]).unwrap());
        let loss = ntp_loss(&mut g, l, &[Some(1)]).unwrap();
        assert!(g.value(loss).item() < 1e-9);

        let l = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
        let loss = ntp_loss(&mut g, l, &[Some(0), Some(0)]).unwrap();
        // 0.5 * (ln(1 + e^-1) + ln(1 + e^2))
        assert!((g.value(loss).item() - 1.2200948492805979).abs() < 1e-12);
    }

    #[test]
    fn ntp_ignores_and_rejects() {
        let mut g = Graph::new(0);
        let l = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 50.0, -50.0]).unwrap());
        let a = ntp_loss(&mut g, l, &[Some(0), None]).unwrap();
        assert!((g.value(a).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!(matches!(ntp_loss(&mut g, l, &[Some(2), None]), Err(crate::Error::Index(_))));
        assert!(ntp_loss(&mut g, l, &[None, None]).is_err());
    }

    #[test]
    fn flow_pair_boundaries() {
        let p = FlowPair::with_noise(Tensor::scalar(0.0), Tensor::scalar(1.0), 0.25).unwrap();
        assert_eq!(p.z_t.item(), 0.25);
        assert_eq!(p.v_target.item(), 1.0);
        let z0 = Tensor::new(&[3], vec![0.3, -1.7, 2.2]).unwrap();
        let a = make_flow_pair(&z0, 0.0, 4).unwrap();
        assert!(a.z_t.bit_eq(&z0));
        let b = make_flow_pair(&z0, 1.0, 4).unwrap();
        assert!(b.z_t.bit_eq(&b.z1));
        assert!(a.z1.bit_eq(&b.z1));
        assert!(make_flow_pair(&z0, 1.5, 0).is_err());
    }

    #[test]
    fn flow_loss_values_and_gradient() {
        let mut g = Graph::new(0);
        let t = Tensor::new(&[2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let a = g.constant(t.clone());
        let b = g.constant(t.map(|x| x + 1.0));
        let same = flow_loss(&mut g, a, a).unwrap();
        let off = flow_loss(&mut g, b, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        assert!((g.value(off).item() - 1.0).abs() < 1e-15);

        let p = g.param(t.map(|x| x * 0.3 + 0.1));
        let l = flow_loss(&mut g, p, a).unwrap();
        g.backward(l).unwrap();
        let want: Vec<f64> = t.data().iter().map(|x| 2.0 * (x * 0.3 + 0.1 - x) / 4.0).collect();
        for (a, b) in g.grad(p).unwrap().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        let target = t.clone();
        let err = grad_check(
            |g, x| {
                let c = g.constant(target.clone());
                flow_loss(g, x, c)
            },
            &t.map(|x| x * 0.7),
            1e-5,
            0,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    #[test]
    fn weights_and_combination() {
        assert_eq!(combined_loss(2.0, 1.0, LossWeights::new(1.0, 4.0).unwrap()).unwrap(), 6.0);
        assert_eq!(combined_loss(4.0, 1.0, LossWeights::default()).unwrap(), 2.0);
        assert_eq!(combined_loss(3.0, 9.0, LossWeights::new(1.0, 0.0).unwrap()).unwrap(), 3.0);
        assert!(matches!(
            combined_loss(f64::NAN, 1.0, LossWeights::default()),
            Err(crate::Error::Numeric(_))
        ));
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert_eq!(LossWeights::from_alpha(4.0).unwrap().alpha(), 4.0);
    }

    #[test]
    fn euler_on_constant_and_single_step() {
        let z1 = Tensor::new(&[2], vec![0.4, -1.3]).unwrap();
        let c = Tensor::new(&[2], vec![0.25, 2.0]).unwrap();
        let field = |_: &Tensor, _: f64| Ok(c.clone());
        for n in [1, 5, 50] {
            let z = euler_integrate(&field, &z1, n).unwrap();
            assert!((z.data()[0] - 0.15).abs() < 1e-12 && (z.data()[1] + 3.3).abs() < 1e-12);
        }
        let lin = |z: &Tensor, t: f64| Ok(z.map(|x| x * t + 1.0));
        let z = euler_integrate(&lin, &z1, 1).unwrap();
        let want = z1.map(|x| x - (x + 1.0));
        assert!(z.bit_eq(&want));
        assert!(euler_integrate(&field, &z1, 0).is_err());
    }

    #[test]
    fn euler_reports_failing_step() {
        let blow = |z: &Tensor, t: f64| Ok(if t < 0.6 { z.map(|_| f64::INFINITY) } else { z.clone() });
        let err = euler_integrate(&blow, &Tensor::scalar(1.0), 4).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("step 2"), "{err}");
    }

    fn understanding_grad_norm(policy: crate::model::ConditionGradient) -> f64 {
        use crate::model::{Expert, ModelConfig};
        let cfg = ModelConfig {
            width: 16,
            heads: 2,
            mlp_hidden: 16,
            image_size: 8,
            vit_dim: 8,
            condition_gradient: policy,
            ..Default::default()
        };
        let model = UnifiedModel::new(cfg).unwrap();
        let pair = make_flow_pair(&Tensor::full(&[4, 8], 0.5), 0.6, 3).unwrap();
        let seq = build_sequence(&[5, 6, 7], 0, 4, SequenceMode::Generate, Some(pair.t), Default::default()).unwrap();
        let mut g = Graph::new(0);
        let mut b = Binder::training(model.params());
        let zt = g.constant(pair.z_t.clone());
        let target = g.constant(pair.v_target.clone());
        let h = model.forward(&mut g, &mut b, &seq, SegmentInputs { vit: None, vae: Some(zt) }).unwrap();
        let v = model.predict_velocity(&mut g, &mut b, h, &seq.indices_of(ModalityTag::Vae), Some(pair.t)).unwrap();
        let lf = flow_loss(&mut g, v, target).unwrap();
        let loss = combine(&mut g, None, Some(lf), LossWeights::new(0.0, 1.0).unwrap()).unwrap();
        g.backward(loss).unwrap();
        let und = model.expert_param_ids(Expert::Understanding);
        b.grads(&g).iter().filter(|(id, _)| und.contains(id)).map(|(_, t)| t.l2_norm_sq()).sum()
    }

    #[test]
    fn generation_loss_leaves_understanding_expert_alone() {
        assert_eq!(understanding_grad_norm(crate::model::ConditionGradient::Detached), 0.0);
        assert!(understanding_grad_norm(crate::model::ConditionGradient::Shared) > 0.0);
    }
}

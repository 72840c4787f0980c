use crate::error::{bail, Result};
use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay and bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, moments: vec![None; store.len()] }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moments of one parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<&(Tensor, Tensor)> {
        self.moments[id.index()].as_ref()
    }

    /// One update. Gradients of frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            if g.shape() != store.value(*id).shape() {
                bail!(
                    Shape,
                    "gradient {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    store.get(*id).name,
                    store.value(*id).shape()
                );
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| {
                let shape = g.shape();
                (Tensor::zeros(shape), Tensor::zeros(shape))
            });
            let theta = store.value_mut(*id).data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..theta.len() {
                let gi = g.data()[i];
                theta[i] -= lr * self.weight_decay * theta[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                theta[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.l2_norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}

/// Exponential moving average of the trainable parameters.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    pub ratio: f64,
    shadow: Vec<(ParamId, Tensor)>,
}

impl EmaShadow {
    /// Starts from the current values of the trainable parameters.
    pub fn new(store: &ParamStore, ratio: f64) -> Self {
        let shadow = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, p.value.clone()))
            .collect();
        Self { ratio, shadow }
    }

    /// `shadow ← ratio·shadow + (1 − ratio)·param`.
    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        let r = self.ratio;
        for (id, s) in &mut self.shadow {
            let p = store.value(*id);
            if p.shape() != s.shape() {
                bail!(Shape, "shadow of {} no longer matches its parameter", store.get(*id).name);
            }
            for (si, pi) in s.data_mut().iter_mut().zip(p.data()) {
                *si = r * *si + (1.0 - r) * pi;
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.shadow.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.shadow.iter().map(|(i, t)| (*i, t))
    }

    /// Copy of `store` with shadowed parameters replaced by their averages.
    pub fn apply_to(&self, store: &ParamStore) -> ParamStore {
        let mut out = store.clone();
        for (id, s) in &self.shadow {
            *out.value_mut(*id) = s.clone();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamGroup;

    fn store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Generation, Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = store(1.0);
        let mut opt = AdamW::new(&s, 0.9, 0.95, 1e-8, 0.0);
        opt.step(&mut s, &[(id, Tensor::scalar(2.0))], 0.1).unwrap();
        assert!((s.value(id).item() - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_pure_decay() {
        let (mut s, id) = store(3.0);
        let mut opt = AdamW::new(&s, 0.9, 0.95, 1e-8, 0.0);
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))], 0.1).unwrap();
        assert_eq!(s.value(id).item(), 3.0);
        let mut opt = AdamW::new(&s, 0.9, 0.95, 1e-8, 0.1);
        opt.step(&mut s, &[(id, Tensor::scalar(0.0))], 0.1).unwrap();
        assert!((s.value(id).item() - 3.0 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched_and_shapes_checked() {
        let (mut s, id) = store(1.0);
        s.set_trainable(ParamGroup::Generation, false);
        let mut opt = AdamW::new(&s, 0.9, 0.95, 1e-8, 0.1);
        opt.step(&mut s, &[(id, Tensor::scalar(5.0))], 0.1).unwrap();
        assert_eq!(s.value(id).item(), 1.0);
        assert!(opt.step(&mut s, &[(id, Tensor::zeros(&[2]))], 0.1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![(ParamId(0), Tensor::new(&[2], vec![3.0, 4.0]).unwrap())];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].1.l2_norm_sq() - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 2.0), g[0].1.l2_norm_sq().sqrt());
    }

    #[test]
    fn ema_arithmetic_and_decay() {
        let (mut s, id) = store(1.0);
        let mut ema = EmaShadow::new(&s, 0.995);
        *s.value_mut(id) = Tensor::scalar(0.0);
        ema.update(&s).unwrap();
        assert!((ema.get(id).unwrap().item() - 0.995).abs() < 1e-15);
        for _ in 0..99 {
            ema.update(&s).unwrap();
        }
        assert!((ema.get(id).unwrap().item() - 0.995f64.powi(100)).abs() < 1e-12);

        let (s, id) = store(2.5);
        let mut ema = EmaShadow::new(&s, 0.9);
        ema.update(&s).unwrap();
        assert_eq!(ema.get(id).unwrap().item(), 2.5);
        assert_eq!(ema.apply_to(&s).value(id).item(), 2.5);
    }
}

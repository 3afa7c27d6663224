use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub eta_min: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eta_min: 1e-5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..=self.lr0).contains(&self.eta_min);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment buffers, one per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            t: 0,
            m: store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub state: OptimState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self {
            cfg,
            state: OptimState::new(store),
        }
    }

    /// One update of every trainable parameter from its gradient buffer.
    /// A non-finite gradient leaves all parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(Error::Shape {
                context: "AdamW".into(),
                detail: "optimizer state does not match parameter store".into(),
            });
        }
        if let Some(p) = store
            .iter()
            .find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::Diverged(format!("non-finite gradient in {}", p.name)));
        }
        self.state.t += 1;
        let t = self.state.t as i32;
        let c = &self.cfg;
        let decay = T::of(1.0 - lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.state.m[k], &mut self.state.v[k]);
            for i in 0..p.value.data.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + ob1 * g;
                v[i] = b2 * v[i] + ob2 * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.value.data[i] * decay;
                p.value.data[i] = w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at `t = 0` to `eta_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine_lr: total steps must be > 0".into()));
    }
    if t > total {
        return Err(Error::Config(format!("cosine_lr: step {t} beyond {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap(), true);
        s
    }

    #[test]
    fn decay_only_step() {
        let mut s = store(&[1.0, -2.0, 0.5]);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s, 1e-3).unwrap();
        let f = 1.0 - 1e-3 * 1e-3;
        assert_eq!(s.by_name("w").unwrap().value.data, vec![f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = store(&[0.0, 0.0]);
        s.iter_mut().next().unwrap().grad = vec![3.0, -0.2];
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s, 1e-3).unwrap();
        let w = &s.by_name("w").unwrap().value.data;
        assert!((w[0] + 1e-3).abs() < 1e-9);
        assert!((w[1] - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_limit() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut s = store(&[0.0]);
        let mut opt = AdamW::new(cfg, &s);
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..10_000 {
            s.iter_mut().next().unwrap().grad = vec![0.7];
            opt.step(&mut s, 1e-3).unwrap();
            let w = s.by_name("w").unwrap().value.data[0];
            last = w - prev;
            prev = w;
        }
        assert!((last + 1e-3).abs() < 1e-8, "{last}");
    }

    #[test]
    fn nan_gradient_reports_parameter() {
        let mut s = store(&[1.0]);
        s.iter_mut().next().unwrap().grad = vec![f64::NAN];
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        match opt.step(&mut s, 1e-3) {
            Err(Error::Diverged(m)) => assert!(m.contains('w')),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.by_name("w").unwrap().value.data, vec![1.0]);
        assert_eq!(opt.state.t, 0);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5).unwrap(), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5).unwrap() - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1e-3, 1e-5).is_err());
    }
}

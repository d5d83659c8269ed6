use std::collections::BTreeMap;

use super::{GradStore, NnError, ParamStore};
use crate::autodiff::Tensor;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Bias-corrected Adam moments for one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R: Real = f64> {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<R>>,
    v: BTreeMap<String, Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every tensor in `params`; `grads` is cleared
    /// afterwards. Nothing is modified if any gradient is missing.
    ///
    /// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
    /// `θ ← θ − lr · m̂ / (√v̂ + eps)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
    pub fn step(&mut self, params: &mut ParamStore<R>, grads: &mut GradStore<R>) -> Result<(), NnError> {
        for (name, t) in params.iter() {
            match grads.get(name) {
                Some(g) if g.len() == t.numel() => {}
                Some(g) => {
                    return Err(NnError::Width { layer: name.clone(), expected: t.numel(), got: g.len() });
                }
                None => return Err(NnError::MissingGrad(name.clone())),
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (R::lit(c.beta1), R::lit(c.beta2));
        let t = self.step as i32;
        let bc1 = R::one() - R::lit(c.beta1.powi(t));
        let bc2 = R::one() - R::lit(c.beta2.powi(t));
        let (lr, eps) = (R::lit(c.lr), R::lit(c.eps));
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = grads.get(&name).expect("checked above");
            let p = params.get_mut(&name)?.data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![R::zero(); p.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![R::zero(); p.len()]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (R::one() - b1) * g[i];
                v[i] = b2 * v[i] + (R::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        grads.clear();
        Ok(())
    }

    /// Moments and step counter as tensors named `<prefix>m.<param>`,
    /// `<prefix>v.<param>` and `<prefix>t`, for checkpointing.
    pub fn export(&self, prefix: &str) -> Result<ParamStore<R>, NnError> {
        let mut out = ParamStore::new(0);
        out.insert(format!("{prefix}t"), Tensor::scalar(R::from_u64(self.step).expect("step count fits")))?;
        for (tag, map) in [("m", &self.m), ("v", &self.v)] {
            for (name, vals) in map {
                out.insert(format!("{prefix}{tag}.{name}"), Tensor::new([vals.len()], vals.clone())?)?;
            }
        }
        Ok(out)
    }

    /// Inverse of [`export`](Self::export); tensors outside `prefix` are
    /// ignored.
    pub fn import(config: AdamConfig, store: &ParamStore<R>, prefix: &str) -> Result<Self, NnError> {
        let mut state = Self::new(config);
        let t = store.get(&format!("{prefix}t"))?;
        state.step = t.item().to_u64().ok_or_else(|| NnError::Checkpoint("bad optimiser step".into()))?;
        for (name, tensor) in store.iter() {
            let Some(rest) = name.strip_prefix(prefix) else { continue };
            if let Some(p) = rest.strip_prefix("m.") {
                state.m.insert(p.to_string(), tensor.data().to_vec());
            } else if let Some(p) = rest.strip_prefix("v.") {
                state.v.insert(p.to_string(), tensor.data().to_vec());
            }
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert("w", Tensor::new([1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut s = scalar_store(0.7);
        let before = s.clone();
        let mut a = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            let mut g = GradStore::new();
            g.insert("w", vec![0.0]);
            a.step(&mut s, &mut g).unwrap();
        }
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut a = AdamState::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        let mut g = GradStore::new();
        g.insert("w", vec![1.0]);
        a.step(&mut s, &mut g).unwrap();
        assert!((s.get("w").unwrap().data()[0] + 0.1).abs() < 1e-9);
        assert!(g.is_empty());
    }

    #[test]
    fn two_steps_match_scalar_recurrence() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let g = 0.3;
        let mut s = scalar_store(1.0);
        let mut a = AdamState::new(cfg);
        for _ in 0..2 {
            let mut gs = GradStore::new();
            gs.insert("w", vec![g]);
            a.step(&mut s, &mut gs).unwrap();
        }
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            th -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        assert!((s.get("w").unwrap().data()[0] - th).abs() < 1e-12);
        assert_eq!(a.step_count(), 2);
    }

    #[test]
    fn export_import_continues_identically() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let run = |a: &mut AdamState, s: &mut ParamStore, g: f64| {
            let mut gs = GradStore::new();
            gs.insert("w", vec![g]);
            a.step(s, &mut gs).unwrap();
        };
        let (mut s1, mut a1) = (scalar_store(1.0), AdamState::new(cfg));
        run(&mut a1, &mut s1, 0.3);
        let mut a2 = AdamState::import(cfg, &a1.export("opt.").unwrap(), "opt.").unwrap();
        let mut s2 = s1.clone();
        run(&mut a1, &mut s1, -0.2);
        run(&mut a2, &mut s2, -0.2);
        assert!(s1.bit_eq(&s2));
        assert_eq!(a1, a2);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = scalar_store(0.0);
        s.insert("enc.b", Tensor::zeros([2])).unwrap();
        let mut g = GradStore::new();
        g.insert("w", vec![1.0]);
        let err = AdamState::new(AdamConfig::default()).step(&mut s, &mut g).unwrap_err();
        assert_eq!(err.to_string(), "no gradient for parameter enc.b");
        assert_eq!(s.get("w").unwrap().data()[0], 0.0);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup: usize,
    pub total: usize,
    /// Final learning rate as a fraction of the peak.
    #[serde(default = "default_min_ratio")]
    pub min_ratio: f64,
}

fn default_min_ratio() -> f64 {
    0.1
}

impl Schedule {
    /// Linear warmup from zero, then cosine decay to `peak * min_ratio` at
    /// `total`; constant afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak_lr * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        let min = self.peak_lr * self.min_ratio;
        min + 0.5 * (self.peak_lr - min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_wd() -> f64 {
    0.1
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps(), weight_decay: default_wd() }
    }
}

/// Moments for one parameter store, in store order; frozen entries keep
/// empty moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Moments<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        let shape = |e: &crate::params::ParamEntry<T>| if e.trainable { vec![T::zero(); e.tensor.numel()] } else { Vec::new() };
        Self { m: store.entries().iter().map(shape).collect(), v: store.entries().iter().map(shape).collect() }
    }

    /// Moments as named tensors for checkpointing.
    pub fn named(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for ((e, m), v) in store.entries().iter().zip(&self.m).zip(&self.v) {
            if e.trainable {
                out.push((format!("m.{}", e.name), Tensor::from_parts(e.tensor.shape().to_vec(), m.clone())));
                out.push((format!("v.{}", e.name), Tensor::from_parts(e.tensor.shape().to_vec(), v.clone())));
            }
        }
        out
    }

    pub fn from_named(store: &ParamStore<T>, named: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut out = Self::zeros_like(store);
        for (i, e) in store.entries().iter().enumerate() {
            if !e.trainable {
                continue;
            }
            for (kind, slot) in [("m", &mut out.m[i]), ("v", &mut out.v[i])] {
                let key = format!("{kind}.{}", e.name);
                let t = named
                    .iter()
                    .find(|(n, _)| *n == key)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Format(format!("missing optimizer state `{key}`")))?;
                if t.shape() != e.tensor.shape() {
                    return Err(Error::Format(format!("optimizer state `{key}` has shape {:?}", t.shape())));
                }
                *slot = t.data().to_vec();
            }
        }
        Ok(out)
    }
}

impl AdamW {
    /// One decoupled-decay Adam update of `store` at 1-based step `t`.
    /// `grads[i]` is `None` for frozen entries.
    pub fn update<T: Real>(&self, store: &mut ParamStore<T>, moments: &mut Moments<T>, grads: &[Option<Vec<T>>], lr: f64, t: u64) {
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powf(t as f64);
        let c2 = 1.0 - b2.powf(t as f64);
        let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(self.eps));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (step, ic2) = (T::of(lr / c1), T::of(1.0 / c2));
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            if !e.trainable {
                continue;
            }
            let decay = if e.decay { T::of(1.0 - lr * self.weight_decay) } else { T::one() };
            let m = &mut moments.m[i];
            let v = &mut moments.v[i];
            for (((p, &gi), mi), vi) in e.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = tb1 * *mi + ob1 * gi;
                *vi = tb2 * *vi + ob2 * gi * gi;
                *p = *p * decay - step * *mi / ((*vi * ic2).sqrt() + teps);
            }
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for &v in g {
            sq += v.as_f64() * v.as_f64();
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule { peak_lr: 3e-4, warmup: 100, total: 3000, min_ratio: 0.1 }
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(100) - 3e-4).abs() < 1e-18);
        assert!((s.lr_at(3000) - 3e-5).abs() < 1e-15);
        assert!((s.lr_at(50) - 1.5e-4).abs() < 1e-18);
        // midpoint of the cosine sits halfway between peak and floor
        assert!((s.lr_at(1550) - 1.65e-4).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        store.push("w", Tensor::new([2], vec![0.5, -1.5]).unwrap(), true, true);
        let before = store.clone();
        let mut mom = Moments::zeros_like(&store);
        let opt = AdamW { weight_decay: 0.0, ..AdamW::default() };
        for t in 1..=5 {
            opt.update(&mut store, &mut mom, &[Some(vec![0.0, 0.0])], 1e-2, t);
        }
        assert_eq!(store.entries()[0].tensor, before.entries()[0].tensor);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::new([2], vec![1.0, 1.0]).unwrap(), true, false);
        let mut mom = Moments::zeros_like(&store);
        AdamW::default().update(&mut store, &mut mom, &[Some(vec![0.3, -2.0])], 0.01, 1);
        let d = store.entries()[0].tensor.data();
        assert!((d[0] - 0.99).abs() < 1e-6 && (d[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn decay_shrinks_only_flagged_entries() {
        let mut store = ParamStore::<f64>::new();
        store.push("a", Tensor::new([1], vec![2.0]).unwrap(), true, true);
        store.push("b", Tensor::new([1], vec![2.0]).unwrap(), true, false);
        let mut mom = Moments::zeros_like(&store);
        AdamW::default().update(&mut store, &mut mom, &[Some(vec![0.0]), Some(vec![0.0])], 0.1, 1);
        assert!((store.entries()[0].tensor.data()[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-12);
        assert_eq!(store.entries()[1].tensor.data()[0], 2.0);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Some(vec![3.0f64, 0.0]), None, Some(vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn moments_round_trip() {
        let mut store = ParamStore::<f32>::new();
        store.push("w", Tensor::new([2], vec![0.5, -1.5]).unwrap(), true, true);
        store.push("frozen", Tensor::new([1], vec![0.5]).unwrap(), false, true);
        let mut mom = Moments::zeros_like(&store);
        AdamW::default().update(&mut store, &mut mom, &[Some(vec![0.1, 0.2]), None], 1e-3, 1);
        let named = mom.named(&store);
        assert_eq!(named.len(), 2);
        assert_eq!(Moments::from_named(&store, &named).unwrap(), mom);
    }
}

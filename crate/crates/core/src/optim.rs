//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamW { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. Buffers and parameters without a gradient are left as is.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("adamw", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let (bc1, bc2) = (T::of(bc1), T::of(bc2));
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let param = &store.params()[i];
            if !param.trainable {
                continue;
            }
            let decay = if param.decay { T::of(c.lr * c.weight_decay) } else { T::zero() };
            let mut w = (*param.value).clone();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, wk) in w.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *wk = *wk - decay * *wk - lr * mhat / (vhat.sqrt() + eps);
            }
            store.set(id, w)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::new([2], vec![1.0, -1.0]).unwrap(), false);
        let b = store.add_buffer("b", Tensor::zeros([1]));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![Some(Tensor::new([2], vec![3.0, -0.5]).unwrap()), Some(Tensor::full([1], 1.0))];
        opt.update(&mut store, &grads).unwrap();
        // bias-corrected first step is lr·sign(g)
        assert!((store.get(a).data()[0] - 0.9).abs() < 1e-6);
        assert!((store.get(a).data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(store.get(b).data()[0], 0.0);
    }

    #[test]
    fn decay_only_on_flagged() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full([1], 2.0), true);
        let n = store.add("n", Tensor::full([1], 2.0), false);
        let cfg = AdamWConfig { lr: 0.5, weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, &store);
        let zero = Some(Tensor::zeros([1]));
        opt.update(&mut store, &[zero.clone(), zero]).unwrap();
        assert!((store.get(w).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
        assert_eq!(store.get(n).item(), 2.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(Tensor::new([2], vec![3.0f64, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        let before = g.clone();
        assert!((clip_global_norm(&mut g, 10.0) - 1.0).abs() < 1e-12);
        assert_eq!(g, before);
    }
}

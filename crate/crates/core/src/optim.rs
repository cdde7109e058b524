use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{sc, Matrix, Scalar};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adaptive moments with decoupled weight decay. Decay applies only to
/// projection matrices (parameter names ending in `.w`).
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    first: Vec<Matrix<T>>,
    second: Vec<Matrix<T>>,
    decay: Vec<bool>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        AdamW {
            cfg,
            first: zeros(),
            second: zeros(),
            decay: store.iter().map(|(name, _)| name.ends_with(".w")).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(Error::shape("optimizer state does not match the parameter store"));
        }
        if !grads.all_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = sc::<T>(1.0 - b1.powi(t));
        let c2 = sc::<T>(1.0 - b2.powi(t));
        let (b1, b2) = (sc::<T>(b1), sc::<T>(b2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = sc::<T>(self.cfg.eps);
        let lr_t = sc::<T>(lr);
        let wd = sc::<T>(self.cfg.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let decay = self.decay[i];
            let p = store.get_mut(id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mut update = (*m / c1) / ((*v / c2).sqrt() + eps);
                if decay {
                    update += wd * *p;
                }
                *p -= lr_t * update;
            }
        }
        Ok(())
    }
}

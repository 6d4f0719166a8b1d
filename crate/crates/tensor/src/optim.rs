//! Adam-family optimizer with coupled or decoupled weight decay.
//!
//! Decoupled decay subtracts `lr * wd * theta` directly from the parameter
//! (AdamW); coupled decay folds `wd * theta` into the gradient before the
//! moment update (classic Adam + L2). Both share one code path.

use std::collections::BTreeMap;

use crate::params::{GradAccum, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// true = decoupled (AdamW), false = decay through the gradient.
    pub decoupled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: true,
        }
    }
}

pub struct OptimState<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimState {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn cfg(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that has a gradient entry. Parameters
    /// without gradients this step are untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &GradAccum<T>,
    ) -> Result<(), TensorError> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::ONE - b1;
        let one_m_b2 = T::ONE - b2;
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let wd = T::from_f64(self.cfg.weight_decay);
        let has_decay = self.cfg.weight_decay != 0.0;

        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optim_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
            if !g.all_finite() {
                return Err(TensorError::NonFinite { op: "optim_step" });
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let theta = pd[i];
                let geff = if has_decay && !self.cfg.decoupled {
                    g.data()[i] + wd * theta
                } else {
                    g.data()[i]
                };
                md[i] = b1 * md[i] + one_m_b1 * geff;
                vd[i] = b2 * vd[i] + one_m_b2 * geff * geff;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let mut next = theta - lr * mhat / (vhat.sqrt() + eps);
                if has_decay && self.cfg.decoupled {
                    next -= lr * wd * theta;
                }
                pd[i] = next;
            }
        }
        Ok(())
    }
}

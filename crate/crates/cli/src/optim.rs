//! Adam-family optimizer over a named parameter store.
//!
//! One struct serves both stages: the first stage uses decoupled weight
//! decay (applied directly to the parameter), the second couples the decay
//! into the gradient before the moment updates. Updates walk names in
//! sorted order, so a run's arithmetic is reproducible bit for bit.

use std::collections::BTreeMap;

use strata_tensor::{GradAccum, ParamStore, Tensor};

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

pub struct AdamOpt {
    lr: f32,
    wd: f32,
    decoupled: bool,
    /// Steps of linear warmup from zero; 0 applies `lr` from the start.
    warmup_steps: usize,
    t: u32,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl AdamOpt {
    /// Decoupled decay: the first-stage optimizer.
    pub fn decoupled(lr: f64, wd: f64, warmup_steps: usize) -> Self {
        AdamOpt::new(lr, wd, true, warmup_steps)
    }

    /// Coupled (plain) decay: the second-stage optimizer.
    pub fn coupled(lr: f64, wd: f64, warmup_steps: usize) -> Self {
        AdamOpt::new(lr, wd, false, warmup_steps)
    }

    fn new(lr: f64, wd: f64, decoupled: bool, warmup_steps: usize) -> Self {
        AdamOpt {
            lr: lr as f32,
            wd: wd as f32,
            decoupled,
            warmup_steps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    fn lr_now(&self) -> f32 {
        if self.warmup_steps == 0 || self.t as usize > self.warmup_steps {
            self.lr
        } else {
            self.lr * self.t as f32 / self.warmup_steps as f32
        }
    }

    /// One update from accumulated gradients. `frozen` names are skipped
    /// entirely: no moment state, no decay.
    pub fn step(
        &mut self,
        params: &mut ParamStore<f32>,
        grads: &GradAccum<f32>,
        frozen: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let lr = self.lr_now();
        let bias1 = 1.0 - BETA1.powi(self.t as i32);
        let bias2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            if frozen(name) {
                continue;
            }
            let p = match params.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let gv = if self.decoupled { gv } else { gv + self.wd * *pv };
                *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
                *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
                let m_hat = *mv / bias1;
                let v_hat = *vv / bias2;
                *pv -= lr * m_hat / (v_hat.sqrt() + EPS);
                if self.decoupled {
                    *pv -= lr * self.wd * *pv;
                }
            }
        }
    }
}

//! AdamW with decoupled weight decay.
//!
//! Decay is never applied to the logit scale or to layer-norm gains/biases;
//! everything else (including linear biases and embeddings) decays.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderParams, LOGIT_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.1 }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0,1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// True for parameters that never receive weight decay: the logit scale and
/// layer-norm gains/biases.
pub fn weight_decay_exempt(name: &str) -> bool {
    if name == LOGIT_SCALE {
        return true;
    }
    let mut segs = name.rsplit('.');
    let last = segs.next().unwrap_or("");
    let owner = segs.next().unwrap_or("");
    (last == "gain" || last == "bias") && owner.starts_with("ln")
}

#[derive(Debug, Clone)]
pub struct AdamWState<S: Scalar> {
    hp: AdamWHyper,
    t: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamWState<S> {
    pub fn new(hp: AdamWHyper) -> Result<Self> {
        hp.validate()?;
        Ok(AdamWState { hp, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    /// Rebuilds a state from checkpointed pieces.
    pub fn from_parts(
        hp: AdamWHyper,
        t: u64,
        m: BTreeMap<String, Tensor<S>>,
        v: BTreeMap<String, Tensor<S>>,
    ) -> Result<Self> {
        hp.validate()?;
        if m.len() != v.len() || m.keys().zip(v.keys()).any(|(a, b)| a != b) {
            return Err(Error::Contract(
                "optimizer moment maps name different parameters".to_string(),
            ));
        }
        Ok(AdamWState { hp, t, m, v })
    }

    pub fn hyper(&self) -> &AdamWHyper {
        &self.hp
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<S>>, &BTreeMap<String, Tensor<S>>) {
        (&self.m, &self.v)
    }

    /// One optimizer step over `trainable`, at effective learning rate
    /// `lr_now` (the schedule multiplies the base rate outside).
    pub fn step(
        &mut self,
        params: &mut EncoderParams<S>,
        trainable: &BTreeSet<String>,
        grads: &BTreeMap<String, Tensor<S>>,
        lr_now: f64,
    ) -> Result<()> {
        if !(lr_now >= 0.0 && lr_now.is_finite()) {
            return Err(Error::Input(format!("effective learning rate {lr_now} invalid")));
        }
        self.t += 1;
        let b1 = S::from_f64(self.hp.beta1);
        let b2 = S::from_f64(self.hp.beta2);
        let one = S::ONE;
        let bc1 = S::from_f64(1.0 - self.hp.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.hp.beta2.powi(self.t as i32));
        let eps = S::from_f64(self.hp.eps);
        let lr = S::from_f64(lr_now);

        for name in trainable {
            let grad = grads.get(name).ok_or_else(|| {
                Error::Contract(format!("missing gradient for trainable parameter {name:?}"))
            })?;
            let param = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("unknown trainable parameter {name:?}")))?
                .clone();
            if grad.shape() != param.shape() {
                return Err(Error::dim("adamw_step", param.shape(), grad.shape()));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            if m.shape() != param.shape() || v.shape() != param.shape() {
                return Err(Error::Contract(format!(
                    "optimizer moments for {name:?} have shape {:?}, parameter has {:?}",
                    m.shape(),
                    param.shape()
                )));
            }
            let decay_factor = if weight_decay_exempt(name) {
                one
            } else {
                S::from_f64(1.0 - lr_now * self.hp.weight_decay)
            };
            let g = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            let mut out = param.data().to_vec();
            for i in 0..out.len() {
                md[i] = b1 * md[i] + (one - b1) * g[i];
                vd[i] = b2 * vd[i] + (one - b2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                out[i] = out[i] * decay_factor - lr * m_hat / (v_hat.sqrt() + eps);
            }
            params.insert(name.clone(), Tensor::from_vec(param.shape().to_vec(), out)?);
        }
        Ok(())
    }
}

//! AdamW with decoupled weight decay.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the initial rate to 0 over the run.
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainHyper {
    /// Full-scale defaults: lr 1e-3, batch 288.
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            batch_size: 288,
            steps: 1000,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainHyper {
    /// Desk-scale defaults for the tiny preset.
    pub fn toy() -> Self {
        TrainHyper { batch_size: 32, steps: 600, ..TrainHyper::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !beta_ok(self.betas.0) || !beta_ok(self.betas.1) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate used at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let progress = (step.saturating_sub(1)) as f64 / self.steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamState { m: zeros(), v: zeros() }
    }
}

/// One AdamW update at 1-based `step` with learning rate `lr`.
///
/// Parameters with `decay[i] == false` (biases, norm affines) skip the
/// weight-decay term.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    decay: &[bool],
    state: &mut AdamState<T>,
    hyper: &TrainHyper,
    lr: f64,
    step: usize,
) -> Result<()> {
    assert!(step >= 1, "adamw steps are 1-based");
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Config(format!(
            "adamw: {n} params, {} grads, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    let (b1, b2) = hyper.betas;
    let bc1 = T::from_f64(1.0 - b1.powi(step as i32));
    let bc2 = T::from_f64(1.0 - b2.powi(step as i32));
    let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
    let one = T::ONE;
    let lr_t = T::from_f64(lr);
    let shrink = T::from_f64(lr * hyper.weight_decay);
    let eps = T::from_f64(hyper.eps);
    for i in 0..n {
        let (p, g) = (&mut params[i], &grads[i]);
        if p.shape() != g.shape() {
            return Err(crate::error::TensorError::shapes("adamw", p.shape(), g.shape()).into());
        }
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let decays = decay[i];
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            if decays {
                *w -= shrink * *w;
            }
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

//! Training objective: task loss + `lambda * Σ‖beta‖₁` over switches +
//! `lambda2 * Σ‖W‖ₚᵖ` over linear weights and conv filters.
//!
//! Biases, batchnorm affine parameters and `beta` are not weight-penalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, ParamId, ParamKind};
use crate::network::{Gradients, Network};
use crate::scalar::Scalar;
use crate::switch::add_l1_subgradient;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// L1 strength on switch scales.
    pub lambda: f64,
    /// Weight-norm strength.
    pub lambda2: f64,
    /// Weight-norm exponent, 1 or 2.
    pub p: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            lambda: 0.0,
            lambda2: 0.0,
            p: 2.0,
        }
    }
}

impl PenaltyConfig {
    pub fn new(lambda: f64, lambda2: f64, p: f64) -> Result<Self> {
        let cfg = PenaltyConfig { lambda, lambda2, p };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lambda2 >= 0.0) || !self.lambda2.is_finite() {
            return Err(Error::Config(format!("lambda2 must be >= 0, got {}", self.lambda2)));
        }
        if self.p != 1.0 && self.p != 2.0 {
            return Err(Error::Config(format!("p must be 1 or 2, got {}", self.p)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<S> {
    pub task: S,
    /// `lambda * Σ‖beta‖₁`
    pub switch_penalty: S,
    /// `lambda2 * Σ‖W‖ₚᵖ`
    pub weight_penalty: S,
    pub total: S,
}

/// Mean softmax cross-entropy over a `(batch, classes)` logit matrix.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<(S, Tensor<S>)> {
    if logits.rank() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::dim(format!(
            "logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::arg(format!("label {bad} out of range for {c} classes")));
    }
    let inv_n = S::one() / S::of(n as f64);
    let mut grad = logits.clone();
    let mut loss = S::zero();
    for (row, &y) in grad.data_mut().chunks_mut(c).zip(labels) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let log_z = z.ln();
        // log p_y = (logit_y - max) - log z; row[y] holds exp(logit_y - max).
        loss -= row[y].ln() - log_z;
        for v in row.iter_mut() {
            *v = *v / z * inv_n;
        }
        row[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Weight tensors subject to the `lambda2` penalty.
pub fn penalized_weights<S: Scalar>(net: &Network<S>) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
    net.layers().iter().enumerate().filter_map(|(k, l)| match l {
        Layer::Linear(lin) => Some((ParamId::new(k, ParamKind::Weight), &lin.weight)),
        Layer::Conv2d(conv) => Some((ParamId::new(k, ParamKind::Weight), &conv.weight)),
        _ => None,
    })
}

pub fn smallify_loss<S: Scalar>(task_loss: S, net: &Network<S>, cfg: &PenaltyConfig) -> Result<LossBreakdown<S>> {
    let mut l1 = S::zero();
    for idx in net.switch_indices() {
        l1 += net.switch(idx).expect("switch").beta.norm_p(S::one())?;
    }
    let p = S::of(cfg.p);
    let mut wn = S::zero();
    for (_, w) in penalized_weights(net) {
        wn += w.norm_p(p)?;
    }
    let switch_penalty = S::of(cfg.lambda) * l1;
    let weight_penalty = S::of(cfg.lambda2) * wn;
    Ok(LossBreakdown {
        task: task_loss,
        switch_penalty,
        weight_penalty,
        total: task_loss + switch_penalty + weight_penalty,
    })
}

/// Adds the penalty (sub)gradients to `grads`, creating entries where missing.
pub fn add_penalty_gradients<S: Scalar>(net: &Network<S>, cfg: &PenaltyConfig, grads: &mut Gradients<S>) {
    let lambda = S::of(cfg.lambda);
    if cfg.lambda > 0.0 {
        for idx in net.switch_indices() {
            let beta = &net.switch(idx).expect("switch").beta;
            let id = ParamId::new(idx, ParamKind::Beta);
            if grads.get(&id).is_none() {
                grads.insert(id, Tensor::zeros(beta.shape()));
            }
            add_l1_subgradient(grads.get_mut(&id).expect("inserted"), beta, lambda);
        }
    }
    if cfg.lambda2 > 0.0 {
        let l2 = S::of(cfg.lambda2);
        let two = S::of(2.0);
        let ids: Vec<(ParamId, Tensor<S>)> = penalized_weights(net)
            .map(|(id, w)| {
                let g = if cfg.p == 1.0 {
                    w.map(|v| {
                        if v > S::zero() {
                            l2
                        } else if v < S::zero() {
                            -l2
                        } else {
                            S::zero()
                        }
                    })
                } else {
                    w.map(|v| two * l2 * v)
                };
                (id, g)
            })
            .collect();
        for (id, g) in ids {
            match grads.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => grads.insert(id, g),
            }
        }
    }
}

//! Adam with per-parameter moments that can be shrunk alongside the network,
//! and the plateau learning-rate schedule used for training.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamId;
use crate::network::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Slices to delete from one tensor: `indices` along `axis`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalSpec {
    pub axis: usize,
    pub indices: Vec<usize>,
}

impl RemovalSpec {
    pub fn rows(indices: Vec<usize>) -> Self {
        RemovalSpec { axis: 0, indices }
    }

    pub fn cols(indices: Vec<usize>) -> Self {
        RemovalSpec { axis: 1, indices }
    }

    /// Number of scalars this removes from a tensor of `shape`.
    pub fn removed_len(&self, shape: &[usize]) -> usize {
        let per_slice: usize = shape
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != self.axis)
            .map(|(_, &e)| e)
            .product();
        per_slice * self.indices.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Moments<S> {
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: BTreeMap<ParamId, Moments<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, id: &ParamId) -> Option<&Moments<S>> {
        self.moments.get(id)
    }

    /// Installs moments for a parameter, replacing any existing ones.
    pub fn set_moments(&mut self, id: ParamId, m: Tensor<S>, v: Tensor<S>) -> Result<()> {
        if m.shape() != v.shape() {
            return Err(Error::state(format!(
                "moment shapes {:?} and {:?} differ",
                m.shape(),
                v.shape()
            )));
        }
        self.moments.insert(id, Moments { m, v });
        Ok(())
    }

    pub fn tracked(&self) -> impl Iterator<Item = (&ParamId, &Moments<S>)> {
        self.moments.iter()
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// left alone; `t` advances once per call.
    pub fn step<'a, I>(&mut self, params: I, grads: &Gradients<S>) -> Result<()>
    where
        I: IntoIterator<Item = (ParamId, &'a mut Tensor<S>)>,
    {
        let mut work = Vec::new();
        for (id, p) in params {
            let Some(g) = grads.get(&id) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::state(format!(
                    "gradient {:?} for {id} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(mo) = self.moments.get(&id) {
                if mo.m.shape() != p.shape() {
                    return Err(Error::state(format!(
                        "moments {:?} for {id} do not match parameter {:?}",
                        mo.m.shape(),
                        p.shape()
                    )));
                }
            }
            work.push((id, p, g));
        }

        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let c1 = S::one() - S::of(self.beta1.powi(t));
        let c2 = S::one() - S::of(self.beta2.powi(t));
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for (id, p, g) in work {
            let mo = self.moments.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Deletes the given slices from a parameter's moments. Survivors are untouched.
    pub fn shrink(&mut self, id: ParamId, spec: &RemovalSpec) -> Result<()> {
        if spec.indices.is_empty() {
            return Ok(());
        }
        let Some(mo) = self.moments.get_mut(&id) else {
            return Ok(());
        };
        let m = mo.m.remove_indices(spec.axis, &spec.indices)?;
        let v = mo.v.remove_indices(spec.axis, &spec.indices)?;
        mo.m = m;
        mo.v = v;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            patience: 5,
            factor: 10.0,
            min_lr: 1e-7,
        }
    }
}

/// Divides the learning rate by `factor` after `patience` consecutive
/// epochs without a strict improvement, and requests a stop once it falls
/// below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub config: ScheduleConfig,
    pub best: Option<f64>,
    pub epochs_since_improvement: usize,
    pub stopped: bool,
}

impl PlateauSchedule {
    pub fn new(config: ScheduleConfig) -> Self {
        PlateauSchedule {
            config,
            best: None,
            epochs_since_improvement: 0,
            stopped: false,
        }
    }

    /// Feed one epoch's validation metric (higher is better).
    pub fn update(&mut self, metric: f64, lr: f64) -> (f64, bool) {
        let mut new_lr = lr;
        match self.best {
            Some(b) if !(metric > b) => {
                self.epochs_since_improvement += 1;
                if self.epochs_since_improvement >= self.config.patience {
                    new_lr = lr / self.config.factor;
                    self.epochs_since_improvement = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.epochs_since_improvement = 0;
            }
        }
        // Repeated division leaves rounding noise; 1e-3 / 10^4 must read as 1e-7.
        if new_lr < self.config.min_lr * (1.0 - 1e-9) {
            self.stopped = true;
        }
        (new_lr, self.stopped)
    }
}

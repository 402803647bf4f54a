use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch normalization over `(batch, channels, ...)`.
///
/// Train mode normalizes with the batch statistics (biased variance) and
/// folds them into the running estimates; eval mode uses the running
/// estimates. With `track_running_stats` off the layer always uses batch
/// statistics and cannot be frozen for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: S,
    pub momentum: S,
    pub track_running_stats: bool,
}

pub(crate) struct BnCache<S> {
    pub xhat: Tensor<S>,
    pub inv_std: Vec<S>,
    pub batch_stats: bool,
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]),
            shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: S::of(1e-5),
            momentum: S::of(0.1),
            track_running_stats: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.dim(0)
    }

    pub(crate) fn check(&self) -> Result<()> {
        let c = self.channels();
        let ok = [&self.shift, &self.running_mean, &self.running_var]
            .iter()
            .all(|t| t.shape() == [c]);
        if !ok {
            return Err(Error::dim("batchnorm vectors differ in length"));
        }
        if self.running_var.data().iter().any(|&v| v < S::zero()) {
            return Err(Error::state("batchnorm running variance is negative"));
        }
        Ok(())
    }

    pub(crate) fn forward(&mut self, x: &Tensor<S>, train: bool) -> (Tensor<S>, BnCache<S>) {
        let c = self.channels();
        let (n, inner) = (x.dim(0), x.len() / (x.dim(0) * c));
        let count = S::of((n * inner) as f64);
        let batch_stats = train || !self.track_running_stats;
        let (mean, var) = if batch_stats {
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for s in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let base = (s * c + ch) * inner;
                    *m += x.data()[base..base + inner].iter().copied().sum::<S>();
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for s in 0..n {
                for ch in 0..c {
                    let base = (s * c + ch) * inner;
                    for &v in &x.data()[base..base + inner] {
                        let d = v - mean[ch];
                        var[ch] += d * d;
                    }
                }
            }
            for v in &mut var {
                *v /= count;
            }
            if train && self.track_running_stats {
                let m = self.momentum;
                let unbias = if n * inner > 1 {
                    count / (count - S::one())
                } else {
                    S::one()
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (S::one() - m) * *rm + m * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (S::one() - m) * *rv + m * var[ch] * unbias;
                }
            }
            (mean, var)
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                let (g, b) = (self.gamma.data()[ch], self.shift.data()[ch]);
                for j in base..base + inner {
                    let h = (x.data()[j] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[j] = h;
                    y.data_mut()[j] = g * h + b;
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Returns `(dx, dgamma, dshift)`.
    pub(crate) fn backward(&self, cache: &BnCache<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let c = self.channels();
        let (n, inner) = (g.dim(0), g.len() / (g.dim(0) * c));
        let mut dgamma = vec![S::zero(); c];
        let mut dshift = vec![S::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                for j in base..base + inner {
                    dgamma[ch] += g.data()[j] * cache.xhat.data()[j];
                    dshift[ch] += g.data()[j];
                }
            }
        }
        let mut dx = g.clone();
        let count = S::of((n * inner) as f64);
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                let k = self.gamma.data()[ch] * cache.inv_std[ch];
                for j in base..base + inner {
                    let gj = g.data()[j];
                    dx.data_mut()[j] = if cache.batch_stats {
                        k * (gj - dshift[ch] / count - cache.xhat.data()[j] * dgamma[ch] / count)
                    } else {
                        k * gj
                    };
                }
            }
        }
        (dx, Tensor::vector(dgamma), Tensor::vector(dshift))
    }
}

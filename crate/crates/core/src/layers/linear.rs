use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b_acc, Tensor};

/// Fully connected layer `y = A x + b` with `A` stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.dim(0) != bias.dim(0) {
            return Err(Error::dim(format!(
                "linear weight {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Linear { weight, bias })
    }

    /// Uniform init in `±sqrt(6 / in)`, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        Linear {
            weight: rng.uniform_tensor(&[outputs, inputs], -bound, bound),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn outputs(&self) -> usize {
        self.weight.dim(0)
    }

    pub(crate) fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let (n, i, o) = (x.dim(0), self.inputs(), self.outputs());
        let mut out = vec![S::zero(); n * o];
        gemm_a_bt(n, i, o, x.data(), self.weight.data(), &mut out);
        let b = self.bias.data();
        for row in out.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Tensor::new(vec![n, o], out).expect("linear output shape")
    }

    /// Returns `(dx, dA, db)`.
    pub(crate) fn backward(&self, x: &Tensor<S>, g: &Tensor<S>) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let (n, i, o) = (x.dim(0), self.inputs(), self.outputs());
        let mut dw = vec![S::zero(); o * i];
        gemm_at_b_acc(o, n, i, g.data(), x.data(), &mut dw);
        let mut db = vec![S::zero(); o];
        for row in g.data().chunks(o) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        let mut dx = vec![S::zero(); n * i];
        gemm(n, o, i, g.data(), self.weight.data(), &mut dx);
        (
            Tensor::new(vec![n, i], dx).expect("dx shape"),
            Tensor::new(vec![o, i], dw).expect("dw shape"),
            Tensor::vector(db),
        )
    }
}

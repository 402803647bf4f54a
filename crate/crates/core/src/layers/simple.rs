use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Max pooling over `(channels, height, width)` samples, no padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if self.window == 0 || self.stride == 0 || h < self.window || w < self.window {
            return None;
        }
        Some(((h - self.window) / self.stride + 1, (w - self.window) / self.stride + 1))
    }

    /// Returns the pooled tensor and, per output element, the flat input index it came from.
    pub(crate) fn forward<S: Scalar>(&self, x: &Tensor<S>) -> (Tensor<S>, Vec<usize>) {
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (oh, ow) = self.output_hw(h, w).expect("validated pool geometry");
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for ky in 0..self.window {
                        for kx in 0..self.window {
                            let idx = base + (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    arg.push(best);
                }
            }
        }
        (Tensor::new(vec![n, c, oh, ow], out).expect("pool output shape"), arg)
    }

    pub(crate) fn backward<S: Scalar>(in_shape: &[usize], argmax: &[usize], g: &Tensor<S>) -> Tensor<S> {
        let mut dx = Tensor::zeros(in_shape);
        for (&src, &gv) in argmax.iter().zip(g.data()) {
            dx.data_mut()[src] += gv;
        }
        dx
    }
}

pub(crate) fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

pub(crate) fn relu_backward<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    x.zip_map(g, |xv, gv| if xv > S::zero() { gv } else { S::zero() })
        .expect("relu grad shape")
}

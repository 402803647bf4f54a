//! Layer kernels and the `Layer` enum the network is built from.
//!
//! All kernels operate on batched tensors `(batch, ...sample)`. Shapes quoted
//! in errors are per-sample shapes.

mod batchnorm;
mod conv;
mod linear;
mod simple;

pub use batchnorm::BatchNorm;
pub use conv::Conv2d;
pub use linear::Linear;
pub use simple::MaxPool2d;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::switch::SwitchLayer;
use crate::tensor::Tensor;

pub(crate) use batchnorm::BnCache;
pub(crate) use simple::{relu_backward, relu_forward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Shift,
    Beta,
}

/// A trainable tensor, addressed by layer position and role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl ParamId {
    pub fn new(layer: usize, kind: ParamKind) -> Self {
        ParamId { layer, kind }
    }
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer{}.{:?}", self.layer, self.kind)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar", tag = "type", rename_all = "snake_case")]
pub enum Layer<S> {
    Linear(Linear<S>),
    Conv2d(Conv2d<S>),
    #[serde(rename = "batchnorm")]
    BatchNorm(BatchNorm<S>),
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d(MaxPool2d),
    Flatten,
    Switch(SwitchLayer<S>),
}

pub(crate) enum Cache<S> {
    Input(Tensor<S>),
    BatchNorm(BnCache<S>),
    Pool { in_shape: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
}

/// `(kind, grad)` for each parameter of a layer.
pub(crate) type ParamGrads<S> = Vec<(ParamKind, Tensor<S>)>;

impl<S: Scalar> Layer<S> {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::Flatten => "flatten",
            Layer::Switch(_) => "switch",
        }
    }

    /// Linear or convolution: the layers that own output channels.
    pub fn is_producer(&self) -> bool {
        matches!(self, Layer::Linear(_) | Layer::Conv2d(_))
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |want: String| {
            Err(Error::dim(format!(
                "{} expects {want}, got input {input:?}",
                self.name()
            )))
        };
        match self {
            Layer::Linear(l) => {
                if input != [l.inputs()] {
                    return bad(format!("[{}]", l.inputs()));
                }
                Ok(vec![l.outputs()])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels() {
                    return bad(format!("[{}, h, w]", c.in_channels()));
                }
                match c.output_hw(input[1], input[2]) {
                    Some((h, w)) => Ok(vec![c.out_channels(), h, w]),
                    None => bad("a spatial extent at least the kernel size".into()),
                }
            }
            Layer::BatchNorm(b) => {
                if input.is_empty() || input[0] != b.channels() {
                    return bad(format!("{} channels", b.channels()));
                }
                Ok(input.to_vec())
            }
            Layer::Switch(s) => {
                if input.is_empty() || input[0] != s.channels() {
                    return bad(format!("{} channels", s.channels()));
                }
                Ok(input.to_vec())
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool2d(p) => {
                if input.len() != 3 {
                    return bad("[c, h, w]".into());
                }
                match p.output_hw(input[1], input[2]) {
                    Some((h, w)) => Ok(vec![input[0], h, w]),
                    None => bad("a spatial extent at least the pool window".into()),
                }
            }
            Layer::Flatten => {
                if input.is_empty() {
                    return bad("a non-scalar sample".into());
                }
                Ok(vec![input.iter().product()])
            }
        }
    }

    pub(crate) fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> (Tensor<S>, Cache<S>) {
        match self {
            Layer::Linear(l) => (l.forward(x), Cache::Input(x.clone())),
            Layer::Conv2d(c) => (c.forward(x), Cache::Input(x.clone())),
            Layer::BatchNorm(b) => {
                let (y, cache) = b.forward(x, mode == Mode::Train);
                (y, Cache::BatchNorm(cache))
            }
            Layer::Relu => (relu_forward(x), Cache::Input(x.clone())),
            Layer::MaxPool2d(p) => {
                let (y, argmax) = p.forward(x);
                (
                    y,
                    Cache::Pool {
                        in_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            Layer::Flatten => (flatten(x), Cache::Shape(x.shape().to_vec())),
            Layer::Switch(s) => (s.forward_batch(x), Cache::Input(x.clone())),
        }
    }

    /// Eval-mode forward without side effects or caches.
    pub(crate) fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::BatchNorm(b) if b.track_running_stats => bn_eval(b, x),
            Layer::BatchNorm(b) => b.clone().forward(x, false).0,
            Layer::Relu => relu_forward(x),
            Layer::MaxPool2d(p) => p.forward(x).0,
            Layer::Flatten => flatten(x),
            Layer::Switch(s) => s.forward_batch(x),
        }
    }

    /// Returns the input gradient and `(kind, grad)` for each parameter.
    pub(crate) fn backward(&self, cache: &Cache<S>, g: &Tensor<S>) -> Result<(Tensor<S>, ParamGrads<S>)> {
        let mismatch = || Error::state(format!("tape entry does not belong to a {} layer", self.name()));
        Ok(match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => {
                let (dx, dw, db) = l.backward(x, g);
                (dx, vec![(ParamKind::Weight, dw), (ParamKind::Bias, db)])
            }
            (Layer::Conv2d(c), Cache::Input(x)) => {
                let (dx, dw, db) = c.backward(x, g);
                (dx, vec![(ParamKind::Weight, dw), (ParamKind::Bias, db)])
            }
            (Layer::BatchNorm(b), Cache::BatchNorm(c)) => {
                let (dx, dg, ds) = b.backward(c, g);
                (dx, vec![(ParamKind::Gamma, dg), (ParamKind::Shift, ds)])
            }
            (Layer::Relu, Cache::Input(x)) => (relu_backward(x, g), vec![]),
            (Layer::MaxPool2d(_), Cache::Pool { in_shape, argmax }) => {
                (MaxPool2d::backward(in_shape, argmax, g), vec![])
            }
            (Layer::Flatten, Cache::Shape(shape)) => (g.clone().reshape(shape.clone())?, vec![]),
            (Layer::Switch(s), Cache::Input(x)) => {
                let (dx, db) = s.backward_batch(x, g);
                (dx, vec![(ParamKind::Beta, db)])
            }
            _ => return Err(mismatch()),
        })
    }

    pub fn params(&self) -> Vec<(ParamKind, &Tensor<S>)> {
        match self {
            Layer::Linear(l) => vec![(ParamKind::Weight, &l.weight), (ParamKind::Bias, &l.bias)],
            Layer::Conv2d(c) => vec![(ParamKind::Weight, &c.weight), (ParamKind::Bias, &c.bias)],
            Layer::BatchNorm(b) => vec![(ParamKind::Gamma, &b.gamma), (ParamKind::Shift, &b.shift)],
            Layer::Switch(s) => vec![(ParamKind::Beta, &s.beta)],
            Layer::Relu | Layer::MaxPool2d(_) | Layer::Flatten => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor<S>)> {
        match self {
            Layer::Linear(l) => vec![(ParamKind::Weight, &mut l.weight), (ParamKind::Bias, &mut l.bias)],
            Layer::Conv2d(c) => vec![(ParamKind::Weight, &mut c.weight), (ParamKind::Bias, &mut c.bias)],
            Layer::BatchNorm(b) => vec![(ParamKind::Gamma, &mut b.gamma), (ParamKind::Shift, &mut b.shift)],
            Layer::Switch(s) => vec![(ParamKind::Beta, &mut s.beta)],
            Layer::Relu | Layer::MaxPool2d(_) | Layer::Flatten => vec![],
        }
    }

    pub fn param_mut(&mut self, kind: ParamKind) -> Option<&mut Tensor<S>> {
        self.params_mut().into_iter().find(|(k, _)| *k == kind).map(|(_, t)| t)
    }

    /// Converts weights to another float width.
    pub fn cast<T: Scalar>(&self) -> Layer<T> {
        match self {
            Layer::Linear(l) => Layer::Linear(Linear {
                weight: l.weight.cast(),
                bias: l.bias.cast(),
            }),
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.cast(),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                gamma: b.gamma.cast(),
                shift: b.shift.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                eps: T::of(b.eps.as_f64()),
                momentum: T::of(b.momentum.as_f64()),
                track_running_stats: b.track_running_stats,
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2d(p) => Layer::MaxPool2d(*p),
            Layer::Flatten => Layer::Flatten,
            Layer::Switch(s) => Layer::Switch(SwitchLayer {
                beta: s.beta.cast(),
                active: s.active.clone(),
                ema_mean: s.ema_mean.clone(),
                ema_var: s.ema_var.clone(),
                initialized: s.initialized.clone(),
            }),
        }
    }
}

fn flatten<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let n = x.dim(0);
    x.clone()
        .reshape(vec![n, x.len() / n])
        .expect("flatten keeps element count")
}

fn bn_eval<S: Scalar>(b: &BatchNorm<S>, x: &Tensor<S>) -> Tensor<S> {
    let c = b.channels();
    let inner = x.len() / (x.dim(0) * c);
    let mut y = x.clone();
    for (plane, chunk) in y.data_mut().chunks_mut(inner).enumerate() {
        let ch = plane % c;
        let inv = S::one() / (b.running_var.data()[ch] + b.eps).sqrt();
        let (m, g, s) = (b.running_mean.data()[ch], b.gamma.data()[ch], b.shift.data()[ch]);
        for v in chunk {
            *v = g * ((*v - m) * inv) + s;
        }
    }
    y
}

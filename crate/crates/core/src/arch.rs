//! Declarative architecture descriptions (TOML or JSON).
//!
//! ```toml
//! input = [32]
//!
//! [[layers]]
//! type = "linear"
//! out = 64
//!
//! [[layers]]
//! type = "switch"
//!
//! [[layers]]
//! type = "relu"
//!
//! [[layers]]
//! type = "linear"
//! out = 7
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d};
use crate::network::Network;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::switch::SwitchLayer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        out: usize,
    },
    Conv2d {
        out: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_bn_momentum")]
        momentum: f64,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        window: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
    Switch,
}

fn one() -> usize {
    1
}

fn default_eps() -> f64 {
    1e-5
}

fn default_bn_momentum() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// How switches are initialised when a network is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchInit {
    /// `beta ~ N(0, 1)`.
    Normal,
    /// `beta = 1`, an identity scale.
    Ones,
}

impl ArchSpec {
    /// `input → [linear(h) → switch → relu]* → linear(classes)`.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize, switches: bool) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Linear { out: h });
            if switches {
                layers.push(LayerSpec::Switch);
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Linear { out: classes });
        ArchSpec {
            input: vec![inputs],
            layers,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("architecture: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("architecture: {e}")))
    }

    /// Reads `.json` as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architecture serializes")
    }

    /// Widths of the linear/conv layers, in order.
    pub fn widths(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Linear { out } | LayerSpec::Conv2d { out, .. } => Some(*out),
                _ => None,
            })
            .collect()
    }

    /// Multiplies every linear/conv width except the last layer's by `factor` (rounded, at least 1).
    pub fn scaled(&self, factor: f64) -> Self {
        let last = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Linear { .. } | LayerSpec::Conv2d { .. }));
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LayerSpec::Linear { out } if Some(i) != last => LayerSpec::Linear {
                    out: scale_width(*out, factor),
                },
                LayerSpec::Conv2d {
                    out,
                    kernel,
                    stride,
                    padding,
                } if Some(i) != last => LayerSpec::Conv2d {
                    out: scale_width(*out, factor),
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                },
                other => other.clone(),
            })
            .collect();
        ArchSpec {
            input: self.input.clone(),
            layers,
        }
    }

    /// The same architecture without switch layers.
    pub fn without_switches(&self) -> Self {
        ArchSpec {
            input: self.input.clone(),
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l, LayerSpec::Switch))
                .cloned()
                .collect(),
        }
    }

    /// Instantiates the network; weights drawn from `rng`.
    pub fn build<S: Scalar>(&self, rng: &mut SeededRng, switch_init: SwitchInit) -> Result<Network<S>> {
        let mut shape = self.input.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (k, spec) in self.layers.iter().enumerate() {
            let need = |rank: usize| -> Result<()> {
                if shape.len() != rank {
                    return Err(Error::Config(format!(
                        "layer {k} ({spec:?}) needs rank-{rank} input, got {shape:?}"
                    )));
                }
                Ok(())
            };
            let layer = match *spec {
                LayerSpec::Linear { out } => {
                    need(1)?;
                    Layer::Linear(Linear::init(shape[0], out, rng))
                }
                LayerSpec::Conv2d {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    need(3)?;
                    Layer::Conv2d(Conv2d::init(shape[0], out, kernel, stride, padding, rng))
                }
                LayerSpec::BatchNorm { eps, momentum } => {
                    let mut bn = BatchNorm::new(shape[0]);
                    bn.eps = S::of(eps);
                    bn.momentum = S::of(momentum);
                    Layer::BatchNorm(bn)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2d { window, stride } => Layer::MaxPool2d(MaxPool2d {
                    window,
                    stride: stride.unwrap_or(window),
                }),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Switch => Layer::Switch(match switch_init {
                    SwitchInit::Normal => SwitchLayer::init(shape[0], rng),
                    SwitchInit::Ones => SwitchLayer::ones(shape[0]),
                }),
            };
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::Config(format!("layer {k}: {e}")))?;
            layers.push(layer);
        }
        Network::new(self.input.clone(), layers)
    }
}

fn scale_width(w: usize, factor: f64) -> usize {
    ((w as f64 * factor).round() as usize).max(1)
}

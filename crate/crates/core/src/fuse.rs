//! Folding switches into neighbouring layers and the `.smlf` model file.
//!
//! File layout, all integers and floats little-endian:
//!
//! ```text
//! magic      4 bytes  "SMLF"
//! version    u32      1
//! width      u8       4 (f32) or 8 (f64)
//! rank       u32      input rank, then `rank` u32 extents
//! classes    u32
//! layers     u32      count, then one record per layer:
//!   1 linear     u32 in, u32 out, out·in weights (row-major), out biases
//!   2 conv2d     u32 out_ch, in_ch, kh, kw, stride, padding, filters, out_ch biases
//!   3 batchnorm  u32 channels, eps, gamma, shift, running mean, running var
//!   4 relu
//!   5 maxpool2d  u32 window, u32 stride
//!   6 flatten
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d};
use crate::network::{FoldTarget, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMLF";
pub const FORMAT_VERSION: u32 = 1;

const TAG_LINEAR: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_BN: u8 = 3;
const TAG_RELU: u8 = 4;
const TAG_POOL: u8 = 5;
const TAG_FLATTEN: u8 = 6;

/// A switch-free network ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedModel<S> {
    network: Network<S>,
    classes: usize,
}

fn scale_block<S: Scalar>(w: &mut Tensor<S>, beta: &[S], block: usize) {
    // Consumer linear weight `(out, in)`: column j belongs to channel j / block.
    let cols = w.dim(1);
    for row in w.data_mut().chunks_mut(cols) {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= beta[j / block];
        }
    }
}

/// Multiplies the per-channel parameters a switch would fold into by `scale`.
fn fold_into<S: Scalar>(net: &mut Network<S>, switch: usize, scale: &[S]) -> Result<()> {
    let site = net.switch_site(switch)?;
    match site.fold {
        FoldTarget::Previous(k) => match &mut net.layers_mut()[k] {
            Layer::Linear(l) => {
                l.weight = l.weight.scale_axis(0, scale)?;
                l.bias = l.bias.scale_axis(0, scale)?;
            }
            Layer::Conv2d(c) => {
                c.weight = c.weight.scale_axis(0, scale)?;
                c.bias = c.bias.scale_axis(0, scale)?;
            }
            Layer::BatchNorm(bn) => {
                bn.gamma = bn.gamma.scale_axis(0, scale)?;
                bn.shift = bn.shift.scale_axis(0, scale)?;
            }
            other => return Err(Error::state(format!("cannot fold into {}", other.name()))),
        },
        FoldTarget::Consumer(k) => match &mut net.layers_mut()[k] {
            Layer::Linear(l) => scale_block(&mut l.weight, scale, site.block),
            Layer::Conv2d(c) => c.weight = c.weight.scale_axis(1, scale)?,
            other => return Err(Error::state(format!("cannot fold into {}", other.name()))),
        },
    }
    Ok(())
}

/// Negates `beta[channel]` and compensates in the fold target so outputs are unchanged.
pub fn flip_sign<S: Scalar>(net: &mut Network<S>, switch: usize, channel: usize) -> Result<()> {
    let width = net
        .switch(switch)
        .ok_or_else(|| Error::arg(format!("layer {switch} is not a switch")))?
        .channels();
    if channel >= width {
        return Err(Error::arg(format!("channel {channel} out of range for width {width}")));
    }
    let scale: Vec<S> = (0..width)
        .map(|c| if c == channel { -S::one() } else { S::one() })
        .collect();
    fold_into(net, switch, &scale)?;
    let sw = net.switch_mut(switch).expect("checked");
    sw.beta.data_mut()[channel] = -sw.beta.data()[channel];
    Ok(())
}

/// Folds every switch into its neighbour and drops the switch layers.
///
/// Batchnorm layers must track running statistics; the fused model always
/// runs them in inference mode.
pub fn fuse_network<S: Scalar>(net: &Network<S>) -> Result<FusedModel<S>> {
    for (k, l) in net.layers().iter().enumerate() {
        if let Layer::BatchNorm(bn) = l {
            if !bn.track_running_stats {
                return Err(Error::state(format!(
                    "batchnorm at layer {k} has no running statistics to freeze"
                )));
            }
        }
    }
    let mut work = net.clone();
    for idx in net.switch_indices() {
        let beta = net.switch(idx).expect("switch").beta.data().to_vec();
        fold_into(&mut work, idx, &beta)?;
    }
    let layers: Vec<Layer<S>> = work
        .layers()
        .iter()
        .filter(|l| !matches!(l, Layer::Switch(_)))
        .cloned()
        .collect();
    FusedModel::new(Network::new(net.input_shape().to_vec(), layers)?)
}

impl<S: Scalar> FusedModel<S> {
    /// Wraps a switch-free network with a rank-1 output.
    pub fn new(network: Network<S>) -> Result<Self> {
        if !network.switch_indices().is_empty() {
            return Err(Error::arg("fused model cannot contain switch layers"));
        }
        let out = network.output_shape();
        if out.len() != 1 {
            return Err(Error::dim(format!("model output {out:?} is not a class vector")));
        }
        Ok(FusedModel {
            classes: out[0],
            network,
        })
    }

    pub fn network(&self) -> &Network<S> {
        &self.network
    }

    pub fn into_network(self) -> Network<S> {
        self.network
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shape(&self) -> &[usize] {
        self.network.input_shape()
    }

    pub fn param_count(&self) -> usize {
        self.network.param_count(false)
    }

    /// Logits for one sample or a batch.
    pub fn predict(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.network.predict(x)
    }

    pub fn predict_classes(&self, x: &Tensor<S>) -> Result<Vec<usize>> {
        let y = self.predict(x)?;
        let n = if y.rank() == 1 { 1 } else { y.dim(0) };
        Ok(y.reshape(vec![n, self.classes])?.argmax_rows())
    }

    pub fn cast<T: Scalar>(&self) -> FusedModel<T> {
        FusedModel {
            network: self.network.cast(),
            classes: self.classes,
        }
    }

    pub fn to_f32(&self) -> FusedModel<f32> {
        self.cast()
    }

    /// Serializes with `width` bytes per float (4 or 8).
    pub fn to_bytes(&self, width: u8) -> Result<Vec<u8>> {
        if width != 4 && width != 8 {
            return Err(Error::arg(format!("float width must be 4 or 8, got {width}")));
        }
        let mut w = Writer { buf: Vec::new(), width };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.buf.push(width);
        w.u32(self.input_shape().len() as u32);
        for &d in self.input_shape() {
            w.u32(d as u32);
        }
        w.u32(self.classes as u32);
        w.u32(self.network.layers().len() as u32);
        for layer in self.network.layers() {
            match layer {
                Layer::Linear(l) => {
                    w.buf.push(TAG_LINEAR);
                    w.u32(l.inputs() as u32);
                    w.u32(l.outputs() as u32);
                    w.floats(&l.weight);
                    w.floats(&l.bias);
                }
                Layer::Conv2d(c) => {
                    w.buf.push(TAG_CONV);
                    for d in c.weight.shape() {
                        w.u32(*d as u32);
                    }
                    w.u32(c.stride as u32);
                    w.u32(c.padding as u32);
                    w.floats(&c.weight);
                    w.floats(&c.bias);
                }
                Layer::BatchNorm(bn) => {
                    w.buf.push(TAG_BN);
                    w.u32(bn.channels() as u32);
                    w.float(bn.eps);
                    for t in [&bn.gamma, &bn.shift, &bn.running_mean, &bn.running_var] {
                        w.floats(t);
                    }
                }
                Layer::Relu => w.buf.push(TAG_RELU),
                Layer::MaxPool2d(p) => {
                    w.buf.push(TAG_POOL);
                    w.u32(p.window as u32);
                    w.u32(p.stride as u32);
                }
                Layer::Flatten => w.buf.push(TAG_FLATTEN),
                Layer::Switch(_) => unreachable!("fused models hold no switches"),
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            width: 8,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a .smlf file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported .smlf version {version} (expected {FORMAT_VERSION})"
            )));
        }
        r.width = r.u8()?;
        if r.width != 4 && r.width != 8 {
            return Err(Error::Format(format!("unsupported float width {}", r.width)));
        }
        let rank = r.u32()? as usize;
        let input = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let classes = r.usize()?;
        let count = r.u32()? as usize;
        let mut layers = Vec::new();
        for k in 0..count {
            let tag = r.u8()?;
            let layer = match tag {
                TAG_LINEAR => {
                    let (i, o) = (r.usize()?, r.usize()?);
                    let weight = r.tensor(vec![o, i])?;
                    let bias = r.tensor(vec![o])?;
                    Layer::Linear(Linear::new(weight, bias).map_err(corrupt)?)
                }
                TAG_CONV => {
                    let shape = (0..4).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
                    let (stride, padding) = (r.usize()?, r.usize()?);
                    let oc = shape[0];
                    let weight = r.tensor(shape)?;
                    let bias = r.tensor(vec![oc])?;
                    Layer::Conv2d(Conv2d::new(weight, bias, stride, padding).map_err(corrupt)?)
                }
                TAG_BN => {
                    let c = r.usize()?;
                    let mut bn = BatchNorm::new(c);
                    bn.eps = r.float()?;
                    bn.gamma = r.tensor(vec![c])?;
                    bn.shift = r.tensor(vec![c])?;
                    bn.running_mean = r.tensor(vec![c])?;
                    bn.running_var = r.tensor(vec![c])?;
                    Layer::BatchNorm(bn)
                }
                TAG_RELU => Layer::Relu,
                TAG_POOL => Layer::MaxPool2d(MaxPool2d {
                    window: r.usize()?,
                    stride: r.usize()?,
                }),
                TAG_FLATTEN => Layer::Flatten,
                other => return Err(Error::Corruption(format!("unknown layer tag {other} at layer {k}"))),
            };
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after the last layer",
                bytes.len() - r.pos
            )));
        }
        let model = Network::new(input, layers).and_then(FusedModel::new).map_err(corrupt)?;
        if model.classes != classes {
            return Err(Error::Corruption(format!(
                "header declares {classes} classes, layers produce {}",
                model.classes
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, width: u8) -> Result<()> {
        std::fs::write(path, self.to_bytes(width)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn corrupt(e: Error) -> Error {
    Error::Corruption(format!("inconsistent model: {e}"))
}

struct Writer {
    buf: Vec<u8>,
    width: u8,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn float<S: Scalar>(&mut self, v: S) {
        if self.width == 4 {
            self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        } else {
            self.buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }

    fn floats<S: Scalar>(&mut self, t: &Tensor<S>) {
        for &v in t.data() {
            self.float(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    width: u8,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "truncated file: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn float<S: Scalar>(&mut self) -> Result<S> {
        Ok(if self.width == 4 {
            S::of(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
        } else {
            S::of(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        })
    }

    fn tensor<S: Scalar>(&mut self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if n > 0 && n.saturating_mul(self.width as usize) <= self.buf.len() - self.pos => n,
            Some(0) => return Err(Error::Corruption(format!("zero extent in {shape:?}"))),
            _ => {
                return Err(Error::Corruption(format!(
                    "truncated file: tensor {shape:?} exceeds remaining {} bytes",
                    self.buf.len() - self.pos
                )))
            }
        };
        let data = (0..n).map(|_| self.float()).collect::<Result<Vec<S>>>()?;
        Tensor::new(shape, data)
    }
}

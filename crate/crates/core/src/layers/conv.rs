use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b_acc, Tensor};

/// 2-D convolution over `(channels, height, width)` samples, lowered to a
/// matrix product with im2col.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Conv2d<S> {
    /// `out_ch × in_ch × kh × kw`
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>, stride: usize, padding: usize) -> Result<Self> {
        if weight.rank() != 4 || bias.rank() != 1 || weight.dim(0) != bias.dim(0) {
            return Err(Error::dim(format!(
                "conv filters {:?} with bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::arg("conv stride must be at least 1"));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn init(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: rng.uniform_tensor(&[out_ch, in_ch, kernel, kernel], -bound, bound),
            bias: Tensor::zeros(&[out_ch]),
            stride: stride.max(1),
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim(2), self.weight.dim(3))
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }

    fn geometry(&self, x: &Tensor<S>) -> Geometry {
        let (kh, kw) = self.kernel();
        let (h, w) = (x.dim(2), x.dim(3));
        let (oh, ow) = self.output_hw(h, w).expect("validated conv geometry");
        Geometry {
            c: x.dim(1),
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: self.stride,
            pad: self.padding,
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let n = x.dim(0);
        let g = self.geometry(x);
        let oc = self.out_channels();
        let (rows, pos) = (g.c * g.kh * g.kw, g.oh * g.ow);
        let sample = g.c * g.h * g.w;
        let mut cols = vec![S::zero(); rows * pos];
        let mut out = vec![S::zero(); n * oc * pos];
        for s in 0..n {
            im2col(&x.data()[s * sample..(s + 1) * sample], &g, &mut cols);
            let dst = &mut out[s * oc * pos..(s + 1) * oc * pos];
            gemm(oc, rows, pos, self.weight.data(), &cols, dst);
            for (o, chunk) in dst.chunks_mut(pos).enumerate() {
                let b = self.bias.data()[o];
                for v in chunk {
                    *v += b;
                }
            }
        }
        Tensor::new(vec![n, oc, g.oh, g.ow], out).expect("conv output shape")
    }

    /// Returns `(dx, dfilters, dbias)`.
    pub(crate) fn backward(&self, x: &Tensor<S>, grad: &Tensor<S>) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
        let n = x.dim(0);
        let g = self.geometry(x);
        let oc = self.out_channels();
        let (rows, pos) = (g.c * g.kh * g.kw, g.oh * g.ow);
        let sample = g.c * g.h * g.w;
        let mut cols = vec![S::zero(); rows * pos];
        let mut dcols = vec![S::zero(); rows * pos];
        let mut dw_s = vec![S::zero(); oc * rows];
        let mut dw = vec![S::zero(); oc * rows];
        let mut db = vec![S::zero(); oc];
        let mut dx = vec![S::zero(); n * sample];
        for s in 0..n {
            let gs = &grad.data()[s * oc * pos..(s + 1) * oc * pos];
            im2col(&x.data()[s * sample..(s + 1) * sample], &g, &mut cols);
            gemm_a_bt(oc, pos, rows, gs, &cols, &mut dw_s);
            for (a, &b) in dw.iter_mut().zip(&dw_s) {
                *a += b;
            }
            for (o, chunk) in gs.chunks(pos).enumerate() {
                db[o] += chunk.iter().copied().sum::<S>();
            }
            for v in dcols.iter_mut() {
                *v = S::zero();
            }
            gemm_at_b_acc(rows, oc, pos, self.weight.data(), gs, &mut dcols);
            col2im(&dcols, &g, &mut dx[s * sample..(s + 1) * sample]);
        }
        (
            Tensor::new(x.shape().to_vec(), dx).expect("dx shape"),
            Tensor::new(self.weight.shape().to_vec(), dw).expect("dw shape"),
            Tensor::vector(db),
        )
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Row `(c, ky, kx)`, column `(oy, ox)`.
fn im2col<S: Scalar>(img: &[S], g: &Geometry, cols: &mut [S]) {
    let pos = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * pos..(row + 1) * pos];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => img[(c * g.h + y) * g.w + x],
                            None => S::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(cols: &[S], g: &Geometry, img: &mut [S]) {
    let pos = g.oh * g.ow;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * pos..(row + 1) * pos];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            img[(c * g.h + y) * g.w + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

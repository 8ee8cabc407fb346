//! Layer primitives with explicit forward/backward passes.
//!
//! Activations are NCHW f32 tensors. Convolutions run as im2col + GEMM.
//! The column matrix is laid out kernel-position-major, [cin*9, b*h*w], so
//! building it (and scattering gradients back) reduces to contiguous row
//! copies; the GEMM then multiplies the weight matrix from the left.
//! Everything is deterministic: parallel work writes disjoint memory and
//! all reductions happen in fixed order.

use ndarray::{s, Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rayon::prelude::*;

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    /// [out_channels, in_channels * 9]
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Linear {
    /// [out_features, in_features]
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

/// Negative-side slope of the leaky rectifier, per the reference backbone.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv3x3),
    /// Batch statistics while training, running averages at inference.
    BatchNorm(BatchNorm),
    /// Leaky rectifier; keeps gradient flow through negative activations.
    Relu,
    /// 2x2 max pooling with stride 2 (floor semantics on odd sizes).
    MaxPool2,
    Flatten,
    Linear(Linear),
}

/// Per-layer forward state needed by backward.
pub enum Cache {
    Conv {
        /// [cin*9, b*h*w]
        cols: Array2<f32>,
        in_hw: (usize, usize),
    },
    BatchNorm {
        /// Normalized activations before scale/shift.
        xhat: Array4<f32>,
        inv_std: Array1<f32>,
    },
    Relu {
        mask: Vec<bool>,
    },
    MaxPool {
        arg: Vec<u8>,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        channels: usize,
    },
    Flatten {
        in_shape: (usize, usize, usize),
    },
    Linear {
        input: Array2<f32>,
    },
    None,
}

/// Either spatial (NCHW) or flattened (N x D) activations.
pub enum Act {
    Spatial(Array4<f32>),
    Flat(Array2<f32>),
}

/// Valid source/destination x-ranges for a kernel x-offset: copying row
/// `sy` shifted by `dx` touches dst[x0..x1) from src[x0+dx..x1+dx).
#[inline]
fn shift_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = if dx < 0 { (-dx) as usize } else { 0 };
    let x1 = if dx > 0 { w - dx as usize } else { w };
    (x0, x1)
}

/// Expand an image batch into the kernel-position-major column matrix:
/// row (ci*9 + ky*3 + kx), column (bi*h*w + y*w + x).
pub(crate) fn im2col_3x3(x: ArrayView4<f32>) -> Array2<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let px = h * w;
    let mut cols = Array2::<f32>::zeros((c * 9, b * px));
    let src = x.as_slice().expect("contiguous");
    cols.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(b * px)
        .enumerate()
        .for_each(|(row_idx, dst)| {
            let ci = row_idx / 9;
            let k = row_idx % 9;
            let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
            let (x0, x1) = shift_range(w, dx);
            for bi in 0..b {
                let plane = &src[(bi * c + ci) * px..(bi * c + ci + 1) * px];
                let out = &mut dst[bi * px..(bi + 1) * px];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        continue;
                    }
                    let src_off = sy as usize * w + (x0 as isize + dx) as usize;
                    out[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[src_off..src_off + (x1 - x0)]);
                }
            }
        });
    cols
}

/// Scatter column-space gradients back to image space (adjoint of im2col).
pub(crate) fn col2im_3x3(
    dcols: ArrayView2<f32>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let px = h * w;
    let mut dx_out = Array4::<f32>::zeros((b, c, h, w));
    let dsrc = dcols.as_slice().expect("contiguous");
    // parallel over images: each image's gradient plane is private
    dx_out
        .as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(c * px)
        .enumerate()
        .for_each(|(bi, img)| {
            for ci in 0..c {
                let plane = &mut img[ci * px..(ci + 1) * px];
                for k in 0..9usize {
                    let (dy, dxo) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                    let (x0, x1) = shift_range(w, dxo);
                    let grad = &dsrc[(ci * 9 + k) * b * px + bi * px..(ci * 9 + k) * b * px + (bi + 1) * px];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let dst_off = sy as usize * w + (x0 as isize + dxo) as usize;
                        let g = &grad[y * w + x0..y * w + x1];
                        let d = &mut plane[dst_off..dst_off + (x1 - x0)];
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
        });
    dx_out
}

/// a·b with b's columns split across two rayon tasks; each half fills a
/// disjoint column block, so the result is scheduling-independent.
fn matmul_split_cols(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f32> {
    let n = b.ncols();
    if n < 8192 {
        return a.dot(&b);
    }
    let mid = n / 2;
    let (left, right) = rayon::join(
        || a.dot(&b.slice(s![.., ..mid])),
        || a.dot(&b.slice(s![.., mid..])),
    );
    let mut out = Array2::zeros((a.nrows(), n));
    out.slice_mut(s![.., ..mid]).assign(&left);
    out.slice_mut(s![.., mid..]).assign(&right);
    out
}

/// a·bᵀ with the shared dimension split in two; the partial products are
/// summed in fixed order.
fn matmul_bt_split_k(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f32> {
    let k = a.ncols();
    debug_assert_eq!(k, b.ncols());
    if k < 8192 {
        return a.dot(&b.t());
    }
    let mid = k / 2;
    let (left, right) = rayon::join(
        || a.slice(s![.., ..mid]).dot(&b.slice(s![.., ..mid]).t()),
        || a.slice(s![.., mid..]).dot(&b.slice(s![.., mid..]).t()),
    );
    left + right
}

impl Conv3x3 {
    pub fn forward(&self, x: ArrayView4<f32>) -> (Array4<f32>, Cache) {
        self.forward_impl(x, true)
    }

    /// Forward without keeping the column matrix (inference path).
    pub fn forward_no_cache(&self, x: ArrayView4<f32>) -> Array4<f32> {
        self.forward_impl(x, false).0
    }

    fn forward_impl(&self, x: ArrayView4<f32>, keep: bool) -> (Array4<f32>, Cache) {
        let (b, _c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cols = im2col_3x3(x);
        // [cout, cin*9] . [cin*9, b*h*w] -> [cout, b*h*w]
        let mut mat = matmul_split_cols(self.weight.view(), cols.view());
        for (mut row, &bias) in mat.rows_mut().into_iter().zip(self.bias.iter()) {
            row += bias;
        }
        let out = channelize(mat.view(), b, self.out_channels, h, w);
        let cache = if keep {
            Cache::Conv { cols, in_hw: (h, w) }
        } else {
            Cache::None
        };
        (out, cache)
    }

    /// Returns (dx, dweight, dbias); dx computation can be skipped for the
    /// first layer.
    pub fn backward(
        &self,
        dout: ArrayView4<f32>,
        cache: &Cache,
        need_dx: bool,
    ) -> (Option<Array4<f32>>, Array2<f32>, Array1<f32>) {
        let Cache::Conv { cols, in_hw } = cache else {
            panic!("conv backward got wrong cache");
        };
        let (h, w) = *in_hw;
        let b = dout.shape()[0];
        let dmat = dechannelize(dout); // [cout, b*h*w]
        let dweight = matmul_bt_split_k(dmat.view(), cols.view()); // [cout, cin*9]
        let dbias = dmat.sum_axis(Axis(1));
        let dx = need_dx.then(|| {
            // [cin*9, cout] . [cout, b*h*w]
            let wt = self.weight.t().as_standard_layout().to_owned();
            let dcols = matmul_split_cols(wt.view(), dmat.view());
            col2im_3x3(dcols.view(), b, self.in_channels, h, w)
        });
        (dx, dweight, dbias)
    }
}

/// [c, b*h*w] channel-major matrix -> NCHW tensor (contiguous runs).
fn channelize(mat: ArrayView2<f32>, b: usize, c: usize, h: usize, w: usize) -> Array4<f32> {
    let px = h * w;
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    let src = mat.as_slice().expect("contiguous");
    out.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(c * px)
        .enumerate()
        .for_each(|(bi, chunk)| {
            for ci in 0..c {
                chunk[ci * px..(ci + 1) * px]
                    .copy_from_slice(&src[ci * b * px + bi * px..ci * b * px + (bi + 1) * px]);
            }
        });
    out
}

/// NCHW tensor -> [c, b*h*w] matrix (inverse of `channelize`).
fn dechannelize(x: ArrayView4<f32>) -> Array2<f32> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let px = h * w;
    let mut out = Array2::<f32>::zeros((c, b * px));
    let src = x.as_slice().expect("contiguous");
    out.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(b * px)
        .enumerate()
        .for_each(|(ci, dst)| {
            for bi in 0..b {
                dst[bi * px..(bi + 1) * px]
                    .copy_from_slice(&src[(bi * c + ci) * px..(bi * c + ci + 1) * px]);
            }
        });
    out
}

pub fn relu_forward(x: &mut Act) -> Cache {
    let data: &mut [f32] = match x {
        Act::Spatial(a) => a.as_slice_mut().expect("contiguous"),
        Act::Flat(a) => a.as_slice_mut().expect("contiguous"),
    };
    let mut mask = vec![false; data.len()];
    for (v, m) in data.iter_mut().zip(mask.iter_mut()) {
        if *v > 0.0 {
            *m = true;
        } else {
            *v *= LEAKY_SLOPE;
        }
    }
    Cache::Relu { mask }
}

pub fn relu_backward(dout: &mut Act, cache: &Cache) {
    let Cache::Relu { mask } = cache else {
        panic!("relu backward got wrong cache");
    };
    let data: &mut [f32] = match dout {
        Act::Spatial(a) => a.as_slice_mut().expect("contiguous"),
        Act::Flat(a) => a.as_slice_mut().expect("contiguous"),
    };
    for (v, &m) in data.iter_mut().zip(mask.iter()) {
        if !m {
            *v *= LEAKY_SLOPE;
        }
    }
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training-mode forward: normalize with batch statistics and update
    /// the running averages (unbiased variance convention for the running
    /// estimate).
    pub fn forward_train(&mut self, x: ArrayView4<f32>) -> (Array4<f32>, Cache) {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let n = (b * h * w) as f64;
        let mut out = Array4::<f32>::zeros((b, c, h, w));
        let mut xhat = Array4::<f32>::zeros((b, c, h, w));
        let mut inv_std = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for bi in 0..b {
                for &v in x
                    .index_axis(Axis(0), bi)
                    .index_axis(Axis(0), ci)
                    .iter()
                {
                    sum += v as f64;
                    sumsq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / n;
            let var = (sumsq / n - mean * mean).max(0.0);
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ci] = istd as f32;
            let var_unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
            self.running_mean[ci] =
                (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean as f32;
            self.running_var[ci] =
                (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var_unbiased as f32;
            let (g, be) = (self.gamma[ci] as f64, self.beta[ci] as f64);
            for bi in 0..b {
                let src = x.index_axis(Axis(0), bi);
                let src = src.index_axis(Axis(0), ci);
                let mut xh = xhat.index_axis_mut(Axis(0), bi);
                let mut xh = xh.index_axis_mut(Axis(0), ci);
                let mut dst = out.index_axis_mut(Axis(0), bi);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for ((o, xv), &v) in dst.iter_mut().zip(xh.iter_mut()).zip(src.iter()) {
                    let normalized = (v as f64 - mean) * istd;
                    *xv = normalized as f32;
                    *o = (g * normalized + be) as f32;
                }
            }
        }
        (out, Cache::BatchNorm { xhat, inv_std })
    }

    /// Inference-mode forward with running statistics.
    pub fn forward_eval(&self, x: ArrayView4<f32>) -> Array4<f32> {
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut out = Array4::<f32>::zeros((b, c, h, w));
        for ci in 0..c {
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let scale = self.gamma[ci] * istd;
            let shift = self.beta[ci] - scale * self.running_mean[ci];
            for bi in 0..b {
                let src = x.index_axis(Axis(0), bi);
                let src = src.index_axis(Axis(0), ci);
                let mut dst = out.index_axis_mut(Axis(0), bi);
                let mut dst = dst.index_axis_mut(Axis(0), ci);
                for (o, &v) in dst.iter_mut().zip(src.iter()) {
                    *o = scale * v + shift;
                }
            }
        }
        out
    }

    /// Returns (dx, dgamma, dbeta) for training-mode normalization.
    pub fn backward(
        &self,
        dout: ArrayView4<f32>,
        cache: &Cache,
    ) -> (Array4<f32>, Array1<f32>, Array1<f32>) {
        let Cache::BatchNorm { xhat, inv_std } = cache else {
            panic!("batchnorm backward got wrong cache");
        };
        let (b, c, h, w) = (
            dout.shape()[0],
            dout.shape()[1],
            dout.shape()[2],
            dout.shape()[3],
        );
        let n = (b * h * w) as f64;
        let mut dx = Array4::<f32>::zeros((b, c, h, w));
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        for ci in 0..c {
            let mut sum_d = 0.0f64;
            let mut sum_dx = 0.0f64;
            for bi in 0..b {
                let d = dout.index_axis(Axis(0), bi);
                let d = d.index_axis(Axis(0), ci);
                let xh = xhat.index_axis(Axis(0), bi);
                let xh = xh.index_axis(Axis(0), ci);
                for (&dv, &xv) in d.iter().zip(xh.iter()) {
                    sum_d += dv as f64;
                    sum_dx += dv as f64 * xv as f64;
                }
            }
            dbeta[ci] = sum_d as f32;
            dgamma[ci] = sum_dx as f32;
            let coeff = self.gamma[ci] as f64 * inv_std[ci] as f64 / n;
            for bi in 0..b {
                let d = dout.index_axis(Axis(0), bi);
                let d = d.index_axis(Axis(0), ci);
                let xh = xhat.index_axis(Axis(0), bi);
                let xh = xh.index_axis(Axis(0), ci);
                let mut dd = dx.index_axis_mut(Axis(0), bi);
                let mut dd = dd.index_axis_mut(Axis(0), ci);
                for ((o, &dv), &xv) in dd.iter_mut().zip(d.iter()).zip(xh.iter()) {
                    *o = (coeff * (n * dv as f64 - sum_d - xv as f64 * sum_dx)) as f32;
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

pub fn maxpool2_forward(x: ArrayView4<f32>) -> (Array4<f32>, Cache) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<f32>::zeros((b, c, oh, ow));
    let mut arg = vec![0u8; b * c * oh * ow];
    let src = x.as_slice().expect("contiguous");
    let out_slice = out.as_slice_mut().expect("contiguous");
    out_slice
        .par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (dst, arg_dst))| {
            let p = &src[plane * h * w..(plane + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_k = 0u8;
                    for k in 0..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = p[(2 * y + dy) * w + 2 * xx + dx];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    dst[y * ow + xx] = best;
                    arg_dst[y * ow + xx] = best_k;
                }
            }
        });
    (
        out,
        Cache::MaxPool {
            arg,
            in_hw: (h, w),
            out_hw: (oh, ow),
            channels: c,
        },
    )
}

pub fn maxpool2_backward(dout: ArrayView4<f32>, cache: &Cache) -> Array4<f32> {
    let Cache::MaxPool {
        arg,
        in_hw,
        out_hw,
        channels,
    } = cache
    else {
        panic!("maxpool backward got wrong cache");
    };
    let (h, w) = *in_hw;
    let (oh, ow) = *out_hw;
    let c = *channels;
    let b = dout.shape()[0];
    let mut dx = Array4::<f32>::zeros((b, c, h, w));
    let dsrc = dout.as_slice().expect("contiguous");
    dx.as_slice_mut()
        .expect("contiguous")
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane, dst)| {
            let g = &dsrc[plane * oh * ow..(plane + 1) * oh * ow];
            let a = &arg[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let k = a[y * ow + xx];
                    let (dy, dxo) = ((k / 2) as usize, (k % 2) as usize);
                    dst[(2 * y + dy) * w + 2 * xx + dxo] += g[y * ow + xx];
                }
            }
        });
    dx
}

impl Linear {
    pub fn forward(&self, x: ArrayView2<f32>) -> (Array2<f32>, Cache) {
        let mut out = x.dot(&self.weight.t());
        for mut row in out.rows_mut() {
            row += &self.bias;
        }
        (
            out,
            Cache::Linear {
                input: x.to_owned(),
            },
        )
    }

    pub fn backward(
        &self,
        dout: ArrayView2<f32>,
        cache: &Cache,
    ) -> (Array2<f32>, Array2<f32>, Array1<f32>) {
        let Cache::Linear { input } = cache else {
            panic!("linear backward got wrong cache");
        };
        let dweight = dout.t().dot(input);
        let dbias = dout.sum_axis(Axis(0));
        let dx = dout.dot(&self.weight);
        (dx, dweight, dbias)
    }
}

/// Flatten NCHW to N x (C*H*W). Cheap: the memory layout already matches.
pub fn flatten_forward(x: Array4<f32>) -> (Array2<f32>, Cache) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let flat = x
        .into_shape_with_order(((b, c * h * w), ndarray::Order::RowMajor))
        .expect("flatten");
    (flat, Cache::Flatten { in_shape: (c, h, w) })
}

pub fn flatten_backward(dout: Array2<f32>, cache: &Cache) -> Array4<f32> {
    let Cache::Flatten { in_shape } = cache else {
        panic!("flatten backward got wrong cache");
    };
    let (c, h, w) = *in_shape;
    let b = dout.nrows();
    dout.into_shape_with_order(((b, c, h, w), ndarray::Order::RowMajor))
        .expect("unflatten")
}

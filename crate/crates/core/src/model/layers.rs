//! Layer primitives with explicit forward/backward passes.
//!
//! Convolutions are lowered to matrix products through im2col; everything
//! runs on the CPU in a deterministic, single-threaded evaluation order so
//! that repeated runs with the same seed are bit-identical.

use ndarray::{s, Array1, Array2, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Elem;

/// Output extent of a convolution along one axis.
#[inline]
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one sample `[C, H, W]` into `[C*k*k, OH*OW]` patch columns.
fn im2col_single<T: Elem>(
    x: &ArrayView3<'_, T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<T> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kernel, stride, pad);
    let ow = conv_out_len(w, kernel, stride, pad);
    let mut cols = Array2::<T>::zeros((c * kernel * kernel, oh * ow));
    let xs = x.as_slice().expect("input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let dst_base = row * oh * ow;
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_base = (ci * h + ih as usize) * w;
                    let dst_row = dst_base + ohi * ow;
                    for owi in 0..ow {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cs[dst_row + owi] = xs[src_base + iw as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col_single`]; folds patch-column gradients
/// back onto the input feature map.
fn col2im_single<T: Elem>(
    cols: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let oh = conv_out_len(h, kernel, stride, pad);
    let ow = conv_out_len(w, kernel, stride, pad);
    let mut x = Array4::<T>::zeros((1, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let src_base = row * oh * ow;
                for ohi in 0..oh {
                    let ih = (ohi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + ih as usize) * w;
                    let src_row = src_base + ohi * ow;
                    for owi in 0..ow {
                        let iw = (owi * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        xs[dst_base + iw as usize] = xs[dst_base + iw as usize] + cs[src_row + owi];
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution with square kernel and symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Array4<T>, // [out_c, in_c, k, k]
    pub bias: Option<Array1<T>>,
    pub stride: usize,
    pub padding: usize,
    pub grad_weight: Array4<T>,
    pub grad_bias: Option<Array1<T>>,
}

impl<T: Elem> Conv2d<T> {
    pub fn new(
        out_c: usize,
        in_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self {
            weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            bias: bias.then(|| Array1::zeros(out_c)),
            stride,
            padding,
            grad_weight: Array4::zeros((out_c, in_c, kernel, kernel)),
            grad_bias: bias.then(|| Array1::zeros(out_c)),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.kernel(), self.stride, self.padding),
            conv_out_len(w, self.kernel(), self.stride, self.padding),
        )
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, in_c, h, w) = x.dim();
        let (out_c, w_in_c, k, _) = self.weight.dim();
        assert_eq!(in_c, w_in_c, "conv wired with wrong input channel count");
        let (oh, ow) = self.out_hw(h, w);
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();
        let mut y = Array4::<T>::zeros((n, out_c, oh, ow));
        for ni in 0..n {
            let cols = im2col_single(&x.index_axis(Axis(0), ni), k, self.stride, self.padding);
            let out = w_mat.dot(&cols); // [out_c, oh*ow]
            y.slice_mut(s![ni, .., .., ..])
                .assign(&out.into_shape_with_order((out_c, oh, ow)).unwrap());
        }
        if let Some(b) = &self.bias {
            for ni in 0..n {
                for oc in 0..out_c {
                    y.slice_mut(s![ni, oc, .., ..]).mapv_inplace(|v| v + b[oc]);
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, in_c, h, w) = x.dim();
        let (out_c, _, k, _) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(grad_out.dim(), (n, out_c, oh, ow), "conv grad shape");

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((out_c, in_c * k * k))
            .unwrap();
        let mut grad_in = Array4::<T>::zeros((n, in_c, h, w));
        {
            let mut gw = self
                .grad_weight
                .view_mut()
                .into_shape_with_order((out_c, in_c * k * k))
                .unwrap();
            for ni in 0..n {
                let cols = im2col_single(&x.index_axis(Axis(0), ni), k, self.stride, self.padding);
                let g = grad_out
                    .index_axis(Axis(0), ni)
                    .into_shape_with_order((out_c, oh * ow))
                    .unwrap();
                gw += &g.dot(&cols.t());
                let gin_cols = w_mat.t().dot(&g); // [in_c*k*k, oh*ow]
                let gin = col2im_single(&gin_cols, in_c, h, w, k, self.stride, self.padding);
                let mut dst = grad_in.slice_mut(s![ni, .., .., ..]);
                dst += &gin.index_axis(Axis(0), 0);
            }
        }
        if let Some(gb) = &mut self.grad_bias {
            for ni in 0..n {
                for oc in 0..out_c {
                    let sum = grad_out.slice(s![ni, oc, .., ..]).sum();
                    gb[oc] = gb[oc] + sum;
                }
            }
        }
        grad_in
    }
}

/// Cache produced by a batch-norm forward pass that will be
/// backpropagated through. `frozen` records whether the normalization
/// used batch statistics (training) or the running estimates (frozen
/// inference semantics); the backward rule differs.
#[derive(Debug)]
pub struct BatchNormCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    frozen: bool,
}

/// Batch normalization over `[N, C, H, W]` (per-channel statistics across
/// batch and spatial dims). 1-D normalization reuses this through a
/// `[N, F, 1, 1]` view.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: T,
    pub eps: T,
    pub grad_gamma: Array1<T>,
    pub grad_beta: Array1<T>,
}

impl<T: Elem> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::zeros(channels),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
            grad_gamma: Array1::zeros(channels),
            grad_beta: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes with batch statistics and advances the running estimates
    /// (unbiased variance, as conventional for pretrained imports).
    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BatchNormCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm wired with wrong channels");
        let m = n * h * w;
        let m_t = T::from_f64(m as f64);

        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut sum = T::zero();
            for ni in 0..n {
                sum = sum + x.slice(s![ni, ci, .., ..]).sum();
            }
            mean[ci] = sum / m_t;
        }
        for ci in 0..c {
            let mu = mean[ci];
            let mut acc = T::zero();
            for ni in 0..n {
                for v in x.slice(s![ni, ci, .., ..]).iter() {
                    let d = *v - mu;
                    acc = acc + d * d;
                }
            }
            var[ci] = acc / m_t;
        }

        let mut inv_std = Array1::<T>::zeros(c);
        for ci in 0..c {
            inv_std[ci] = T::one() / (var[ci] + self.eps).sqrt();
        }

        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let mu = mean[ci];
                let is = inv_std[ci];
                let g = self.gamma[ci];
                let b = self.beta[ci];
                let src = x.slice(s![ni, ci, .., ..]);
                let mut xh = xhat.slice_mut(s![ni, ci, .., ..]);
                let mut dst = y.slice_mut(s![ni, ci, .., ..]);
                for ((sv, xv), dv) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                    let normalized = (*sv - mu) * is;
                    *xv = normalized;
                    *dv = g * normalized + b;
                }
            }
        }

        let one = T::one();
        let unbias = if m > 1 {
            T::from_f64(m as f64 / (m as f64 - 1.0))
        } else {
            one
        };
        for ci in 0..c {
            self.running_mean[ci] =
                (one - self.momentum) * self.running_mean[ci] + self.momentum * mean[ci];
            self.running_var[ci] =
                (one - self.momentum) * self.running_var[ci] + self.momentum * var[ci] * unbias;
        }

        (y, BatchNormCache { xhat, inv_std, frozen: false })
    }

    /// Like [`BatchNorm::forward_eval`], but also returns a cache so the
    /// frozen-statistics function can be differentiated. Running
    /// estimates are not advanced.
    pub fn forward_frozen(&self, x: &Array4<T>) -> (Array4<T>, BatchNormCache<T>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm wired with wrong channels");
        let mut inv_std = Array1::<T>::zeros(c);
        for ci in 0..c {
            inv_std[ci] = T::one() / (self.running_var[ci] + self.eps).sqrt();
        }
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let mu = self.running_mean[ci];
                let is = inv_std[ci];
                let g = self.gamma[ci];
                let b = self.beta[ci];
                let src = x.slice(s![ni, ci, .., ..]);
                let mut xh = xhat.slice_mut(s![ni, ci, .., ..]);
                let mut dst = y.slice_mut(s![ni, ci, .., ..]);
                for ((sv, xv), dv) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                    let normalized = (*sv - mu) * is;
                    *xv = normalized;
                    *dv = g * normalized + b;
                }
            }
        }
        (y, BatchNormCache { xhat, inv_std, frozen: true })
    }

    /// Normalizes with the frozen running statistics; no state is mutated.
    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batch-norm wired with wrong channels");
        let mut y = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let mu = self.running_mean[ci];
            let is = T::one() / (self.running_var[ci] + self.eps).sqrt();
            let g = self.gamma[ci];
            let b = self.beta[ci];
            for ni in 0..n {
                let src = x.slice(s![ni, ci, .., ..]);
                let mut dst = y.slice_mut(s![ni, ci, .., ..]);
                for (sv, dv) in src.iter().zip(dst.iter_mut()) {
                    *dv = g * (*sv - mu) * is + b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, grad_out: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = grad_out.dim();
        let m = T::from_f64((n * h * w) as f64);

        let mut sum_g = Array1::<T>::zeros(c);
        let mut sum_gx = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for ni in 0..n {
                let g = grad_out.slice(s![ni, ci, .., ..]);
                let xh = cache.xhat.slice(s![ni, ci, .., ..]);
                for (gv, xv) in g.iter().zip(xh.iter()) {
                    sg = sg + *gv;
                    sgx = sgx + *gv * *xv;
                }
            }
            sum_g[ci] = sg;
            sum_gx[ci] = sgx;
            self.grad_beta[ci] = self.grad_beta[ci] + sg;
            self.grad_gamma[ci] = self.grad_gamma[ci] + sgx;
        }

        let mut grad_in = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let scale = self.gamma[ci] * cache.inv_std[ci];
            // frozen statistics are constants, so their mean-coupling
            // terms vanish and the layer is affine in its input
            let (mean_g, mean_gx) = if cache.frozen {
                (T::zero(), T::zero())
            } else {
                (sum_g[ci] / m, sum_gx[ci] / m)
            };
            for ni in 0..n {
                let g = grad_out.slice(s![ni, ci, .., ..]);
                let xh = cache.xhat.slice(s![ni, ci, .., ..]);
                let mut dst = grad_in.slice_mut(s![ni, ci, .., ..]);
                for ((gv, xv), dv) in g.iter().zip(xh.iter()).zip(dst.iter_mut()) {
                    *dv = scale * (*gv - mean_g - *xv * mean_gx);
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>, // [out, in]
    pub bias: Array1<T>,
    pub grad_weight: Array2<T>,
    pub grad_bias: Array1<T>,
}

impl<T: Elem> Linear<T> {
    pub fn new(out_features: usize, in_features: usize) -> Self {
        Self {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
            grad_weight: Array2::zeros((out_features, in_features)),
            grad_bias: Array1::zeros(out_features),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
        self.grad_weight += &grad_out.t().dot(x);
        self.grad_bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }
}

/// Max pooling with padded borders; padding cells never win ties.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Indices of the winning input cell per output cell, for backprop.
#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_len(h, self.kernel, self.stride, self.padding),
            conv_out_len(w, self.kernel, self.stride, self.padding),
        )
    }

    pub fn forward<T: Elem>(&self, x: &Array4<T>) -> (Array4<T>, MaxPoolCache) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Array4::<T>::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xs = x.as_slice().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best: Option<(T, usize)> = None;
                        for ki in 0..self.kernel {
                            let ih = (ohi * self.stride + ki) as isize - self.padding as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..self.kernel {
                                let iw = (owi * self.stride + kj) as isize - self.padding as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let idx = base + ih as usize * w + iw as usize;
                                let v = xs[idx];
                                // strict > keeps the first maximum on ties
                                if best.map_or(true, |(bv, _)| v > bv) {
                                    best = Some((v, idx));
                                }
                            }
                        }
                        let (v, idx) = best.expect("pool window never empty");
                        y[[ni, ci, ohi, owi]] = v;
                        argmax[((ni * c + ci) * oh + ohi) * ow + owi] = idx;
                    }
                }
            }
        }
        (y, MaxPoolCache { argmax, input_dim: (n, c, h, w) })
    }

    pub fn backward<T: Elem>(&self, cache: &MaxPoolCache, grad_out: &Array4<T>) -> Array4<T> {
        let mut grad_in = Array4::<T>::zeros(cache.input_dim);
        let gin = grad_in.as_slice_mut().unwrap();
        for (g, &idx) in grad_out.iter().zip(cache.argmax.iter()) {
            gin[idx] = gin[idx] + *g;
        }
        grad_in
    }
}

pub fn relu4<T: Elem>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU expressed through the forward *output* `y = relu(x)`.
pub fn relu4_backward<T: Elem>(grad_out: &Array4<T>, y: &Array4<T>) -> Array4<T> {
    let mut g = grad_out.clone();
    for (gv, yv) in g.iter_mut().zip(y.iter()) {
        if !(*yv > T::zero()) {
            *gv = T::zero();
        }
    }
    g
}

/// Stride-2 zero-insertion upsampling: `[N,C,H,W] -> [N,C,2H-1,2W-1]` with
/// inputs at even coordinates and zeros elsewhere. Followed by a 4x4
/// stride-1 convolution with padding 2 this doubles the resolution.
pub fn zero_insert_2x<T: Elem>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<T>::zeros((n, c, 2 * h - 1, 2 * w - 1));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    y[[ni, ci, 2 * hi, 2 * wi]] = x[[ni, ci, hi, wi]];
                }
            }
        }
    }
    y
}

pub fn zero_insert_2x_backward<T: Elem>(grad_out: &Array4<T>) -> Array4<T> {
    let (n, c, h2, w2) = grad_out.dim();
    let (h, w) = ((h2 + 1) / 2, (w2 + 1) / 2);
    let mut g = Array4::<T>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    g[[ni, ci, hi, wi]] = grad_out[[ni, ci, 2 * hi, 2 * wi]];
                }
            }
        }
    }
    g
}

/// Inverted dropout; the kept units are prescaled by `1/(1-p)` so the
/// eval path is the identity.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub prob: f64,
}

impl Dropout {
    /// Returns the masked activations and the mask itself (0 or `1/(1-p)`).
    /// With `p == 0` no random numbers are consumed.
    pub fn forward_train<T: Elem>(
        &self,
        x: &Array2<T>,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<T>, Array2<T>) {
        if self.prob == 0.0 {
            return (x.clone(), Array2::ones(x.dim()));
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - self.prob));
        let mut mask = Array2::<T>::zeros(x.dim());
        for m in mask.iter_mut() {
            let u: f64 = rng.gen::<f64>();
            if u >= self.prob {
                *m = keep_scale;
            }
        }
        (x * &mask, mask)
    }

    pub fn backward<T: Elem>(&self, grad_out: &Array2<T>, mask: &Array2<T>) -> Array2<T> {
        grad_out * mask
    }
}

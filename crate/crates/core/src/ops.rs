//! Forward and backward kernels on plain tensors.
//!
//! These are tape-free; [`crate::autograd::Tape`] records calls to them and
//! replays the matching backward kernel. Inference paths call them directly.

use crate::tensor::{Element, Result, Tensor, TensorError};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<E: Element>(
        input: &Tensor<E>,
        kernel: &Tensor<E>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = input.dims::<4>("conv2d input")?;
        let [out_c, kc, kh, kw] = kernel.dims::<4>("conv2d kernel")?;
        if kc != in_c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: input.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
                detail: format!("input has {in_c} channels but kernel expects {kc}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be at least 1".into(),
            });
        }
        let (out_h, out_w) = match (
            conv_out_dim(in_h, kh, stride, padding),
            conv_out_dim(in_w, kw, stride, padding),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: input.shape().to_vec(),
                    rhs: kernel.shape().to_vec(),
                    detail: format!(
                        "kernel {kh}x{kw} does not fit the {in_h}x{in_w} input with padding {padding}"
                    ),
                })
            }
        };
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            out_h,
            out_w,
            stride,
            padding,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds one image into a `[C*R*S, H'*W']` column matrix.
    fn im2col<E: Element>(&self, image: &[E], cols: &mut [E]) {
        let plane = self.out_plane();
        for c in 0..self.in_c {
            let chan = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let row = (c * self.kh + r) * self.kw + s;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + r) as isize - self.padding as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.in_h as isize {
                            line.fill(E::zero());
                            continue;
                        }
                        let src = &chan[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + s) as isize - self.padding as isize;
                            *v = if iw < 0 || iw >= self.in_w as isize {
                                E::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a column matrix back onto an image, accumulating overlaps.
    fn col2im<E: Element>(&self, cols: &[E], image: &mut [E]) {
        let plane = self.out_plane();
        for c in 0..self.in_c {
            let chan = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for r in 0..self.kh {
                for s in 0..self.kw {
                    let row = (c * self.kh + r) * self.kw + s;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + r) as isize - self.padding as isize;
                        if ih < 0 || ih >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut chan[ih as usize * self.in_w..(ih as usize + 1) * self.in_w];
                        for ow in 0..self.out_w {
                            let iw = (ow * self.stride + s) as isize - self.padding as isize;
                            if iw >= 0 && iw < self.in_w as isize {
                                dst[iw as usize] = dst[iw as usize] + src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation, `[B,C,H,W] * [K,C,R,S] -> [B,K,H',W']`.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![E::zero(); g.batch * g.out_c * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![E::zero(); patch * plane]
    };
    for b in 0..g.batch {
        let image = &input.data()[b * g.in_image()..(b + 1) * g.in_image()];
        let cols_ref: &[E] = if g.is_pointwise() {
            image
        } else {
            g.im2col(image, &mut cols);
            &cols
        };
        let dst = &mut out[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        E::gemm(
            g.out_c,
            patch,
            plane,
            E::one(),
            kernel.data(),
            patch as isize,
            1,
            cols_ref,
            plane as isize,
            1,
            E::zero(),
            dst,
            plane as isize,
            1,
        );
    }
    Tensor::new([g.batch, g.out_c, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
///
/// Either side can be skipped when the caller does not need it.
pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &[E],
    stride: usize,
    padding: usize,
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Vec<E>>, Option<Vec<E>>)> {
    let g = ConvGeom::new(input, kernel, stride, padding)?;
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut grad_in = want_input.then(|| vec![E::zero(); input.numel()]);
    let mut grad_k = want_kernel.then(|| vec![E::zero(); kernel.numel()]);
    let mut cols = vec![E::zero(); patch * plane];
    let mut dcols = vec![E::zero(); patch * plane];
    for b in 0..g.batch {
        let image = &input.data()[b * g.in_image()..(b + 1) * g.in_image()];
        let gout = &grad_out[b * g.out_c * plane..(b + 1) * g.out_c * plane];
        if let Some(gk) = grad_k.as_mut() {
            let cols_ref: &[E] = if g.is_pointwise() {
                image
            } else {
                g.im2col(image, &mut cols);
                &cols
            };
            // dK[K, CRS] += dOut[K, HW] @ cols^T
            E::gemm(
                g.out_c,
                plane,
                patch,
                E::one(),
                gout,
                plane as isize,
                1,
                cols_ref,
                1,
                plane as isize,
                E::one(),
                gk,
                patch as isize,
                1,
            );
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[b * g.in_image()..(b + 1) * g.in_image()];
            if g.is_pointwise() {
                E::gemm(
                    patch,
                    g.out_c,
                    plane,
                    E::one(),
                    kernel.data(),
                    1,
                    patch as isize,
                    gout,
                    plane as isize,
                    1,
                    E::one(),
                    dst,
                    plane as isize,
                    1,
                );
            } else {
                // dCols[CRS, HW] = K^T @ dOut
                E::gemm(
                    patch,
                    g.out_c,
                    plane,
                    E::one(),
                    kernel.data(),
                    1,
                    patch as isize,
                    gout,
                    plane as isize,
                    1,
                    E::zero(),
                    &mut dcols,
                    plane as isize,
                    1,
                );
                g.col2im(&dcols, dst);
            }
        }
    }
    Ok((grad_in, grad_k))
}

pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let data = input.data().iter().map(|&v| v.max(E::zero())).collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

pub fn relu_backward<E: Element>(input: &Tensor<E>, grad_out: &[E]) -> Vec<E> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > E::zero() { g } else { E::zero() })
        .collect()
}

/// Mean over the spatial axes, `[B,C,H,W] -> [B,C]`.
pub fn global_avg_pool<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>> {
    let [b, c, h, w] = input.dims::<4>("global_avg_pool")?;
    let hw = h * w;
    if hw == 0 {
        return Err(TensorError::InvalidArgument {
            op: "global_avg_pool",
            detail: "spatial extent must be at least 1x1".into(),
        });
    }
    let scale = E::of(1.0 / hw as f64);
    let data = input
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<E>() * scale)
        .collect();
    Tensor::new([b, c], data)
}

pub fn global_avg_pool_backward<E: Element>(input_shape: &[usize], grad_out: &[E]) -> Vec<E> {
    let hw = input_shape[2] * input_shape[3];
    let scale = E::of(1.0 / hw as f64);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
        .collect()
}

/// `out[b, o] = sum_k weight[o, k] * input[b, k] + bias[o]`.
pub fn linear<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let [batch, inner] = input.dims::<2>("linear input")?;
    let [outs, w_inner] = weight.dims::<2>("linear weight")?;
    let [b_outs] = bias.dims::<1>("linear bias")?;
    if inner != w_inner || b_outs != outs {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
            detail: format!(
                "input width {inner}, weight {outs}x{w_inner}, bias {b_outs}"
            ),
        });
    }
    let mut out: Vec<E> = bias.data().iter().copied().cycle().take(batch * outs).collect();
    E::gemm(
        batch,
        inner,
        outs,
        E::one(),
        input.data(),
        inner as isize,
        1,
        weight.data(),
        1,
        inner as isize,
        E::one(),
        &mut out,
        outs as isize,
        1,
    );
    Tensor::new([batch, outs], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn linear_backward<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    grad_out: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (batch, inner) = (input.shape()[0], input.shape()[1]);
    let outs = weight.shape()[0];
    let mut d_in = vec![E::zero(); batch * inner];
    E::gemm(
        batch,
        outs,
        inner,
        E::one(),
        grad_out,
        outs as isize,
        1,
        weight.data(),
        inner as isize,
        1,
        E::zero(),
        &mut d_in,
        inner as isize,
        1,
    );
    let mut d_w = vec![E::zero(); outs * inner];
    E::gemm(
        outs,
        batch,
        inner,
        E::one(),
        grad_out,
        1,
        outs as isize,
        input.data(),
        inner as isize,
        1,
        E::zero(),
        &mut d_w,
        inner as isize,
        1,
    );
    let mut d_b = vec![E::zero(); outs];
    for row in grad_out.chunks_exact(outs) {
        d_b.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
    }
    (d_in, d_w, d_b)
}

/// Row-wise softmax of a `[B, K]` logit matrix, stabilized by max subtraction.
pub fn softmax_rows<E: Element>(logits: &[E], classes: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let z: E = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / z);
    }
    out
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`).
///
/// Returns the scalar loss and the softmax probabilities needed by backward.
pub fn softmax_cross_entropy<E: Element>(
    logits: &Tensor<E>,
    labels: &[usize],
) -> Result<(Tensor<E>, Vec<E>)> {
    let [batch, classes] = logits.dims::<2>("softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for a batch of {batch}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            detail: format!("label {bad} out of range for {classes} classes"),
        });
    }
    let mut total = E::zero();
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<E>().ln() + max;
        total = total + (lse - row[label]);
    }
    let probs = softmax_rows(logits.data(), classes);
    let loss = total / E::of(batch as f64);
    Ok((Tensor::scalar(loss), probs))
}

pub fn softmax_cross_entropy_backward<E: Element>(
    probs: &[E],
    labels: &[usize],
    classes: usize,
    upstream: E,
) -> Vec<E> {
    let scale = upstream / E::of(labels.len() as f64);
    let mut grad: Vec<E> = probs.iter().map(|&p| p * scale).collect();
    for (b, &label) in labels.iter().enumerate() {
        grad[b * classes + label] = grad[b * classes + label] - scale;
    }
    grad
}

fn same_shape<E: Element>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
            detail: "shapes must be identical".into(),
        });
    }
    Ok(())
}

/// Mean of squared elementwise differences.
pub fn mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape("mse", a, b)?;
    if a.numel() == 0 {
        return Ok(Tensor::scalar(E::zero()));
    }
    let sum: E = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(Tensor::scalar(sum / E::of(a.numel() as f64)))
}

/// Gradient of [`mse`] with respect to `a`; the gradient for `b` is its negation.
pub fn mse_backward<E: Element>(a: &Tensor<E>, b: &Tensor<E>, upstream: E) -> Vec<E> {
    let scale = E::of(2.0) * upstream / E::of(a.numel().max(1) as f64);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * scale)
        .collect()
}

/// Sum over selected maps of per-map MSE, averaged over the batch.
///
/// `a` and `b` are `[B, K, H, W]`; `mask` is `[B*K]` and picks which
/// `(item, map)` pairs contribute. The result is
/// `(1/B) * sum_{b,k: mask} mean_hw (a - b)^2`.
pub fn selected_map_mse<E: Element>(a: &Tensor<E>, b: &Tensor<E>, mask: &[bool]) -> Result<Tensor<E>> {
    same_shape("selected_map_mse", a, b)?;
    let [batch, maps, h, w] = a.dims::<4>("selected_map_mse")?;
    if mask.len() != batch * maps {
        return Err(TensorError::InvalidArgument {
            op: "selected_map_mse",
            detail: format!("mask has {} entries, expected {}", mask.len(), batch * maps),
        });
    }
    let hw = h * w;
    let mut total = E::zero();
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let xa = &a.data()[idx * hw..(idx + 1) * hw];
        let xb = &b.data()[idx * hw..(idx + 1) * hw];
        let s: E = xa.iter().zip(xb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        total = total + s / E::of(hw as f64);
    }
    Ok(Tensor::scalar(total / E::of(batch.max(1) as f64)))
}

pub fn selected_map_mse_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    mask: &[bool],
    upstream: E,
) -> Vec<E> {
    let (batch, maps) = (a.shape()[0], a.shape()[1]);
    let hw = a.numel() / (batch * maps).max(1);
    let scale = E::of(2.0) * upstream / E::of((hw * batch.max(1)) as f64);
    let mut grad = vec![E::zero(); a.numel()];
    for (idx, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for i in idx * hw..(idx + 1) * hw {
            grad[i] = (a.data()[i] - b.data()[i]) * scale;
        }
    }
    grad
}

/// Per-map min-max normalisation over the trailing two axes:
/// `(x - min) / (max - min + eps)`. A constant map becomes all zeros.
/// Also returns the `(argmin, argmax)` offsets of each map (first on ties).
pub fn map_minmax_normalize<E: Element>(
    x: &Tensor<E>,
    eps: E,
) -> Result<(Tensor<E>, Vec<(usize, usize)>)> {
    if x.shape().len() < 2 {
        return Err(TensorError::Rank {
            op: "map_minmax_normalize",
            expected: 2,
            got: x.shape().to_vec(),
        });
    }
    let n = x.shape().len();
    let hw = x.shape()[n - 2] * x.shape()[n - 1];
    let mut out = vec![E::zero(); x.numel()];
    let mut extrema = Vec::with_capacity(x.numel() / hw.max(1));
    if hw == 0 {
        return Ok((Tensor::new(x.shape().to_vec(), out)?, extrema));
    }
    for (m, map) in x.data().chunks_exact(hw).enumerate() {
        let (mut lo, mut hi) = (0, 0);
        for (i, &v) in map.iter().enumerate() {
            if v < map[lo] {
                lo = i;
            }
            if v > map[hi] {
                hi = i;
            }
        }
        let denom = map[hi] - map[lo] + eps;
        for (o, &v) in out[m * hw..(m + 1) * hw].iter_mut().zip(map) {
            *o = (v - map[lo]) / denom;
        }
        extrema.push((lo, hi));
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, extrema))
}

pub fn map_minmax_normalize_backward<E: Element>(
    x: &Tensor<E>,
    extrema: &[(usize, usize)],
    eps: E,
    upstream: &[E],
) -> Vec<E> {
    let hw = x.numel() / extrema.len().max(1);
    let mut grad = vec![E::zero(); x.numel()];
    for (m, &(lo, hi)) in extrema.iter().enumerate() {
        let map = &x.data()[m * hw..(m + 1) * hw];
        let g = &upstream[m * hw..(m + 1) * hw];
        let denom = map[hi] - map[lo] + eps;
        let (mut gsum, mut gn) = (E::zero(), E::zero());
        for (&gi, &v) in g.iter().zip(map) {
            gsum = gsum + gi;
            gn = gn + gi * (v - map[lo]);
        }
        let out = &mut grad[m * hw..(m + 1) * hw];
        for (o, &gi) in out.iter_mut().zip(g) {
            *o = gi / denom;
        }
        let q = gn / (denom * denom);
        out[lo] = out[lo] - gsum / denom + q;
        out[hi] = out[hi] - q;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct sextuple loop; shares nothing with the im2col path.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
        let [b, c, h, w] = x.dims::<4>("").unwrap();
        let [ko, _, r, s] = k.dims::<4>("").unwrap();
        let oh = (h + 2 * pad - r) / stride + 1;
        let ow = (w + 2 * pad - s) / stride + 1;
        let mut out = vec![0.0; b * ko * oh * ow];
        for bi in 0..b {
            for o in 0..ko {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ri in 0..r {
                                for si in 0..s {
                                    let iy = (y * stride + ri) as isize - pad as isize;
                                    let ix = (xo * stride + si) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * c + ci) * r + ri) * s + si];
                                }
                            }
                        }
                        out[((bi * ko + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn pointwise_ones_kernel_sums_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let k = Tensor::full([1, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        for b in 0..2 {
            for p in 0..20 {
                let want: f64 = (0..3).map(|c| x.data()[(b * 3 + c) * 20 + p]).sum();
                assert!((y.data()[b * 20 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(&[2, 3, 8, 8], &mut rng);
            let k = random(&[4, 3, 3, 3], &mut rng);
            let got = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), stride, pad).unwrap();
            let want = naive_conv(&x, &k, stride, pad);
            assert_eq!(got.numel(), want.len());
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        let k = Tensor::<f32>::zeros([1, 2, 7, 7]);
        assert!(conv2d(&x, &k, 1, 1).is_err());
        let k = Tensor::<f32>::zeros([1, 2, 3, 3]);
        assert!(conv2d(&x, &k, 0, 1).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::<f32>::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::<f32>::full([2, 2], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::<f32>::full([1, 2, 3, 3], 0.7);
        assert!(global_avg_pool(&x).unwrap().data().iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::<f32>::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let zero_b = Tensor::zeros([3]);
        assert_eq!(linear(&x, &eye, &zero_b).unwrap().data(), x.data());
        let bias = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = linear(&x, &Tensor::zeros([3, 3]), &bias).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
        assert!(linear(&x, &Tensor::zeros([3, 2]), &bias).is_err());
    }

    #[test]
    fn linear_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[4, 7], &mut rng);
        let w = random(&[5, 7], &mut rng);
        let b = random(&[5], &mut rng);
        let y = linear(&x.cast::<f32>(), &w.cast::<f32>(), &b.cast::<f32>()).unwrap();
        for i in 0..4 {
            for o in 0..5 {
                let want: f64 =
                    (0..7).map(|k| w.data()[o * 7 + k] * x.data()[i * 7 + k]).sum::<f64>() + b.data()[o];
                assert!((y.data()[i * 5 + o] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::<f64>::zeros([3, 10]);
        let (loss, _) = softmax_cross_entropy(&uniform, &[0, 4, 9]).unwrap();
        assert!((loss.item().unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((loss.item().unwrap() - 2.302585).abs() < 1e-6);

        let mut confident = Tensor::<f32>::zeros([1, 10]);
        confident.data_mut()[3] = 100.0;
        let (loss, _) = softmax_cross_entropy(&confident, &[3]).unwrap();
        assert!(loss.item().unwrap() < 1e-6);

        assert!(softmax_cross_entropy(&uniform, &[0, 4, 10]).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::<f32>::new([2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::<f32>::new([2], vec![2.0, 0.0]).unwrap();
        assert_eq!(mse(&a, &a).unwrap().item().unwrap(), 0.0);
        assert_eq!(mse(&a, &b).unwrap().item().unwrap(), 2.0);
        assert!(mse(&a, &Tensor::zeros([3])).is_err());
    }

    #[test]
    fn selected_map_mse_skips_unmasked_maps() {
        let a = Tensor::<f64>::from_fn([2, 2, 1, 2], |i| i as f64);
        let b = Tensor::<f64>::zeros([2, 2, 1, 2]);
        // maps: [0,1] [2,3] [4,5] [6,7]; keep map 0 of item 0 and map 1 of item 1
        let loss = selected_map_mse(&a, &b, &[true, false, false, true]).unwrap();
        let want = ((0.0 + 1.0) / 2.0 + (36.0 + 49.0) / 2.0) / 2.0;
        assert!((loss.item().unwrap() - want).abs() < 1e-12);
    }
}

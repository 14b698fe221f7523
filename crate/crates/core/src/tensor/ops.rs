//! Forward and backward kernels on plain tensors.
//!
//! Layouts are NCHW for images, `[C2, C1, U, V]` for kernels, `[N, D]` for
//! feature matrices and `[M, D]` for linear weights. Reductions run in a fixed
//! sequential order so results are bitwise reproducible.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Epsilon added to the variance before the square root in batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Output extent of a convolution along one axis, `None` if it would be empty.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c1: usize,
    h1: usize,
    w1: usize,
    c2: usize,
    u: usize,
    v: usize,
    h2: usize,
    w2: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<T: Real>(
        input: &Tensor<T>,
        kernels: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (is, ks) = (input.shape(), kernels.shape());
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {is:?} and kernels {ks:?} must both be rank 4"),
            ));
        }
        if is[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernels expect {}", is[1], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let h2 = conv_out_extent(is[2], ks[2], stride, padding);
        let w2 = conv_out_extent(is[3], ks[3], stride, padding);
        let (Some(h2), Some(w2)) = (h2, w2) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} does not fit input {is:?} with padding {padding}"),
            ));
        };
        Ok(ConvGeom {
            n: is[0],
            c1: is[1],
            h1: is[2],
            w1: is[3],
            c2: ks[0],
            u: ks[2],
            v: ks[3],
            h2,
            w2,
            stride,
            padding,
        })
    }

    fn patch(&self) -> usize {
        self.c1 * self.u * self.v
    }

    fn plane(&self) -> usize {
        self.h2 * self.w2
    }

    fn cols(&self) -> usize {
        self.n * self.plane()
    }

    /// Input coordinate read by output `(oy, ox)` through kernel tap `(ky, kx)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.h1 && x < self.w1).then_some((y, x))
    }
}

/// Unfolds the batch into a `[C1*U*V, N*H2*W2]` patch matrix; zero padding.
fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); g.patch() * cols];
    for i in 0..g.c1 {
        for ky in 0..g.u {
            for kx in 0..g.v {
                let row = (i * g.u + ky) * g.v + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &input[(n * g.c1 + i) * g.h1 * g.w1..][..g.h1 * g.w1];
                    for oy in 0..g.h2 {
                        for ox in 0..g.w2 {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                dst[n * g.plane() + oy * g.w2 + ox] = plane[y * g.w1 + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let width = g.cols();
    let mut out = vec![T::zero(); g.n * g.c1 * g.h1 * g.w1];
    for i in 0..g.c1 {
        for ky in 0..g.u {
            for kx in 0..g.v {
                let row = (i * g.u + ky) * g.v + kx;
                let src = &cols[row * width..(row + 1) * width];
                for n in 0..g.n {
                    let plane = &mut out[(n * g.c1 + i) * g.h1 * g.w1..][..g.h1 * g.w1];
                    for oy in 0..g.h2 {
                        for ox in 0..g.w2 {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                plane[y * g.w1 + x] =
                                    plane[y * g.w1 + x] + src[n * g.plane() + oy * g.w2 + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[C2, N*P]` channel-major buffer to NCHW.
fn channel_major_to_nchw<T: Real>(buf: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); buf.len()];
    for j in 0..c {
        for s in 0..n {
            out[(s * c + j) * plane..][..plane]
                .copy_from_slice(&buf[j * n * plane + s * plane..][..plane]);
        }
    }
    out
}

fn nchw_to_channel_major<T: Real>(buf: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); buf.len()];
    for s in 0..n {
        for j in 0..c {
            out[j * n * plane + s * plane..][..plane]
                .copy_from_slice(&buf[(s * c + j) * plane..][..plane]);
        }
    }
    out
}

/// 2D cross-correlation with zero padding, summing over input channels.
///
/// Each output element accumulates input channels, then kernel rows, then
/// kernel columns, in that order.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernels, stride, padding)?;
    let cols = im2col(input.data(), &g);
    let width = g.cols();
    let patch = g.patch();
    let k = kernels.data();
    let mut out = vec![T::zero(); g.c2 * width];
    for j in 0..g.c2 {
        let dst = &mut out[j * width..(j + 1) * width];
        for r in 0..patch {
            let w = k[j * patch + r];
            let src = &cols[r * width..(r + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + w * s;
            }
        }
    }
    let data = channel_major_to_nchw(&out, g.n, g.c2, g.plane());
    Tensor::new_unchecked(vec![g.n, g.c2, g.h2, g.w2], data).check_finite("conv2d")
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, kernels, stride, padding)?;
    if grad_out.shape() != [g.n, g.c2, g.h2, g.w2] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("gradient shape {:?}", grad_out.shape()),
        ));
    }
    let cols = im2col(input.data(), &g);
    let width = g.cols();
    let patch = g.patch();
    let gout = nchw_to_channel_major(grad_out.data(), g.n, g.c2, g.plane());
    let k = kernels.data();

    let mut dk = vec![T::zero(); g.c2 * patch];
    for j in 0..g.c2 {
        let go = &gout[j * width..(j + 1) * width];
        for r in 0..patch {
            let src = &cols[r * width..(r + 1) * width];
            dk[j * patch + r] = go.iter().zip(src).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        }
    }

    let mut dcols = vec![T::zero(); patch * width];
    for j in 0..g.c2 {
        let go = &gout[j * width..(j + 1) * width];
        for r in 0..patch {
            let w = k[j * patch + r];
            let dst = &mut dcols[r * width..(r + 1) * width];
            for (d, &s) in dst.iter_mut().zip(go) {
                *d = *d + w * s;
            }
        }
    }
    let dx = col2im(&dcols, &g);
    Ok((
        Tensor::new_unchecked(input.shape().to_vec(), dx).check_finite("conv2d_backward")?,
        Tensor::new_unchecked(kernels.shape().to_vec(), dk).check_finite("conv2d_backward")?,
    ))
}

fn check_channel_vec<T: Real>(op: &'static str, c: usize, v: &Tensor<T>, name: &str) -> Result<()> {
    if v.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("{name} has shape {:?}, expected [{c}]", v.shape()),
        ));
    }
    Ok(())
}

fn nchw<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(Error::shape(op, format!("expected NCHW input, got {s:?}"))),
    }
}

/// Adds `bias[j]` to every element of channel `j`.
pub fn add_channel_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = nchw("add_channel_bias", x)?;
    check_channel_vec("add_channel_bias", c, bias, "bias")?;
    let mut out = x.data().to_vec();
    for s in 0..n {
        for j in 0..c {
            let b = bias.data()[j];
            for v in &mut out[(s * c + j) * plane..][..plane] {
                *v = *v + b;
            }
        }
    }
    Tensor::new_unchecked(x.shape().to_vec(), out).check_finite("add_channel_bias")
}

/// Per-channel sums of an NCHW tensor, used for bias and BN shift gradients.
pub fn channel_sums<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = nchw("channel_sums", x)?;
    let mut out = vec![T::zero(); c];
    for s in 0..n {
        for (j, o) in out.iter_mut().enumerate() {
            for &v in &x.data()[(s * c + j) * plane..][..plane] {
                *o = *o + v;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c], out))
}

/// Eval-mode batch norm: `(x - mu) * gamma / sigma + beta` per channel.
pub fn batchnorm2d<T: Real>(
    input: &Tensor<T>,
    mu: &Tensor<T>,
    sigma: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c, plane) = nchw("batchnorm2d", input)?;
    for (v, name) in [(mu, "mu"), (sigma, "sigma"), (gamma, "gamma"), (beta, "beta")] {
        check_channel_vec("batchnorm2d", c, v, name)?;
    }
    if sigma.data().iter().any(|&s| !(s > T::zero())) {
        return Err(Error::Precondition("batch norm sigma must be positive".into()));
    }
    let mut out = input.data().to_vec();
    for s in 0..n {
        for j in 0..c {
            let (m, sd, g, b) = (mu.data()[j], sigma.data()[j], gamma.data()[j], beta.data()[j]);
            for v in &mut out[(s * c + j) * plane..][..plane] {
                *v = (*v - m) * g / sd + b;
            }
        }
    }
    Tensor::new_unchecked(input.shape().to_vec(), out).check_finite("batchnorm2d")
}

/// Per-channel batch mean and biased variance over N, H and W.
pub fn batch_stats<T: Real>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, plane) = nchw("batch_stats", input)?;
    let count = T::from_usize(n * plane);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for j in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            for &v in &input.data()[(s * c + j) * plane..][..plane] {
                acc = acc + v;
            }
        }
        mean[j] = acc / count;
        let mut acc = T::zero();
        for s in 0..n {
            for &v in &input.data()[(s * c + j) * plane..][..plane] {
                let d = v - mean[j];
                acc = acc + d * d;
            }
        }
        var[j] = acc / count;
    }
    Ok((mean, var))
}

/// Training-mode batch norm output and the normalized activations it was built
/// from. Sigma is `sqrt(var + eps)` of the batch.
pub struct BatchNormTrain<T: Real> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub sigma: Vec<T>,
}

pub fn batchnorm2d_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<BatchNormTrain<T>> {
    let (n, c, plane) = nchw("batchnorm2d", input)?;
    check_channel_vec("batchnorm2d", c, gamma, "gamma")?;
    check_channel_vec("batchnorm2d", c, beta, "beta")?;
    let (mean, var) = batch_stats(input)?;
    let eps = T::from_f64(BN_EPS);
    let sigma: Vec<T> = var.iter().map(|&v| (v + eps).sqrt()).collect();
    let mut xhat = input.data().to_vec();
    let mut out = vec![T::zero(); xhat.len()];
    for s in 0..n {
        for j in 0..c {
            let off = (s * c + j) * plane;
            for q in off..off + plane {
                xhat[q] = (xhat[q] - mean[j]) / sigma[j];
                out[q] = xhat[q] * gamma.data()[j] + beta.data()[j];
            }
        }
    }
    Ok(BatchNormTrain {
        output: Tensor::new_unchecked(input.shape().to_vec(), out).check_finite("batchnorm2d")?,
        normalized: Tensor::new_unchecked(input.shape().to_vec(), xhat),
        mean,
        var,
        sigma,
    })
}

/// Gradients of training-mode batch norm w.r.t. input, gamma and beta.
pub fn batchnorm2d_train_backward<T: Real>(
    normalized: &Tensor<T>,
    sigma: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, plane) = nchw("batchnorm2d_backward", normalized)?;
    let count = T::from_usize(n * plane);
    let (xh, go) = (normalized.data(), grad_out.data());
    let mut dx = vec![T::zero(); xh.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for j in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for s in 0..n {
            let off = (s * c + j) * plane;
            for q in off..off + plane {
                sum_g = sum_g + go[q];
                sum_gx = sum_gx + go[q] * xh[q];
            }
        }
        dbeta[j] = sum_g;
        dgamma[j] = sum_gx;
        let scale = gamma.data()[j] / sigma[j];
        let (mean_g, mean_gx) = (sum_g / count, sum_gx / count);
        for s in 0..n {
            let off = (s * c + j) * plane;
            for q in off..off + plane {
                dx[q] = scale * (go[q] - mean_g - xh[q] * mean_gx);
            }
        }
    }
    Ok((
        Tensor::new_unchecked(normalized.shape().to_vec(), dx).check_finite("batchnorm2d_backward")?,
        Tensor::new_unchecked(vec![c], dgamma),
        Tensor::new_unchecked(vec![c], dbeta),
    ))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new_unchecked(x.shape().to_vec(), data)
}

/// `[N, C, H, W] -> [N, C]` spatial mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, plane) = nchw("global_avg_pool", x)?;
    let denom = T::from_usize(plane);
    let data = x
        .data()
        .chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &b| a + b) / denom)
        .collect();
    Ok(Tensor::new_unchecked(vec![n, c], data))
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let plane = input_shape[2] * input_shape[3];
    let denom = T::from_usize(plane);
    let mut data = Vec::with_capacity(grad_out.numel() * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / denom, plane));
    }
    Tensor::new_unchecked(input_shape.to_vec(), data)
}

fn check_linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape(), b.shape()) {
        (&[n, d], &[m, d2], &[m2]) if d == d2 && m == m2 => Ok((n, d, m)),
        (xs, ws, bs) => Err(Error::shape(
            "linear",
            format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
        )),
    }
}

/// `x · wᵀ + b` with `x: [N, D]`, `w: [M, D]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = check_linear(x, w, b)?;
    let mut out = vec![T::zero(); n * m];
    for s in 0..n {
        let row = &x.data()[s * d..(s + 1) * d];
        for o in 0..m {
            let wr = &w.data()[o * d..(o + 1) * d];
            out[s * m + o] = row.iter().zip(wr).fold(b.data()[o], |acc, (&a, &c)| acc + a * c);
        }
    }
    Tensor::new_unchecked(vec![n, m], out).check_finite("linear")
}

/// Gradients of [`linear`] w.r.t. input, weight and bias.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let m = w.shape()[0];
    let go = grad_out.data();
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); m * d];
    let mut db = vec![T::zero(); m];
    for s in 0..n {
        let row = &x.data()[s * d..(s + 1) * d];
        for o in 0..m {
            let g = go[s * m + o];
            db[o] = db[o] + g;
            let wr = &w.data()[o * d..(o + 1) * d];
            for q in 0..d {
                dx[s * d + q] = dx[s * d + q] + g * wr[q];
                dw[o * d + q] = dw[o * d + q] + g * row[q];
            }
        }
    }
    (
        Tensor::new_unchecked(vec![n, d], dx),
        Tensor::new_unchecked(vec![m, d], dw),
        Tensor::new_unchecked(vec![m], db),
    )
}

fn rows<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        &[n, c] => Ok((n, c)),
        s => Err(Error::shape(op, format!("expected [N, C], got {s:?}"))),
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = rows("log_softmax", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new_unchecked(x.shape().to_vec(), out).check_finite("log_softmax")
}

pub fn softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax(x)?.map(T::exp))
}

/// Backward of log-softmax: `g - softmax * Σ g` per row.
pub fn log_softmax_backward<T: Real>(log_probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = log_probs.shape()[1];
    let mut out = Vec::with_capacity(log_probs.numel());
    for (lp, g) in log_probs.data().chunks(c).zip(grad_out.data().chunks(c)) {
        let total: T = g.iter().copied().sum();
        out.extend(lp.iter().zip(g).map(|(&l, &gv)| gv - l.exp() * total));
    }
    Tensor::new_unchecked(log_probs.shape().to_vec(), out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean soft-target cross-entropy `-(1/N) Σ_i Σ_c t_ic log softmax(z_i)_c` and
/// its gradient w.r.t. the logits.
pub fn soft_cross_entropy<T: Real>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    let (n, c) = rows("soft_cross_entropy", logits)?;
    if targets.shape() != logits.shape() {
        return Err(Error::shape(
            "soft_cross_entropy",
            format!("targets {:?} vs logits {:?}", targets.shape(), logits.shape()),
        ));
    }
    let lp = log_softmax(logits)?;
    let nf = T::from_usize(n);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(n * c);
    for (l, t) in lp.data().chunks(c).zip(targets.data().chunks(c)) {
        let mass: T = t.iter().copied().sum();
        for (&lv, &tv) in l.iter().zip(t) {
            loss = loss - tv * lv;
            grad.push((lv.exp() * mass - tv) / nf);
        }
    }
    let loss = loss / nf;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "soft_cross_entropy" });
    }
    Ok((loss, Tensor::new_unchecked(logits.shape().to_vec(), grad)))
}

/// Information-maximization loss: mean per-sample prediction entropy minus
/// `diversity` times the entropy of the mean prediction (nats), with its
/// gradient w.r.t. the logits.
pub fn im_loss<T: Real>(logits: &Tensor<T>, diversity: T) -> Result<(T, Tensor<T>)> {
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "im_loss" });
    }
    let (n, c) = rows("im_loss", logits)?;
    let nf = T::from_usize(n);
    let lp = log_softmax(logits)?;
    let tiny = T::min_positive_value();

    let mut mean_p = vec![T::zero(); c];
    let mut ent = Vec::with_capacity(n);
    for l in lp.data().chunks(c) {
        let mut h = T::zero();
        for (m, &lv) in mean_p.iter_mut().zip(l) {
            let p = lv.exp();
            *m = *m + p;
            h = h - p * lv;
        }
        ent.push(h);
    }
    for m in &mut mean_p {
        *m = *m / nf;
    }
    let log_mean: Vec<T> = mean_p.iter().map(|&m| m.max(tiny).ln()).collect();
    let mean_ent = ent.iter().copied().sum::<T>() / nf;
    let ent_of_mean = mean_p
        .iter()
        .zip(&log_mean)
        .fold(T::zero(), |acc, (&m, &l)| acc - m * l);

    let mut grad = Vec::with_capacity(n * c);
    for (l, &h) in lp.data().chunks(c).zip(&ent) {
        let cross: T = l.iter().zip(&log_mean).map(|(&lv, &lm)| lv.exp() * lm).sum();
        for (&lv, &lm) in l.iter().zip(&log_mean) {
            let p = lv.exp();
            grad.push((-p * (lv + h) + diversity * p * (lm - cross)) / nf);
        }
    }
    let loss = mean_ent - diversity * ent_of_mean;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "im_loss" });
    }
    Ok((loss, Tensor::new_unchecked(logits.shape().to_vec(), grad)))
}

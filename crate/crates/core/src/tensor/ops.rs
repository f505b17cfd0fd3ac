//! Forward and backward kernels on plain tensors.
//!
//! Every differentiable kernel comes as a pair: `foo` computes the forward
//! value and `foo_backward` maps the upstream gradient to input gradients.
//! The tape in [`super::tape`] wires these pairs together.

use super::{numel, Dims, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Broadcasting

/// Output dims of a broadcast between `a` and `b`.
pub fn broadcast_dims(op: &'static str, a: Dims, b: Dims) -> Result<Dims> {
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = match (a[i], b[i]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            (x, y) => {
                return Err(Error::shape(
                    op,
                    format!("axis {i}: {x} vs {y} ({a:?} vs {b:?})"),
                ))
            }
        };
    }
    Ok(out)
}

/// Element strides of `dims` read under broadcast to `out` (0 on repeated axes).
fn broadcast_strides(dims: Dims, out: Dims) -> [usize; 4] {
    let full = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];
    let mut s = [0; 4];
    for i in 0..4 {
        s[i] = if dims[i] == 1 && out[i] != 1 { 0 } else { full[i] };
    }
    s
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out = broadcast_dims(op, a.dims(), b.dims())?;
    let sa = broadcast_strides(a.dims(), out);
    let sb = broadcast_strides(b.dims(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(numel(out));
    for n in 0..out[0] {
        for c in 0..out[1] {
            for h in 0..out[2] {
                let oa = n * sa[0] + c * sa[1] + h * sa[2];
                let ob = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out[3] {
                    data.push(f(ad[oa + w * sa[3]], bd[ob + w * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data)
}

/// Sums a gradient of dims `from` down to `to` over broadcast axes.
pub fn reduce_to(grad: &[f64], from: Dims, to: Dims) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let st = broadcast_strides(to, from);
    let mut out = vec![0.0; numel(to)];
    let mut i = 0;
    for n in 0..from[0] {
        for c in 0..from[1] {
            for h in 0..from[2] {
                let base = n * st[0] + c * st[1] + h * st[2];
                for w in 0..from[3] {
                    out[base + w * st[3]] += grad[i];
                    i += 1;
                }
            }
        }
    }
    out
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("add_broadcast", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("sub_broadcast", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    broadcast_binary("mul_hadamard", a, b, |x, y| x * y)
}

/// Gradients of `a ⊙ b` w.r.t. both operands.
pub fn mul_backward(a: &Tensor, b: &Tensor, grad: &[f64], out: Dims) -> (Vec<f64>, Vec<f64>) {
    let g = Tensor::from_vec(out, grad.to_vec()).expect("grad dims");
    let ga = mul(&g, b).expect("broadcast checked in forward");
    let gb = mul(&g, a).expect("broadcast checked in forward");
    (
        reduce_to(ga.data(), out, a.dims()),
        reduce_to(gb.data(), out, b.dims()),
    )
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    map(x, |v| v * s)
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(x.dims(), x.data().iter().map(|&v| f(v)).collect()).expect("same dims")
}

// ---------------------------------------------------------------------------
// Matrices under the (1, M, K, 1) convention

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let [n, m, k, w] = t.dims();
    if n != 1 || w != 1 {
        return Err(Error::shape(op, format!("expected (1, M, K, 1), got {:?}", t.dims())));
    }
    Ok((m, k))
}

/// `c += a · b` for row-major `m x k` and `k x p` slices.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m x k`, `b: p x k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * p + j] += s;
        }
    }
}

/// `c += aᵀ · b` for `a: k x m`, `b: k x p`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * p..(kk + 1) * p];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * p..(i + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aki * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("matmul", a)?;
    let (k2, p) = matrix_dims("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
    }
    let mut out = vec![0.0; m * p];
    gemm_acc(a.data(), b.data(), &mut out, m, k, p);
    Tensor::from_vec([1, m, p, 1], out)
}

pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let [_, m, k, _] = a.dims();
    let p = b.dims()[2];
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * p];
    gemm_nt_acc(grad, b.data(), &mut ga, m, p, k);
    gemm_tn_acc(a.data(), grad, &mut gb, k, m, p);
    (ga, gb)
}

/// `(1, M, K, 1) -> (1, K, M, 1)`.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims("transpose", x)?;
    let d = x.data();
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..k {
            out[j * m + i] = d[i * k + j];
        }
    }
    Tensor::from_vec([1, k, m, 1], out)
}

// ---------------------------------------------------------------------------
// Pooling

pub fn avg_pool2d(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool2d",
            format!("spatial {h}x{w} not divisible by factor {factor}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let d = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / factor) * ow..(y / factor + 1) * ow];
            for (xx, v) in row.iter().enumerate() {
                drow[xx / factor] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

pub fn avg_pool2d_backward(in_dims: Dims, factor: usize, grad: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = in_dims;
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut gx = vec![0.0; numel(in_dims)];
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                gx[plane * h * w + y * w + xx] =
                    grad[plane * oh * ow + (y / factor) * ow + xx / factor] * inv;
            }
        }
    }
    gx
}

/// Mean over W: `(N, C, H, W) -> (N, C, H, 1)`.
pub fn pool_rows(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if x.is_empty() {
        return Err(Error::shape("pool_rows", "empty tensor"));
    }
    let inv = 1.0 / w as f64;
    let out = x.data().chunks_exact(w).map(|r| r.iter().sum::<f64>() * inv).collect();
    Tensor::from_vec([n, c, h, 1], out)
}

pub fn pool_rows_backward(in_dims: Dims, grad: &[f64]) -> Vec<f64> {
    let w = in_dims[3];
    let inv = 1.0 / w as f64;
    grad.iter().flat_map(|&g| std::iter::repeat_n(g * inv, w)).collect()
}

/// Mean over H: `(N, C, H, W) -> (N, C, 1, W)`.
pub fn pool_cols(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if x.is_empty() {
        return Err(Error::shape("pool_cols", "empty tensor"));
    }
    let inv = 1.0 / h as f64;
    let mut out = vec![0.0; n * c * w];
    for (plane, src) in x.data().chunks_exact(h * w).enumerate() {
        let dst = &mut out[plane * w..(plane + 1) * w];
        for row in src.chunks_exact(w) {
            for (d, v) in dst.iter_mut().zip(row) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Tensor::from_vec([n, c, 1, w], out)
}

pub fn pool_cols_backward(in_dims: Dims, grad: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = in_dims;
    let inv = 1.0 / h as f64;
    let mut gx = Vec::with_capacity(numel(in_dims));
    for plane in 0..n * c {
        let g = &grad[plane * w..(plane + 1) * w];
        for _ in 0..h {
            gx.extend(g.iter().map(|v| v * inv));
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Values kept from a batch-norm forward for its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: NormMode,
    /// Per-channel batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

fn check_channel_param(op: &'static str, name: &str, p: &Tensor, c: usize) -> Result<()> {
    if p.len() != c {
        return Err(Error::shape(op, format!("{name} has {} values, need {c}", p.len())));
    }
    Ok(())
}

/// Per-channel batch normalization over `(N, H, W)`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    mode: NormMode,
    eps: f64,
) -> Result<(Tensor, BatchNormSaved)> {
    let [n, c, h, w] = x.dims();
    for (name, p) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        check_channel_param("batch_norm", name, p, c)?;
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("batch_norm eps must be > 0".into()));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let d = x.data();
    let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
    let (mut batch_mean, mut batch_var) = (Vec::new(), Vec::new());
    match mode {
        NormMode::Train => {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0;
                for b in 0..n {
                    for v in &d[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            batch_mean = mean.clone();
            batch_var = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
        }
        NormMode::Eval => {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; d.len()];
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            for i in base..base + hw {
                let xh = (d[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::from_vec(x.dims(), out)?,
        BatchNormSaved {
            xhat,
            inv_std,
            mode,
            batch_mean,
            batch_var,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    dims: Dims,
    gamma: &Tensor,
    saved: &BatchNormSaved,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += grad[i] * saved.xhat[i];
                dbeta[ch] += grad[i];
            }
        }
    }
    let mut dx = vec![0.0; grad.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let g = gamma.data()[ch];
            let k = g * saved.inv_std[ch];
            for i in base..base + hw {
                dx[i] = match saved.mode {
                    NormMode::Eval => k * grad[i],
                    NormMode::Train => {
                        k * (grad[i] - dbeta[ch] / count - saved.xhat[i] * dgamma[ch] / count)
                    }
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Values kept from a layer-norm forward.
#[derive(Debug, Clone)]
pub struct LayerNormSaved {
    pub xhat: Vec<f64>,
    /// One entry per `(n, h, w)` position.
    pub inv_std: Vec<f64>,
}

/// Normalizes over the channel axis independently at every `(n, h, w)`.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormSaved)> {
    let [n, c, h, w] = x.dims();
    check_channel_param("layer_norm", "gamma", gamma, c)?;
    check_channel_param("layer_norm", "beta", beta, c)?;
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let hw = h * w;
    let d = x.data();
    let mut xhat = vec![0.0; d.len()];
    let mut out = vec![0.0; d.len()];
    let mut inv_std = vec![0.0; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let mean = (0..c).map(|ch| d[idx(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (d[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[b * hw + p] = is;
            for ch in 0..c {
                let xh = (d[idx(ch)] - mean) * is;
                xhat[idx(ch)] = xh;
                out[idx(ch)] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((Tensor::from_vec(x.dims(), out)?, LayerNormSaved { xhat, inv_std }))
}

pub fn layer_norm_backward(
    dims: Dims,
    gamma: &Tensor,
    saved: &LayerNormSaved,
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let mut dx = vec![0.0; grad.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for ch in 0..c {
                let i = idx(ch);
                let gh = grad[i] * gamma.data()[ch];
                sum_g += gh;
                sum_gx += gh * saved.xhat[i];
                dgamma[ch] += grad[i] * saved.xhat[i];
                dbeta[ch] += grad[i];
            }
            let is = saved.inv_std[b * hw + p];
            for ch in 0..c {
                let i = idx(ch);
                let gh = grad[i] * gamma.data()[ch];
                dx[i] = is * (gh - sum_g / c as f64 - saved.xhat[i] * sum_gx / c as f64);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Activations

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, grad: &[f64]) -> Vec<f64> {
    x.data()
        .iter()
        .zip(grad)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

/// Gradient from the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, grad: &[f64]) -> Vec<f64> {
    y.data().iter().zip(grad).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Visits each 1-D line along `axis` as (start offset, stride, length).
fn for_each_line(dims: Dims, axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let strides = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];
    let len = dims[axis];
    let stride = strides[axis];
    let mut other = dims;
    other[axis] = 1;
    for n in 0..other[0] {
        for c in 0..other[1] {
            for h in 0..other[2] {
                for w in 0..other[3] {
                    let start = n * strides[0] + c * strides[1] + h * strides[2] + w * strides[3];
                    f(start, stride, len);
                }
            }
        }
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= 4 {
        return Err(Error::InvalidArgument(format!("softmax axis {axis} out of range")));
    }
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for_each_line(x.dims(), axis, |start, stride, len| {
        let max = (0..len).map(|i| d[start + i * stride]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for i in 0..len {
            let e = (d[start + i * stride] - max).exp();
            out[start + i * stride] = e;
            sum += e;
        }
        for i in 0..len {
            out[start + i * stride] /= sum;
        }
    });
    Tensor::from_vec(x.dims(), out)
}

/// Gradient from the forward output `y = softmax(x, axis)`.
pub fn softmax_backward(y: &Tensor, axis: usize, grad: &[f64]) -> Vec<f64> {
    let d = y.data();
    let mut gx = vec![0.0; d.len()];
    for_each_line(y.dims(), axis, |start, stride, len| {
        let dot: f64 = (0..len).map(|i| d[start + i * stride] * grad[start + i * stride]).sum();
        for i in 0..len {
            let j = start + i * stride;
            gx[j] = d[j] * (grad[j] - dot);
        }
    });
    gx
}

// ---------------------------------------------------------------------------
// Bilinear resampling (align_corners = false)

/// Source taps `(i0, i1, weight of i1)` for each output coordinate.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "upsample_bilinear",
            format!("{h}x{w} -> {out_h}x{out_w}"),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Tensor::from_vec([n, c, out_h, out_w], out)
}

pub fn upsample_bilinear_backward(in_dims: Dims, out_h: usize, out_w: usize, grad: &[f64]) -> Vec<f64> {
    let [n, c, h, w] = in_dims;
    if (h, w) == (out_h, out_w) {
        return grad.to_vec();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut gx = vec![0.0; numel(in_dims)];
    let mut i = 0;
    for plane in 0..n * c {
        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let g = grad[i];
                i += 1;
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Channel and batch bookkeeping

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "empty input list"))?;
    let [n, _, h, w] = first.dims();
    let mut total_c = 0;
    for x in xs {
        let [xn, xc, xh, xw] = x.dims();
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", first.dims(), x.dims()),
            ));
        }
        total_c += xc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for b in 0..n {
        for x in xs {
            let per = x.dims()[1] * hw;
            out.extend_from_slice(&x.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::from_vec([n, total_c, h, w], out)
}

/// Channels `[start, start + len)` of `x`.
pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims();
    if start + len > c || len == 0 {
        return Err(Error::shape(
            "split_channels",
            format!("range {start}..{} of {c} channels", start + len),
        ));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * hw..(b * c + start + len) * hw]);
    }
    Tensor::from_vec([n, len, h, w], out)
}

pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = sizes.iter().sum();
    if total != x.dims()[1] {
        return Err(Error::shape(
            "split_channels",
            format!("sizes {:?} sum to {total}, tensor has {} channels", sizes, x.dims()[1]),
        ));
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&s| {
            let t = slice_channels(x, start, s);
            start += s;
            t
        })
        .collect()
}

pub fn concat_batch(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat_batch", "empty input list"))?;
    let [_, c, h, w] = first.dims();
    let mut n = 0;
    let mut out = Vec::new();
    for x in xs {
        let [xn, xc, xh, xw] = x.dims();
        if (xc, xh, xw) != (c, h, w) {
            return Err(Error::shape(
                "concat_batch",
                format!("{:?} vs {:?}", first.dims(), x.dims()),
            ));
        }
        n += xn;
        out.extend_from_slice(x.data());
    }
    Tensor::from_vec([n, c, h, w], out)
}

// ---------------------------------------------------------------------------
// Loss

/// Mean pixel cross-entropy; `labels` is `(N, H, W)` row-major.
/// Returns the loss and the per-pixel softmax, which the backward needs.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = logits.dims();
    if labels.len() != n * h * w {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for logits {:?}", labels.len(), logits.dims()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let probs = softmax(logits, 1)?;
    let hw = h * w;
    let mut loss = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let l = labels[b * hw + p];
            let lse = {
                let m = (0..c).map(|ch| logits.data()[(b * c + ch) * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                m + (0..c).map(|ch| (logits.data()[(b * c + ch) * hw + p] - m).exp()).sum::<f64>().ln()
            };
            loss += lse - logits.data()[(b * c + l) * hw + p];
        }
    }
    Ok((loss / (n * hw) as f64, probs))
}

pub fn cross_entropy_backward(probs: &Tensor, labels: &[usize], grad: f64) -> Vec<f64> {
    let [n, c, h, w] = probs.dims();
    let hw = h * w;
    let k = grad / (n * hw) as f64;
    let mut gx: Vec<f64> = probs.data().iter().map(|p| p * k).collect();
    for b in 0..n {
        for p in 0..hw {
            gx[(b * c + labels[b * hw + p]) * hw + p] -= k;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(dims: Dims, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(dims, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn add_broadcast_small_case() {
        let a = Tensor::from_vec([1, 1, 2, 1], vec![1.5, 3.5]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 3.0]).unwrap();
        let out = add(&a, &b).unwrap();
        assert_eq!(out.dims(), [1, 1, 2, 2]);
        assert_eq!(out.data(), &[3.5, 4.5, 5.5, 6.5]);
    }

    #[test]
    fn add_zeros_and_mul_ones_are_identity() {
        let mut rng = Rng::new(1);
        let a = random([2, 3, 4, 5], &mut rng);
        assert_eq!(add(&a, &Tensor::zeros(a.dims())).unwrap(), a);
        assert_eq!(mul(&a, &Tensor::ones([1, 1, 1, 1])).unwrap(), a);
        assert_eq!(mul(&a, &Tensor::zeros([1, 3, 1, 1])).unwrap(), Tensor::zeros(a.dims()));
    }

    #[test]
    fn broadcast_rejects_incompatible_axes() {
        let a = Tensor::zeros([1, 2, 3, 1]);
        let b = Tensor::zeros([1, 3, 3, 1]);
        assert!(matches!(add(&a, &b), Err(Error::Shape { .. })));
        assert!(mul(&a, &b).is_err());
    }

    #[test]
    fn reduce_to_sums_broadcast_axes() {
        let g = vec![1.0; 2 * 3 * 4 * 5];
        let r = reduce_to(&g, [2, 3, 4, 5], [1, 3, 1, 5]);
        assert_eq!(r.len(), 15);
        assert!(r.iter().all(|&v| v == 8.0));
    }

    #[test]
    fn matmul_identity_and_ones() {
        let mut rng = Rng::new(2);
        let b = random([1, 3, 4, 1], &mut rng);
        let eye = Tensor::from_fn([1, 3, 3, 1], |[_, i, j, _]| if i == j { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let k = 6;
        let out = matmul(&Tensor::ones([1, 1, k, 1]), &Tensor::ones([1, k, 1, 1])).unwrap();
        assert_eq!(out.data(), &[k as f64]);
        assert!(matmul(&Tensor::ones([1, 2, 3, 1]), &Tensor::ones([1, 4, 1, 1])).is_err());
    }

    #[test]
    fn avg_pool_constant_identity_and_conservation() {
        let c = Tensor::full([1, 2, 8, 8], 3.25);
        let p = avg_pool2d(&c, 4).unwrap();
        assert_eq!(p.dims(), [1, 2, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 3.25));

        let mut rng = Rng::new(3);
        let x = random([2, 3, 8, 12], &mut rng);
        assert_eq!(avg_pool2d(&x, 1).unwrap(), x);
        let p = avg_pool2d(&x, 4).unwrap();
        let lhs = p.sum() * 16.0;
        assert!((lhs - x.sum()).abs() <= 1e-12 * x.sum().abs().max(1.0));
        assert!(avg_pool2d(&x, 5).is_err());
    }

    #[test]
    fn axial_pools_small_case() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pool_rows(&x).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(pool_cols(&x).unwrap().data(), &[2.0, 3.0]);
        assert_eq!(pool_rows(&x).unwrap().dims(), [1, 1, 2, 1]);
        assert_eq!(pool_cols(&x).unwrap().dims(), [1, 1, 1, 2]);
    }

    #[test]
    fn axial_pools_compose_to_global_mean() {
        let mut rng = Rng::new(4);
        let x = random([2, 3, 5, 7], &mut rng);
        let g = pool_rows(&pool_cols(&x).unwrap()).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let direct: f64 = (0..5)
                    .flat_map(|h| (0..7).map(move |w| (h, w)))
                    .map(|(h, w)| x.at(b, c, h, w))
                    .sum::<f64>()
                    / 35.0;
                assert!((g.at(b, c, 0, 0) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_train_standardizes() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_fn([4, 3, 5, 5], |[_, c, _, _]| c as f64 * 2.0 + rng.uniform(-3.0, 3.0));
        let ones = Tensor::ones([1, 3, 1, 1]);
        let zeros = Tensor::zeros([1, 3, 1, 1]);
        let (y, _) = batch_norm(&x, &ones, &zeros, &zeros, &ones, NormMode::Train, 1e-5).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, c, i / 5, i % 5))
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let mut rng = Rng::new(6);
        let x = random([2, 2, 3, 3], &mut rng);
        let beta = Tensor::vector(vec![0.5, -2.0]);
        let zeros = Tensor::zeros([1, 2, 1, 1]);
        let ones = Tensor::ones([1, 2, 1, 1]);
        let (y, _) = batch_norm(&x, &zeros, &beta, &zeros, &ones, NormMode::Train, 1e-5).unwrap();
        for n in 0..2 {
            for i in 0..9 {
                assert_eq!(y.at(n, 0, i / 3, i % 3), 0.5);
                assert_eq!(y.at(n, 1, i / 3, i % 3), -2.0);
            }
        }
        assert!(batch_norm(&x, &zeros, &beta, &zeros, &ones, NormMode::Train, 0.0).is_err());
    }

    #[test]
    fn layer_norm_constant_input() {
        let x = Tensor::full([1, 6, 1, 1], 4.0);
        let (y, _) = layer_norm(&x, &Tensor::ones([1, 6, 1, 1]), &Tensor::zeros([1, 6, 1, 1]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let (y, _) = layer_norm(&x, &Tensor::ones([1, 6, 1, 1]), &Tensor::full([1, 6, 1, 1], 0.75), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn activations_basic_values() {
        let x = Tensor::vector(vec![0.0, -3.0, 2.0]);
        assert_eq!(sigmoid(&x).data()[0], 0.5);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let s = softmax(&Tensor::full([1, 4, 1, 1], 0.3), 1).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let x = Tensor::vector(vec![-30.0, -1.0, 0.0, 1.0, 30.0]);
        assert!(sigmoid(&x).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = Rng::new(8);
        let x = random([2, 5, 3, 4], &mut rng);
        for axis in 0..4 {
            let a = softmax(&x, axis).unwrap();
            let b = softmax(&map(&x, |v| v + 17.5), axis).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12);
            for_each_line(a.dims(), axis, |start, stride, len| {
                let s: f64 = (0..len).map(|i| a.data()[start + i * stride]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            });
        }
        assert!(softmax(&x, 4).is_err());
    }

    #[test]
    fn upsample_constant_and_identity() {
        let c = Tensor::full([1, 2, 3, 5], -1.25);
        let u = upsample_bilinear(&c, 12, 20).unwrap();
        assert!(u.data().iter().all(|&v| (v + 1.25).abs() < 1e-15));
        let mut rng = Rng::new(9);
        let x = random([1, 2, 3, 5], &mut rng);
        assert_eq!(upsample_bilinear(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn upsample_two_by_two_hand_values() {
        // Source coordinates for 2 -> 4 with half-pixel centers are
        // -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to the last pixel).
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let u = upsample_bilinear(&x, 4, 4).unwrap();
        let row = |r0: f64, r1: f64| {
            let lerp = |t: f64| r0 + (r1 - r0) * t;
            [lerp(0.0), lerp(0.25), lerp(0.75), lerp(1.0)]
        };
        let top = row(0.0, 1.0);
        let bottom = row(2.0, 3.0);
        let weights = [0.0, 0.25, 0.75, 1.0];
        for (i, wy) in weights.iter().enumerate() {
            for j in 0..4 {
                let expect = top[j] * (1.0 - wy) + bottom[j] * wy;
                assert!((u.at(0, 0, i, j) - expect).abs() < 1e-15, "({i},{j})");
            }
        }
        assert_eq!(u.at(0, 0, 1, 1), 0.75);
    }

    #[test]
    fn concat_split_round_trip_and_indexing() {
        let mut rng = Rng::new(10);
        let xs = [random([2, 1, 3, 3], &mut rng), random([2, 4, 3, 3], &mut rng), random([2, 2, 3, 3], &mut rng)];
        let refs: Vec<&Tensor> = xs.iter().collect();
        let cat = concat_channels(&refs).unwrap();
        assert_eq!(cat.dims(), [2, 7, 3, 3]);
        for n in 0..2 {
            for c in 0..7 {
                let (src, sc) = match c {
                    0 => (0, 0),
                    1..=4 => (1, c - 1),
                    _ => (2, c - 5),
                };
                assert_eq!(cat.at(n, c, 2, 1), xs[src].at(n, sc, 2, 1));
            }
        }
        let parts = split_channels(&cat, &[1, 4, 2]).unwrap();
        for (p, x) in parts.iter().zip(&xs) {
            assert_eq!(p, x);
        }
        assert_eq!(concat_channels(&[&xs[1]]).unwrap(), xs[1]);
        assert!(split_channels(&cat, &[1, 4]).is_err());
        assert!(concat_channels(&[&xs[0], &Tensor::zeros([2, 1, 3, 4])]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Tensor::zeros([1, 4, 2, 2]);
        let (l, _) = cross_entropy(&logits, &[0, 1, 2, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sat = Tensor::from_fn([1, 3, 1, 2], |[_, c, _, w]| if c == w { 30.0 } else { 0.0 });
        let (l, _) = cross_entropy(&sat, &[0, 1]).unwrap();
        assert!(l < 1e-9);
        assert!(cross_entropy(&sat, &[0, 3]).is_err());
    }
}

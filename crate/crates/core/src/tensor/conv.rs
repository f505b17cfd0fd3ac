//! 2-D cross-correlation via im2col + GEMM, grouped and strided.

use super::ops::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Dims, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: (usize, usize), pad: (usize, usize), groups: usize) -> Self {
        ConvSpec { stride, pad, groups }
    }

    /// Stride 1 with `(k - 1) / 2` padding for an odd `kh x kw` kernel.
    pub fn same(kh: usize, kw: usize, groups: usize) -> Self {
        ConvSpec::new((1, 1), ((kh - 1) / 2, (kw - 1) / 2), groups)
    }

    pub fn output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let (sh, sw) = self.stride;
        if sh == 0 || sw == 0 {
            return None;
        }
        let ph = h + 2 * self.pad.0;
        let pw = w + 2 * self.pad.1;
        if ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / sh + 1, (pw - kw) / sw + 1))
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn new(x: Dims, wdims: Dims, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Self> {
        let [n, cin, h, w] = x;
        let [cout, cin_g, kh, kw] = wdims;
        let g = spec.groups;
        if g == 0 || cin % g != 0 || cout % g != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={cin} out={cout} not divisible by groups={g}"),
            ));
        }
        if cin / g != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {cin_g} input channels per group, input gives {}", cin / g),
            ));
        }
        if let Some(b) = bias {
            if b.len() != cout {
                return Err(Error::shape("conv2d", format!("bias has {} values, need {cout}", b.len())));
            }
        }
        let (oh, ow) = spec.output_hw(h, w, kh, kw).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("non-positive output for {h}x{w} input, {kh}x{kw} kernel, {spec:?}"),
            )
        })?;
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            cin_g,
            cout_g: cout / g,
            spec,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin_g * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == (1, 1) && self.spec.pad == (0, 0)
    }

    /// Unfolds the input channels of group `g` in batch element `b`.
    fn im2col(&self, x: &[f64], b: usize, g: usize, col: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.pad;
        let cols = self.col_cols();
        for ci in 0..self.cin_g {
            let plane = &x[((b * self.cin) + g * self.cin_g + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back into the input gradient.
    fn col2im(&self, col: &[f64], b: usize, g: usize, gx: &mut [f64]) {
        let (sh, sw) = self.spec.stride;
        let (ph, pw) = self.spec.pad;
        let cols = self.col_cols();
        for ci in 0..self.cin_g {
            let plane = &mut gx[((b * self.cin) + g * self.cin_g + ci) * self.h * self.w..][..self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
    let geo = Geometry::new(x.dims(), weight.dims(), bias, spec)?;
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let mut out = vec![0.0; geo.n * geo.cout * cols];
    let mut col = vec![0.0; if geo.is_pointwise() { 0 } else { rows * cols }];
    let xd = x.data();
    for b in 0..geo.n {
        for g in 0..spec.groups {
            let wg = &weight.data()[g * geo.cout_g * rows..(g + 1) * geo.cout_g * rows];
            let og = &mut out[(b * geo.cout + g * geo.cout_g) * cols..][..geo.cout_g * cols];
            if geo.is_pointwise() {
                let xg = &xd[(b * geo.cin + g * geo.cin_g) * cols..][..rows * cols];
                gemm_acc(wg, xg, og, geo.cout_g, rows, cols);
            } else {
                geo.im2col(xd, b, g, &mut col);
                gemm_acc(wg, &col, og, geo.cout_g, rows, cols);
            }
        }
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * geo.cout + oc) * cols..][..cols] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec([geo.n, geo.cout, geo.oh, geo.ow], out)
}

/// Gradients of a convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    has_bias: bool,
    spec: ConvSpec,
    grad: &[f64],
) -> Result<ConvGrads> {
    let geo = Geometry::new(x.dims(), weight.dims(), None, spec)?;
    let (rows, cols) = (geo.col_rows(), geo.col_cols());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = has_bias.then(|| vec![0.0; geo.cout]);
    let mut col = vec![0.0; rows * cols];
    let mut gcol = vec![0.0; rows * cols];
    let xd = x.data();
    for b in 0..geo.n {
        for g in 0..spec.groups {
            let wg = &weight.data()[g * geo.cout_g * rows..][..geo.cout_g * rows];
            let gwg = &mut gw[g * geo.cout_g * rows..][..geo.cout_g * rows];
            let go = &grad[(b * geo.cout + g * geo.cout_g) * cols..][..geo.cout_g * cols];
            if geo.is_pointwise() {
                let xg = &xd[(b * geo.cin + g * geo.cin_g) * cols..][..rows * cols];
                gemm_nt_acc(go, xg, gwg, geo.cout_g, cols, rows);
                let gxg = &mut gx[(b * geo.cin + g * geo.cin_g) * cols..][..rows * cols];
                gemm_tn_acc(wg, go, gxg, rows, geo.cout_g, cols);
            } else {
                geo.im2col(xd, b, g, &mut col);
                gemm_nt_acc(go, &col, gwg, geo.cout_g, cols, rows);
                gcol.fill(0.0);
                gemm_tn_acc(wg, go, &mut gcol, rows, geo.cout_g, cols);
                geo.col2im(&gcol, b, g, &mut gx);
            }
        }
        if let Some(gb) = gb.as_mut() {
            for (oc, v) in gb.iter_mut().enumerate() {
                *v += grad[(b * geo.cout + oc) * cols..][..cols].iter().sum::<f64>();
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

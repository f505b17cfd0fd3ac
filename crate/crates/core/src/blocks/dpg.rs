//! Dynamic prototype guided head.
//!
//! Per image: project pixels into class space, multiply with the pixel
//! features to get a `classes x D` prototype, compress it into a softmax
//! class embedding, re-project through the transposed prototype into a
//! length-`D` channel gate, and classify the gated features.

use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamKind, ParamStore, LN_EPS};
use crate::rng::Rng;
use crate::tensor::conv::ConvSpec;
use crate::tensor::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DpgShape {
    pub width: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DpgParams {
    pub shape: DpgShape,
    pub proj_cls: ParamId,
    pub proj_cls_bias: ParamId,
    /// `(1, D)`: one logit per prototype row. No bias, softmax would cancel it.
    pub fc_compress: ParamId,
    pub fc1: ParamId,
    pub fc1_bias: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub fc2: ParamId,
    pub fc2_bias: ParamId,
    /// Zero at init, so the first logits are uniform.
    pub cls_conv: ParamId,
    pub cls_bias: ParamId,
}

impl DpgParams {
    pub fn init(store: &mut ParamStore, prefix: &str, shape: DpgShape, rng: &mut Rng) -> Result<Self> {
        let DpgShape { width: d, hidden: m, classes: c } = shape;
        if d == 0 || m == 0 || c < 2 {
            return Err(Error::Config(format!("invalid head shape {shape:?}")));
        }
        let name = |s: &str| format!("{prefix}.{s}");
        let learn = ParamKind::Learnable;
        Ok(DpgParams {
            shape,
            proj_cls: store.kaiming(&name("proj_cls.weight"), &[c, d, 1, 1], d, rng)?,
            proj_cls_bias: store.constant(&name("proj_cls.bias"), &[c], learn, 0.0)?,
            fc_compress: store.kaiming(&name("fc_compress.weight"), &[1, d], d, rng)?,
            fc1: store.kaiming(&name("fc1.weight"), &[m, d], d, rng)?,
            fc1_bias: store.constant(&name("fc1.bias"), &[m], learn, 0.0)?,
            ln_gamma: store.constant(&name("ln.weight"), &[m], learn, 1.0)?,
            ln_beta: store.constant(&name("ln.bias"), &[m], learn, 0.0)?,
            fc2: store.kaiming(&name("fc2.weight"), &[d, m], m, rng)?,
            fc2_bias: store.constant(&name("fc2.bias"), &[d], learn, 0.0)?,
            cls_conv: store.constant(&name("cls.weight"), &[c, d, 1, 1], learn, 0.0)?,
            cls_bias: store.constant(&name("cls.bias"), &[c], learn, 0.0)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.proj_cls,
            self.proj_cls_bias,
            self.fc_compress,
            self.fc1,
            self.fc1_bias,
            self.ln_gamma,
            self.ln_beta,
            self.fc2,
            self.fc2_bias,
            self.cls_conv,
            self.cls_bias,
        ]
    }

    fn check_single(&self, g: &Graph, fx: Var) -> Result<(usize, usize)> {
        let [n, d, h, w] = g.tape.dims(fx);
        if n != 1 || d != self.shape.width {
            return Err(Error::shape(
                "dpg_head",
                format!("expected (1, {}, H, W), got {:?}", self.shape.width, g.tape.dims(fx)),
            ));
        }
        Ok((h, w))
    }
}

/// `F_p`: `(1, classes, D, 1)` prototype, averaged over pixels.
pub fn dpg_prototype(g: &mut Graph, p: &DpgParams, fx: Var) -> Result<Var> {
    let (h, w) = p.check_single(g, fx)?;
    let DpgShape { width: d, classes: c, .. } = p.shape;
    let hw = h * w;
    let m = g
        .tape
        .conv2d(fx, g.p(p.proj_cls), Some(g.p(p.proj_cls_bias)), ConvSpec::same(1, 1, 1))?;
    let m = g.tape.reshape(m, [1, c, hw, 1])?;
    let q = g.tape.reshape(fx, [1, d, hw, 1])?;
    let q = g.tape.transpose(q)?;
    let fp = g.tape.matmul(m, q)?;
    g.tape.scale(fp, 1.0 / hw as f64)
}

/// `F_gp`: `(1, classes, 1, 1)` softmax over per-class compressed logits.
pub fn dpg_class_embed(g: &mut Graph, p: &DpgParams, fp: Var) -> Result<Var> {
    let w = g.tape.transpose(g.p(p.fc_compress))?;
    let logits = g.tape.matmul(fp, w)?;
    g.tape.softmax(logits, 1)
}

/// The length-`D` channel gate `fc2(relu(ln(fc1(F_pᵀ · F_gp))))` as `(1, D, 1, 1)`.
pub fn dpg_gate(g: &mut Graph, p: &DpgParams, fp: Var, fgp: Var) -> Result<Var> {
    let fpt = g.tape.transpose(fp)?;
    let v = g.tape.matmul(fpt, fgp)?;
    let v = g.tape.matmul(g.p(p.fc1), v)?;
    let v = g.tape.add(v, g.p(p.fc1_bias))?;
    let v = g.tape.layer_norm(v, g.p(p.ln_gamma), g.p(p.ln_beta), LN_EPS)?;
    let v = g.tape.relu(v)?;
    let v = g.tape.matmul(g.p(p.fc2), v)?;
    g.tape.add(v, g.p(p.fc2_bias))
}

/// `F_o = gate ⊙ F_x`, broadcast over pixels.
pub fn dpg_attend(g: &mut Graph, p: &DpgParams, fp: Var, fgp: Var, fx: Var) -> Result<Var> {
    p.check_single(g, fx)?;
    let gate = dpg_gate(g, p, fp, fgp)?;
    g.tape.mul(fx, gate)
}

/// Logits `(N, classes, H, W)` for features `(N, D, H, W)`.
pub fn dpg_head_forward(g: &mut Graph, p: &DpgParams, fx: Var) -> Result<Var> {
    let [n, d, _, _] = g.tape.dims(fx);
    if d != p.shape.width {
        return Err(Error::shape(
            "dpg_head",
            format!("features have {d} channels, head expects {}", p.shape.width),
        ));
    }
    let mut per_image = Vec::with_capacity(n);
    for b in 0..n {
        let x = if n == 1 { fx } else { g.tape.batch_item(fx, b)? };
        let fp = dpg_prototype(g, p, x)?;
        let fgp = dpg_class_embed(g, p, fp)?;
        let fo = dpg_attend(g, p, fp, fgp, x)?;
        per_image.push(fo);
    }
    let fo = if n == 1 { per_image[0] } else { g.tape.concat_batch(&per_image)? };
    g.tape
        .conv2d(fo, g.p(p.cls_conv), Some(g.p(p.cls_bias)), ConvSpec::same(1, 1, 1))
}

//! Rectangular self-calibration attention (RCA) and module (RCM).
//!
//! RCA pools the input along each spatial axis, combines the two axis
//! vectors into a rectangular map, and reshapes that map with a horizontal
//! `1 x k` strip conv, BN + ReLU, and a vertical `k x 1` strip conv before a
//! sigmoid gate. RCM wraps it MetaNeXt-style: depthwise fusion conv gated by
//! the attention, then BN, a 1x1 MLP, and a residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BnParams, Graph, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::conv::ConvSpec;
use crate::tensor::tape::Var;

/// How the two axis vectors are combined into the rectangular map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RcaVariant {
    #[default]
    Add,
    Mul,
}

impl std::str::FromStr for RcaVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(RcaVariant::Add),
            "mul" => Ok(RcaVariant::Mul),
            other => Err(Error::Config(format!("rca_variant must be `add` or `mul`, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RcmShape {
    pub channels: usize,
    pub strip_kernel: usize,
    pub fusion_kernel: usize,
    pub mlp_ratio: usize,
}

impl RcmShape {
    pub fn hidden(&self) -> usize {
        self.channels * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RcmParams {
    pub shape: RcmShape,
    /// Depthwise `(C, 1, 1, k)`, no bias (BN follows).
    pub strip_h: ParamId,
    pub bn_cal: BnParams,
    /// Depthwise `(C, 1, k, 1)` with bias.
    pub strip_v: ParamId,
    pub strip_v_bias: ParamId,
    /// Depthwise `(C, 1, f, f)` local-detail conv.
    pub fuse_dw: ParamId,
    pub fuse_bias: ParamId,
    pub bn_out: BnParams,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    /// Zero at init so the module starts as the identity.
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl RcmParams {
    pub fn init(store: &mut ParamStore, prefix: &str, shape: RcmShape, rng: &mut Rng) -> Result<Self> {
        let RcmShape {
            channels: c,
            strip_kernel: k,
            fusion_kernel: f,
            ..
        } = shape;
        if k % 2 == 0 || f % 2 == 0 {
            return Err(Error::Config(format!(
                "strip ({k}) and fusion ({f}) kernels must be odd"
            )));
        }
        let hidden = shape.hidden();
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(RcmParams {
            shape,
            strip_h: store.kaiming(&name("strip_h.weight"), &[c, 1, 1, k], k, rng)?,
            bn_cal: BnParams::init(store, &name("bn_cal"), c)?,
            strip_v: store.kaiming(&name("strip_v.weight"), &[c, 1, k, 1], k, rng)?,
            strip_v_bias: store.constant(&name("strip_v.bias"), &[c], ParamKind::Learnable, 0.0)?,
            fuse_dw: store.kaiming(&name("fuse.weight"), &[c, 1, f, f], f * f, rng)?,
            fuse_bias: store.constant(&name("fuse.bias"), &[c], ParamKind::Learnable, 0.0)?,
            bn_out: BnParams::init(store, &name("bn_out"), c)?,
            mlp_w1: store.kaiming(&name("mlp.fc1.weight"), &[hidden, c, 1, 1], c, rng)?,
            mlp_b1: store.constant(&name("mlp.fc1.bias"), &[hidden], ParamKind::Learnable, 0.0)?,
            mlp_w2: store.constant(&name("mlp.fc2.weight"), &[c, hidden, 1, 1], ParamKind::Learnable, 0.0)?,
            mlp_b2: store.constant(&name("mlp.fc2.bias"), &[c], ParamKind::Learnable, 0.0)?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let bn = |b: &BnParams| [b.gamma, b.beta, b.running_mean, b.running_var];
        let mut ids = vec![self.strip_h];
        ids.extend(bn(&self.bn_cal));
        ids.extend([self.strip_v, self.strip_v_bias, self.fuse_dw, self.fuse_bias]);
        ids.extend(bn(&self.bn_out));
        ids.extend([self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]);
        ids
    }

    fn check_channels(&self, g: &Graph, x: Var) -> Result<()> {
        let c = g.tape.dims(x)[1];
        if c != self.shape.channels {
            return Err(Error::shape(
                "rcm_forward",
                format!("input has {c} channels, module expects {}", self.shape.channels),
            ));
        }
        Ok(())
    }
}

/// The rectangular map before calibration: `H_P(x) ⊕ V_P(x)` (or `⊙`).
pub fn axial_context(g: &mut Graph, x: Var, variant: RcaVariant) -> Result<Var> {
    let rows = g.tape.pool_rows(x)?;
    let cols = g.tape.pool_cols(x)?;
    match variant {
        RcaVariant::Add => g.tape.add(rows, cols),
        RcaVariant::Mul => g.tape.mul(rows, cols),
    }
}

/// Shape self-calibration of a rectangular map into a `(0, 1)` gate.
pub fn calibrate(g: &mut Graph, p: &RcmParams, rect: Var) -> Result<Var> {
    let c = p.shape.channels;
    let k = p.shape.strip_kernel;
    let h = g.tape.conv2d(rect, g.p(p.strip_h), None, ConvSpec::same(1, k, c))?;
    let h = p.bn_cal.apply(g, h)?;
    let h = g.tape.relu(h)?;
    let v = g
        .tape
        .conv2d(h, g.p(p.strip_v), Some(g.p(p.strip_v_bias)), ConvSpec::same(k, 1, c))?;
    g.tape.sigmoid(v)
}

/// Calibrated attention map of `x`, same shape as `x`, values in `(0, 1)`.
pub fn rca_attention(g: &mut Graph, p: &RcmParams, x: Var, variant: RcaVariant) -> Result<Var> {
    p.check_channels(g, x)?;
    let rect = axial_context(g, x, variant)?;
    calibrate(g, p, rect)
}

/// Depthwise local-detail conv of `x` gated elementwise by `attention`.
pub fn rca_fuse(g: &mut Graph, p: &RcmParams, x: Var, attention: Var) -> Result<Var> {
    if g.tape.dims(x) != g.tape.dims(attention) {
        return Err(Error::shape(
            "rca_fuse",
            format!("{:?} vs {:?}", g.tape.dims(x), g.tape.dims(attention)),
        ));
    }
    let f = p.shape.fusion_kernel;
    let local = g
        .tape
        .conv2d(x, g.p(p.fuse_dw), Some(g.p(p.fuse_bias)), ConvSpec::same(f, f, p.shape.channels))?;
    g.tape.mul(local, attention)
}

#[derive(Debug, Clone, Copy)]
pub struct RcmOutput {
    pub out: Var,
    /// The calibrated attention, kept for visualization.
    pub attention: Var,
}

pub fn rcm_forward(g: &mut Graph, p: &RcmParams, x: Var, variant: RcaVariant) -> Result<RcmOutput> {
    let attention = rca_attention(g, p, x, variant)?;
    let fused = rca_fuse(g, p, x, attention)?;
    let y = p.bn_out.apply(g, fused)?;
    let pw = ConvSpec::same(1, 1, 1);
    let y = g.tape.conv2d(y, g.p(p.mlp_w1), Some(g.p(p.mlp_b1)), pw)?;
    let y = g.tape.relu(y)?;
    let y = g.tape.conv2d(y, g.p(p.mlp_w2), Some(g.p(p.mlp_b2)), pw)?;
    let out = g.tape.add(y, x)?;
    Ok(RcmOutput { out, attention })
}

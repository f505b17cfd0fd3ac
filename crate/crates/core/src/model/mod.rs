//! Full segmentation model: toy encoder, pyramid context extraction, spatial
//! feature reconstruction, and the prototype head.
//!
//! Scale ledger for an `H x W` input:
//!
//! | tensor            | stride | channels            |
//! |-------------------|--------|---------------------|
//! | F1..F4            | 4..32  | `stage_channels`    |
//! | pyramid grid      | 64     | `c2 + c3 + c4`      |
//! | decoder s32/16/8  | 32..8  | `head_width`        |
//! | logits            | 1      | `num_classes`       |

pub mod config;

use crate::blocks::{dpg_head_forward, rcm_forward, DpgParams, RcmParams};
use crate::error::{Error, Result};
use crate::params::{BnParams, Graph, ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tensor::conv::ConvSpec;
use crate::tensor::ops::NormMode;
use crate::tensor::tape::Var;
use crate::tensor::Tensor;

pub use config::{check_input_size, ModelConfig, PYRAMID_STRIDE};

/// Pool factors taking F2, F3, F4 to the stride-64 grid.
pub const PYRAMID_POOL: [usize; 3] = [8, 4, 2];
/// Decoder scales, coarsest first.
pub const DECODER_SCALES: [usize; 3] = [32, 16, 8];

/// 3x3 conv without bias, then BN and ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBn {
    pub weight: ParamId,
    pub bn: BnParams,
    pub stride: usize,
}

impl ConvBn {
    fn init(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Result<Self> {
        Ok(ConvBn {
            weight: store.kaiming(&format!("{prefix}.conv.weight"), &[cout, cin, 3, 3], cin * 9, rng)?,
            bn: BnParams::init(store, &format!("{prefix}.bn"), cout)?,
            stride,
        })
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let spec = ConvSpec::new((self.stride, self.stride), (1, 1), 1);
        let y = g.tape.conv2d(x, g.p(self.weight), None, spec)?;
        let y = self.bn.apply(g, y)?;
        g.tape.relu(y)
    }
}

/// One top-down reconstruction stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SfrParams {
    pub scale: usize,
    /// 1x1 encoder alignment to the decoder width, with bias.
    pub align_enc: ParamId,
    pub align_enc_bias: ParamId,
    /// 1x1 pyramid alignment, no bias (zero guidance stays zero).
    pub align_pyr: ParamId,
    pub rcm: RcmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Vec<Vec<ConvBn>>,
    pub pyramid: Vec<RcmParams>,
    /// Stages for scales 32, 16, 8 in that order.
    pub decoder: Vec<SfrParams>,
    pub head: DpgParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let ch = config.stage_channels;

        let mut backbone = Vec::with_capacity(4);
        let mut cin = config.in_channels;
        for (i, &c) in ch.iter().enumerate() {
            let second_stride = if i == 0 { 2 } else { 1 };
            let prefix = format!("backbone.stage{}", i + 1);
            backbone.push(vec![
                ConvBn::init(&mut store, &format!("{prefix}.0"), cin, c, 2, &mut rng)?,
                ConvBn::init(&mut store, &format!("{prefix}.1"), c, c, second_stride, &mut rng)?,
            ]);
            cin = c;
        }

        let pyr_c = config.pyramid_channels();
        let pyramid = (0..config.num_pyramid_rcm)
            .map(|i| RcmParams::init(&mut store, &format!("pyramid.rcm{i}"), config.rcm_shape(pyr_c), &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let d = config.head_width;
        let mut decoder = Vec::with_capacity(3);
        for (scale, enc_c) in DECODER_SCALES.into_iter().zip([ch[3], ch[2], ch[1]]) {
            let prefix = format!("decoder.s{scale}");
            decoder.push(SfrParams {
                scale,
                align_enc: store.kaiming(&format!("{prefix}.align_enc.weight"), &[d, enc_c, 1, 1], enc_c, &mut rng)?,
                align_enc_bias: store.constant(&format!("{prefix}.align_enc.bias"), &[d], ParamKind::Learnable, 0.0)?,
                align_pyr: store.kaiming(&format!("{prefix}.align_pyr.weight"), &[d, enc_c, 1, 1], enc_c, &mut rng)?,
                rcm: RcmParams::init(&mut store, &format!("{prefix}.rcm"), config.rcm_shape(d), &mut rng)?,
            });
        }

        let head = DpgParams::init(&mut store, "head", config.head_shape(), &mut rng)?;
        Ok(ModelParams {
            config: config.clone(),
            store,
            backbone,
            pyramid,
            decoder,
            head,
        })
    }

    /// Every RCM with its attention stage name.
    pub fn rcms(&self) -> Vec<(String, &RcmParams)> {
        let mut out: Vec<(String, &RcmParams)> = self
            .pyramid
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("pyramid.{i}"), p))
            .collect();
        out.extend(self.decoder.iter().map(|s| (format!("decoder.s{}", s.scale), &s.rcm)));
        out
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.rcms().into_iter().map(|(n, _)| n).collect()
    }
}

/// Switches for structural ablation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every RCM by the identity.
    pub skip_rcm: bool,
}

/// Handles to the intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub features: [Var; 4],
    /// Upsampled pyramid outputs for scales 8, 16, 32.
    pub pyramid: [Var; 3],
    /// Decoder outputs for scales 32, 16, 8.
    pub decoder: [Var; 3],
    /// Head logits at stride 8.
    pub head_logits: Var,
    /// Logits at input resolution.
    pub logits: Var,
    pub attention: Vec<(String, Var)>,
}

fn check_image(g: &Graph, cfg: &ModelConfig, img: Var) -> Result<()> {
    let [_, c, h, w] = g.tape.dims(img);
    if c != cfg.in_channels {
        return Err(Error::shape(
            "model_forward",
            format!("image has {c} channels, model expects {}", cfg.in_channels),
        ));
    }
    check_input_size(h, w)
}

pub fn backbone_forward(g: &mut Graph, params: &ModelParams, img: Var) -> Result<[Var; 4]> {
    check_image(g, &params.config, img)?;
    let mut x = img;
    let mut feats = [img; 4];
    for (i, stage) in params.backbone.iter().enumerate() {
        for layer in stage {
            x = layer.forward(g, x)?;
        }
        feats[i] = x;
    }
    Ok(feats)
}

/// Pools F2..F4 to the stride-64 grid, refines them jointly with stacked
/// RCMs, and returns each slice upsampled back to its source scale.
pub fn pyramid_context(
    g: &mut Graph,
    params: &ModelParams,
    feats: [Var; 3],
    opts: ForwardOptions,
    attention: &mut Vec<(String, Var)>,
) -> Result<[Var; 3]> {
    let mut pooled = Vec::with_capacity(3);
    let mut sizes = Vec::with_capacity(3);
    for (&f, factor) in feats.iter().zip(PYRAMID_POOL) {
        pooled.push(g.tape.avg_pool2d(f, factor)?);
        sizes.push(g.tape.dims(f)[1]);
    }
    let mut x = g.tape.concat_channels(&pooled)?;
    if !opts.skip_rcm {
        for (i, rcm) in params.pyramid.iter().enumerate() {
            let out = rcm_forward(g, rcm, x, params.config.rca_variant)?;
            attention.push((format!("pyramid.{i}"), out.attention));
            x = out.out;
        }
    }
    let parts = g.tape.split_channels(x, &sizes)?;
    let mut out = [x; 3];
    for (i, (&part, &src)) in parts.iter().zip(&feats).enumerate() {
        let [_, _, h, w] = g.tape.dims(src);
        out[i] = g.tape.upsample_bilinear(part, h, w)?;
    }
    Ok(out)
}

/// `RCM(align_enc(enc) + up2(dec_prev) + align_pyr(pyr))`.
pub fn sfr_stage(
    g: &mut Graph,
    params: &ModelParams,
    stage: &SfrParams,
    enc: Var,
    dec_prev: Option<Var>,
    pyr: Var,
    opts: ForwardOptions,
) -> Result<(Var, Option<Var>)> {
    let pw = ConvSpec::same(1, 1, 1);
    let e = g.tape.conv2d(enc, g.p(stage.align_enc), Some(g.p(stage.align_enc_bias)), pw)?;
    let p = g.tape.conv2d(pyr, g.p(stage.align_pyr), None, pw)?;
    if g.tape.dims(e) != g.tape.dims(p) {
        return Err(Error::shape(
            "sfr_stage",
            format!("aligned encoder {:?} vs pyramid {:?}", g.tape.dims(e), g.tape.dims(p)),
        ));
    }
    let mut fused = g.tape.add(e, p)?;
    if let Some(prev) = dec_prev {
        let [_, _, h, w] = g.tape.dims(e);
        let up = g.tape.upsample_bilinear(prev, h, w)?;
        if g.tape.dims(up) != g.tape.dims(e) {
            return Err(Error::shape("sfr_stage", "decoder width differs from aligned encoder"));
        }
        fused = g.tape.add(fused, up)?;
    }
    if opts.skip_rcm {
        return Ok((fused, None));
    }
    let out = rcm_forward(g, &stage.rcm, fused, params.config.rca_variant)?;
    Ok((out.out, Some(out.attention)))
}

pub fn model_forward_with(g: &mut Graph, params: &ModelParams, img: Var, opts: ForwardOptions) -> Result<ForwardTrace> {
    let features = backbone_forward(g, params, img)?;
    let [_, _, h, w] = g.tape.dims(img);
    let mut attention = Vec::new();
    let pyramid = pyramid_context(g, params, [features[1], features[2], features[3]], opts, &mut attention)?;

    // decoder stage i pairs with encoder F(4 - i) and pyramid slice (2 - i)
    let mut decoder = [img; 3];
    let mut prev = None;
    for (i, stage) in params.decoder.iter().enumerate() {
        let (out, att) = sfr_stage(g, params, stage, features[3 - i], prev, pyramid[2 - i], opts)?;
        if let Some(a) = att {
            attention.push((format!("decoder.s{}", stage.scale), a));
        }
        decoder[i] = out;
        prev = Some(out);
    }
    let head_logits = dpg_head_forward(g, &params.head, decoder[2])?;
    let logits = g.tape.upsample_bilinear(head_logits, h, w)?;
    Ok(ForwardTrace {
        features,
        pyramid,
        decoder,
        head_logits,
        logits,
        attention,
    })
}

pub fn model_forward(g: &mut Graph, params: &ModelParams, img: Var) -> Result<ForwardTrace> {
    model_forward_with(g, params, img, ForwardOptions::default())
}

/// Eval-mode logits for a batch of images.
pub fn predict_logits(params: &ModelParams, img: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new(&params.store, NormMode::Eval);
    let x = g.input(img.clone());
    let trace = model_forward(&mut g, params, x)?;
    Ok(g.value(trace.logits).clone())
}

/// Per-pixel argmax over classes, `(N, H, W)` row-major. Ties pick the lower class.
pub fn argmax_classes(logits: &Tensor) -> Vec<usize> {
    let [n, c, h, w] = logits.dims();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if logits.data()[(b * c + ch) * hw + p] > logits.data()[(b * c + best) * hw + p] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn predict(params: &ModelParams, img: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_classes(&predict_logits(params, img)?))
}

/// Min-max normalizes in place; a flat map becomes all zeros.
pub fn min_max_normalize(t: &mut Tensor) {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in t.data_mut() {
        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
    }
}

/// Channel-mean calibrated attention of `stage`, upsampled to the image size.
/// `normalize` applies min-max scaling to `[0, 1]`.
pub fn attention_map(params: &ModelParams, img: &Tensor, stage: &str, normalize: bool) -> Result<Tensor> {
    if img.dims()[0] != 1 {
        return Err(Error::shape("export_attention", format!("expected one image, got {:?}", img.dims())));
    }
    if !params.stage_names().iter().any(|s| s == stage) {
        return Err(Error::UnknownStage(stage.to_owned()));
    }
    let mut g = Graph::new(&params.store, NormMode::Eval);
    let x = g.input(img.clone());
    let trace = model_forward(&mut g, params, x)?;
    let att = trace
        .attention
        .iter()
        .find(|(name, _)| name == stage)
        .map(|&(_, v)| v)
        .ok_or_else(|| Error::UnknownStage(stage.to_owned()))?;
    let mean = g.tape.mean_channels(att)?;
    let [_, _, h, w] = img.dims();
    let up = g.tape.upsample_bilinear(mean, h, w)?;
    let mut map = g.value(up).clone();
    if normalize {
        min_max_normalize(&mut map);
    }
    Ok(map)
}

/// Heatmap `(1, 1, H, W)` in `[0, 1]` of one RCM's calibrated attention.
pub fn export_attention(params: &ModelParams, img: &Tensor, stage: &str) -> Result<Tensor> {
    attention_map(params, img, stage, true)
}

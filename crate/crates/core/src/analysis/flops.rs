//! Multiply-accumulate and parameter ledger, computed from the config alone.
//!
//! Convolutions count `N·Cout·Hout·Wout·(Cin/groups)·kh·kw` MACs, matrix
//! products `M·K·P`. Pooling, normalization, activations, broadcasts and
//! resampling add no MACs; their output element counts are tallied in a
//! separate `elementwise` column.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::Result;
use crate::model::{check_input_size, ModelConfig, ModelParams, DECODER_SCALES};
use crate::params::ParamKind;

pub fn conv_macs(n: u64, cout: u64, hout: u64, wout: u64, cin_per_group: u64, kh: u64, kw: u64) -> u64 {
    n * cout * hout * wout * cin_per_group * kh * kw
}

pub fn matmul_macs(m: u64, k: u64, p: u64) -> u64 {
    m * k * p
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsEntry {
    pub name: String,
    pub macs: u64,
    pub elementwise: u64,
    /// Learnable parameters owned by this module.
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopsReport {
    pub input: (usize, usize),
    pub entries: Vec<FlopsEntry>,
}

impl FlopsReport {
    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    pub fn total_elementwise(&self) -> u64 {
        self.entries.iter().map(|e| e.elementwise).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn entry(&self, name: &str) -> Option<&FlopsEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}x{}", self.input.0, self.input.1)?;
        writeln!(
            f,
            "{:<22} {:>14} {:>14} {:>14} {:>10}",
            "module", "macs", "2*macs", "elementwise", "params"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<22} {:>14} {:>14} {:>14} {:>10}",
                e.name,
                e.macs,
                2 * e.macs,
                e.elementwise,
                e.params
            )?;
        }
        writeln!(
            f,
            "{:<22} {:>14} {:>14} {:>14} {:>10}",
            "total",
            self.total_macs(),
            self.total_flops(),
            self.total_elementwise(),
            self.total_params()
        )?;
        write!(
            f,
            "GMACs {:.6}  GFLOPs(2*MACs) {:.6}  Mparams {:.6}",
            self.total_macs() as f64 / 1e9,
            self.total_flops() as f64 / 1e9,
            self.total_params() as f64 / 1e6
        )
    }
}

#[derive(Default)]
struct Acc {
    macs: u64,
    elementwise: u64,
    params: u64,
}

/// MACs, elementwise outputs and learnable params of one RCM on a `c x h x w` map.
fn rcm_cost(cfg: &ModelConfig, c: u64, h: u64, w: u64) -> Acc {
    let k = cfg.strip_kernel as u64;
    let f = cfg.fusion_kernel as u64;
    let r = cfg.mlp_ratio as u64;
    let hw = h * w;
    let macs = conv_macs(1, c, h, w, 1, 1, k)
        + conv_macs(1, c, h, w, 1, k, 1)
        + conv_macs(1, c, h, w, 1, f, f)
        + conv_macs(1, r * c, h, w, c, 1, 1)
        + conv_macs(1, c, h, w, r * c, 1, 1);
    // pool_rows, pool_cols, combine, bn_cal, relu, sigmoid, gate, bn_out, mlp relu, residual
    let elementwise = c * h + c * w + 7 * c * hw + r * c * hw;
    let params = c * k          // strip_h
        + 2 * c                 // bn_cal
        + c * k + c             // strip_v
        + c * f * f + c         // fuse
        + 2 * c                 // bn_out
        + r * c * c + r * c     // mlp fc1
        + c * r * c + c; // mlp fc2
    Acc { macs, elementwise, params }
}

pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> Result<FlopsReport> {
    cfg.validate()?;
    check_input_size(h, w)?;
    let (hh, ww) = (h as u64, w as u64);
    let ch: Vec<u64> = cfg.stage_channels.iter().map(|&c| c as u64).collect();
    let d = cfg.head_width as u64;
    let classes = cfg.num_classes as u64;
    let mut entries = Vec::new();
    let mut push = |name: String, a: Acc| {
        entries.push(FlopsEntry {
            name,
            macs: a.macs,
            elementwise: a.elementwise,
            params: a.params,
        })
    };

    // encoder
    let mut cin = cfg.in_channels as u64;
    let mut stride = 1;
    for (i, &c) in ch.iter().enumerate() {
        let mut a = Acc::default();
        let strides: [u64; 2] = if i == 0 { [2, 2] } else { [2, 1] };
        for (j, s) in strides.into_iter().enumerate() {
            stride *= s;
            let (oh, ow) = (hh / stride, ww / stride);
            let layer_in = if j == 0 { cin } else { c };
            a.macs += conv_macs(1, c, oh, ow, layer_in, 3, 3);
            a.params += c * layer_in * 9 + 2 * c;
            a.elementwise += 2 * c * oh * ow;
        }
        cin = c;
        push(format!("backbone.stage{}", i + 1), a);
    }

    // pyramid
    let (gh, gw) = (hh / 64, ww / 64);
    let pyr_c: u64 = ch[1..].iter().sum();
    push(
        "pyramid.pool".into(),
        Acc {
            elementwise: pyr_c * gh * gw,
            ..Acc::default()
        },
    );
    for i in 0..cfg.num_pyramid_rcm {
        push(format!("pyramid.rcm{i}"), rcm_cost(cfg, pyr_c, gh, gw));
    }
    let upsampled: u64 = [(ch[1], 8), (ch[2], 16), (ch[3], 32)]
        .iter()
        .map(|&(c, s)| c * (hh / s) * (ww / s))
        .sum();
    push(
        "pyramid.upsample".into(),
        Acc {
            elementwise: upsampled,
            ..Acc::default()
        },
    );

    // decoder
    for (scale, enc_c) in DECODER_SCALES.into_iter().zip([ch[3], ch[2], ch[1]]) {
        let s = scale as u64;
        let (oh, ow) = (hh / s, ww / s);
        let has_prev = scale != DECODER_SCALES[0];
        let adds = if has_prev { 3 } else { 1 }; // fuse adds + upsample of prev
        push(
            format!("decoder.s{scale}.align"),
            Acc {
                macs: 2 * conv_macs(1, d, oh, ow, enc_c, 1, 1),
                elementwise: adds * d * oh * ow,
                params: 2 * d * enc_c + d,
            },
        );
        push(format!("decoder.s{scale}.rcm"), rcm_cost(cfg, d, oh, ow));
    }

    // head at stride 8: spatial part and the resolution-independent embedding
    let (oh, ow) = (hh / 8, ww / 8);
    let hw = oh * ow;
    let m = d / 4;
    push(
        "head.dpg".into(),
        Acc {
            macs: conv_macs(1, classes, oh, ow, d, 1, 1) // proj_cls
                + matmul_macs(classes, hw, d)              // prototype
                + conv_macs(1, classes, oh, ow, d, 1, 1), // classifier
            elementwise: classes * d + d * hw, // prototype scaling, gate
            params: 2 * (classes * d + classes),
        },
    );
    push(
        "head.embed".into(),
        Acc {
            macs: matmul_macs(classes, d, 1) // compress
                + matmul_macs(d, classes, 1)   // re-projection
                + matmul_macs(m, d, 1)         // fc1
                + matmul_macs(d, m, 1), // fc2
            elementwise: classes + 3 * m + d, // softmax, fc1 bias + ln + relu, fc2 bias
            params: d + m * d + m + 2 * m + d * m + d,
        },
    );
    push(
        "head.upsample".into(),
        Acc {
            elementwise: classes * hh * ww,
            ..Acc::default()
        },
    );

    Ok(FlopsReport { input: (h, w), entries })
}

/// Learnable and buffer element counts of one module.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamCount {
    pub learnable: u64,
    pub buffers: u64,
}

/// Ledger module a registry name belongs to, matching [`FlopsReport`] entry names.
pub fn module_of(param_name: &str) -> String {
    let parts: Vec<&str> = param_name.split('.').collect();
    match parts.as_slice() {
        ["decoder", scale, sub, ..] if sub.starts_with("align") => format!("decoder.{scale}.align"),
        ["decoder", scale, sub, ..] => format!("decoder.{scale}.{sub}"),
        ["head", "proj_cls" | "cls", ..] => "head.dpg".into(),
        ["head", ..] => "head.embed".into(),
        [a, b, ..] => format!("{a}.{b}"),
        _ => param_name.to_owned(),
    }
}

/// Exact element counts from the registry, grouped by ledger module.
pub fn count_params(params: &ModelParams) -> BTreeMap<String, ParamCount> {
    let mut out: BTreeMap<String, ParamCount> = BTreeMap::new();
    for e in params.store.entries() {
        let slot = out.entry(module_of(&e.name)).or_default();
        match e.kind {
            ParamKind::Learnable => slot.learnable += e.numel() as u64,
            ParamKind::Buffer => slot.buffers += e.numel() as u64,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_formula() {
        assert_eq!(conv_macs(1, 128, 16, 16, 64, 1, 1), 2_097_152);
    }

    #[test]
    fn strip_conv_formula() {
        assert_eq!(conv_macs(1, 32, 8, 1, 1, 11, 1), 2_816);
    }

    #[test]
    fn pointwise_params_with_bias() {
        assert_eq!(64 * 128 + 128, 8_320);
        let mut store = crate::params::ParamStore::new();
        let mut rng = crate::rng::Rng::new(0);
        store.kaiming("c.weight", &[128, 64, 1, 1], 64, &mut rng).unwrap();
        store.constant("c.bias", &[128], ParamKind::Learnable, 0.0).unwrap();
        assert_eq!(store.num_learnable(), 8_320);
    }

    #[test]
    fn module_mapping() {
        assert_eq!(module_of("backbone.stage2.1.bn.weight"), "backbone.stage2");
        assert_eq!(module_of("pyramid.rcm1.strip_h.weight"), "pyramid.rcm1");
        assert_eq!(module_of("decoder.s16.align_pyr.weight"), "decoder.s16.align");
        assert_eq!(module_of("decoder.s16.rcm.mlp.fc2.bias"), "decoder.s16.rcm");
        assert_eq!(module_of("head.fc1.weight"), "head.embed");
        assert_eq!(module_of("head.cls.bias"), "head.dpg");
    }

    #[test]
    fn report_totals_are_sums() {
        let r = count_flops(&ModelConfig::default(), 128, 192).unwrap();
        assert_eq!(r.total_macs(), r.entries.iter().map(|e| e.macs).sum::<u64>());
        assert_eq!(r.total_flops(), 2 * r.total_macs());
        assert!(count_flops(&ModelConfig::default(), 100, 100).is_err());
    }
}

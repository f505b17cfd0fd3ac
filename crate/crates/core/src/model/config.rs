use serde::{Deserialize, Serialize};

use crate::blocks::{DpgShape, RcaVariant, RcmShape};
use crate::error::{Error, Result};

/// Total downsampling of the pyramid grid.
pub const PYRAMID_STRIDE: usize = 64;

/// Architecture description. Defaults are the small desk-scale model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Channels of the stride 4/8/16/32 encoder features.
    pub stage_channels: [usize; 4],
    pub num_classes: usize,
    pub strip_kernel: usize,
    pub fusion_kernel: usize,
    pub mlp_ratio: usize,
    pub num_pyramid_rcm: usize,
    pub rca_variant: RcaVariant,
    /// Decoder and head width `D`.
    pub head_width: usize,
    /// `[H, W]`, each a multiple of 64.
    pub input_size: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            stage_channels: [8, 16, 24, 32],
            num_classes: 4,
            strip_kernel: 11,
            fusion_kernel: 3,
            mlp_ratio: 4,
            num_pyramid_rcm: 2,
            rca_variant: RcaVariant::Add,
            head_width: 16,
            input_size: [128, 128],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 {
            return err("in_channels must be positive".into());
        }
        if self.stage_channels.contains(&0) {
            return err(format!("stage_channels must be positive, got {:?}", self.stage_channels));
        }
        if !(2..=256).contains(&self.num_classes) {
            return err(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        for (name, k) in [("strip_kernel", self.strip_kernel), ("fusion_kernel", self.fusion_kernel)] {
            if k == 0 || k % 2 == 0 {
                return err(format!("{name} must be a positive odd number, got {k}"));
            }
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if self.head_width < 4 {
            return err(format!("head_width must be at least 4, got {}", self.head_width));
        }
        check_input_size(self.input_size[0], self.input_size[1])
    }

    pub fn rcm_shape(&self, channels: usize) -> RcmShape {
        RcmShape {
            channels,
            strip_kernel: self.strip_kernel,
            fusion_kernel: self.fusion_kernel,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn head_shape(&self) -> DpgShape {
        DpgShape {
            width: self.head_width,
            hidden: self.head_width / 4,
            classes: self.num_classes,
        }
    }

    /// Concatenated channel width of the pyramid grid.
    pub fn pyramid_channels(&self) -> usize {
        self.stage_channels[1..].iter().sum()
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % PYRAMID_STRIDE != 0 || w % PYRAMID_STRIDE != 0 {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be a positive multiple of {PYRAMID_STRIDE} in both dimensions"
        )));
    }
    Ok(())
}

//! Hand-derived MAC count of the default model at 512x512.

/// Per-pixel MACs of one RCM of width `c`: two 11-tap strips, a 3x3
/// depthwise fuse and the two 1x1 MLP layers at ratio 4.
fn rcm_macs(c: u64, hw: u64) -> u64 {
    hw * c * (11 + 11 + 9 + 2 * 4 * c)
}

pub struct Hand512 {
    pub backbone: u64,
    pub pyramid: u64,
    pub decoder: u64,
    pub head: u64,
    pub embed: u64,
}

impl Hand512 {
    pub fn total(&self) -> u64 {
        self.backbone + self.pyramid + self.decoder + self.head + self.embed
    }
}

pub fn hand_512() -> Hand512 {
    let backbone = [
        // (cout, cin, output side)
        (8, 3, 256),
        (8, 8, 128),
        (16, 8, 64),
        (16, 16, 64),
        (24, 16, 32),
        (24, 24, 32),
        (32, 24, 16),
        (32, 32, 16),
    ]
    .iter()
    .map(|&(co, ci, s)| co * ci * 9 * s * s)
    .sum();
    let align = 2 * 16 * (16 * 16 * 32 + 32 * 32 * 24 + 64 * 64 * 16);
    Hand512 {
        backbone,
        pyramid: 2 * rcm_macs(16 + 24 + 32, 8 * 8),
        decoder: align + rcm_macs(16, 16 * 16) + rcm_macs(16, 32 * 32) + rcm_macs(16, 64 * 64),
        // proj_cls, prototype product and classifier at stride 8
        head: 3 * 4 * 16 * 64 * 64,
        embed: 4 * 16 * 4,
    }
}

/// The same figure written out as a single literal.
pub const TOTAL_512: u64 = 73_927_936;
pub const PARAMS: u64 = 129_148;

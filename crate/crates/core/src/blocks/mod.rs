//! The decoder's differentiable building blocks.

pub mod dpg;
pub mod rcm;

pub use dpg::{dpg_attend, dpg_class_embed, dpg_head_forward, dpg_prototype, DpgParams, DpgShape};
pub use rcm::{rca_attention, rca_fuse, rcm_forward, RcaVariant, RcmOutput, RcmParams, RcmShape};

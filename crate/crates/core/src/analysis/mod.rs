//! FLOPs/parameter accounting and gradient verification.

pub mod flops;
pub mod gradcheck;

pub use flops::{count_flops, count_params, FlopsEntry, FlopsReport, ParamCount};
pub use gradcheck::{grad_check, relative_error, run_suite, BlockCheck, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};

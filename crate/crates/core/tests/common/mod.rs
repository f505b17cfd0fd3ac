//! Checks shared by the per-criterion tests and the acceptance report.
#![allow(dead_code)]

pub mod identities;
pub mod ledger;
pub mod oracles;

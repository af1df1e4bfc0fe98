//! Fractional-order memory: Grünwald–Letnikov retention kernels realised as
//! sums of exponentials, routed into fixed-order banks and read out through
//! keyed linear attention.

pub mod banks;
pub mod cli;
pub mod error;
pub mod gl_kernel;
pub mod harness;
pub mod numerics;
pub mod plasticity;
pub mod retrieval;
pub mod soe;
pub mod tasks;
pub mod theory_checks;

pub use error::{Error, Result};

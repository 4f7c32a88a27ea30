//! Locally powerful residual transformations for variant-set association
//! testing of quantitative traits.
//!
//! The crate fits a covariate-only null model, transforms its residuals once
//! (identity, rank-based inverse normal, or the kernel-estimated score
//! `ψ̂ = −f̂'/f̂`), and then runs Burden, SKAT and ridge-type quadratic-form
//! tests on every variant set. The [`simulate`] module reproduces the
//! type-I-error, power and equivalence experiments; [`scan`] and [`io`] drive
//! genome-wide scans from files.

pub mod assoc;
pub mod compare;
pub mod error;
pub mod io;
pub mod model;
pub mod normal;
pub mod quadform;
pub mod scan;
pub mod simulate;
pub mod transforms;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/null-model.md")]
    mod null_model {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/mixtures.md")]
    mod mixtures {}
    #[doc = include_str!("../../../book/src/tests.md")]
    mod tests {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/files-and-cli.md")]
    mod files_and_cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}

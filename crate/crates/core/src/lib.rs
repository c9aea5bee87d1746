//! Kernel band selection for hyperspectral unmixing.
//!
//! Bands are treated as points in a reproducing-kernel Hilbert space: each
//! band row of the endmember matrix defines a Gaussian kernel function, and a
//! dictionary of bands is admissible when its coherence (largest off-diagonal
//! Gram entry) stays below a threshold `mu0 = 1/(M-1)`. Selecting the largest
//! admissible dictionary is a maximum clique problem on the graph whose edges
//! join mutually incoherent bands.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`kernel`]: Gaussian kernel, Gram matrices and dictionary coherence.
//! - [`params`]: automatic coherence threshold and kernel bandwidth.
//! - [`clique`] and [`dimacs`]: coherence graphs and an exact maximum clique solver.
//! - [`select`]: greedy (GCBS), clique (CCBS) and kernel k-means (GKKM) band selection.
//! - [`mixing`]: synthetic scenes under linear, bilinear and post-nonlinear mixing.
//! - [`unmix`]: LS-SVR and the SK-Hype nonlinear unmixer.
//! - [`harness`]: metrics and table-style experiment reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clique;
pub mod dimacs;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernel;
pub mod mixing;
pub mod params;
pub mod select;
pub mod unmix;

pub use error::{Error, Result};
pub use kernel::{EndmemberMatrix, GramMatrix};

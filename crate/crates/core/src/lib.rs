//! Spot volatility matrix estimation for large panels of noisy, asynchronously
//! observed high-frequency log-prices.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`preavg`] de-noises each asset's ticks with a kernel-weighted
//!    pre-averaging filter and evaluates all assets on a shared pseudo-grid.
//! 2. [`spotpca`] forms the kernel-weighted realised spot volatility matrix at
//!    a time `tau`, splits it spectrally into a low-rank common part and a
//!    residual, and offers the equivalent local PCA construction.
//! 3. [`shrink`] applies generalised shrinkage (SCAD, adaptive lasso, soft,
//!    hard) to the idiosyncratic residual with a data-driven threshold, and
//!    assembles the final estimate and its precision matrix.
//! 4. [`metrics`] scores estimates against ground truth.
//!
//! [`sim`] generates synthetic ground truth from a time-varying factor model
//! and [`experiment`] runs the Monte-Carlo comparison of shrinkage rules.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod preavg;
pub mod shrink;
pub mod sim;
pub mod spotpca;

pub use error::{Error, Result};
pub use kernel::{Kernel, KernelSpec};
pub use preavg::{build_panel, kernel_filter, BandwidthMode, FilteredPanel, TickSeries};
pub use shrink::{ShrinkRule, ShrinkageSpec, SpotEstimate, ThresholdMode};
pub use spotpca::{local_pca, realized_spot_matrix, spectral_split, LocalPcaFit, SpotRaw};

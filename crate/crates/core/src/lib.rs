//! I-prior regression.
//!
//! Regression functions live in a (Krein) space built from centered
//! reproducing kernels combined with an ANOVA construction. Under the I-prior
//! the regression function is `f = f₀ + Σ_i h(·, x_i) w_i` with
//! `w ~ N(0, Ψ)`, so the marginal law of `y` is Gaussian with covariance
//! `HΨH + Ψ⁻¹`. Scale parameters and the error precision are estimated by
//! EM; the posterior of `f` is then available in closed form.

pub mod anova;
pub mod applications;
pub mod config;
pub mod data;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod kernels;

pub use error::{Error, Result};

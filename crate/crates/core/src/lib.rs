//! Partially linear single-index models for longitudinal data.
//!
//! The response is modeled as `y = g(x' beta) + z' theta + e` with an unknown
//! smooth link `g`, a unit-norm index coefficient `beta`, and errors that are
//! correlated within subject.  Estimation alternates a local linear smoother
//! for the link with estimating-equation updates for the coefficients, with
//! the within-subject correlation absorbed either through a working
//! correlation matrix ([`gee`]) or through a quadratic inference function
//! built from a basis expansion of its inverse ([`qif`]).  Sparse variants
//! attach a SCAD penalty with the two tuning rates chosen by BIC ([`select`]),
//! and [`sim`] replicates the estimators over synthetic designs.
//!
//! Everything is generic over the scalar type through the [`Scalar`] trait
//! (`f32`, `f64`, ...); the aliases at the crate root fix `f64`, which is what
//! the command-line front end uses.

pub mod corr;
pub mod error;
pub mod gee;
pub mod io;
pub mod linalg;
pub mod model;
pub mod qif;
pub mod scalar;
pub mod select;
pub mod sim;
pub mod smooth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision dataset.
pub type Dataset = model::LongitudinalDataset<f64>;
/// Double-precision subject block.
pub type SubjectF64 = model::Subject<f64>;
/// Double-precision index coefficient under the delete-one-component map.
pub type Index = model::IndexParam<f64>;
/// Double-precision linear coefficient.
pub type Theta = model::ThetaParam<f64>;
/// Double-precision fit output.
pub type Fit = model::FitResult<f64>;
/// Double-precision marginal-fit configuration.
pub type GeeSettings = gee::GeeConfig<f64>;
/// Double-precision quadratic-inference configuration.
pub type QifSettings = qif::QifConfig<f64>;
/// Double-precision penalty configuration.
pub type PenaltySettings = select::PenaltyConfig<f64>;
/// Double-precision tuning-search output.
pub type Selection = select::SelectionResult<f64>;
/// Double-precision simulation design.
pub type Design = sim::SimDesign<f64>;
/// Double-precision replication summary.
pub type Metrics = sim::MetricsReport<f64>;

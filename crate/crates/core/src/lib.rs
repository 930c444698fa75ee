//! Distributionally robust optimisation with Bayesian ambiguity sets over
//! conjugate exponential families.
//!
//! The crate is organised bottom-up:
//!
//! * [`expfam`]: conjugate posteriors, nominal and predictive laws, KL
//!   divergences and the tolerance closed forms.
//! * [`duals`]: the one-dimensional KL dual, its sample-average
//!   approximation, and the Gaussian/linear closed form.
//! * [`solver`]: the outer minimisation over the decision set.
//! * [`baselines`]: BDRO, empirical-KL DRO and Wasserstein DRO.
//! * [`bench`]: data-generating processes, the newsvendor and portfolio
//!   experiments, summaries and cross-validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bench;
pub mod duals;
pub mod error;
pub mod expfam;
pub mod linalg;
pub mod quad;
pub mod samples;
pub mod solver;
pub mod special;

pub use error::{DroError, Result};
pub use expfam::{
    kl_divergence, ConjugatePosterior, Family, GammaParams, NiwParams, NominalModel,
    NormalGammaParams, PosteriorParams, PredictiveModel, SamplingModel, StandardParams,
};
pub use samples::Samples;

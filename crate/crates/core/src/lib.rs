//! Maximal displacement of branching random walks through time interfaces.
//!
//! The crate has two halves. The analytic half ([`mechanisms`],
//! [`transforms`], [`regimes`]) computes the predicted front
//! `m_n = v̂·n − L·log n` from the Laplace transforms of the branching
//! mechanisms. The empirical half ([`simulator`], [`walklab`], [`stats`])
//! checks those predictions against the particle system and checks the
//! random-walk estimates they rest on.

// `!(x < y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod mechanisms;
pub mod regimes;
pub mod rng;
pub mod simulator;
pub mod stats;
pub mod transforms;
pub mod walklab;

pub use error::{Error, Result};
pub use mechanisms::{BranchingMechanism, DisplacementLaw, MechanismSpec, Outcome};
pub use regimes::{EnvironmentSchedule, PredictedFront, Regime, RegimePrediction};
pub use transforms::{CramerValue, TransformProfile};

//! Offline reward transfer between tabular MDPs.
//!
//! A reward is recovered from source demonstrations under an anchor
//! normalization, then transferred to a target environment with different
//! dynamics and solved there under KL-regularized (soft) control. Estimators
//! fit the transfer from finite transition data as primal-dual saddle points.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod data;
pub mod diagnostics;
pub mod envgen;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod mdp;
pub mod scalar;
pub mod soft;
pub mod transfer;

pub use error::{Error, Result};
pub use mdp::{Kernel, Policy, SADist, SAFn, SFn};
pub use scalar::Real;
pub use soft::SoftSpec;
pub use transfer::{AnchorSpec, Oracle, TransferProblem};

pub type Kernel64 = Kernel<f64>;
pub type Policy64 = Policy<f64>;
pub type SAFn64 = SAFn<f64>;
pub type SFn64 = SFn<f64>;
pub type SADist64 = SADist<f64>;
pub type SoftSpec64 = SoftSpec<f64>;
pub type TransferProblem64 = TransferProblem<f64>;
pub type Oracle64 = Oracle<f64>;

pub type Kernel32 = Kernel<f32>;
pub type Policy32 = Policy<f32>;
pub type SAFn32 = SAFn<f32>;
pub type SFn32 = SFn<f32>;
pub type SADist32 = SADist<f32>;
pub type SoftSpec32 = SoftSpec<f32>;
pub type TransferProblem32 = TransferProblem<f32>;
pub type Oracle32 = Oracle<f32>;

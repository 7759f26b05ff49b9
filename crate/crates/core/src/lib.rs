//! Zeroth-order optimization attacks on black-box image classifiers.
//!
//! The attacker only sees probability vectors returned by an [`Oracle`].
//! Gradients are estimated coordinate by coordinate with symmetric
//! differences and fed to a coordinate-wise ADAM or Newton solver. Large
//! images can be attacked in a reduced, progressively refined
//! [`AttackSpace`] with importance-weighted coordinate sampling.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attackspace;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod oracle;

pub use attackspace::{AttackSpace, ImportanceMap, Stage};
pub use dataset::LabeledImage;
pub use error::{Error, Result};
pub use loss::{AttackGoal, GoalKind};
pub use model::{Layer, Network};
pub use numerics::Tensor;
pub use optimizer::{AttackResult, BoxMode, SolverConfig, SolverKind};
pub use oracle::{FnOracle, NetworkOracle, Oracle, ProbabilityVector};

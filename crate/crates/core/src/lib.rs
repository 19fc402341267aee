//! Kronecker-factored and eigenvalue-corrected preconditioners for small
//! fully-connected networks, with the diagnostics used to compare them.

pub mod curvature;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod net;
pub mod precond;

pub use curvature::{compute_kfe, estimate_factors, ExactFisherBlock, KfeState, KroneckerFactors};
pub use error::{Error, Result};
pub use linalg::{DenseMatrix, SymEigen};
pub use net::{Activation, LayerBatchRecord, LayerSpec, Loss, Network};
pub use precond::{Hyperparams, Optimizer, PreconditionerKind, StepReport};

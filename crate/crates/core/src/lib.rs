//! Ground states of the rotating Gross–Pitaevskii energy on a disk by
//! preconditioned Riemannian gradient descent on the L² unit sphere.

pub mod error;
pub mod field_io;
pub mod grid;
pub mod linalg;
pub mod operators;
pub mod oracle;
pub mod precond;
pub mod rates;
pub mod riemannian;
pub mod solver;
pub mod spectral;
pub mod stencil;

pub use error::{GprgError, Result};
pub use grid::{inner_l2, Field, PolarGrid};
pub use operators::{EnergyCurve, OperatorSet, Potential, ProblemParams, StateEval};
pub use precond::{assemble, PreconditionerHandle, PreconditionerKind, PreconditionerSpec};

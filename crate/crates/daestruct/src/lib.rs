//! Structural analysis and regularization of differential-algebraic equations.
//!
//! The pipeline reads a DAE whose equations are expression trees over jet
//! variables, computes Pryce offsets from the signature matrix, prolongs the
//! system, checks the top-block Jacobian for degeneration at real witness
//! points of the algebraic constraints, repairs degenerate systems by implicit
//! index reduction and integrates the result with a predict-project scheme.
//!
//! Expression evaluation and the dense kernels in [`numlin`] are generic over
//! the scalar type. The orchestration layers run in `f64`.

pub mod cli;
pub mod dae;
pub mod expr;
pub mod integrate;
pub mod numlin;
pub mod prolong;
pub mod regularize;
pub mod structure;
pub mod witness;

use std::fmt::{Debug, Display};

/// Real scalar usable by the generic kernels.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + nalgebra::RealField
    + Copy
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

macro_rules! impl_real {
    ($($t:ty),*) => { $(impl Real for $t {})* };
}
impl_real!(f32, f64);

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;
pub type Matrix32 = nalgebra::DMatrix<f32>;
pub type Vector32 = nalgebra::DVector<f32>;
pub type Binding = expr::Binding<f64>;
pub type Binding32 = expr::Binding<f32>;
pub type RankResult = numlin::RankResult<f64>;

pub use dae::DaeSystem;
pub use expr::{Expr, JetVar};
pub use structure::{OffsetPair, SignatureMatrix};

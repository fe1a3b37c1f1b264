//! Solvers for discrete martingale optimal transport.
//!
//! The crate covers the entropically regularized problem (martingale Sinkhorn
//! iterations, a truncated Newton method on the implied semi-dual, and a
//! hybrid of the two), the non-smooth semi-dual baseline, a dense LP oracle
//! for desk-scale ground truth, concave-envelope computation, convex-order
//! repair of marginals, and the experiment generators and file formats used
//! by the `mot` CLI.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation the CLI uses.

pub mod entropic;
pub mod experiments;
pub mod hull;
pub mod io;
pub mod lp;
pub mod model;
pub mod newton;
pub mod repair;
pub mod scalar;
pub mod semidual;
pub mod sinkhorn;
pub mod solver;

pub use scalar::Scalar;

/// Default scalar for the CLI and the file formats.
pub type Real = f64;

pub type Measure64 = model::DiscreteMeasure<f64>;
pub type Cost64 = model::CostSpec<f64>;
pub type Instance64 = model::MotInstance<f64>;
pub type Dual64 = model::DualState<f64>;
pub type Hull64 = hull::HullResult<f64>;

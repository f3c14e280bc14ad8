//! Reviewed Riemann-Liouville fractional calculus and the geometry of the
//! k-order fractional osculator bundle.
//!
//! The crate is organised bottom-up:
//!
//! - [`specfun`]: Gamma, generalized binomials, Mittag-Leffler series.
//! - [`fracseries`]: exact calculus on finite sums `c·t^γ`, used as the
//!   ground truth for every numerical scheme.
//! - [`expr`]: a small expression language over chart/jet variables with
//!   exact fractional partials on its monomial fragment.
//! - [`fracnum`]: Grünwald-Letnikov and L1 schemes, the integration-by-parts
//!   check and a fractional Adams-Bashforth-Moulton solver.
//! - [`geometry`]: fractional Jacobians and the fractional exterior derivative.
//! - [`oscbundle`]: jet coordinates, Liouville fields, sprays, nonlinear and
//!   metrical connections on the bundle.
//! - [`lagrange`]: fractional Lagrangians, Euler-Lagrange residuals and the
//!   Riemann/Finsler/Lagrange prolongations.
//!
//! Throughout, the fractional derivative is the *reviewed* one: the
//! Riemann-Liouville derivative of `f - f(a)`, so constants differentiate to
//! zero.

pub mod error;
pub mod expr;
pub mod fracnum;
pub mod fracseries;
pub mod geometry;
pub mod lagrange;
pub mod oscbundle;
pub mod specfun;

pub use error::{Error, Result};

//! Weighted parabolic analysis on uniform space-time grids.
//!
//! Maximal operators, Muckenhoupt weight estimates, Whitney coverings of
//! bad sets, the parabolic Lipschitz truncation, implicit solvers for
//! linear-at-infinity parabolic systems, and the studies that measure them.

// `!(x > 0.0)` is how NaN gets rejected along with the rest
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod boxsum;
pub mod error;
pub mod experiments;
pub mod field;
pub mod liptrunc;
pub mod maximal;
pub mod pde;
pub mod weights;
pub mod whitney;
pub mod sum;

pub use error::{Error, Result};
pub use field::{Boundary, Cylinder, Field, Grid, GridSpec, Orientation, Rank};

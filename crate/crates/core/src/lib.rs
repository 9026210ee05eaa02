//! Monte Carlo machinery for stochastic maximum principles of partially
//! observed mean-field jump diffusions: simulation under the reference
//! measure, Malliavin-type derivative operators, both adjoint constructions,
//! cost estimation and the linear-quadratic solvers.

// `!(a > b)` deliberately rejects NaN; index loops mirror the time grid.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments,
    clippy::large_enum_variant
)]

pub mod adjoint_bsde;
pub mod adjoint_mall;
pub mod cost;
pub mod error;
pub mod forward;
pub mod lq;
pub mod malliavin;
pub mod model;
pub mod paths;
pub mod regression;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};

//! Stochastic three-operator splitting for nonconvex, nonsmooth composite
//! problems `min F(x) + G(x) + H(x)`, specialised to FLASH proton treatment
//! planning: least-squares dose objective `H`, minimum monitor-unit set `G`
//! and smoothed dose / dose-rate polyhedron `F`.

pub mod error;
pub mod estimators;
pub mod linalg;
pub mod metrics;
pub mod objective;
pub mod problem;
pub mod projections;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

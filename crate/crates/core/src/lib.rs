//! Numerical toolkit for spectral densities of deformed Wigner-type random
//! matrix ensembles near cusp formation: self-consistent density solvers, the
//! free semicircular flow, local shape laws, quantile machinery, coupled and
//! short-range Dyson Brownian motion, the extended Pearcey kernel, and a
//! Monte-Carlo comparison harness.

pub mod checks;
pub mod config;
pub mod dbm;
pub mod density;
pub mod error;
pub mod mc;
pub mod noise;
pub mod operator;
pub mod pearcey;
pub mod quantiles;
pub mod scflow;
pub mod shape;
pub mod twoatom;

pub use config::{DbmConfig, McConfig, NumericConfig, PearceyConfig};
pub use error::{CuspError, Result};

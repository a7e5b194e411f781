//! Time-reversed diffusions, Fokker-Planck terminal-value problems and
//! initial-law reconstruction.

pub mod distributions;
pub mod density_estimation;
pub mod error;
pub mod forward_sim;
pub mod inverse_source;
pub mod linalg_ode;
pub mod mckean_sim;
pub mod models;
pub mod ou_analytic;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};

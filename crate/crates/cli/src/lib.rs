//! Config-driven front end for the retrodiction toolkit.

pub mod config;
pub mod run;

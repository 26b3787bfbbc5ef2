//! Finite mixtures for data with informative missing values. The missingness
//! of each cell may depend on the row's class, on the value itself or both;
//! class-only mechanisms are fitted by EM, value-dependent ones by a
//! stochastic EM with Gibbs draws. Also: a three-class simulator with Bayes
//! rate calibration, ICL model choice, imputation and a CLI.

pub mod cli;
pub mod distributions;
pub mod em;
pub mod error;
pub mod fit;
pub mod glm;
pub mod impute;
pub mod io;
pub mod mechanisms;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod sem;
pub mod simulate;

//! Fitted-model container shared by the EM and SEM engines.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::em::{fit_em, FitConfig};
use crate::distributions::LinkFunction;
use crate::error::{Error, Result};
use crate::mechanisms::MechanismSpec;
use crate::models::{CovarianceStructure, Dataset, Theta, VariableSchema};
use crate::sem::{fit_sem, SemConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Em,
    Sem,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Em => "em",
            Algorithm::Sem => "sem",
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "em" => Ok(Algorithm::Em),
            "sem" => Ok(Algorithm::Sem),
            o => Err(crate::error::Error::Config(format!("unknown algorithm `{o}` (em|sem)"))),
        }
    }
}

/// Result of fitting one (K, mechanism) model.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub algorithm: Algorithm,
    pub spec: MechanismSpec,
    pub covariance: CovarianceStructure,
    pub theta: Theta,
    /// n×K posterior class probabilities given observed values and mask.
    pub responsibilities: DMatrix<f64>,
    /// MAP class of each row (0-based).
    pub partition: Vec<usize>,
    /// Observed-data log-likelihood at `theta` (a Monte Carlo estimate for
    /// mechanisms that depend on the missing values).
    pub log_likelihood: f64,
    /// Standard error of `log_likelihood` when it is a Monte Carlo estimate.
    pub log_likelihood_se: Option<f64>,
    /// Log-likelihood per EM iteration, or per SEM iteration when it is
    /// available in closed form.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Free parameters of mixture plus mechanism.
    pub n_params: usize,
    /// SEM iterations after burn-in in which a class emptied.
    pub flagged_iterations: usize,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.theta.k()
    }

    pub fn n(&self) -> usize {
        self.responsibilities.nrows()
    }
}

/// Settings for both engines plus an optional forced choice between them.
#[derive(Debug, Clone, Default)]
pub struct ModelConfig {
    /// `None` picks EM when the mechanism is free of y and SEM otherwise.
    pub algorithm: Option<Algorithm>,
    pub em: FitConfig,
    pub sem: SemConfig,
}

impl ModelConfig {
    pub fn algorithm_for(&self, spec: MechanismSpec) -> Algorithm {
        self.algorithm
            .unwrap_or(if spec.kind.depends_on_y() { Algorithm::Sem } else { Algorithm::Em })
    }

    /// Same seed and covariance structure for both engines.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.em.seed = seed;
        self.sem.seed = seed;
        self.sem.warm_start.seed = seed;
        self
    }

    pub fn with_covariance(mut self, covariance: CovarianceStructure) -> Self {
        self.em.covariance = covariance;
        self.sem.covariance = covariance;
        self.sem.warm_start.covariance = covariance;
        self
    }
}

/// Which (mechanism, link, engine) combinations can be computed. EM needs
/// a mask factor free of the missing values; SEM needs the probit utility
/// construction whenever the mask depends on them.
pub fn check_feasible(spec: MechanismSpec, algorithm: Algorithm) -> Result<()> {
    let y = spec.kind.depends_on_y();
    match algorithm {
        Algorithm::Em if y => Err(Error::Infeasible(format!(
            "EM has no closed form for {}: the mask probability depends on the missing values; use --algorithm sem --link probit",
            spec.kind
        ))),
        Algorithm::Sem if y && spec.link != LinkFunction::Probit => Err(Error::Infeasible(format!(
            "SEM for {} needs the probit link (got {}); no other link has a conjugate utility construction",
            spec.kind, spec.link
        ))),
        _ => Ok(()),
    }
}

/// Fit one (K, mechanism) model with the engine `config` selects.
pub fn fit_model(data: &Dataset, k: usize, spec: MechanismSpec, config: &ModelConfig) -> Result<FitResult> {
    let algorithm = config.algorithm_for(spec);
    check_feasible(spec, algorithm)?;
    match algorithm {
        Algorithm::Em => fit_em(data, k, spec, &config.em),
        Algorithm::Sem => fit_sem(data, k, spec, &config.sem),
    }
}

/// Free parameters of the mixture part: K−1 proportions plus, per class,
/// the Gaussian block and the categorical tables.
pub fn mixture_free_params(schema: &VariableSchema, k: usize, covariance: CovarianceStructure) -> usize {
    let dc = schema.continuous_indices().len();
    let gaussian = match covariance {
        CovarianceStructure::Full => dc * (dc + 3) / 2,
        CovarianceStructure::Diagonal => 2 * dc,
    };
    let categorical: usize = schema
        .categorical_indices()
        .iter()
        .map(|&j| schema.levels(j).expect("categorical") - 1)
        .sum();
    k * (gaussian + categorical) + k - 1
}

/// ν for the ICL and BIC penalties.
pub fn model_free_params(theta: &Theta, covariance: CovarianceStructure) -> usize {
    mixture_free_params(theta.mixture.schema(), theta.k(), covariance) + theta.mechanism.free_param_count()
}

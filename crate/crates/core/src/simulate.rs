//! Synthetic mixtures with controlled separation and missingness:
//! y_ij = δ Σ_k φ_kj z_ik + ε_ij, masks drawn cell by cell from a
//! mechanism, and Monte Carlo calibration of (δ, intercepts) to target
//! misclassification and missing rates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{GaussianParams, LinkFunction};
use crate::error::{Error, Result};
use crate::mechanisms::{MechanismKind, MechanismParams};
use crate::metrics::{adjusted_rand_index, map_partition};
use crate::models::{ComponentParams, Dataset, Mask, MixtureParams, Theta, VariableSchema};
use crate::rng::{seeded, SimRng};
use crate::sem::mc_posterior;

/// Largest intercept magnitude used when a target rate is 0 or 1.
pub const INTERCEPT_LIMIT: f64 = 8.0;

/// Default class proportions for three classes.
pub const DEFAULT_PROPORTIONS: [f64; 3] = [0.5, 0.25, 0.25];

/// Gaussian mixture generator with a missingness mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub proportions: Vec<f64>,
    /// Separation multiplier.
    pub delta: f64,
    /// K×d table of 0/1 entries; class k has mean δ·φ_k.
    pub phi: Vec<Vec<u8>>,
    /// Common off-diagonal correlation of the within-class noise.
    pub correlation: f64,
    pub mechanism: MechanismParams,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn k(&self) -> usize {
        self.proportions.len()
    }

    pub fn d(&self) -> usize {
        self.phi.first().map_or(0, |r| r.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        let k = self.k();
        if k == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if self.proportions.iter().any(|p| !(*p > 0.0)) || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("proportions must be positive and sum to one".into()));
        }
        if self.phi.len() != k {
            return Err(Error::Dimension(format!("phi has {} rows for {k} classes", self.phi.len())));
        }
        let d = self.d();
        if d == 0 || self.phi.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("phi rows must be nonempty and of equal length".into()));
        }
        if self.phi.iter().flatten().any(|v| *v > 1) {
            return Err(Error::Config("phi entries must be 0 or 1".into()));
        }
        if !(0.0..1.0).contains(&self.correlation) {
            return Err(Error::Config(format!("correlation {} is outside [0, 1)", self.correlation)));
        }
        if !self.delta.is_finite() {
            return Err(Error::Config("delta must be finite".into()));
        }
        if self.mechanism.k() != k || self.mechanism.d() != d {
            return Err(Error::Dimension(format!(
                "mechanism is {}x{}, generator is {k}x{d}",
                self.mechanism.k(),
                self.mechanism.d()
            )));
        }
        Ok(())
    }

    /// Noise covariance: 1 on the diagonal, `correlation` elsewhere.
    pub fn noise_covariance(&self) -> DMatrix<f64> {
        let d = self.d();
        DMatrix::from_fn(d, d, |a, b| if a == b { 1.0 } else { self.correlation })
    }

    /// Generating parameters as a model.
    pub fn true_theta(&self) -> Result<Theta> {
        self.validate()?;
        let cov = self.noise_covariance();
        let components = self
            .phi
            .iter()
            .map(|row| {
                let mean = DVector::from_iterator(row.len(), row.iter().map(|p| self.delta * *p as f64));
                Ok(ComponentParams {
                    gaussian: Some(GaussianParams::new(mean, cov.clone())?),
                    categorical: vec![],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mixture = MixtureParams::new(self.proportions.clone(), components, VariableSchema::continuous(self.d()))?;
        Ok(Theta { mixture, mechanism: self.mechanism.clone() })
    }

    /// The three-class setting with default proportions and the `phi`
    /// table for `d`.
    pub fn three_class(n: usize, d: usize, delta: f64, mechanism: MechanismParams, seed: u64) -> Result<Self> {
        let c = GeneratorConfig {
            n,
            proportions: DEFAULT_PROPORTIONS.to_vec(),
            delta,
            phi: phi_table(d)?,
            correlation: 0.0,
            mechanism,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    /// Reference setting for `kind` at 30% missing and 10% Bayes
    /// misclassification, probit link.
    pub fn reference(kind: MechanismKind, d: usize, n: usize, seed: u64) -> Result<Self> {
        let s = reference_setting(kind, d)?;
        GeneratorConfig::three_class(n, d, s.delta, s.mechanism, seed)
    }

    /// Class-only mechanism reference with a chosen link, missing rate,
    /// Bayes misclassification rate and noise correlation (d = 6).
    pub fn mnarz_reference(
        link: LinkFunction,
        missing_rate: f64,
        misclassification: f64,
        correlation: f64,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let s = mnarz_setting(link, missing_rate, misclassification, correlation)?;
        let mut c = GeneratorConfig::three_class(n, 6, s.delta, s.mechanism, seed)?;
        c.correlation = s.correlation;
        c.validate()?;
        Ok(c)
    }

    /// Two isotropic bivariate classes with equal weights: centres 0 and
    /// (Δμ, Δμ), class-only probit missingness averaging `missing_rate`
    /// with class rates `missing_rate ∓ Δperc/2`.
    pub fn two_class(n: usize, delta_mu: f64, delta_perc: f64, missing_rate: f64, seed: u64) -> Result<Self> {
        let (p1, p2) = (missing_rate - delta_perc / 2.0, missing_rate + delta_perc / 2.0);
        if !(p1 >= 0.0 && p2 <= 1.0) {
            return Err(Error::Config(format!("class missing rates {p1} and {p2} must lie in [0, 1]")));
        }
        let link = LinkFunction::Probit;
        // a rate of exactly 0 or 1 becomes an intercept of ∓INTERCEPT_LIMIT
        let intercept = |p: f64| link.inverse_cdf(p).clamp(-INTERCEPT_LIMIT, INTERCEPT_LIMIT);
        let alpha = DMatrix::from_fn(2, 2, |k, _| intercept(if k == 0 { p1 } else { p2 }));
        let mechanism = MechanismParams::from_tables(MechanismKind::MNARz, link, alpha, DMatrix::zeros(2, 2))?;
        let c = GeneratorConfig {
            n,
            proportions: vec![0.5, 0.5],
            delta: delta_mu,
            phi: vec![vec![0, 0], vec![1, 1]],
            correlation: 0.0,
            mechanism,
            seed,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Class–variable interaction table for d ∈ {3, 6, 9}.
pub fn phi_table(d: usize) -> Result<Vec<Vec<u8>>> {
    let ones: &[(usize, usize)] = match d {
        3 => &[(1, 1), (2, 2), (3, 3)],
        6 => &[(1, 1), (2, 2), (3, 3), (1, 4), (3, 6)],
        9 => &[(1, 1), (2, 2), (3, 3), (1, 4), (3, 6), (1, 7), (2, 7), (3, 9)],
        _ => return Err(Error::Config(format!("no interaction table for d={d} (3, 6 or 9)"))),
    };
    let mut phi = vec![vec![0u8; d]; 3];
    for &(k, j) in ones {
        phi[k - 1][j - 1] = 1;
    }
    Ok(phi)
}

/// Separation and mechanism of a tabulated setting.
#[derive(Debug, Clone)]
pub struct Setting {
    pub delta: f64,
    pub correlation: f64,
    pub mechanism: MechanismParams,
}

fn rows_to_table(rows: &[&[f64]]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows[0].len(), |a, b| rows[a][b])
}

/// Expand a per-class intercept vector to K×d.
fn per_class(alpha: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(alpha.len(), d, |k, _| alpha[k])
}

fn per_variable(beta: &[f64], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, beta.len(), |_, j| beta[j])
}

/// Tabulated probit setting for `kind` giving about 30% missing cells and
/// 10% Bayes misclassification with the `phi` table of dimension `d`.
pub fn reference_setting(kind: MechanismKind, d: usize) -> Result<Setting> {
    use MechanismKind::*;
    let k = 3;
    let none = || Error::Config(format!("no tabulated setting for {kind} with d={d}; use calibrate"));
    let (delta, alpha, beta): (f64, DMatrix<f64>, DMatrix<f64>) = match (kind, d) {
        (MNARz, 6) => (2.6, per_class(&[-1.0, -0.3, 0.0], d), DMatrix::zeros(k, d)),
        (MNARzj, 3) => (
            20.0,
            rows_to_table(&[&[-0.4, -0.65, -0.65], &[-1.1, -1.0, -1.0], &[-0.6, 0.4, 0.4]]),
            DMatrix::zeros(k, d),
        ),
        (MNARzj, 6) => (
            2.5,
            rows_to_table(&[
                &[-1.4, -1.4, -1.2, -1.1, -1.0, -0.9],
                &[-0.6, 0.4, 0.4, 0.3, 0.1, 0.1],
                &[-0.2, -0.2, -0.2, -0.2, -0.2, -0.2],
            ]),
            DMatrix::zeros(k, d),
        ),
        (MNARzj, 9) => (
            1.78,
            rows_to_table(&[
                &[-0.5, -0.65, -0.65, -1.1, -1.7, -1.7, -1.4, -1.4, -1.4],
                &[-0.6, 0.4, 0.4, -0.2, 0.3, 0.4, 0.3, 0.3, 0.3],
                &[-0.4; 9],
            ]),
            DMatrix::zeros(k, d),
        ),
        (MNARy, 3) => (3.5, DMatrix::from_element(k, d, -1.56), per_variable(&[1.45, 0.2, -3.0], k)),
        (MNARy, 6) => (2.25, DMatrix::from_element(k, d, -0.7), per_variable(&[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0], k)),
        (MNARy, 9) => (
            1.98,
            DMatrix::from_element(k, d, -0.68),
            per_variable(&[0.5, 0.1, -1.2, 0.4, -0.1, -1.3, 0.3, -0.1, -1.0], k),
        ),
        (MNARyz, 3) => (4.72, per_class(&[-1.2, -0.8, -0.5], d), per_variable(&[-3.0, 0.3, 1.0], k)),
        (MNARyz, 6) => (2.12, per_class(&[-1.35, -0.29, 0.0], d), per_variable(&[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0], k)),
        (MNARyz, 9) => (
            1.71,
            per_class(&[-1.34, -0.34, 0.0], d),
            per_variable(&[-3.0, 0.3, -3.0, -2.8, -2.0, 1.0, 0.2, 0.1, 0.4], k),
        ),
        (MNARykzj, 3) => (
            2.55,
            rows_to_table(&[&[-1.0, -0.95, -0.9], &[0.75, 0.7, 0.8], &[-0.2, -0.2, -0.2]]),
            rows_to_table(&[&[-3.0, 0.3, -3.0], &[0.3, -3.0, 0.3], &[-3.0, 0.3, -3.0]]),
        ),
        (MNARykzj, 6) => (
            1.96,
            rows_to_table(&[
                &[-1.2, -1.0, -0.9, -0.9, -0.7, -0.8],
                &[-0.6, 0.4, 0.4, 0.3, 0.1, 0.1],
                &[-0.4; 6],
            ]),
            rows_to_table(&[
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0],
                &[0.3, -3.0, 0.3, -0.3, -2.0, 0.2],
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0],
            ]),
        ),
        (MNARykzj, 9) => (
            1.45,
            rows_to_table(&[
                &[-1.4, -1.0, -1.1, -1.1, -0.9, -0.8, -1.2, -1.0, -1.1],
                &[0.3, 0.5, 0.2, -0.6, 0.4, 0.4, 0.3, 0.1, 0.1],
                &[-0.4; 9],
            ]),
            rows_to_table(&[
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0, -3.0, 0.3, 0.2],
                &[0.3, -3.0, 0.3, -0.3, -2.0, 0.2, 0.2, 0.3, -0.3],
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0, -1.0, -2.0, -3.0],
            ]),
        ),
        (MNARyk, 6) => (
            1.92,
            DMatrix::from_element(k, d, -0.75),
            rows_to_table(&[
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0],
                &[0.5, -2.0, 1.0, 1.0, 1.0, 0.5],
                &[1.0, 1.0, 0.5, 0.5, 0.5, 2.0],
            ]),
        ),
        (MNARykz, 6) => (
            1.91,
            per_class(&[-0.9, -0.15, 0.0], d),
            rows_to_table(&[
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0],
                &[0.3, -3.0, 0.3, -0.3, -2.0, 0.2],
                &[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0],
            ]),
        ),
        (MNARyzj, 6) => (
            2.15,
            rows_to_table(&[
                &[-1.4, -1.4, -1.2, -1.1, -1.0, -0.9],
                &[-0.6, 0.4, 0.4, 0.3, 0.1, 0.1],
                &[-0.8, -0.8, 0.8, -0.8, -0.8, 0.8],
            ]),
            per_variable(&[-3.0, 0.3, -3.0, -3.0, -2.0, 1.0], k),
        ),
        _ => return Err(none()),
    };
    let mechanism = MechanismParams::from_tables(kind, LinkFunction::Probit, alpha, beta)?;
    Ok(Setting { delta, correlation: 0.0, mechanism })
}

/// Tabulated class-only settings (d = 6) indexed by link, missing rate,
/// Bayes misclassification and noise correlation.
pub fn mnarz_setting(link: LinkFunction, missing_rate: f64, misclassification: f64, correlation: f64) -> Result<Setting> {
    use LinkFunction::*;
    // (link, missing, misclassification, correlation, delta, alpha)
    const TABLE: &[(LinkFunction, f64, f64, f64, f64, [f64; 3])] = &[
        (Probit, 0.3, 0.10, 0.0, 2.6, [-1.0, -0.3, 0.0]),
        (Logit, 0.3, 0.10, 0.0, 2.76, [-1.5, -0.8, 0.1]),
        (Laplace, 0.3, 0.10, 0.0, 2.85, [-1.1, 0.3, 0.0]),
        (Probit, 0.3, 0.15, 0.0, 2.27, [-1.0, -0.3, 0.0]),
        (Logit, 0.3, 0.15, 0.0, 2.44, [-1.5, -0.8, 0.1]),
        (Laplace, 0.3, 0.15, 0.0, 2.46, [-1.1, 0.3, 0.0]),
        (Probit, 0.3, 0.10, 0.1, 2.3, [-1.16, 0.3, -0.42]),
        (Probit, 0.3, 0.10, 0.25, 2.17, [-1.16, 0.3, -0.4]),
        (Probit, 0.3, 0.10, 0.5, 1.85, [-1.16, 0.3, -0.4]),
        (Probit, 0.3, 0.15, 0.1, 1.97, [-1.16, 0.3, -0.42]),
        (Probit, 0.3, 0.15, 0.25, 1.86, [-1.16, 0.3, -0.4]),
        (Probit, 0.3, 0.15, 0.5, 1.57, [-1.16, 0.3, -0.4]),
        (Probit, 0.1, 0.10, 0.0, 2.18, [-1.65, -1.2, -0.9]),
        (Probit, 0.5, 0.10, 0.0, 3.3, [-0.55, 0.25, 1.7]),
        (Probit, 0.1, 0.15, 0.0, 1.95, [-1.65, -1.2, -0.9]),
        (Probit, 0.5, 0.15, 0.0, 2.62, [-0.55, 0.25, 1.7]),
    ];
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let row = TABLE
        .iter()
        .find(|r| r.0 == link && close(r.1, missing_rate) && close(r.2, misclassification) && close(r.3, correlation))
        .ok_or_else(|| {
            Error::Config(format!(
                "no tabulated class-only setting for link={link}, missing={missing_rate}, misclassification={misclassification}, correlation={correlation}; use calibrate"
            ))
        })?;
    let mechanism = MechanismParams::from_tables(MechanismKind::MNARz, link, per_class(&row.5, 6), DMatrix::zeros(3, 6))?;
    Ok(Setting { delta: row.4, correlation: row.3, mechanism })
}

/// A generated sample.
#[derive(Debug, Clone)]
pub struct Simulated {
    /// Values before masking.
    pub complete: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Masked values (NaN where missing) and the mask.
    pub dataset: Dataset,
}

/// Draw `config.n` rows: class from the proportions, values from the
/// class Gaussian, then each cell masked with probability
/// ρ(α_kj + β_kj y_ij). The random numbers consumed do not depend on δ or
/// the mechanism, so different settings with one generator state share
/// their randomness.
pub fn generate(config: &GeneratorConfig, rng: &mut SimRng) -> Result<Simulated> {
    config.validate()?;
    let (n, d) = (config.n, config.d());
    let chol = GaussianParams::new(DVector::zeros(d), config.noise_covariance())?.chol_lower();
    let mut complete = DMatrix::zeros(n, d);
    let mut mask = Mask::from_element(n, d, false);
    let mut labels = Vec::with_capacity(n);
    let mech = &config.mechanism;
    let mut eps = DVector::zeros(d);
    for i in 0..n {
        let u: f64 = rng.random();
        let mut k = 0;
        let mut acc = config.proportions[0];
        while u >= acc && k + 1 < config.k() {
            k += 1;
            acc += config.proportions[k];
        }
        labels.push(k);
        for j in 0..d {
            eps[j] = rng.sample(StandardNormal);
        }
        let noise = &chol * &eps;
        for j in 0..d {
            let y = config.delta * config.phi[k][j] as f64 + noise[j];
            complete[(i, j)] = y;
            let v: f64 = rng.random();
            mask[(i, j)] = v < mech.prob_missing(k, j, y);
        }
    }
    let dataset = Dataset::continuous(complete.clone(), mask)?;
    Ok(Simulated { complete, labels, dataset })
}

/// Convenience: generate with the config's own seed.
pub fn generate_seeded(config: &GeneratorConfig) -> Result<Simulated> {
    generate(config, &mut seeded(config.seed))
}

/// How the Bayes classifier of the generating parameters reads a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BayesRule {
    /// Observed values only, the mask ignored. This is the rule the
    /// tabulated reference settings were tuned against.
    #[default]
    ObservedOnly,
    /// Observed values and the mask, under the true mechanism.
    ObservedAndMask,
}

/// MAP labels under the generating parameters. With the mask in play and
/// a self-masked mechanism the posterior is a Monte Carlo estimate with
/// `draws` samples per row.
pub fn bayes_partition(
    config: &GeneratorConfig,
    sim: &Simulated,
    rule: BayesRule,
    draws: usize,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    let mut theta = config.true_theta()?;
    let resp = match rule {
        BayesRule::ObservedOnly => {
            theta.mechanism = MechanismParams::new(MechanismKind::MCAR, theta.mechanism.link(), config.k(), config.d());
            crate::em::posterior(&theta, &sim.dataset)?.0
        }
        BayesRule::ObservedAndMask => mc_posterior(&theta, &sim.dataset, draws, rng)?.responsibilities,
    };
    Ok(map_partition(&resp))
}

/// Misclassification and missing rates of a simulated sample under the
/// Bayes rule of the generating parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rates {
    pub misclassification: f64,
    pub missing_rate: f64,
}

/// Monte Carlo rates over `n_mc` rows.
pub fn bayes_rates(config: &GeneratorConfig, n_mc: usize, rule: BayesRule, draws: usize, seed: u64) -> Result<Rates> {
    let cfg = GeneratorConfig { n: n_mc, ..config.clone() };
    let mut rng = seeded(seed);
    let sim = generate(&cfg, &mut rng)?;
    let z = bayes_partition(&cfg, &sim, rule, draws, &mut rng)?;
    let wrong = z.iter().zip(&sim.labels).filter(|(a, b)| a != b).count();
    Ok(Rates {
        misclassification: wrong as f64 / n_mc as f64,
        missing_rate: sim.dataset.missing_rate(),
    })
}

/// ARI between the true classes and the full Bayes partition (observed
/// values and mask) of the generating parameters, over `n_mc` rows.
pub fn theoretical_ari(config: &GeneratorConfig, n_mc: usize, draws: usize, seed: u64) -> Result<f64> {
    let cfg = GeneratorConfig { n: n_mc, ..config.clone() };
    let mut rng = seeded(seed);
    let sim = generate(&cfg, &mut rng)?;
    let z = bayes_partition(&cfg, &sim, BayesRule::ObservedAndMask, draws, &mut rng)?;
    adjusted_rand_index(&z, &sim.labels)
}

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    pub n_mc: usize,
    /// Joint tolerance on both rates (absolute).
    pub tolerance: f64,
    pub delta_bounds: (f64, f64),
    /// Range of the shift added to every intercept. The lower end is the
    /// floor used when the target missing rate is (near) zero.
    pub shift_bounds: (f64, f64),
    pub max_rounds: usize,
    pub bisection_steps: usize,
    pub rule: BayesRule,
    /// Monte Carlo draws per row for posteriors under self-masking.
    pub draws: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            n_mc: 100_000,
            tolerance: 0.005,
            delta_bounds: (0.0, 30.0),
            shift_bounds: (-8.0, 8.0),
            max_rounds: 8,
            bisection_steps: 30,
            rule: BayesRule::default(),
            draws: 64,
            seed: 0,
        }
    }
}

/// Calibrated generator and the rates it achieved.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub delta: f64,
    pub mechanism: MechanismParams,
    /// Shift applied to the starting intercepts.
    pub shift: f64,
    pub achieved: Rates,
    pub rounds: usize,
}

/// Find δ and a common intercept shift so the Bayes misclassification and
/// the missing rate hit their targets. Alternates a bisection on δ (at the
/// current intercepts) with a bisection on the shift (at the current δ)
/// until both rates are within `tolerance`. All evaluations reuse one
/// random stream, so each bisection sees a deterministic, nearly monotone
/// function.
pub fn calibrate(
    target_misclassification: f64,
    target_missing_rate: f64,
    config: &GeneratorConfig,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if !(0.0..1.0).contains(&target_misclassification) || !(0.0..1.0).contains(&target_missing_rate) {
        return Err(Error::Config("calibration targets must lie in [0, 1)".into()));
    }
    config.validate()?;
    let base = config.mechanism.clone();
    let eval = |delta: f64, shift: f64| -> Result<Rates> {
        let mut mech = base.clone();
        mech.shift_alpha(shift);
        let cfg = GeneratorConfig { delta, mechanism: mech, ..config.clone() };
        bayes_rates(&cfg, opts.n_mc, opts.rule, opts.draws, opts.seed)
    };
    // decreasing in δ, increasing in the shift
    let bisect = |lo: f64, hi: f64, f: &dyn Fn(f64) -> Result<f64>, target: f64, increasing: bool| -> Result<f64> {
        let (mut lo, mut hi) = (lo, hi);
        for _ in 0..opts.bisection_steps {
            let mid = 0.5 * (lo + hi);
            let v = f(mid)?;
            if (v < target) == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    };
    let mut delta = config.delta.clamp(opts.delta_bounds.0, opts.delta_bounds.1);
    let mut shift = 0.0;
    let mut achieved = eval(delta, shift)?;
    for round in 1..=opts.max_rounds {
        delta = bisect(
            opts.delta_bounds.0,
            opts.delta_bounds.1,
            &|x| eval(x, shift).map(|r| r.misclassification),
            target_misclassification,
            false,
        )?;
        shift = bisect(
            opts.shift_bounds.0,
            opts.shift_bounds.1,
            &|s| eval(delta, s).map(|r| r.missing_rate),
            target_missing_rate,
            true,
        )?;
        achieved = eval(delta, shift)?;
        if (achieved.misclassification - target_misclassification).abs() <= opts.tolerance
            && (achieved.missing_rate - target_missing_rate).abs() <= opts.tolerance
        {
            let mut mechanism = base.clone();
            mechanism.shift_alpha(shift);
            return Ok(Calibration { delta, mechanism, shift, achieved, rounds: round });
        }
    }
    Err(Error::Calibration {
        misclassification: achieved.misclassification,
        missing_rate: achieved.missing_rate,
    })
}

/// Latent class generator for categorical columns: class from
/// `proportions`, each column's level from `tables[k][j]`, masks from a
/// mechanism without slopes.
pub fn generate_latent_class(
    n: usize,
    proportions: &[f64],
    tables: &[Vec<Vec<f64>>],
    mechanism: &MechanismParams,
    rng: &mut SimRng,
) -> Result<Simulated> {
    let k = proportions.len();
    if tables.len() != k || k == 0 {
        return Err(Error::Dimension("one table set per class".into()));
    }
    let d = tables[0].len();
    let levels: Vec<usize> = tables[0].iter().map(|t| t.len()).collect();
    if mechanism.kind().depends_on_y() {
        return Err(Error::Config("categorical columns carry no slope; use MCAR, MNARz or MNARzj".into()));
    }
    let schema = VariableSchema::categorical(&levels)?;
    let mut complete = DMatrix::zeros(n, d);
    let mut mask = Mask::from_element(n, d, false);
    let mut labels = Vec::with_capacity(n);
    let pick = |probs: &[f64], u: f64| {
        let mut acc = 0.0;
        for (l, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return l;
            }
        }
        probs.len() - 1
    };
    for i in 0..n {
        let c = pick(proportions, rng.random());
        labels.push(c);
        for j in 0..d {
            complete[(i, j)] = pick(&tables[c][j], rng.random()) as f64;
            mask[(i, j)] = rng.random::<f64>() < mechanism.prob_missing(c, j, 0.0);
        }
    }
    let dataset = Dataset::new(schema, complete.clone(), mask)?;
    Ok(Simulated { complete, labels, dataset })
}

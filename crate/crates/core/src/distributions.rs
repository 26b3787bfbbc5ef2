//! Probability kernels: multivariate Gaussian algebra, conditional
//! Gaussians, truncated normal draws and the three binary link functions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Mean and covariance of a multivariate normal. The covariance is checked
/// for symmetry and factorized once at construction.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::Dimension(format!(
                "mean has length {d}, covariance is {}x{}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let scale = covariance.amax().max(1.0);
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-9 * scale {
                    return Err(Error::NotPositiveDefinite { component: None });
                }
            }
        }
        let covariance = symmetrize(&covariance);
        let (chol, covariance) = cholesky_with_jitter(covariance, None)?;
        let log_det = chol_log_det(&chol);
        Ok(GaussianParams {
            mean,
            covariance,
            chol,
            log_det,
        })
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Lower Cholesky factor of the covariance.
    pub fn chol_lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "point has length {}, distribution has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let diff = x - &self.mean;
        let w = self.chol.l().solve_lower_triangular(&diff).expect("factor is nonsingular");
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + self.log_det + w.norm_squared()))
    }

    /// Draw one vector.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l() * xi
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Cholesky factorization; on failure adds `1e-8 * trace / d` to the
/// diagonal once and retries. Returns the factor and the (possibly
/// jittered) matrix it factors.
pub fn cholesky_with_jitter(
    m: DMatrix<f64>,
    component: Option<usize>,
) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>)> {
    if m.nrows() == 0 {
        let c = Cholesky::new(m.clone()).expect("empty matrix factors");
        return Ok((c, m));
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        if c.l_dirty().diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Ok((c, m));
        }
    }
    let d = m.nrows() as f64;
    let jitter = 1e-8 * m.trace().abs() / d;
    if !(jitter > 0.0) || !jitter.is_finite() {
        return Err(Error::NotPositiveDefinite { component });
    }
    let mut j = m;
    for i in 0..j.nrows() {
        j[(i, i)] += jitter;
    }
    match Cholesky::new(j.clone()) {
        Some(c) if c.l_dirty().diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) => Ok((c, j)),
        _ => Err(Error::NotPositiveDefinite { component }),
    }
}

/// Log density of `x` under `params`.
pub fn log_gaussian_pdf(x: &DVector<f64>, params: &GaussianParams) -> Result<f64> {
    params.log_pdf(x)
}

/// Observed/missing split of one Gaussian for a fixed set of observed
/// coordinates. Holds everything needed to evaluate the observed-block
/// marginal density and the conditional law of the missing block, so it
/// can be reused for every row sharing the same pattern.
#[derive(Debug, Clone)]
pub struct ObservedBlock {
    observed: Vec<usize>,
    missing: Vec<usize>,
    mean_obs: DVector<f64>,
    mean_mis: DVector<f64>,
    chol_obs: Option<Cholesky<f64, Dyn>>,
    log_det_obs: f64,
    /// Σ_mo Σ_oo⁻¹, shape |mis|×|obs|.
    regression: DMatrix<f64>,
    /// Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om.
    cond_cov: DMatrix<f64>,
}

impl ObservedBlock {
    pub fn new(params: &GaussianParams, observed: &[usize], component: Option<usize>) -> Result<Self> {
        let d = params.dim();
        let mut is_obs = vec![false; d];
        for &j in observed {
            if j >= d {
                return Err(Error::Dimension(format!("observed index {j} out of range for dimension {d}")));
            }
            if is_obs[j] {
                return Err(Error::Dimension(format!("observed index {j} repeated")));
            }
            is_obs[j] = true;
        }
        let observed: Vec<usize> = observed.to_vec();
        let missing: Vec<usize> = (0..d).filter(|j| !is_obs[*j]).collect();
        let cov = params.covariance();
        let mu = params.mean();
        let mean_obs = DVector::from_iterator(observed.len(), observed.iter().map(|&j| mu[j]));
        let mean_mis = DVector::from_iterator(missing.len(), missing.iter().map(|&j| mu[j]));
        let s_mm = DMatrix::from_fn(missing.len(), missing.len(), |a, b| cov[(missing[a], missing[b])]);
        if observed.is_empty() {
            return Ok(ObservedBlock {
                observed,
                missing,
                mean_obs,
                mean_mis,
                chol_obs: None,
                log_det_obs: 0.0,
                regression: DMatrix::zeros(d, 0),
                cond_cov: s_mm,
            });
        }
        let s_oo = DMatrix::from_fn(observed.len(), observed.len(), |a, b| cov[(observed[a], observed[b])]);
        let s_mo = DMatrix::from_fn(missing.len(), observed.len(), |a, b| cov[(missing[a], observed[b])]);
        let chol = match Cholesky::new(s_oo) {
            Some(c) => c,
            None => {
                return Err(Error::Singular {
                    what: "observed covariance block",
                    component,
                })
            }
        };
        let log_det_obs = chol_log_det(&chol);
        if !log_det_obs.is_finite() {
            return Err(Error::Singular {
                what: "observed covariance block",
                component,
            });
        }
        // regression = S_mo S_oo^{-1}  <=>  S_oo regressionᵀ = S_om
        let regression = chol.solve(&s_mo.transpose()).transpose();
        let cond_cov = symmetrize(&(&s_mm - &regression * s_mo.transpose()));
        Ok(ObservedBlock {
            observed,
            missing,
            mean_obs,
            mean_mis,
            chol_obs: Some(chol),
            log_det_obs,
            regression,
            cond_cov,
        })
    }

    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn missing(&self) -> &[usize] {
        &self.missing
    }

    /// Log density of the observed coordinates under the marginal.
    /// `y_obs` is in observed-index order. Zero when nothing is observed.
    pub fn log_density(&self, y_obs: &[f64]) -> f64 {
        match &self.chol_obs {
            None => 0.0,
            Some(chol) => {
                let diff = DVector::from_iterator(
                    y_obs.len(),
                    y_obs.iter().zip(self.mean_obs.iter()).map(|(y, m)| y - m),
                );
                let w = chol.l().solve_lower_triangular(&diff).expect("nonsingular factor");
                -0.5 * (self.observed.len() as f64 * LN_2PI + self.log_det_obs + w.norm_squared())
            }
        }
    }

    /// Conditional mean of the missing coordinates, in missing-index order.
    pub fn conditional_mean(&self, y_obs: &[f64]) -> DVector<f64> {
        if self.observed.is_empty() {
            return self.mean_mis.clone();
        }
        let diff = DVector::from_iterator(
            y_obs.len(),
            y_obs.iter().zip(self.mean_obs.iter()).map(|(y, m)| y - m),
        );
        &self.mean_mis + &self.regression * diff
    }

    pub fn conditional_covariance(&self) -> &DMatrix<f64> {
        &self.cond_cov
    }
}

/// Law of the coordinates outside `observed` given their observed values,
/// returned in missing-coordinate order.
pub fn conditional_gaussian(
    params: &GaussianParams,
    observed: &[usize],
    observed_values: &[f64],
) -> Result<GaussianParams> {
    if observed.len() != observed_values.len() {
        return Err(Error::LengthMismatch {
            left: observed.len(),
            right: observed_values.len(),
        });
    }
    let block = ObservedBlock::new(params, observed, None)?;
    if block.missing.is_empty() {
        return Err(Error::Dimension("no coordinates left to condition on".into()));
    }
    let mean = block.conditional_mean(observed_values);
    GaussianParams::new(mean, block.cond_cov.clone())
}

/// Binary response link: the CDF ρ mapping a linear predictor to P(c = 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    #[default]
    Probit,
    Logit,
    Laplace,
}

impl std::fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LinkFunction::Probit => "probit",
            LinkFunction::Logit => "logit",
            LinkFunction::Laplace => "laplace",
        })
    }
}

impl std::str::FromStr for LinkFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "probit" => Ok(LinkFunction::Probit),
            "logit" => Ok(LinkFunction::Logit),
            "laplace" | "laplace-cdf" => Ok(LinkFunction::Laplace),
            other => Err(Error::Config(format!("unknown link `{other}` (probit|logit|laplace)"))),
        }
    }
}

impl LinkFunction {
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Probit => normal_cdf(x),
            LinkFunction::Logit => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            LinkFunction::Laplace => {
                if x < 0.0 {
                    0.5 * x.exp()
                } else {
                    1.0 - 0.5 * (-x).exp()
                }
            }
        }
    }

    /// 1 − cdf(x), computed without cancellation.
    pub fn sf(self, x: f64) -> f64 {
        self.cdf(-x)
    }

    pub fn log_cdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Probit => normal_log_cdf(x),
            LinkFunction::Logit => -softplus(-x),
            LinkFunction::Laplace => {
                if x < 0.0 {
                    std::f64::consts::LN_2.mul_add(-1.0, x)
                } else {
                    (-0.5 * (-x).exp()).ln_1p()
                }
            }
        }
    }

    pub fn log_sf(self, x: f64) -> f64 {
        self.log_cdf(-x)
    }

    /// Density ρ'(x).
    pub fn pdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Probit => normal_pdf(x),
            LinkFunction::Logit => {
                let p = self.cdf(x);
                p * self.sf(x)
            }
            LinkFunction::Laplace => 0.5 * (-x.abs()).exp(),
        }
    }

    pub fn log_pdf(self, x: f64) -> f64 {
        match self {
            LinkFunction::Probit => -0.5 * (x * x + LN_2PI),
            LinkFunction::Logit => self.log_cdf(x) + self.log_sf(x),
            LinkFunction::Laplace => -std::f64::consts::LN_2 - x.abs(),
        }
    }

    /// ρ⁻¹(p) for p in (0, 1).
    pub fn inverse_cdf(self, p: f64) -> f64 {
        match self {
            LinkFunction::Probit => normal_quantile(p),
            LinkFunction::Logit => (p / (1.0 - p)).ln(),
            LinkFunction::Laplace => {
                if p < 0.5 {
                    (2.0 * p).ln()
                } else {
                    -(2.0 * (1.0 - p)).ln()
                }
            }
        }
    }
}

/// ρ(x) for the given link.
pub fn link_cdf(link: LinkFunction, x: f64) -> f64 {
    link.cdf(x)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Φ(x) = ½ erfc(−x/√2).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// log Φ(x), finite far into the lower tail via the Mills-ratio expansion.
pub fn normal_log_cdf(x: f64) -> f64 {
    if x > -30.0 {
        let p = normal_cdf(x);
        if x > 0.0 {
            (-normal_cdf(-x)).ln_1p()
        } else {
            p.ln()
        }
    } else {
        // Φ(x) = φ(x)/|x| · (1 − 1/x² + 3/x⁴ − 15/x⁶ + …)
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
        -0.5 * x2 - 0.5 * LN_2PI - (-x).ln() + series.ln()
    }
}

/// Φ⁻¹(p), accurate in both tails.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p < 0.5 {
        -SQRT_2 * erfc_inv(2.0 * p)
    } else {
        SQRT_2 * erfc_inv(2.0 * (1.0 - p))
    }
}

/// Per-coordinate bounds for a truncated normal draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TruncationBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidBox(format!(
                "{} lower bounds but {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (j, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || !(l < u) {
                return Err(Error::InvalidBox(format!("coordinate {j}: [{l}, {u}] is empty")));
            }
        }
        Ok(TruncationBox { lower, upper })
    }

    /// Half-line box from a mask row: [0, ∞) where `positive[j]`, else (−∞, 0].
    pub fn half_lines(positive: &[bool]) -> Self {
        let (lower, upper) = positive
            .iter()
            .map(|&p| if p { (0.0, f64::INFINITY) } else { (f64::NEG_INFINITY, 0.0) })
            .unzip();
        TruncationBox { lower, upper }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }
}

/// Independent draws of N(mean[j], 1) restricted to the box.
pub fn sample_truncated_normal<R: Rng + ?Sized>(
    mean: &[f64],
    bx: &TruncationBox,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if mean.len() != bx.len() {
        return Err(Error::LengthMismatch {
            left: mean.len(),
            right: bx.len(),
        });
    }
    Ok(mean
        .iter()
        .zip(bx.lower.iter().zip(&bx.upper))
        .map(|(m, (l, u))| m + truncated_standard(l - m, u - m, rng))
        .collect())
}

/// Below this lower bound the inverse CDF is used; above it the tail is
/// sampled by exponential rejection.
const TAIL_START: f64 = 0.5;

/// One draw of N(0,1) restricted to [a, b].
pub fn truncated_standard<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    debug_assert!(a < b);
    match (a.is_finite(), b.is_finite()) {
        (false, false) => rng.sample(StandardNormal),
        (true, false) => lower_tail(a, rng),
        (false, true) => -lower_tail(-b, rng),
        (true, true) => {
            if a >= 0.0 {
                two_sided_positive(a, b, rng)
            } else if b <= 0.0 {
                -two_sided_positive(-b, -a, rng)
            } else {
                // straddles zero: the inverse CDF is well conditioned here
                let pa = normal_cdf(a);
                let pb = normal_cdf(b);
                let u: f64 = rng.random();
                normal_quantile(pa + u * (pb - pa)).clamp(a, b)
            }
        }
    }
}

/// N(0,1) on [a, ∞).
fn lower_tail<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a < TAIL_START {
        // S(x) = u·S(a) with u uniform, S the survival function
        let sa = normal_cdf(-a);
        let u: f64 = 1.0 - rng.random::<f64>();
        let x = -normal_quantile(u * sa);
        x.max(a)
    } else {
        robert_tail(a, f64::INFINITY, rng)
    }
}

/// N(0,1) on [a, b] with 0 ≤ a < b.
fn two_sided_positive<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let sa = normal_cdf(-a);
    let sb = normal_cdf(-b);
    if a < TAIL_START || sa - sb > 1e-3 * sa {
        let u: f64 = rng.random();
        let x = -normal_quantile(sb + u * (sa - sb));
        if x.is_finite() {
            return x.clamp(a, b);
        }
    }
    robert_tail(a, b, rng)
}

/// Exponential-proposal rejection sampler for the tail beyond `a > 0`,
/// optionally cut at `b`.
fn robert_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(lambda).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        if x > b {
            continue;
        }
        let u: f64 = rng.random();
        if u.ln() <= -0.5 * (x - lambda) * (x - lambda) {
            return x;
        }
    }
}

/// CDF of N(mean, 1) truncated to [a, b], at x.
pub fn truncated_normal_cdf(x: f64, mean: f64, a: f64, b: f64) -> f64 {
    if x <= a {
        return 0.0;
    }
    if x >= b {
        return 1.0;
    }
    let (za, zb, zx) = (a - mean, b - mean, x - mean);
    if za > 0.0 {
        // work with survival functions in the upper tail
        let sa = normal_cdf(-za);
        let sb = normal_cdf(-zb);
        (sa - normal_cdf(-zx)) / (sa - sb)
    } else {
        let pa = normal_cdf(za);
        let pb = normal_cdf(zb);
        (normal_cdf(zx) - pa) / (pb - pa)
    }
}

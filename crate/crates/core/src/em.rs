//! EM for mechanisms that do not involve the missing values (MCAR, MNARz,
//! MNARzj). The E-step is exact: the observed-block Gaussian marginal times
//! a mask factor that does not depend on y.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::distributions::{GaussianParams, ObservedBlock};
use crate::error::{Error, Result};
use crate::fit::{model_free_params, Algorithm, FitResult};
use crate::glm::{fit_mechanism, GlmOptions};
use crate::mechanisms::{MechanismParams, MechanismSpec};
use crate::metrics::map_partition;
use crate::models::{ComponentParams, CovarianceStructure, Dataset, MixtureParams, Theta};
use crate::rng::{stream, SimRng};

/// Floor applied to categorical probabilities before renormalizing.
pub const CATEGORY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitStrategy {
    /// k-means++ seeding and Lloyd iterations on mean-imputed data.
    KMeansPlusPlus,
    /// Uniformly random partition.
    RandomPartition,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Stop when |Δℓ| ≤ rel_tol·|ℓ|.
    pub rel_tol: f64,
    pub n_random_starts: usize,
    pub init: InitStrategy,
    pub seed: u64,
    pub covariance: CovarianceStructure,
    /// Rows with every value missing still carry mask information; when
    /// false they are left out of estimation (but still get posteriors).
    pub keep_all_missing_rows: bool,
    pub glm: GlmOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iter: 500,
            rel_tol: 1e-6,
            n_random_starts: 10,
            init: InitStrategy::KMeansPlusPlus,
            seed: 0,
            covariance: CovarianceStructure::Diagonal,
            keep_all_missing_rows: true,
            glm: GlmOptions::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::Config("rel_tol must be positive".into()));
        }
        if self.n_random_starts == 0 {
            return Err(Error::Config("need at least one start".into()));
        }
        Ok(())
    }
}

/// Rows grouped by which continuous columns are missing.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub cont: Vec<usize>,
    pub cat: Vec<usize>,
    pub patterns: Vec<Pattern>,
    pub row_pattern: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Pattern {
    /// Observed positions within the continuous block.
    pub obs: Vec<usize>,
    /// Missing positions within the continuous block.
    pub mis: Vec<usize>,
    pub rows: Vec<usize>,
}

impl Prepared {
    pub fn new(data: &Dataset) -> Prepared {
        let schema = data.schema();
        let cont = schema.continuous_indices();
        let cat = schema.categorical_indices();
        let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut patterns: Vec<Pattern> = Vec::new();
        let mut row_pattern = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            let key: Vec<bool> = cont.iter().map(|&j| data.is_missing(i, j)).collect();
            let p = *index.entry(key.clone()).or_insert_with(|| {
                patterns.push(Pattern {
                    obs: (0..cont.len()).filter(|l| !key[*l]).collect(),
                    mis: (0..cont.len()).filter(|l| key[*l]).collect(),
                    rows: Vec::new(),
                });
                patterns.len() - 1
            });
            patterns[p].rows.push(i);
            row_pattern.push(p);
        }
        Prepared {
            cont,
            cat,
            patterns,
            row_pattern,
        }
    }

    pub fn observed_values(&self, data: &Dataset, p: usize, i: usize) -> Vec<f64> {
        self.patterns[p].obs.iter().map(|&l| data.values()[(i, self.cont[l])]).collect()
    }
}

/// Per-(pattern, class) observed blocks.
pub(crate) fn observed_blocks(theta: &Theta, prep: &Prepared) -> Result<Vec<Vec<Option<ObservedBlock>>>> {
    prep.patterns
        .iter()
        .map(|pat| {
            (0..theta.k())
                .map(|k| match &theta.mixture.component(k).gaussian {
                    Some(g) => ObservedBlock::new(g, &pat.obs, Some(k)).map(Some),
                    None => Ok(None),
                })
                .collect()
        })
        .collect()
}

/// log π_k + log f_k(y_obs) (+ log P(c | k) when `include_mask`) for
/// every row and class.
pub(crate) fn log_joint_prepared(
    theta: &Theta,
    data: &Dataset,
    prep: &Prepared,
    blocks: &[Vec<Option<ObservedBlock>>],
    include_mask: bool,
) -> Result<DMatrix<f64>> {
    let (n, kk) = (data.n(), theta.k());
    let mech = &theta.mechanism;
    if include_mask && mech.kind().depends_on_y() {
        return Err(Error::Contract(format!(
            "{} has no closed-form mask factor",
            mech.kind()
        )));
    }
    let d = data.d();
    // cell log-probabilities do not depend on y here
    let cell: Vec<Vec<[f64; 2]>> = (0..kk)
        .map(|k| {
            (0..d)
                .map(|j| [mech.log_cell_prob(k, j, 0.0, false), mech.log_cell_prob(k, j, 0.0, true)])
                .collect()
        })
        .collect();
    let mut out = DMatrix::zeros(n, kk);
    for (p, pat) in prep.patterns.iter().enumerate() {
        for &i in &pat.rows {
            let y_obs = prep.observed_values(data, p, i);
            for k in 0..kk {
                let mut v = theta.mixture.proportions()[k].ln();
                if let Some(b) = &blocks[p][k] {
                    v += b.log_density(&y_obs);
                }
                let comp = theta.mixture.component(k);
                for (c, &j) in prep.cat.iter().enumerate() {
                    if !data.is_missing(i, j) {
                        v += comp.categorical[c][data.values()[(i, j)] as usize].ln();
                    }
                }
                if include_mask {
                    for j in 0..d {
                        v += cell[k][j][data.is_missing(i, j) as usize];
                    }
                }
                out[(i, k)] = v;
            }
        }
    }
    Ok(out)
}

/// Row-wise normalization of log weights; returns probabilities and the
/// sum of row log-normalizers.
pub(crate) fn normalize_rows(log_w: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (n, kk) = log_w.shape();
    let mut t = DMatrix::zeros(n, kk);
    let mut total = 0.0;
    for i in 0..n {
        let m = log_w.row(i).max();
        let s: f64 = (0..kk).map(|k| (log_w[(i, k)] - m).exp()).sum();
        let lse = m + s.ln();
        total += lse;
        for k in 0..kk {
            t[(i, k)] = (log_w[(i, k)] - lse).exp();
        }
    }
    (t, total)
}

/// log π_k + log f(y_obs, c | k) for every row and class; with
/// `include_mask = false` the mask is ignored (plain observed-data mixture).
pub fn class_log_joint(theta: &Theta, data: &Dataset, include_mask: bool) -> Result<DMatrix<f64>> {
    check_theta(theta, data)?;
    let prep = Prepared::new(data);
    let blocks = observed_blocks(theta, &prep)?;
    log_joint_prepared(theta, data, &prep, &blocks, include_mask)
}

/// Posterior class probabilities and the observed-data log-likelihood.
pub fn posterior(theta: &Theta, data: &Dataset) -> Result<(DMatrix<f64>, f64)> {
    let lj = class_log_joint(theta, data, true)?;
    Ok(normalize_rows(&lj))
}

/// Σ_i log Σ_k π_k f_k(y_i^obs) P(c_i | k).
pub fn observed_log_likelihood(theta: &Theta, data: &Dataset) -> Result<f64> {
    posterior(theta, data).map(|(_, l)| l)
}

fn check_theta(theta: &Theta, data: &Dataset) -> Result<()> {
    if theta.mixture.schema() != data.schema() {
        return Err(Error::Schema("parameters and data use different schemas".into()));
    }
    if theta.mechanism.d() != data.d() || theta.mechanism.k() != theta.k() {
        return Err(Error::Dimension("mechanism shape does not match data".into()));
    }
    Ok(())
}

/// Quantities computed by one E-step.
#[derive(Debug, Clone)]
pub struct EmState {
    pub theta: Theta,
    /// n×K, rows sum to one.
    pub responsibilities: DMatrix<f64>,
    /// Observed-data log-likelihood at `theta`.
    pub log_likelihood: f64,
    /// Per class, the continuous block with missing cells replaced by their
    /// conditional means (n × number of continuous columns).
    completed: Vec<DMatrix<f64>>,
    /// Conditional covariance of the missing continuous cells, per pattern
    /// and class.
    cond_cov: Vec<Vec<DMatrix<f64>>>,
    prep: Prepared,
}

impl EmState {
    /// Conditional mean of row `i`'s missing continuous cells under class
    /// `k`, in column order.
    pub fn conditional_mean(&self, i: usize, k: usize) -> DVector<f64> {
        let pat = &self.prep.patterns[self.prep.row_pattern[i]];
        DVector::from_iterator(pat.mis.len(), pat.mis.iter().map(|&l| self.completed[k][(i, l)]))
    }

    pub fn conditional_covariance(&self, i: usize, k: usize) -> &DMatrix<f64> {
        &self.cond_cov[self.prep.row_pattern[i]][k]
    }

    /// Row `i`'s continuous values with missing cells filled by the class-`k`
    /// conditional mean.
    pub fn completed_continuous(&self, i: usize, k: usize) -> DVector<f64> {
        self.completed[k].row(i).transpose()
    }

    /// Missing continuous columns of row `i` (data column indices).
    pub fn missing_continuous(&self, i: usize) -> Vec<usize> {
        let pat = &self.prep.patterns[self.prep.row_pattern[i]];
        pat.mis.iter().map(|&l| self.prep.cont[l]).collect()
    }

    /// Expected one-hot coding of categorical column `j` in row `i` under
    /// class `k`: the observed indicator, or the class probabilities.
    pub fn expected_one_hot(&self, data: &Dataset, i: usize, j: usize, k: usize) -> Vec<f64> {
        let c = self.prep.cat.iter().position(|&x| x == j).expect("categorical column");
        let probs = &self.theta.mixture.component(k).categorical[c];
        if data.is_missing(i, j) {
            probs.clone()
        } else {
            let mut v = vec![0.0; probs.len()];
            v[data.values()[(i, j)] as usize] = 1.0;
            v
        }
    }
}

fn e_step_prepared(theta: &Theta, data: &Dataset, prep: &Prepared) -> Result<EmState> {
    let blocks = observed_blocks(theta, prep)?;
    let lj = log_joint_prepared(theta, data, prep, &blocks, true)?;
    let (t, ll) = normalize_rows(&lj);
    if !ll.is_finite() {
        return Err(Error::FitFailure("observed log-likelihood is not finite".into()));
    }
    let kk = theta.k();
    let nc = prep.cont.len();
    let mut completed = vec![DMatrix::zeros(data.n(), nc); kk];
    let mut cond_cov = Vec::with_capacity(prep.patterns.len());
    for (p, pat) in prep.patterns.iter().enumerate() {
        let mut covs = Vec::with_capacity(kk);
        for k in 0..kk {
            match &blocks[p][k] {
                Some(b) => {
                    for &i in &pat.rows {
                        let y_obs = prep.observed_values(data, p, i);
                        for (a, &l) in pat.obs.iter().enumerate() {
                            completed[k][(i, l)] = y_obs[a];
                        }
                        let m = b.conditional_mean(&y_obs);
                        for (a, &l) in pat.mis.iter().enumerate() {
                            completed[k][(i, l)] = m[a];
                        }
                    }
                    covs.push(b.conditional_covariance().clone());
                }
                None => covs.push(DMatrix::zeros(0, 0)),
            }
        }
        cond_cov.push(covs);
    }
    Ok(EmState {
        theta: theta.clone(),
        responsibilities: t,
        log_likelihood: ll,
        completed,
        cond_cov,
        prep: prep.clone(),
    })
}

/// Responsibilities, log-likelihood and conditional moments at `theta`.
pub fn e_step(theta: &Theta, data: &Dataset) -> Result<EmState> {
    check_theta(theta, data)?;
    if theta.mechanism.kind().depends_on_y() {
        return Err(infeasible(theta.mechanism.spec()));
    }
    e_step_prepared(theta, data, &Prepared::new(data))
}

fn infeasible(spec: MechanismSpec) -> Error {
    Error::Infeasible(format!(
        "EM has no closed form for {} (the mask probability depends on the missing values); use the SEM engine with a probit link",
        spec.kind
    ))
}

/// Closed-form updates of proportions, Gaussian moments and categorical
/// tables, followed by the mechanism regression weighted by t_ik.
pub fn m_step(state: &EmState, data: &Dataset, covariance: CovarianceStructure, glm: crate::glm::GlmOptions) -> Result<Theta> {
    let t = &state.responsibilities;
    let (n, kk) = t.shape();
    let prep = &state.prep;
    let nc = prep.cont.len();
    let mass: Vec<f64> = (0..kk).map(|k| t.column(k).sum()).collect();
    for (k, m) in mass.iter().enumerate() {
        if *m < 1e-8 * n as f64 {
            return Err(Error::DegenerateClass { k, mass: *m });
        }
    }
    let proportions: Vec<f64> = mass.iter().map(|m| m / n as f64).collect();
    let mut components = Vec::with_capacity(kk);
    for k in 0..kk {
        let gaussian = if nc > 0 {
            let y = &state.completed[k];
            let w = t.column(k);
            let mu = y.tr_mul(&w) / mass[k];
            let mut centered = y.clone();
            for i in 0..n {
                let s = w[i].sqrt();
                for a in 0..nc {
                    centered[(i, a)] = (centered[(i, a)] - mu[a]) * s;
                }
            }
            let mut scatter = centered.tr_mul(&centered);
            for (p, pat) in prep.patterns.iter().enumerate() {
                if pat.mis.is_empty() {
                    continue;
                }
                let wp: f64 = pat.rows.iter().map(|&i| w[i]).sum();
                let cc = &state.cond_cov[p][k];
                for (a, &la) in pat.mis.iter().enumerate() {
                    for (b, &lb) in pat.mis.iter().enumerate() {
                        scatter[(la, lb)] += wp * cc[(a, b)];
                    }
                }
            }
            let mut cov = scatter / mass[k];
            if covariance == CovarianceStructure::Diagonal {
                cov = DMatrix::from_diagonal(&cov.diagonal());
            }
            let cov = (&cov + cov.transpose()) * 0.5;
            Some(GaussianParams::new(mu, cov).map_err(|_| Error::DegenerateClass { k, mass: mass[k] })?)
        } else {
            None
        };
        let mut categorical = Vec::with_capacity(prep.cat.len());
        for (c, &j) in prep.cat.iter().enumerate() {
            let old = &state.theta.mixture.component(k).categorical[c];
            let mut acc = vec![0.0; old.len()];
            for i in 0..n {
                let w = t[(i, k)];
                if data.is_missing(i, j) {
                    for (a, o) in acc.iter_mut().zip(old) {
                        *a += w * o;
                    }
                } else {
                    acc[data.values()[(i, j)] as usize] += w;
                }
            }
            categorical.push(floor_probabilities(acc.iter().map(|a| a / mass[k]).collect()));
        }
        components.push(ComponentParams { gaussian, categorical });
    }
    let mixture = MixtureParams::new(proportions, components, data.schema().clone())?;
    let (mechanism, _) = fit_mechanism(&state.theta.mechanism, data.values(), t, data.mask(), glm)?;
    Ok(Theta { mixture, mechanism })
}

pub(crate) fn floor_probabilities(mut p: Vec<f64>) -> Vec<f64> {
    p.iter_mut().for_each(|v| *v = v.max(CATEGORY_FLOOR));
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// One EM run from `theta0`.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub state: EmState,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Iterate E and M steps from `theta0` until the relative change of the
/// log-likelihood falls below `config.rel_tol` or `max_iter` is reached.
pub fn run_em(theta0: Theta, data: &Dataset, config: &FitConfig) -> Result<EmRun> {
    check_theta(&theta0, data)?;
    if theta0.mechanism.kind().depends_on_y() {
        return Err(infeasible(theta0.mechanism.spec()));
    }
    let prep = Prepared::new(data);
    let mut theta = theta0;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut state = e_step_prepared(&theta, data, &prep)?;
    trace.push(state.log_likelihood);
    for _ in 1..config.max_iter {
        theta = m_step(&state, data, config.covariance, config.glm)?;
        let next = e_step_prepared(&theta, data, &prep)?;
        let prev = state.log_likelihood;
        state = next;
        trace.push(state.log_likelihood);
        if (state.log_likelihood - prev).abs() <= config.rel_tol * prev.abs() {
            converged = true;
            break;
        }
    }
    Ok(EmRun { state, trace, converged })
}

/// Fit a K-class mixture with a y-free mechanism by EM, keeping the best of
/// several starts by final log-likelihood.
pub fn fit_em(data: &Dataset, k: usize, spec: MechanismSpec, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if spec.kind.depends_on_y() {
        return Err(infeasible(spec));
    }
    if k == 0 || k > data.n() {
        return Err(Error::Config(format!("K={k} is not in 1..={}", data.n())));
    }
    let est_rows: Vec<usize> = (0..data.n())
        .filter(|&i| config.keep_all_missing_rows || (0..data.d()).any(|j| !data.is_missing(i, j)))
        .collect();
    let subset;
    let est = if est_rows.len() == data.n() {
        data
    } else {
        subset = data.select_rows(&est_rows);
        &subset
    };
    let starts = if k == 1 { 1 } else { config.n_random_starts };
    let runs: Vec<Result<EmRun>> = (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(config.seed, s as u64);
            let theta0 = initial_theta(est, k, spec, config.covariance, config.init, &mut rng)?;
            run_em(theta0, est, config)
        })
        .collect();
    let mut best: Option<EmRun> = None;
    let mut last_err = None;
    for r in runs {
        match r {
            Ok(run) => {
                let better = best.as_ref().is_none_or(|b| run.state.log_likelihood > b.state.log_likelihood);
                if better {
                    best = Some(run);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some(best) = best else {
        return Err(Error::FitFailure(format!(
            "all {starts} starts failed; last error: {}",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )));
    };
    let theta = best.state.theta.clone();
    let (responsibilities, log_likelihood) = if est_rows.len() == data.n() {
        (best.state.responsibilities.clone(), best.state.log_likelihood)
    } else {
        posterior(&theta, data)?
    };
    let partition = map_partition(&responsibilities);
    let n_params = model_free_params(&theta, config.covariance);
    Ok(FitResult {
        algorithm: Algorithm::Em,
        spec,
        covariance: config.covariance,
        iterations: best.trace.len(),
        theta,
        responsibilities,
        partition,
        log_likelihood,
        log_likelihood_se: None,
        trace: best.trace,
        converged: best.converged,
        n_params,
        flagged_iterations: 0,
    })
}

/// Single EM run from supplied parameters, packaged as a fit.
pub fn fit_em_from(theta0: Theta, data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let spec = theta0.mechanism.spec();
    let run = run_em(theta0, data, config)?;
    let theta = run.state.theta.clone();
    let partition = map_partition(&run.state.responsibilities);
    Ok(FitResult {
        algorithm: Algorithm::Em,
        spec,
        covariance: config.covariance,
        iterations: run.trace.len(),
        n_params: model_free_params(&theta, config.covariance),
        theta,
        responsibilities: run.state.responsibilities.clone(),
        partition,
        log_likelihood: run.state.log_likelihood,
        log_likelihood_se: None,
        trace: run.trace,
        converged: run.converged,
        flagged_iterations: 0,
    })
}

/// Feature matrix for k-means: continuous columns mean-imputed and scaled
/// to unit variance, categorical columns one-hot with missing cells set to
/// the observed level frequencies.
fn kmeans_features(data: &Dataset) -> DMatrix<f64> {
    let (n, d) = (data.n(), data.d());
    let schema = data.schema();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let obs: Vec<f64> = (0..n).filter(|&i| !data.is_missing(i, j)).map(|i| data.values()[(i, j)]).collect();
        match schema.levels(j) {
            None => {
                let (m, sd) = mean_sd(&obs);
                let sd = if sd > 0.0 { sd } else { 1.0 };
                cols.push(
                    (0..n)
                        .map(|i| if data.is_missing(i, j) { 0.0 } else { (data.values()[(i, j)] - m) / sd })
                        .collect(),
                );
            }
            Some(l) => {
                let mut freq = vec![0.0; l];
                for v in &obs {
                    freq[*v as usize] += 1.0;
                }
                let tot = obs.len().max(1) as f64;
                for (a, f) in freq.iter().enumerate() {
                    cols.push(
                        (0..n)
                            .map(|i| {
                                if data.is_missing(i, j) {
                                    f / tot
                                } else if data.values()[(i, j)] as usize == a {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
            }
        }
    }
    DMatrix::from_fn(n, cols.len(), |i, c| cols[c][i])
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans_partition(data: &Dataset, k: usize, rng: &mut SimRng) -> Vec<usize> {
    let x = kmeans_features(data);
    let n = x.nrows();
    let dist2 = |i: usize, c: &DVector<f64>| -> f64 { x.row(i).iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut centers: Vec<DVector<f64>> = vec![x.row(rng.random_range(0..n)).transpose()];
    let mut best: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, b) in best.iter().enumerate() {
                if u < *b {
                    pick = i;
                    break;
                }
                u -= b;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).transpose();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(i, &c));
        }
        centers.push(c);
    }
    let mut labels = vec![0usize; n];
    for iter in 0..25 {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let mut arg = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let v = dist2(i, ctr);
                if v < bd {
                    bd = v;
                    arg = c;
                }
            }
            if *l != arg {
                *l = arg;
                changed = true;
            }
        }
        if !changed && iter > 0 {
            break;
        }
        for (c, ctr) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            if members.is_empty() {
                // re-seed an empty cluster at a random row
                *ctr = x.row(*(0..n).collect::<Vec<_>>().choose(rng).expect("n>0")).transpose();
                continue;
            }
            *ctr = members.iter().fold(DVector::zeros(x.ncols()), |acc, &i| acc + x.row(i).transpose()) / members.len() as f64;
        }
    }
    labels
}

/// Parameters estimated from a hard partition using observed cells only;
/// mechanism intercepts from column missing rates, slopes zero.
pub fn theta_from_partition(
    data: &Dataset,
    labels: &[usize],
    k: usize,
    spec: MechanismSpec,
    covariance: CovarianceStructure,
) -> Result<Theta> {
    let (n, d) = (data.n(), data.d());
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: labels.len(), right: n });
    }
    let schema = data.schema();
    let cont = schema.continuous_indices();
    let cat = schema.categorical_indices();
    let counts: Vec<usize> = (0..k).map(|c| labels.iter().filter(|l| **l == c).count()).collect();
    let proportions: Vec<f64> = counts.iter().map(|c| (*c as f64 + 1.0) / (n + k) as f64).collect();
    let global: Vec<(f64, f64)> = cont
        .iter()
        .map(|&j| {
            let obs: Vec<f64> = (0..n).filter(|&i| !data.is_missing(i, j)).map(|i| data.values()[(i, j)]).collect();
            let (m, sd) = mean_sd(&obs);
            (m, if sd > 0.0 { sd * sd } else { 1.0 })
        })
        .collect();
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let gaussian = if cont.is_empty() {
            None
        } else {
            let mut mu = DVector::zeros(cont.len());
            let mut var = DVector::zeros(cont.len());
            for (a, &j) in cont.iter().enumerate() {
                let obs: Vec<f64> = (0..n)
                    .filter(|&i| labels[i] == c && !data.is_missing(i, j))
                    .map(|i| data.values()[(i, j)])
                    .collect();
                let (gm, gv) = global[a];
                if obs.len() >= 2 {
                    let (m, sd) = mean_sd(&obs);
                    mu[a] = m;
                    var[a] = (sd * sd).max(1e-3 * gv);
                } else {
                    mu[a] = gm;
                    var[a] = gv;
                }
            }
            let _ = covariance;
            Some(GaussianParams::new(mu, DMatrix::from_diagonal(&var))?)
        };
        let categorical = cat
            .iter()
            .map(|&j| {
                let l = schema.levels(j).expect("categorical");
                let mut acc = vec![1.0; l];
                for i in 0..n {
                    if labels[i] == c && !data.is_missing(i, j) {
                        acc[data.values()[(i, j)] as usize] += 1.0;
                    }
                }
                let s: f64 = acc.iter().sum();
                acc.into_iter().map(|a| a / s).collect()
            })
            .collect();
        components.push(ComponentParams { gaussian, categorical });
    }
    let mixture = MixtureParams::new(proportions, components, schema.clone())?;
    let rates: Vec<f64> = (0..d)
        .map(|j| ((0..n).filter(|&i| data.is_missing(i, j)).count() as f64 / n as f64).clamp(1e-3, 1.0 - 1e-3))
        .collect();
    let alpha = DMatrix::from_fn(k, d, |_, j| spec.link.inverse_cdf(rates[j]));
    let self_masked: Vec<bool> = (0..d).map(|j| schema.is_continuous(j)).collect();
    let mechanism = MechanismParams::from_tables(spec.kind, spec.link, alpha, DMatrix::zeros(k, d))?.with_self_masked(self_masked)?;
    Ok(Theta { mixture, mechanism })
}

/// Starting parameters for one run.
pub fn initial_theta(
    data: &Dataset,
    k: usize,
    spec: MechanismSpec,
    covariance: CovarianceStructure,
    init: InitStrategy,
    rng: &mut SimRng,
) -> Result<Theta> {
    let labels = match init {
        InitStrategy::KMeansPlusPlus => kmeans_partition(data, k, rng),
        InitStrategy::RandomPartition => (0..data.n()).map(|_| rng.random_range(0..k)).collect(),
    };
    theta_from_partition(data, &labels, k, spec, covariance)
}

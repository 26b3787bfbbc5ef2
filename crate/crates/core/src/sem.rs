//! Stochastic EM. Each iteration runs one Gibbs sweep over the latent
//! probit utilities L, the partition Z and the missing values, then refits
//! the parameters on the completed data. Mechanisms that involve the
//! missing values need the probit link; for the others any link works and
//! L is skipped.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::distributions::{cholesky_with_jitter, truncated_standard, GaussianParams, LinkFunction, ObservedBlock};
use crate::em::{self, floor_probabilities, observed_blocks, FitConfig, Prepared};
use crate::error::{Error, Result};
use crate::fit::{model_free_params, Algorithm, FitResult};
use crate::glm::{fit_mechanism, GlmOptions};
use crate::mechanisms::{MechanismKind, MechanismParams, MechanismSpec};
use crate::metrics::{map_partition, one_hot};
use crate::models::{ComponentParams, CovarianceStructure, Dataset, Mask, MixtureParams, Theta};
use crate::rng::{seeded, stream, SimRng};

/// How the reported parameters are formed from the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    /// Average of the iterates after burn-in.
    #[default]
    MeanAfterBurnIn,
    /// Final iterate.
    Last,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::MeanAfterBurnIn),
            "last" => Ok(Aggregation::Last),
            o => Err(Error::Config(format!("unknown aggregation `{o}` (mean|last)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SemConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub covariance: CovarianceStructure,
    /// EM settings for the MNARz fit the chain starts from.
    pub warm_start: FitConfig,
    /// Monte Carlo draws per row and class for the final responsibilities.
    pub responsibility_draws: usize,
    /// Monte Carlo draws per row and class for the log-likelihood.
    pub loglik_draws: usize,
    pub glm: GlmOptions,
}

impl Default for SemConfig {
    fn default() -> Self {
        SemConfig {
            n_iter: 400,
            burn_in: 200,
            seed: 0,
            aggregation: Aggregation::MeanAfterBurnIn,
            covariance: CovarianceStructure::Diagonal,
            warm_start: FitConfig {
                n_random_starts: 5,
                ..FitConfig::default()
            },
            responsibility_draws: 256,
            loglik_draws: 1024,
            glm: GlmOptions::default(),
        }
    }
}

impl SemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::Config("n_iter must be at least 1".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config(format!(
                "burn_in ({}) must be below n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.responsibility_draws < 2 || self.loglik_draws < 2 {
            return Err(Error::Config("need at least two Monte Carlo draws".into()));
        }
        self.warm_start.validate()
    }
}

/// Current point of the chain.
#[derive(Debug, Clone)]
pub struct SemState {
    /// Data with missing cells filled by the latest draw; observed cells are
    /// the data. Categorical cells hold level codes.
    pub completed: DMatrix<f64>,
    pub partition: Vec<usize>,
    /// Probit utilities, positive exactly where a cell is missing. Absent
    /// when the mechanism does not involve the values.
    pub latent: Option<DMatrix<f64>>,
    pub theta: Theta,
    /// Parameters after each post-burn-in iteration.
    pub history: Vec<Theta>,
}

fn require_probit(mech: &MechanismParams) -> Result<()> {
    if mech.link() != LinkFunction::Probit {
        return Err(Error::Infeasible(format!(
            "the latent-utility sampler needs the probit link, got {}; a {} link would need importance resampling of the missing values, which is not implemented",
            mech.link(),
            mech.link()
        )));
    }
    Ok(())
}

/// L_ij ~ N(α_kj + β_kj y_ij, 1) truncated to (0, ∞) when c_ij = 1 and to
/// (−∞, 0] otherwise, k the current class of row i.
pub fn draw_latent(
    theta: &Theta,
    y_completed: &DMatrix<f64>,
    z: &[usize],
    mask: &Mask,
    rng: &mut SimRng,
) -> Result<DMatrix<f64>> {
    let mech = &theta.mechanism;
    require_probit(mech)?;
    let (n, d) = y_completed.shape();
    if z.len() != n || mask.shape() != (n, d) {
        return Err(Error::Dimension("latent draw inputs disagree".into()));
    }
    let mut l = DMatrix::zeros(n, d);
    for i in 0..n {
        let k = z[i];
        for j in 0..d {
            let eta = mech.linear_predictor(k, j, y_completed[(i, j)]);
            let v = if mask[(i, j)] {
                let x = eta + truncated_standard(-eta, f64::INFINITY, rng);
                if x > 0.0 {
                    x
                } else {
                    f64::MIN_POSITIVE
                }
            } else {
                (eta + truncated_standard(f64::NEG_INFINITY, -eta, rng)).min(0.0)
            };
            l[(i, j)] = v;
        }
    }
    Ok(l)
}

/// Unnormalized log class weights for the partition draw: log π_k +
/// log f_k(y_i) plus, with utilities, Σ_j log φ(L_ij − α_kj − β_kj y_ij),
/// or without them, log P(c_i | y_i, k).
pub fn partition_log_weights(
    theta: &Theta,
    latent: Option<&DMatrix<f64>>,
    y_completed: &DMatrix<f64>,
    mask: &Mask,
) -> Result<DMatrix<f64>> {
    let (n, d) = y_completed.shape();
    let kk = theta.k();
    let mech = &theta.mechanism;
    let mut w = DMatrix::zeros(n, kk);
    let mut row = vec![0.0; d];
    for i in 0..n {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = y_completed[(i, j)]);
        for k in 0..kk {
            let mut v = theta.mixture.proportions()[k].ln() + theta.mixture.log_component_density(k, &row)?;
            match latent {
                Some(l) => {
                    for j in 0..d {
                        let r = l[(i, j)] - mech.linear_predictor(k, j, row[j]);
                        v -= 0.5 * r * r;
                    }
                }
                None => {
                    for j in 0..d {
                        v += mech.log_cell_prob(k, j, row[j], mask[(i, j)]);
                    }
                }
            }
            w[(i, k)] = v;
        }
    }
    Ok(w)
}

pub(crate) fn sample_log_weights(w: &[f64], rng: &mut SimRng) -> usize {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = p.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, pk) in p.iter().enumerate() {
        if u < *pk {
            return k;
        }
        u -= pk;
    }
    // rounding left u at the very top
    p.iter().rposition(|x| *x > 0.0).unwrap_or(0)
}

/// One multinomial class draw per row from the normalized weights of
/// [`partition_log_weights`]. Normalization happens in log space, so rows
/// whose weights all underflow still get a proper draw.
pub fn draw_partition(
    theta: &Theta,
    latent: Option<&DMatrix<f64>>,
    y_completed: &DMatrix<f64>,
    mask: &Mask,
    rng: &mut SimRng,
) -> Result<Vec<usize>> {
    let w = partition_log_weights(theta, latent, y_completed, mask)?;
    let kk = theta.k();
    Ok((0..w.nrows())
        .map(|i| {
            let row: Vec<f64> = (0..kk).map(|k| w[(i, k)]).collect();
            sample_log_weights(&row, rng)
        })
        .collect())
}

/// Covariance of the missing values once the utilities are known:
/// (Σ̃⁻¹ + diag(β²))⁻¹. Each utility is the value times its own slope plus
/// independent unit noise, so the slopes enter through their squares on
/// the diagonal.
pub fn utility_posterior_covariance(cond_cov: &DMatrix<f64>, beta_mis: &[f64]) -> Result<DMatrix<f64>> {
    let prec = utility_posterior_precision(cond_cov, beta_mis)?;
    let (c, _) = cholesky_with_jitter(prec, None)?;
    Ok(c.inverse())
}

fn utility_posterior_precision(cond_cov: &DMatrix<f64>, beta_mis: &[f64]) -> Result<DMatrix<f64>> {
    if cond_cov.nrows() != beta_mis.len() {
        return Err(Error::LengthMismatch { left: cond_cov.nrows(), right: beta_mis.len() });
    }
    let (c, _) = cholesky_with_jitter(cond_cov.clone(), None)?;
    let mut prec = c.inverse();
    for (a, b) in beta_mis.iter().enumerate() {
        prec[(a, a)] += b * b;
    }
    Ok(prec)
}

/// Per (pattern, class): the observed block, Σ̃⁻¹, and the Cholesky factor
/// of the posterior precision given utilities (which equals Σ̃⁻¹ when no
/// utilities are used).
pub(crate) struct MissingLaw {
    block: ObservedBlock,
    prior_prec: DMatrix<f64>,
    post: Cholesky<f64, Dyn>,
}

pub(crate) fn missing_laws(theta: &Theta, prep: &Prepared, with_latent: bool) -> Result<Vec<Vec<Option<MissingLaw>>>> {
    let blocks = observed_blocks(theta, prep)?;
    let mech = &theta.mechanism;
    prep.patterns
        .iter()
        .zip(blocks)
        .map(|(pat, row)| {
            row.into_iter()
                .enumerate()
                .map(|(k, b)| {
                    let Some(block) = b else { return Ok(None) };
                    if pat.mis.is_empty() {
                        let post = Cholesky::new(DMatrix::zeros(0, 0)).expect("empty");
                        return Ok(Some(MissingLaw { block, prior_prec: DMatrix::zeros(0, 0), post }));
                    }
                    let (c, _) = cholesky_with_jitter(block.conditional_covariance().clone(), Some(k))?;
                    let prior_prec = c.inverse();
                    let mut prec = prior_prec.clone();
                    if with_latent {
                        for (a, &l) in pat.mis.iter().enumerate() {
                            let b = mech.beta(k, prep.cont[l]);
                            prec[(a, a)] += b * b;
                        }
                    }
                    let (post, _) = cholesky_with_jitter(prec, Some(k))?;
                    Ok(Some(MissingLaw { block, prior_prec, post }))
                })
                .collect()
        })
        .collect()
}

pub(crate) fn draw_missing_prepared(
    theta: &Theta,
    laws: &[Vec<Option<MissingLaw>>],
    prep: &Prepared,
    latent: Option<&DMatrix<f64>>,
    z: &[usize],
    data: &Dataset,
    rng: &mut SimRng,
) -> DMatrix<f64> {
    let mech = &theta.mechanism;
    let mut y = data.values().clone();
    for (p, pat) in prep.patterns.iter().enumerate() {
        for &i in &pat.rows {
            let k = z[i];
            if !pat.mis.is_empty() {
                let law = laws[p][k].as_ref().expect("continuous block present");
                let y_obs = prep.observed_values(data, p, i);
                let mu = law.block.conditional_mean(&y_obs);
                let mut rhs = &law.prior_prec * mu;
                if let Some(l) = latent {
                    for (a, &c) in pat.mis.iter().enumerate() {
                        let j = prep.cont[c];
                        let b = mech.beta(k, j);
                        rhs[a] += b * (l[(i, j)] - mech.alpha(k, j));
                    }
                }
                let mean = law.post.solve(&rhs);
                // x = mean + L⁻ᵀ ε has covariance (L Lᵀ)⁻¹
                let eps = DVector::from_iterator(pat.mis.len(), (0..pat.mis.len()).map(|_| rng.sample(StandardNormal)));
                let dev = law
                    .post
                    .l_dirty()
                    .lower_triangle()
                    .transpose()
                    .solve_upper_triangular(&eps)
                    .expect("positive diagonal");
                for (a, &c) in pat.mis.iter().enumerate() {
                    y[(i, prep.cont[c])] = mean[a] + dev[a];
                }
            }
            for (c, &j) in prep.cat.iter().enumerate() {
                if data.is_missing(i, j) {
                    let probs = &theta.mixture.component(k).categorical[c];
                    let logs: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
                    y[(i, j)] = sample_log_weights(&logs, rng) as f64;
                }
            }
        }
    }
    y
}

/// Draw the missing values of every row from its class-conditional law
/// given the observed values and, when supplied, the utilities:
/// N(Σ^SEM (Σ̃⁻¹ μ̃ + β ⊙ (L − α)), Σ^SEM) on the missing continuous cells,
/// the class's level probabilities on missing categorical cells.
pub fn draw_missing(
    theta: &Theta,
    latent: Option<&DMatrix<f64>>,
    z: &[usize],
    data: &Dataset,
    rng: &mut SimRng,
) -> Result<DMatrix<f64>> {
    if z.len() != data.n() {
        return Err(Error::LengthMismatch { left: z.len(), right: data.n() });
    }
    if latent.is_some() {
        require_probit(&theta.mechanism)?;
    }
    let prep = Prepared::new(data);
    let laws = missing_laws(theta, &prep, latent.is_some())?;
    Ok(draw_missing_prepared(theta, &laws, &prep, latent, z, data, rng))
}

/// Complete-data maximum likelihood given a hard partition: class
/// frequencies, per-class moments, level frequencies and the mechanism
/// regression on the completed values. `previous` supplies the mechanism
/// layout and the regression start.
pub fn sem_m_step(
    y_completed: &DMatrix<f64>,
    z: &[usize],
    data: &Dataset,
    previous: &Theta,
    covariance: CovarianceStructure,
    glm: GlmOptions,
) -> Result<Theta> {
    let n = data.n();
    let kk = previous.k();
    if z.len() != n || y_completed.shape() != (n, data.d()) {
        return Err(Error::Dimension("completed data does not match the dataset".into()));
    }
    let schema = data.schema();
    let cont = schema.continuous_indices();
    let cat = schema.categorical_indices();
    let mut counts = vec![0usize; kk];
    for &k in z {
        counts[k] += 1;
    }
    if let Some(k) = counts.iter().position(|c| *c == 0) {
        return Err(Error::EmptyClass { k });
    }
    let proportions: Vec<f64> = counts.iter().map(|c| *c as f64 / n as f64).collect();
    let mut components = Vec::with_capacity(kk);
    for k in 0..kk {
        let rows: Vec<usize> = (0..n).filter(|&i| z[i] == k).collect();
        let nk = rows.len() as f64;
        let gaussian = if cont.is_empty() {
            None
        } else {
            let x = DMatrix::from_fn(rows.len(), cont.len(), |r, a| y_completed[(rows[r], cont[a])]);
            let mu = x.row_mean().transpose();
            let mut centered = x;
            for mut r in centered.row_iter_mut() {
                r -= mu.transpose();
            }
            let mut cov = centered.tr_mul(&centered) / nk;
            if covariance == CovarianceStructure::Diagonal {
                cov = DMatrix::from_diagonal(&cov.diagonal());
            }
            Some(GaussianParams::new(mu, cov).map_err(|_| Error::DegenerateClass { k, mass: nk })?)
        };
        let categorical = cat
            .iter()
            .map(|&j| {
                let levels = schema.levels(j).expect("categorical");
                let mut acc = vec![0.0; levels];
                for &i in &rows {
                    acc[y_completed[(i, j)] as usize] += 1.0;
                }
                floor_probabilities(acc.iter().map(|a| a / nk).collect())
            })
            .collect();
        components.push(ComponentParams { gaussian, categorical });
    }
    let mixture = MixtureParams::new(proportions, components, schema.clone())?;
    let (mechanism, _) = fit_mechanism(&previous.mechanism, y_completed, &one_hot(z, kk), data.mask(), glm)?;
    Ok(Theta { mixture, mechanism })
}

/// Component-wise mean of parameter sets sharing one labelling.
pub fn average_thetas(thetas: &[Theta]) -> Result<Theta> {
    let first = thetas.first().ok_or_else(|| Error::Contract("nothing to average".into()))?;
    let m = thetas.len() as f64;
    let kk = first.k();
    let mut proportions = vec![0.0; kk];
    let mut components: Vec<ComponentParams> = first.mixture.components().to_vec();
    let mut means: Vec<Option<(DVector<f64>, DMatrix<f64>)>> = components
        .iter()
        .map(|c| c.gaussian.as_ref().map(|g| (g.mean() * 0.0, g.covariance() * 0.0)))
        .collect();
    for c in components.iter_mut() {
        c.categorical.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
    }
    let mech = &first.mechanism;
    let mut alpha = DMatrix::zeros(mech.k(), mech.d());
    let mut beta = DMatrix::zeros(mech.k(), mech.d());
    for th in thetas {
        for k in 0..kk {
            proportions[k] += th.mixture.proportions()[k] / m;
            let comp = th.mixture.component(k);
            if let (Some((mu, cov)), Some(g)) = (&mut means[k], &comp.gaussian) {
                *mu += g.mean() / m;
                *cov += g.covariance() / m;
            }
            for (acc, t) in components[k].categorical.iter_mut().zip(&comp.categorical) {
                acc.iter_mut().zip(t).for_each(|(a, v)| *a += v / m);
            }
        }
        alpha += th.mechanism.alpha_table() / m;
        beta += th.mechanism.beta_table() / m;
    }
    for (c, mc) in components.iter_mut().zip(means) {
        if let Some((mu, cov)) = mc {
            c.gaussian = Some(GaussianParams::new(mu, cov)?);
        }
    }
    let mixture = MixtureParams::new(proportions, components, first.mixture.schema().clone())?;
    let mechanism =
        MechanismParams::from_tables(mech.kind(), mech.link(), alpha, beta)?.with_self_masked(mech.self_masked().to_vec())?;
    Ok(Theta { mixture, mechanism })
}

/// Posterior class probabilities, observed log-likelihood and its Monte
/// Carlo standard error.
#[derive(Debug, Clone)]
pub struct McPosterior {
    pub responsibilities: DMatrix<f64>,
    pub log_likelihood: f64,
    /// Zero when no cell needed integration.
    pub standard_error: f64,
}

/// Responsibilities and observed log-likelihood at `theta`. The mask
/// factor of a missing continuous cell with a nonzero slope is integrated
/// over the class-conditional law of the missing values with `draws`
/// samples; every other factor is exact. For mechanisms free of y this is
/// the closed form.
pub fn mc_posterior(theta: &Theta, data: &Dataset, draws: usize, rng: &mut SimRng) -> Result<McPosterior> {
    if !theta.mechanism.kind().depends_on_y() {
        let (t, ll) = em::posterior(theta, data)?;
        return Ok(McPosterior { responsibilities: t, log_likelihood: ll, standard_error: 0.0 });
    }
    if draws < 2 {
        return Err(Error::Config("need at least two Monte Carlo draws".into()));
    }
    let prep = Prepared::new(data);
    let blocks = observed_blocks(theta, &prep)?;
    let mech = &theta.mechanism;
    let (n, d, kk) = (data.n(), data.d(), theta.k());
    let mut resp = DMatrix::zeros(n, kk);
    let mut ll = 0.0;
    let mut var = 0.0;
    // Cholesky factors of Σ̃ per (pattern, class)
    let mut chols: Vec<Vec<Option<DMatrix<f64>>>> = Vec::with_capacity(prep.patterns.len());
    for (p, pat) in prep.patterns.iter().enumerate() {
        let mut row = Vec::with_capacity(kk);
        for k in 0..kk {
            row.push(match &blocks[p][k] {
                Some(b) if !pat.mis.is_empty() => Some(cholesky_with_jitter(b.conditional_covariance().clone(), Some(k))?.0.l()),
                _ => None,
            });
        }
        chols.push(row);
    }
    let mut base = vec![0.0; kk];
    let mut terms = vec![Vec::new(); kk];
    for (p, pat) in prep.patterns.iter().enumerate() {
        for &i in &pat.rows {
            let y_obs = prep.observed_values(data, p, i);
            let mut stochastic = false;
            for k in 0..kk {
                let comp = theta.mixture.component(k);
                let mut v = theta.mixture.proportions()[k].ln();
                if let Some(b) = &blocks[p][k] {
                    v += b.log_density(&y_obs);
                }
                for (c, &j) in prep.cat.iter().enumerate() {
                    if !data.is_missing(i, j) {
                        v += comp.categorical[c][data.values()[(i, j)] as usize].ln();
                    }
                }
                // cells whose factor is exact
                let mut random_cells = Vec::new();
                for j in 0..d {
                    let missing = data.is_missing(i, j);
                    if missing && mech.beta(k, j) != 0.0 {
                        random_cells.push(j);
                    } else {
                        v += mech.log_cell_prob(k, j, data.values()[(i, j)], missing);
                    }
                }
                base[k] = v;
                terms[k].clear();
                if random_cells.is_empty() {
                    continue;
                }
                stochastic = true;
                let b = blocks[p][k].as_ref().expect("continuous block present");
                let mu = b.conditional_mean(&y_obs);
                let l = chols[p][k].as_ref().expect("missing block present");
                // position of each random cell inside the missing block
                let pos: Vec<usize> = random_cells
                    .iter()
                    .map(|&j| pat.mis.iter().position(|&c| prep.cont[c] == j).expect("missing continuous"))
                    .collect();
                let m = pat.mis.len();
                for _ in 0..draws {
                    let eps = DVector::from_iterator(m, (0..m).map(|_| rng.sample(StandardNormal)));
                    let ys = &mu + l * eps;
                    let s: f64 = random_cells
                        .iter()
                        .zip(&pos)
                        .map(|(&j, &a)| mech.log_cell_prob(k, j, ys[a], true))
                        .sum();
                    terms[k].push(s);
                }
            }
            if !stochastic {
                let mx = base.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = base.iter().map(|v| (v - mx).exp()).sum();
                for k in 0..kk {
                    resp[(i, k)] = (base[k] - mx).exp() / s;
                }
                ll += mx + s.ln();
                continue;
            }
            // shift by the largest single term so the scaled sums stay finite
            let mut mx = f64::NEG_INFINITY;
            for k in 0..kk {
                if terms[k].is_empty() {
                    mx = mx.max(base[k]);
                } else {
                    for t in &terms[k] {
                        mx = mx.max(base[k] + t);
                    }
                }
            }
            let mut total = 0.0;
            let mut row_var = 0.0;
            for k in 0..kk {
                let (mean, v) = if terms[k].is_empty() {
                    ((base[k] - mx).exp(), 0.0)
                } else {
                    let e: Vec<f64> = terms[k].iter().map(|t| (base[k] + t - mx).exp()).collect();
                    let s = e.len() as f64;
                    let mean = e.iter().sum::<f64>() / s;
                    let sv = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s - 1.0);
                    (mean, sv / s)
                };
                resp[(i, k)] = mean;
                total += mean;
                row_var += v;
            }
            for k in 0..kk {
                resp[(i, k)] /= total;
            }
            ll += mx + total.ln();
            var += row_var / (total * total);
        }
    }
    Ok(McPosterior { responsibilities: resp, log_likelihood: ll, standard_error: var.sqrt() })
}

/// Chain output before summarizing.
#[derive(Debug, Clone)]
pub struct SemRun {
    pub state: SemState,
    /// Post-burn-in iterations in which a class stayed empty after one
    /// redraw (parameters were held for those iterations).
    pub flagged: usize,
    /// Observed log-likelihood per iteration for mechanisms free of y.
    pub trace: Vec<f64>,
}

/// Run the chain from `theta0`. The starting partition is drawn from the
/// exact posterior when `theta0` has no active slopes, from the Monte
/// Carlo one otherwise.
pub fn run_sem(theta0: Theta, data: &Dataset, config: &SemConfig) -> Result<SemRun> {
    config.validate()?;
    let kind = theta0.mechanism.kind();
    let use_latent = kind.depends_on_y();
    if use_latent {
        require_probit(&theta0.mechanism)?;
    }
    if theta0.mechanism.d() != data.d() || theta0.mixture.schema() != data.schema() {
        return Err(Error::Dimension("parameters do not match the dataset".into()));
    }
    let mut rng = seeded(config.seed);
    let prep = Prepared::new(data);
    let mask = data.mask();
    let start = mc_posterior(&theta0, data, config.responsibility_draws, &mut rng)?;
    let mut z: Vec<usize> = (0..data.n())
        .map(|i| {
            let logs: Vec<f64> = start.responsibilities.row(i).iter().map(|p| p.ln()).collect();
            sample_log_weights(&logs, &mut rng)
        })
        .collect();
    let mut theta = theta0;
    let laws = missing_laws(&theta, &prep, false)?;
    let mut y = draw_missing_prepared(&theta, &laws, &prep, None, &z, data, &mut rng);
    let mut latent = None;
    let mut history = Vec::new();
    let mut trace = Vec::new();
    let mut flagged = 0;
    for r in 0..config.n_iter {
        latent = if use_latent { Some(draw_latent(&theta, &y, &z, mask, &mut rng)?) } else { None };
        let laws = missing_laws(&theta, &prep, use_latent)?;
        let mut step = None;
        for _attempt in 0..2 {
            z = draw_partition(&theta, latent.as_ref(), &y, mask, &mut rng)?;
            y = draw_missing_prepared(&theta, &laws, &prep, latent.as_ref(), &z, data, &mut rng);
            match sem_m_step(&y, &z, data, &theta, config.covariance, config.glm) {
                Ok(t) => {
                    step = Some(t);
                    break;
                }
                Err(Error::EmptyClass { .. } | Error::DegenerateClass { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        match step {
            Some(t) => theta = t,
            None if r >= config.burn_in => flagged += 1,
            None => {}
        }
        if !use_latent {
            trace.push(em::observed_log_likelihood(&theta, data)?);
        }
        if r >= config.burn_in {
            history.push(theta.clone());
        }
    }
    Ok(SemRun {
        state: SemState { completed: y, partition: z, latent, theta, history },
        flagged,
        trace,
    })
}

/// Chain from `theta0`, summarized into a fit.
pub fn fit_sem_from(theta0: Theta, data: &Dataset, config: &SemConfig) -> Result<FitResult> {
    let spec = theta0.mechanism.spec();
    let run = run_sem(theta0, data, config)?;
    let kept = config.n_iter - config.burn_in;
    if 2 * run.flagged > kept {
        return Err(Error::ChainDegeneracy(format!(
            "a class was empty in {} of {kept} post-burn-in iterations",
            run.flagged
        )));
    }
    let theta = match config.aggregation {
        Aggregation::MeanAfterBurnIn => average_thetas(&run.state.history)?,
        Aggregation::Last => run.state.theta.clone(),
    };
    let mut rng = stream(config.seed, 1);
    let post = mc_posterior(&theta, data, config.responsibility_draws, &mut rng)?;
    let (log_likelihood, se) = if theta.mechanism.kind().depends_on_y() {
        let l = mc_posterior(&theta, data, config.loglik_draws, &mut rng)?;
        (l.log_likelihood, Some(l.standard_error))
    } else {
        (post.log_likelihood, None)
    };
    let partition = map_partition(&post.responsibilities);
    Ok(FitResult {
        algorithm: Algorithm::Sem,
        spec,
        covariance: config.covariance,
        n_params: model_free_params(&theta, config.covariance),
        theta,
        responsibilities: post.responsibilities,
        partition,
        log_likelihood,
        log_likelihood_se: se,
        trace: run.trace,
        // the chain has no stopping rule; a completed, non-degenerate run counts
        converged: true,
        iterations: config.n_iter,
        flagged_iterations: run.flagged,
    })
}

/// Starting parameters: an EM fit under the class-only mechanism, with its
/// intercepts projected onto `spec` and all slopes at zero.
pub fn warm_start(data: &Dataset, k: usize, spec: MechanismSpec, config: &SemConfig) -> Result<Theta> {
    let em_kind = if spec.kind.depends_on_y() { MechanismKind::MNARz } else { spec.kind };
    let fit = em::fit_em(data, k, MechanismSpec::new(em_kind, spec.link), &config.warm_start)?;
    let m = &fit.theta.mechanism;
    let mechanism = MechanismParams::from_tables(spec.kind, spec.link, m.alpha_table().clone(), DMatrix::zeros(k, data.d()))?
        .with_self_masked(m.self_masked().to_vec())?;
    Ok(Theta { mixture: fit.theta.mixture, mechanism })
}

/// Fit by SEM from an EM warm start.
pub fn fit_sem(data: &Dataset, k: usize, spec: MechanismSpec, config: &SemConfig) -> Result<FitResult> {
    config.validate()?;
    if spec.kind.depends_on_y() && spec.link != LinkFunction::Probit {
        require_probit(&MechanismParams::new(spec.kind, spec.link, 1, 1))?;
    }
    let theta0 = warm_start(data, k, spec, config)?;
    fit_sem_from(theta0, data, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{normal_cdf, normal_pdf, truncated_normal_cdf};
    use crate::models::VariableSchema;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn theta_1d(pi: &[f64], mu: &[f64], var: &[f64], alpha: &[f64], beta: &[f64], kind: MechanismKind) -> Theta {
        let k = pi.len();
        let comps = (0..k)
            .map(|c| ComponentParams {
                gaussian: Some(GaussianParams::new(DVector::from_element(1, mu[c]), DMatrix::from_element(1, 1, var[c])).unwrap()),
                categorical: vec![],
            })
            .collect();
        let mixture = MixtureParams::new(pi.to_vec(), comps, VariableSchema::continuous(1)).unwrap();
        let mechanism = MechanismParams::from_tables(
            kind,
            LinkFunction::Probit,
            DMatrix::from_column_slice(k, 1, alpha),
            DMatrix::from_column_slice(k, 1, beta),
        )
        .unwrap();
        Theta { mixture, mechanism }
    }

    fn ks_stat(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let f = cdf(*x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn latent_half_normal_mean() {
        let th = theta_1d(&[1.0], &[0.0], &[1.0], &[0.0], &[0.0], MechanismKind::MNARy);
        let n = 100_000;
        let y = DMatrix::zeros(n, 1);
        let z = vec![0; n];
        let mut rng = seeded(3);
        let l = draw_latent(&th, &y, &z, &Mask::from_element(n, 1, true), &mut rng).unwrap();
        let m = l.mean();
        let sd = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        assert!((m - (2.0 / std::f64::consts::PI).sqrt()).abs() < 3.0 * sd / (n as f64).sqrt());
        let l0 = draw_latent(&th, &y, &z, &Mask::from_element(n, 1, false), &mut rng).unwrap();
        assert!(l0.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn latent_matches_truncated_cdf() {
        let th = theta_1d(&[1.0], &[0.0], &[1.0], &[0.3], &[-0.8], MechanismKind::MNARy);
        let n = 20_000;
        let y = DMatrix::from_element(n, 1, 1.5);
        let eta = 0.3 - 0.8 * 1.5;
        let mut rng = seeded(4);
        for missing in [true, false] {
            let l = draw_latent(&th, &y, &vec![0; n], &Mask::from_element(n, 1, missing), &mut rng).unwrap();
            let (a, b) = if missing { (0.0, f64::INFINITY) } else { (f64::NEG_INFINITY, 0.0) };
            let ks = ks_stat(l.iter().copied().collect(), |x| truncated_normal_cdf(x, eta, a, b));
            assert!(ks < 1.63 / (n as f64).sqrt(), "ks {ks}");
        }
    }

    #[test]
    fn partition_single_class_and_symmetry() {
        let th = theta_1d(&[1.0], &[0.0], &[1.0], &[0.0], &[0.5], MechanismKind::MNARy);
        let y = DMatrix::from_column_slice(3, 1, &[0.1, -2.0, 3.0]);
        let mask = Mask::from_element(3, 1, false);
        let mut rng = seeded(5);
        let l = draw_latent(&th, &y, &[0, 0, 0], &mask, &mut rng).unwrap();
        assert_eq!(draw_partition(&th, Some(&l), &y, &mask, &mut rng).unwrap(), vec![0, 0, 0]);

        let th = theta_1d(&[0.3, 0.7], &[0.0, 0.0], &[1.0, 1.0], &[0.2, 0.2], &[0.4, 0.4], MechanismKind::MNARy);
        let n = 20_000;
        let y = DMatrix::from_element(n, 1, 0.5);
        let mask = Mask::from_element(n, 1, true);
        let z0 = vec![0; n];
        let l = draw_latent(&th, &y, &z0, &mask, &mut rng).unwrap();
        let z = draw_partition(&th, Some(&l), &y, &mask, &mut rng).unwrap();
        let f = z.iter().filter(|k| **k == 1).count() as f64 / n as f64;
        assert!((f - 0.7).abs() < 4.0 * (0.21f64 / n as f64).sqrt(), "{f}");
    }

    #[test]
    fn partition_matches_enumeration() {
        // one row, K=2: P(k | L, y, c) ∝ f(L | k, y, c) · f(k, y, c) where
        // the first factor is the truncated density and the second the
        // complete-data class weight
        let th = theta_1d(&[0.4, 0.6], &[-1.0, 1.5], &[1.0, 0.5], &[-0.5, 0.3], &[0.8, -0.6], MechanismKind::MNARyk);
        let (yv, lv) = (0.7, 0.9);
        let y = DMatrix::from_element(1, 1, yv);
        let mask = Mask::from_element(1, 1, true);
        let lat = DMatrix::from_element(1, 1, lv);
        let w: Vec<f64> = (0..2)
            .map(|k| {
                let eta = th.mechanism.alpha(k, 0) + th.mechanism.beta(k, 0) * yv;
                let p_c = normal_cdf(eta);
                let trunc = normal_pdf(lv - eta) / p_c;
                let sd = th.mixture.component(k).gaussian.as_ref().unwrap().covariance()[(0, 0)].sqrt();
                let mu = th.mixture.component(k).gaussian.as_ref().unwrap().mean()[0];
                let fy = normal_pdf((yv - mu) / sd) / sd;
                trunc * th.mixture.proportions()[k] * fy * p_c
            })
            .collect();
        let p1 = w[1] / (w[0] + w[1]);
        let mut rng = seeded(6);
        let reps = 100_000;
        let hits = (0..reps)
            .filter(|_| draw_partition(&th, Some(&lat), &y, &mask, &mut rng).unwrap()[0] == 1)
            .count() as f64
            / reps as f64;
        let se = (p1 * (1.0 - p1) / reps as f64).sqrt();
        assert!((hits - p1).abs() < 4.0 * se, "{hits} vs {p1}");
    }

    #[test]
    fn underflowing_weights_still_sample() {
        let mut rng = seeded(1);
        let k = sample_log_weights(&[-2000.0, -1990.0], &mut rng);
        assert_eq!(k, 1);
    }

    #[test]
    fn missing_draw_without_slope_is_conditional_gaussian() {
        // two correlated continuous columns, the second missing
        let g = GaussianParams::new(
            DVector::from_row_slice(&[1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]),
        )
        .unwrap();
        let mixture = MixtureParams::new(
            vec![1.0],
            vec![ComponentParams { gaussian: Some(g), categorical: vec![] }],
            VariableSchema::continuous(2),
        )
        .unwrap();
        let mechanism = MechanismParams::new(MechanismKind::MNARy, LinkFunction::Probit, 1, 2);
        let th = Theta { mixture, mechanism };
        let n = 20_000;
        let mut vals = DMatrix::from_element(n, 2, 2.0);
        let mut mask = Mask::from_element(n, 2, false);
        for i in 0..n {
            vals[(i, 1)] = f64::NAN;
            mask[(i, 1)] = true;
        }
        let data = Dataset::continuous(vals, mask).unwrap();
        let mut rng = seeded(7);
        let lat = DMatrix::from_element(n, 2, 0.5);
        let y = draw_missing(&th, Some(&lat), &vec![0; n], &data, &mut rng).unwrap();
        let col: Vec<f64> = y.column(1).iter().copied().collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        // μ̃ = −1 + 0.4·(2 − 1) = −0.6, Σ̃ = 1 − 0.32 = 0.68
        assert!((m + 0.6).abs() < 4.0 * (0.68 / n as f64).sqrt(), "{m}");
        assert!((v - 0.68).abs() < 0.04, "{v}");
        assert!(y.column(0).iter().all(|x| *x == 2.0));
    }

    #[test]
    fn missing_draw_matches_quadrature() {
        // d=1, fully missing, slope −1.2: density ∝ φ(L − α − βy) φ((y − μ)/σ)
        let (mu, var, alpha, beta, lv) = (0.5, 2.0, 0.4, -1.2, 0.8);
        let th = theta_1d(&[1.0], &[mu], &[var], &[alpha], &[beta], MechanismKind::MNARy);
        let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
        let h = 1e-3;
        let mut x = -15.0;
        while x < 15.0 {
            let r = lv - alpha - beta * x;
            let w = (-0.5 * r * r - 0.5 * (x - mu).powi(2) / var).exp();
            z0 += w;
            z1 += w * x;
            z2 += w * x * x;
            x += h;
        }
        let qm = z1 / z0;
        let qv = z2 / z0 - qm * qm;
        let n = 40_000;
        let data = Dataset::continuous(DMatrix::from_element(n, 1, f64::NAN), Mask::from_element(n, 1, true)).unwrap();
        let lat = DMatrix::from_element(n, 1, lv);
        let mut rng = seeded(8);
        let y = draw_missing(&th, Some(&lat), &vec![0; n], &data, &mut rng).unwrap();
        let m = y.mean();
        let v = y.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((m - qm).abs() < 4.0 * (qv / n as f64).sqrt(), "{m} vs {qm}");
        assert!((v - qv).abs() < 4.0 * qv * (2.0 / n as f64).sqrt(), "{v} vs {qv}");
        let s = utility_posterior_covariance(&DMatrix::from_element(1, 1, var), &[beta]).unwrap();
        assert_abs_diff_eq!(s[(0, 0)], qv, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn utilities_only_shrink_variance(raw in proptest::collection::vec(-1.0f64..1.0, 9), b in proptest::collection::vec(-3.0f64..3.0, 3)) {
            let a = DMatrix::from_row_slice(3, 3, &raw);
            let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
            let post = utility_posterior_covariance(&cov, &b).unwrap();
            let diff = &cov - &post;
            let eig = nalgebra::SymmetricEigen::new((&diff + diff.transpose()) * 0.5);
            let min = eig.eigenvalues.min();
            prop_assert!(min > -1e-9 * cov.amax(), "min eigenvalue {}", min);
        }
    }

    #[test]
    fn m_step_single_class_is_mle() {
        let vals = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, 0.0, 2.0, 2.0, 6.0, 0.0]);
        let data = Dataset::continuous(vals.clone(), Mask::from_element(4, 2, false)).unwrap();
        let prev = em::theta_from_partition(
            &data,
            &[0; 4],
            1,
            MechanismSpec::new(MechanismKind::MCAR, LinkFunction::Probit),
            CovarianceStructure::Full,
        )
        .unwrap();
        let th = sem_m_step(&vals, &[0; 4], &data, &prev, CovarianceStructure::Full, GlmOptions::default()).unwrap();
        let g = th.mixture.component(0).gaussian.as_ref().unwrap();
        assert_abs_diff_eq!(g.mean()[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.mean()[1], 1.0, epsilon = 1e-12);
        // MLE divides by n
        assert_abs_diff_eq!(g.covariance()[(0, 0)], (4.0 + 0.0 + 1.0 + 9.0) / 4.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.covariance()[(0, 1)], (-2.0 + 0.0 - 1.0 - 3.0) / 4.0, epsilon = 1e-9);
    }

    #[test]
    fn m_step_reports_empty_class() {
        let vals = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let data = Dataset::continuous(vals.clone(), Mask::from_element(3, 1, false)).unwrap();
        let prev = theta_1d(&[0.5, 0.5], &[0.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0], MechanismKind::MNARz);
        let r = sem_m_step(&vals, &[0, 0, 0], &data, &prev, CovarianceStructure::Diagonal, GlmOptions::default());
        assert!(matches!(r, Err(Error::EmptyClass { k: 1 })));
    }

    #[test]
    fn monte_carlo_likelihood_matches_closed_form() {
        // diagonal classes make the integral of Φ(α + βy) against the
        // conditional normal exact: Φ((α + βμ) / √(1 + β²σ²))
        let th = theta_1d(&[0.4, 0.6], &[-1.0, 2.0], &[1.0, 0.7], &[-0.3, 0.1], &[0.9, -0.5], MechanismKind::MNARyk);
        let vals = [0.3, f64::NAN, -1.2, f64::NAN, 2.5];
        let mask = Mask::from_iterator(5, 1, vals.iter().map(|v| v.is_nan()));
        let data = Dataset::continuous(DMatrix::from_column_slice(5, 1, &vals), mask).unwrap();
        let mut exact = 0.0;
        for v in vals {
            let mut row = 0.0;
            for k in 0..2 {
                let g = th.mixture.component(k).gaussian.as_ref().unwrap();
                let (mu, var) = (g.mean()[0], g.covariance()[(0, 0)]);
                let (a, b) = (th.mechanism.alpha(k, 0), th.mechanism.beta(k, 0));
                let pk = th.mixture.proportions()[k];
                row += if v.is_nan() {
                    pk * normal_cdf((a + b * mu) / (1.0 + b * b * var).sqrt())
                } else {
                    pk * normal_pdf((v - mu) / var.sqrt()) / var.sqrt() * (1.0 - normal_cdf(a + b * v))
                };
            }
            exact += f64::ln(row);
        }
        let mut rng = seeded(9);
        let mc = mc_posterior(&th, &data, 4096, &mut rng).unwrap();
        assert!(mc.standard_error > 0.0);
        assert!((mc.log_likelihood - exact).abs() < 4.0 * mc.standard_error, "{} vs {exact} (se {})", mc.log_likelihood, mc.standard_error);
        for i in 0..5 {
            assert_abs_diff_eq!(mc.responsibilities.row(i).sum(), 1.0, epsilon = 1e-12);
        }
    }

    fn mnary_data(n: usize, seed: u64) -> (Dataset, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut vals = DMatrix::zeros(n, 2);
        let mut mask = Mask::from_element(n, 2, false);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = rng.random_range(0..2usize);
            labels.push(k);
            for j in 0..2 {
                let y: f64 = (if k == 0 { -2.0 } else { 2.0 }) + rng.sample::<f64, _>(StandardNormal);
                let p = normal_cdf(-0.6 + 0.5 * y);
                if rng.random::<f64>() < p {
                    mask[(i, j)] = true;
                    vals[(i, j)] = f64::NAN;
                } else {
                    vals[(i, j)] = y;
                }
            }
        }
        (Dataset::continuous(vals, mask).unwrap(), labels)
    }

    fn quick_config(seed: u64) -> SemConfig {
        SemConfig {
            n_iter: 60,
            burn_in: 30,
            seed,
            warm_start: FitConfig { n_random_starts: 2, seed, ..FitConfig::default() },
            responsibility_draws: 64,
            loglik_draws: 128,
            ..SemConfig::default()
        }
    }

    #[test]
    fn sem_recovers_self_masking_and_is_reproducible() {
        let (data, truth) = mnary_data(300, 21);
        let spec = MechanismSpec::new(MechanismKind::MNARy, LinkFunction::Probit);
        let cfg = quick_config(2);
        let a = fit_sem(&data, 2, spec, &cfg).unwrap();
        let b = fit_sem(&data, 2, spec, &cfg).unwrap();
        assert_eq!(a.partition, b.partition);
        assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
        assert!(crate::metrics::adjusted_rand_index(&a.partition, &truth).unwrap() > 0.8);
        let beta = a.theta.mechanism.beta(0, 0);
        assert!(beta > 0.2, "slope {beta}");
        assert!(a.log_likelihood_se.unwrap() > 0.0);
        assert_eq!(a.algorithm, Algorithm::Sem);
    }

    #[test]
    fn sem_observed_cells_never_change() {
        let (data, _) = mnary_data(80, 22);
        let spec = MechanismSpec::new(MechanismKind::MNARyz, LinkFunction::Probit);
        let cfg = quick_config(3);
        let theta0 = warm_start(&data, 2, spec, &cfg).unwrap();
        let run = run_sem(theta0, &data, &cfg).unwrap();
        for i in 0..data.n() {
            for j in 0..2 {
                if !data.is_missing(i, j) {
                    assert_eq!(run.state.completed[(i, j)], data.values()[(i, j)]);
                }
                let l = run.state.latent.as_ref().unwrap()[(i, j)];
                assert_eq!(l > 0.0, data.is_missing(i, j));
            }
        }
        assert_eq!(run.state.history.len(), cfg.n_iter - cfg.burn_in);
    }

    #[test]
    fn sem_agrees_with_em_on_mcar() {
        let (data, _) = mnary_data(400, 23);
        let spec = MechanismSpec::new(MechanismKind::MCAR, LinkFunction::Probit);
        let em_fit = em::fit_em(&data, 2, spec, &FitConfig { n_random_starts: 3, ..FitConfig::default() }).unwrap();
        let sem_fit = fit_sem(&data, 2, spec, &quick_config(4)).unwrap();
        assert_eq!(sem_fit.trace.len(), 60);
        let mean = |f: &FitResult, k: usize| f.theta.mixture.component(k).gaussian.as_ref().unwrap().mean().clone();
        // match labels on the first coordinate
        let swap = (mean(&em_fit, 0)[0] < mean(&em_fit, 1)[0]) != (mean(&sem_fit, 0)[0] < mean(&sem_fit, 1)[0]);
        for k in 0..2 {
            let a = mean(&em_fit, k);
            let b = mean(&sem_fit, if swap { 1 - k } else { k });
            assert!((&a - &b).amax() < 0.2, "{a} vs {b}");
        }
    }

    #[test]
    fn logistic_self_masking_is_rejected() {
        let (data, _) = mnary_data(50, 24);
        let r = fit_sem(&data, 2, MechanismSpec::new(MechanismKind::MNARy, LinkFunction::Logit), &quick_config(5));
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn config_checks() {
        let bad = SemConfig { burn_in: 400, ..SemConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!("last".parse::<Aggregation>().unwrap(), Aggregation::Last);
    }
}

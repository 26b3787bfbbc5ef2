//! Weighted binomial regression by Fisher scoring, and the stacked designs
//! that turn a mechanism M-step into one or more such regressions.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::distributions::LinkFunction;
use crate::error::{Error, Result};
use crate::mechanisms::{MechanismKind, MechanismParams};
use crate::models::Mask;

/// Coefficient norm beyond which the fit is declared separated.
pub const SEPARATION_NORM: f64 = 25.0;
const RIDGE: f64 = 1e-8;

/// Binary responses with prior weights and a dense design.
#[derive(Debug, Clone)]
pub struct GlmProblem {
    design: DMatrix<f64>,
    response: Vec<f64>,
    weights: Vec<f64>,
}

impl GlmProblem {
    pub fn new(design: DMatrix<f64>, response: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let n = design.nrows();
        if response.len() != n {
            return Err(Error::LengthMismatch { left: n, right: response.len() });
        }
        if weights.len() != n {
            return Err(Error::LengthMismatch { left: n, right: weights.len() });
        }
        if response.iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(Error::Contract("binomial responses must lie in [0, 1]".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Contract("prior weights must be finite and nonnegative".into()));
        }
        if design.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("design contains non-finite entries".into()));
        }
        Ok(GlmProblem { design, response, weights })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_rows(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.design.ncols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GlmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { max_iter: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    /// Coefficients were cut back to norm [`SEPARATION_NORM`] because the
    /// likelihood kept increasing along a diverging direction.
    pub separated: bool,
    /// The information matrix needed a ridge to be factorized.
    pub ridge_used: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Max-norm of the score at the returned coefficients.
    pub gradient_max: f64,
}

/// Weighted Bernoulli log-likelihood at `beta`.
pub fn log_likelihood(problem: &GlmProblem, link: LinkFunction, beta: &[f64]) -> f64 {
    let eta = &problem.design * DVector::from_column_slice(beta);
    let mut ll = 0.0;
    for i in 0..problem.n_rows() {
        let (w, y) = (problem.weights[i], problem.response[i]);
        if w == 0.0 {
            continue;
        }
        if y > 0.0 {
            ll += w * y * link.log_cdf(eta[i]);
        }
        if y < 1.0 {
            ll += w * (1.0 - y) * link.log_sf(eta[i]);
        }
    }
    ll
}

/// Score vector, expected information and log-likelihood at `beta`.
pub fn score_and_information(
    problem: &GlmProblem,
    link: LinkFunction,
    beta: &[f64],
) -> (DVector<f64>, DMatrix<f64>, f64) {
    let p = problem.n_cols();
    let x = &problem.design;
    let eta = x * DVector::from_column_slice(beta);
    let mut score = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    for i in 0..problem.n_rows() {
        let (w, y) = (problem.weights[i], problem.response[i]);
        if w == 0.0 {
            continue;
        }
        let e = eta[i];
        let (lc, ls, lp) = (link.log_cdf(e), link.log_sf(e), link.log_pdf(e));
        // f/F and f/(1−F) in log space so the tails stay finite
        let rc = (lp - lc).exp();
        let rs = (lp - ls).exp();
        if y > 0.0 {
            ll += w * y * lc;
        }
        if y < 1.0 {
            ll += w * (1.0 - y) * ls;
        }
        let u = w * (y * rc - (1.0 - y) * rs);
        let v = w * rc * rs;
        for a in 0..p {
            let xa = x[(i, a)];
            if xa == 0.0 {
                continue;
            }
            score[a] += u * xa;
            for b in 0..=a {
                info[(a, b)] += v * xa * x[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    (score, info, ll)
}

fn solve_information(info: &DMatrix<f64>, score: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(c) = info.clone().cholesky() {
        let step = c.solve(score);
        if step.iter().all(|v| v.is_finite()) {
            return (step, false);
        }
    }
    let mut ridge = RIDGE;
    loop {
        let mut m = info.clone();
        for a in 0..m.nrows() {
            m[(a, a)] += ridge;
        }
        if let Some(c) = m.cholesky() {
            let step = c.solve(score);
            if step.iter().all(|v| v.is_finite()) {
                return (step, true);
            }
        }
        ridge *= 100.0;
    }
}

/// Fit from a zero start.
pub fn fit_weighted_binomial(problem: &GlmProblem, link: LinkFunction, opts: GlmOptions) -> Result<GlmFit> {
    fit_weighted_binomial_from(problem, link, opts, &vec![0.0; problem.n_cols()])
}

/// Fisher scoring with step halving, started at `start`. Each accepted
/// step does not decrease the weighted log-likelihood (beyond rounding).
pub fn fit_weighted_binomial_from(
    problem: &GlmProblem,
    link: LinkFunction,
    opts: GlmOptions,
    start: &[f64],
) -> Result<GlmFit> {
    let p = problem.n_cols();
    if start.len() != p {
        return Err(Error::LengthMismatch { left: start.len(), right: p });
    }
    let mut beta: Vec<f64> = start.iter().map(|b| b.clamp(-SEPARATION_NORM, SEPARATION_NORM)).collect();
    let mut ridge_used = false;
    let mut separated = false;
    let mut converged = false;
    let mut iterations = 0;
    let (mut score, mut info, mut ll) = score_and_information(problem, link, &beta);
    while iterations < opts.max_iter {
        if score.amax() < opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let (step, ridged) = solve_information(&info, &score);
        ridge_used |= ridged;
        let mut scale = 1.0;
        let mut accepted = None;
        // differences below this are summation noise, not descent
        let slack = 1e-13 * (1.0 + ll.abs());
        for _ in 0..60 {
            let cand: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let cand_ll = log_likelihood(problem, link, &cand);
            if cand_ll >= ll - slack {
                accepted = Some(cand);
                break;
            }
            scale *= 0.5;
        }
        let Some(cand) = accepted else {
            // no ascent left at machine precision
            converged = score.amax() < opts.tol.max(1e-6 * (1.0 + ll.abs()));
            break;
        };
        let norm = cand.iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm > SEPARATION_NORM {
            separated = true;
            beta = cand.iter().map(|b| b * SEPARATION_NORM / norm).collect();
            let (s, _, l) = score_and_information(problem, link, &beta);
            score = s;
            ll = l;
            break;
        }
        beta = cand;
        let (s, i, l) = score_and_information(problem, link, &beta);
        score = s;
        info = i;
        ll = l;
    }
    if !converged && !separated && score.amax() < opts.tol {
        converged = true;
    }
    Ok(GlmFit {
        coefficients: beta,
        converged,
        separated,
        ridge_used,
        iterations,
        log_likelihood: ll,
        gradient_max: score.amax(),
    })
}

/// Which rows (class, variable) a design block covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockScope {
    All,
    Class(usize),
    Variable(usize),
    ClassVariable(usize, usize),
}

/// One regression in a mechanism M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignRecipe {
    pub kind: MechanismKind,
    pub scope: BlockScope,
}

/// Coefficient a design column estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coef {
    Alpha(usize),
    Beta(usize),
}

/// The independent regressions a mechanism decomposes into.
pub fn recipes(kind: MechanismKind, k: usize, d: usize) -> Vec<DesignRecipe> {
    use MechanismKind::*;
    let scopes: Vec<BlockScope> = match kind {
        MNARy | MNARyk | MNARyz | MNARz => vec![BlockScope::All],
        MNARyzj | MNARzj | MCAR => (0..d).map(BlockScope::Variable).collect(),
        MNARykz => (0..k).map(BlockScope::Class).collect(),
        MNARykzj => (0..k)
            .flat_map(|c| (0..d).map(move |j| BlockScope::ClassVariable(c, j)))
            .collect(),
    };
    scopes.into_iter().map(|scope| DesignRecipe { kind, scope }).collect()
}

/// Column layout of a recipe's design.
pub fn recipe_columns(recipe: DesignRecipe, mech: &MechanismParams) -> Vec<Coef> {
    use MechanismKind::*;
    let (kk, d) = (mech.k(), mech.d());
    let alpha = |k, j| Coef::Alpha(mech.alpha_group(k, j));
    let beta = |k, j| mech.beta_group(k, j).map(Coef::Beta);
    let mut cols: Vec<Coef> = match (recipe.kind, recipe.scope) {
        (MNARy, _) => std::iter::once(alpha(0, 0)).chain((0..d).filter_map(|j| beta(0, j))).collect(),
        (MNARyk, _) => std::iter::once(alpha(0, 0))
            .chain((0..d).flat_map(|j| (0..kk).filter_map(move |k| beta(k, j))))
            .collect(),
        (MNARyz, _) => (0..d).filter_map(|j| beta(0, j)).chain((0..kk).map(|k| alpha(k, 0))).collect(),
        (MNARyzj, BlockScope::Variable(j)) => beta(0, j).into_iter().chain((0..kk).map(|k| alpha(k, j))).collect(),
        (MNARykz, BlockScope::Class(k)) => (0..d).filter_map(|j| beta(k, j)).chain(std::iter::once(alpha(k, 0))).collect(),
        (MNARykzj, BlockScope::ClassVariable(k, j)) => beta(k, j).into_iter().chain(std::iter::once(alpha(k, j))).collect(),
        (MNARz, _) => (0..kk).map(|k| alpha(k, 0)).collect(),
        (MNARzj, BlockScope::Variable(j)) => (0..kk).map(|k| alpha(k, j)).collect(),
        (MCAR, BlockScope::Variable(j)) => vec![alpha(0, j)],
        (kind, scope) => panic!("scope {scope:?} is not a block of {kind}"),
    };
    cols.dedup();
    cols
}

/// A built regression and the coefficients its columns map to.
#[derive(Debug, Clone)]
pub struct Design {
    pub recipe: DesignRecipe,
    pub columns: Vec<Coef>,
    pub problem: GlmProblem,
}

fn scope_contains(scope: BlockScope, k: usize, j: usize) -> bool {
    match scope {
        BlockScope::All => true,
        BlockScope::Class(c) => c == k,
        BlockScope::Variable(v) => v == j,
        BlockScope::ClassVariable(c, v) => c == k && v == j,
    }
}

fn class_free(kind: MechanismKind) -> bool {
    matches!(kind, MechanismKind::MCAR | MechanismKind::MNARy)
}

fn check_inputs(mech: &MechanismParams, y: &DMatrix<f64>, memberships: &DMatrix<f64>, mask: &Mask) -> Result<()> {
    let (n, d) = y.shape();
    if d != mech.d() || mask.shape() != (n, d) {
        return Err(Error::Dimension(format!(
            "data {n}x{d}, mask {:?}, mechanism d={}",
            mask.shape(),
            mech.d()
        )));
    }
    if memberships.shape() != (n, mech.k()) {
        return Err(Error::Dimension(format!(
            "memberships are {:?}, expected {n}x{}",
            memberships.shape(),
            mech.k()
        )));
    }
    Ok(())
}

/// Visit the stacked rows of a recipe in order (variable, observation,
/// class). The callback gets (i, j, k, weight).
fn for_each_row(
    recipe: DesignRecipe,
    memberships: &DMatrix<f64>,
    d: usize,
    mut f: impl FnMut(usize, usize, usize, f64) -> Result<()>,
) -> Result<()> {
    let (n, kk) = memberships.shape();
    let collapse = class_free(recipe.kind);
    for j in 0..d {
        for i in 0..n {
            if collapse {
                if scope_contains(recipe.scope, 0, j) {
                    let w: f64 = memberships.row(i).sum();
                    if w > 0.0 {
                        f(i, j, 0, w)?;
                    }
                }
                continue;
            }
            for k in 0..kk {
                let w = memberships[(i, k)];
                if w > 0.0 && scope_contains(recipe.scope, k, j) {
                    f(i, j, k, w)?;
                }
            }
        }
    }
    Ok(())
}

/// Stacked regression for one recipe. `memberships` holds responsibilities
/// (soft, EM) or one-hot class indicators (hard, SEM); each (i, j) cell
/// yields one row per class with positive membership, weighted by it.
pub fn build_design(
    recipe: DesignRecipe,
    mech: &MechanismParams,
    y: &DMatrix<f64>,
    memberships: &DMatrix<f64>,
    mask: &Mask,
) -> Result<Design> {
    check_inputs(mech, y, memberships, mask)?;
    let columns = recipe_columns(recipe, mech);
    let index: HashMap<Coef, usize> = columns.iter().enumerate().map(|(a, c)| (*c, a)).collect();
    let p = columns.len();
    let mut data: Vec<f64> = Vec::new();
    let mut response = Vec::new();
    let mut weights = Vec::new();
    for_each_row(recipe, memberships, mech.d(), |i, j, k, w| {
        let mut row = vec![0.0; p];
        row[index[&Coef::Alpha(mech.alpha_group(k, j))]] = 1.0;
        if let Some(g) = mech.beta_group(k, j) {
            let v = y[(i, j)];
            if !v.is_finite() {
                return Err(Error::Contract(format!("value ({i}, {j}) is needed by the design but is not set")));
            }
            row[index[&Coef::Beta(g)]] = v;
        }
        data.extend_from_slice(&row);
        response.push(if mask[(i, j)] { 1.0 } else { 0.0 });
        weights.push(w);
        Ok(())
    })?;
    if response.is_empty() {
        return Err(match recipe.scope {
            BlockScope::Class(k) | BlockScope::ClassVariable(k, _) => Error::EmptyClass { k },
            _ => Error::Contract("design has no rows".into()),
        });
    }
    let design = DMatrix::from_row_slice(response.len(), p, &data);
    Ok(Design {
        recipe,
        columns,
        problem: GlmProblem::new(design, response, weights)?,
    })
}

/// Same regression with identical rows merged (weights summed). Only
/// intercept-type designs collapse; designs with value columns are
/// returned unchanged. The fitted coefficients are identical.
fn build_compressed(
    recipe: DesignRecipe,
    mech: &MechanismParams,
    y: &DMatrix<f64>,
    memberships: &DMatrix<f64>,
    mask: &Mask,
) -> Result<Design> {
    let columns = recipe_columns(recipe, mech);
    if columns.iter().any(|c| matches!(c, Coef::Beta(_))) {
        return build_design(recipe, mech, y, memberships, mask);
    }
    let p = columns.len();
    let index: HashMap<Coef, usize> = columns.iter().enumerate().map(|(a, c)| (*c, a)).collect();
    // (column, response) -> summed weight
    let mut acc = vec![[0.0f64; 2]; p];
    let mut any = false;
    for_each_row(recipe, memberships, mech.d(), |i, j, k, w| {
        let col = index[&Coef::Alpha(mech.alpha_group(k, j))];
        acc[col][mask[(i, j)] as usize] += w;
        any = true;
        Ok(())
    })?;
    if !any {
        return Err(match recipe.scope {
            BlockScope::Class(k) | BlockScope::ClassVariable(k, _) => Error::EmptyClass { k },
            _ => Error::Contract("design has no rows".into()),
        });
    }
    let mut data = Vec::new();
    let mut response = Vec::new();
    let mut weights = Vec::new();
    for (col, w) in acc.iter().enumerate() {
        for (c, wc) in w.iter().enumerate() {
            if *wc > 0.0 {
                let mut row = vec![0.0; p];
                row[col] = 1.0;
                data.extend_from_slice(&row);
                response.push(c as f64);
                weights.push(*wc);
            }
        }
    }
    let design = DMatrix::from_row_slice(response.len(), p, &data);
    Ok(Design {
        recipe,
        columns,
        problem: GlmProblem::new(design, response, weights)?,
    })
}

/// Current values of a design's coefficients.
pub fn current_coefficients(columns: &[Coef], mech: &MechanismParams) -> Vec<f64> {
    let (kk, d) = (mech.k(), mech.d());
    columns
        .iter()
        .map(|c| {
            for k in 0..kk {
                for j in 0..d {
                    match c {
                        Coef::Alpha(g) if mech.alpha_group(k, j) == *g => return mech.alpha(k, j),
                        Coef::Beta(g) if mech.beta_group(k, j) == Some(*g) => return mech.beta(k, j),
                        _ => {}
                    }
                }
            }
            0.0
        })
        .collect()
}

/// Write fitted coefficients back into the mechanism.
pub fn unpack(columns: &[Coef], coefficients: &[f64], mech: &mut MechanismParams) {
    for (c, v) in columns.iter().zip(coefficients) {
        match c {
            Coef::Alpha(g) => mech.set_alpha_group(*g, *v),
            Coef::Beta(g) => mech.set_beta_group(*g, *v),
        }
    }
}

/// Mechanism M-step: fit every block of `mech`'s kind, warm-started at the
/// current coefficients, and return the updated parameters.
pub fn fit_mechanism(
    mech: &MechanismParams,
    y: &DMatrix<f64>,
    memberships: &DMatrix<f64>,
    mask: &Mask,
    opts: GlmOptions,
) -> Result<(MechanismParams, Vec<GlmFit>)> {
    check_inputs(mech, y, memberships, mask)?;
    let mut out = mech.clone();
    let mut fits = Vec::new();
    for recipe in recipes(mech.kind(), mech.k(), mech.d()) {
        let design = build_compressed(recipe, mech, y, memberships, mask)?;
        let start = current_coefficients(&design.columns, mech);
        let fit = fit_weighted_binomial_from(&design.problem, mech.link(), opts, &start)?;
        unpack(&design.columns, &fit.coefficients, &mut out);
        fits.push(fit);
    }
    Ok((out, fits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{normal_cdf, normal_pdf};
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn intercept_problem(ones: usize, zeros: usize) -> GlmProblem {
        let n = ones + zeros;
        let resp = (0..n).map(|i| if i < ones { 1.0 } else { 0.0 }).collect();
        GlmProblem::new(DMatrix::from_element(n, 1, 1.0), resp, vec![1.0; n]).unwrap()
    }

    #[test]
    fn logit_intercept_closed_form() {
        let fit = fit_weighted_binomial(&intercept_problem(3, 7), LinkFunction::Logit, GlmOptions::default()).unwrap();
        assert!(fit.converged);
        assert_abs_diff_eq!(fit.coefficients[0], (0.3f64 / 0.7).ln(), epsilon = 1e-9);
    }

    #[test]
    fn probit_intercept_half() {
        let fit = fit_weighted_binomial(&intercept_problem(5, 5), LinkFunction::Probit, GlmOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.coefficients[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn separated_data_is_flagged() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, -0.02, 1.0, -0.01, 1.0, 0.01, 1.0, 0.02]);
        let p = GlmProblem::new(x, vec![0.0, 0.0, 1.0, 1.0], vec![1.0; 4]).unwrap();
        let fit = fit_weighted_binomial(&p, LinkFunction::Logit, GlmOptions::default()).unwrap();
        assert!(fit.separated);
        let norm = fit.coefficients.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(norm <= SEPARATION_NORM + 1e-9);
    }

    #[test]
    fn collinear_design_uses_ridge() {
        let x = DMatrix::from_fn(6, 2, |_, _| 1.0);
        let p = GlmProblem::new(x, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0], vec![1.0; 6]).unwrap();
        let fit = fit_weighted_binomial(&p, LinkFunction::Probit, GlmOptions::default()).unwrap();
        assert!(fit.ridge_used);
        let s = fit.coefficients[0] + fit.coefficients[1];
        assert_abs_diff_eq!(normal_cdf(s), 1.0 / 3.0, epsilon = 1e-6);
    }

    /// Dense Newton–Raphson with the exact Hessian and an LU solve.
    fn newton_oracle(p: &GlmProblem, link: LinkFunction) -> Vec<f64> {
        let (n, q) = (p.n_rows(), p.n_cols());
        let mut b = DVector::zeros(q);
        for _ in 0..200 {
            let mut g = DVector::zeros(q);
            let mut h = DMatrix::zeros(q, q);
            for i in 0..n {
                let x = p.design().row(i).transpose();
                let eta = (x.transpose() * &b)[(0, 0)];
                let (w, y) = (p.weights()[i], p.response()[i]);
                let (d1, d2) = match link {
                    LinkFunction::Logit => {
                        let m = 1.0 / (1.0 + (-eta).exp());
                        (y - m, -m * (1.0 - m))
                    }
                    _ => {
                        let (f, cdf) = (normal_pdf(eta), normal_cdf(eta));
                        let (r, s) = (f / cdf, f / (1.0 - cdf));
                        (y * r - (1.0 - y) * s, -y * r * (eta + r) - (1.0 - y) * s * (s - eta))
                    }
                };
                g += &x * (w * d1);
                h += &x * x.transpose() * (w * d2);
            }
            let step = h.lu().solve(&(-g)).unwrap();
            b += &step;
            if step.amax() < 1e-13 {
                break;
            }
        }
        b.iter().copied().collect()
    }

    pub(crate) fn random_problem(seed: u64, n: usize) -> GlmProblem {
        let mut rng = seeded(seed);
        let truth = [rng.random_range(-0.5..0.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let x = DMatrix::from_fn(n, 3, |_, c| if c == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let resp: Vec<f64> = (0..n)
            .map(|i| {
                let eta: f64 = (0..3).map(|c| x[(i, c)] * truth[c]).sum();
                if rng.random::<f64>() < normal_cdf(eta) { 1.0 } else { 0.0 }
            })
            .collect();
        let w = (0..n).map(|_| rng.random_range(0.2..2.0)).collect();
        GlmProblem::new(x, resp, w).unwrap()
    }

    #[test]
    fn matches_newton_oracle() {
        for seed in 0..6 {
            for link in [LinkFunction::Probit, LinkFunction::Logit] {
                let p = random_problem(seed, 200);
                let fit = fit_weighted_binomial(&p, link, GlmOptions::default()).unwrap();
                let oracle = newton_oracle(&p, link);
                assert!(fit.converged && fit.gradient_max < 1e-8, "{fit:?}");
                for (a, b) in fit.coefficients.iter().zip(&oracle) {
                    assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn likelihood_never_decreases_along_iterations() {
        let p = random_problem(3, 150);
        let mut prev = f64::NEG_INFINITY;
        let mut beta = vec![2.0, -3.0, 1.5];
        for _ in 0..15 {
            let fit = fit_weighted_binomial_from(&p, LinkFunction::Probit, GlmOptions { max_iter: 1, tol: 1e-8 }, &beta).unwrap();
            assert!(fit.log_likelihood >= prev - 1e-10);
            prev = fit.log_likelihood;
            beta = fit.coefficients;
        }
    }

    fn mask_from(rows: &[&[bool]]) -> Mask {
        Mask::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn mnarz_design_layout() {
        let mech = MechanismParams::new(MechanismKind::MNARz, LinkFunction::Probit, 2, 2);
        let y = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let z = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let c = mask_from(&[&[true, false], &[false, true]]);
        let rs = recipes(MechanismKind::MNARz, 2, 2);
        assert_eq!(rs.len(), 1);
        let des = build_design(rs[0], &mech, &y, &z, &c).unwrap();
        // rows (i=1,j=1), (i=2,j=1), (i=1,j=2), (i=2,j=2)
        assert_eq!(des.problem.response(), &[1.0, 0.0, 0.0, 1.0]);
        let x = des.problem.design();
        assert_eq!(x.shape(), (4, 2));
        assert_eq!(x.column(0).as_slice(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(x.column(1).as_slice(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn mnarykzj_block_is_class_restricted() {
        let mech = MechanismParams::new(MechanismKind::MNARykzj, LinkFunction::Probit, 2, 2);
        let y = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let z = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let c = mask_from(&[&[true, false], &[false, true], &[false, false]]);
        let r = DesignRecipe { kind: MechanismKind::MNARykzj, scope: BlockScope::ClassVariable(0, 1) };
        let des = build_design(r, &mech, &y, &z, &c).unwrap();
        assert_eq!(des.columns, vec![Coef::Beta(1), Coef::Alpha(1)]);
        let x = des.problem.design();
        assert_eq!(x.column(0).as_slice(), &[0.2, 0.6]);
        assert_eq!(x.column(1).as_slice(), &[1.0, 1.0]);
        let empty = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let r1 = DesignRecipe { kind: MechanismKind::MNARykzj, scope: BlockScope::ClassVariable(1, 0) };
        assert!(matches!(build_design(r1, &mech, &y, &empty, &c), Err(Error::EmptyClass { k: 1 })));
    }

    #[test]
    fn mcar_design_is_intercept_over_all_rows() {
        let mech = MechanismParams::new(MechanismKind::MCAR, LinkFunction::Probit, 3, 2);
        let y = DMatrix::zeros(4, 2);
        let t = DMatrix::from_element(4, 3, 1.0 / 3.0);
        let c = mask_from(&[&[true, false], &[false, true], &[false, false], &[true, true]]);
        let r = DesignRecipe { kind: MechanismKind::MCAR, scope: BlockScope::Variable(1) };
        let des = build_design(r, &mech, &y, &t, &c).unwrap();
        assert_eq!(des.problem.n_rows(), 4);
        assert_eq!(des.problem.n_cols(), 1);
        assert_eq!(des.problem.response(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn mnary_layout_intercept_then_slopes() {
        let mech = MechanismParams::new(MechanismKind::MNARy, LinkFunction::Probit, 2, 3);
        let r = recipes(MechanismKind::MNARy, 2, 3)[0];
        assert_eq!(recipe_columns(r, &mech), vec![Coef::Alpha(0), Coef::Beta(0), Coef::Beta(1), Coef::Beta(2)]);
        let yz = recipes(MechanismKind::MNARyz, 2, 3)[0];
        let mech = MechanismParams::new(MechanismKind::MNARyz, LinkFunction::Probit, 2, 3);
        assert_eq!(
            recipe_columns(yz, &mech),
            vec![Coef::Beta(0), Coef::Beta(1), Coef::Beta(2), Coef::Alpha(0), Coef::Alpha(1)]
        );
    }

    #[test]
    fn mcar_fit_recovers_column_rates() {
        let mut rng = seeded(2);
        let (n, d) = (400, 3);
        let c = Mask::from_fn(n, d, |_, j| rng.random::<f64>() < 0.1 + 0.2 * j as f64);
        let mech = MechanismParams::new(MechanismKind::MCAR, LinkFunction::Probit, 2, d);
        let t = DMatrix::from_element(n, 2, 0.5);
        let (m, _) = fit_mechanism(&mech, &DMatrix::zeros(n, d), &t, &c, GlmOptions::default()).unwrap();
        for j in 0..d {
            let rate = (0..n).filter(|i| c[(*i, j)]).count() as f64 / n as f64;
            assert_abs_diff_eq!(normal_cdf(m.alpha(0, j)), rate, epsilon = 1e-8);
        }
    }

    #[test]
    fn compressed_fit_equals_full_fit() {
        let mut rng = seeded(4);
        let (n, d, k) = (60, 2, 3);
        let c = Mask::from_fn(n, d, |_, _| rng.random_bool(0.3));
        let t = DMatrix::from_fn(n, k, |_, _| rng.random_range(0.0..1.0));
        let mech = MechanismParams::new(MechanismKind::MNARzj, LinkFunction::Logit, k, d);
        let y = DMatrix::zeros(n, d);
        let r = recipes(MechanismKind::MNARzj, k, d)[1];
        let full = build_design(r, &mech, &y, &t, &c).unwrap();
        let small = build_compressed(r, &mech, &y, &t, &c).unwrap();
        let a = fit_weighted_binomial(&full.problem, LinkFunction::Logit, GlmOptions::default()).unwrap();
        let b = fit_weighted_binomial(&small.problem, LinkFunction::Logit, GlmOptions::default()).unwrap();
        for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn unpack_round_trip_respects_tying() {
        let mut rng = seeded(6);
        let (n, d, k) = (80, 3, 2);
        let y = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = Mask::from_fn(n, d, |i, j| y[(i, j)] + rng.sample::<f64, _>(StandardNormal) > 0.5);
        let z = DMatrix::from_fn(n, k, |i, kk| if i % k == kk { 1.0 } else { 0.0 });
        for kind in MechanismKind::ALL {
            let mech = MechanismParams::new(kind, LinkFunction::Probit, k, d);
            let (m, _) = fit_mechanism(&mech, &y, &z, &c, GlmOptions::default()).unwrap();
            let again = MechanismParams::from_tables(kind, LinkFunction::Probit, m.alpha_table().clone(), m.beta_table().clone()).unwrap();
            assert!((again.alpha_table() - m.alpha_table()).amax() < 1e-12, "{kind}");
            assert!((again.beta_table() - m.beta_table()).amax() < 1e-12, "{kind}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn duplicated_rows_with_halved_weights(seed in 0u64..1000) {
            let p = random_problem(seed, 50);
            let n = p.n_rows();
            let x2 = DMatrix::from_fn(2 * n, 3, |i, c| p.design()[(i % n, c)]);
            let r2 = (0..2 * n).map(|i| p.response()[i % n]).collect();
            let w2 = (0..2 * n).map(|i| p.weights()[i % n] / 2.0).collect();
            let p2 = GlmProblem::new(x2, r2, w2).unwrap();
            let a = fit_weighted_binomial(&p, LinkFunction::Probit, GlmOptions::default()).unwrap();
            let b = fit_weighted_binomial(&p2, LinkFunction::Probit, GlmOptions::default()).unwrap();
            prop_assume!(!a.separated);
            for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}

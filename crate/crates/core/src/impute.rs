//! Imputation of missing cells by the conditional expectation under a
//! fitted model, approximated by averaging Gibbs draws, and the normalized
//! squared error used to score it.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::em::{posterior, Prepared};
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::mechanisms::MechanismKind;
use crate::models::{Dataset, Mask, Theta};
use crate::rng::{stream, SimRng};
use crate::sem::{draw_latent, draw_partition, draw_missing_prepared, missing_laws, sample_log_weights};

/// Draws used when none are requested.
pub const DEFAULT_DRAWS: usize = 10_000;

/// Sweeps discarded before averaging when the chain is not an exact
/// sampler (mechanisms that involve the missing values).
pub const GIBBS_BURN_IN: usize = 50;

/// Rows handled by one parallel task, each with its own random stream.
const CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone)]
pub struct ImputationResult {
    /// Input values with every missing cell filled.
    pub completed: DMatrix<f64>,
    /// Draws averaged for each missing cell.
    pub draws: usize,
    /// Whether the mechanism informed the imputation (anything but MCAR).
    pub mechanism_aware: bool,
}

/// Fill every missing cell with the mean of `n_draws` draws of
/// (z, y_mis) given the observed values and the mask under `fit.theta`.
/// Continuous cells get the average, categorical cells the most frequent
/// level (ties to the lower code). Mechanisms free of the missing values
/// are sampled exactly (z from the posterior, then y_mis given z);
/// self-masked probit mechanisms run a Gibbs chain over utilities, class
/// and missing values after a short burn-in.
pub fn impute(data: &Dataset, fit: &FitResult, n_draws: usize, rng: &mut SimRng) -> Result<ImputationResult> {
    impute_theta(data, &fit.theta, n_draws, rng)
}

/// [`impute`] from bare parameters.
pub fn impute_theta(data: &Dataset, theta: &Theta, n_draws: usize, rng: &mut SimRng) -> Result<ImputationResult> {
    if n_draws == 0 {
        return Err(Error::Config("n_draws must be positive".into()));
    }
    if theta.mixture.schema() != data.schema() {
        return Err(Error::Dimension("fitted schema differs from the data".into()));
    }
    let base: u64 = rng.random();
    let rows: Vec<usize> = (0..data.n()).filter(|&i| (0..data.d()).any(|j| data.is_missing(i, j))).collect();
    let chunks: Vec<&[usize]> = rows.chunks(CHUNK_ROWS).collect();
    let filled = chunks
        .par_iter()
        .enumerate()
        .map(|(c, rows)| {
            let sub = data.select_rows(rows);
            impute_block(&sub, theta, n_draws, &mut stream(base, c as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut completed = data.values().clone();
    for (rows, block) in chunks.iter().zip(filled) {
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..data.d() {
                if data.is_missing(i, j) {
                    completed[(i, j)] = block[(r, j)];
                }
            }
        }
    }
    Ok(ImputationResult {
        completed,
        draws: n_draws,
        mechanism_aware: theta.mechanism.kind() != MechanismKind::MCAR,
    })
}

fn impute_block(data: &Dataset, theta: &Theta, n_draws: usize, rng: &mut SimRng) -> Result<DMatrix<f64>> {
    let (n, d) = (data.n(), data.d());
    let schema = data.schema();
    let gibbs = theta.mechanism.kind().depends_on_y();
    let prep = Prepared::new(data);
    let laws = missing_laws(theta, &prep, gibbs)?;
    let plain_laws = if gibbs { Some(missing_laws(theta, &prep, false)?) } else { None };
    let mut sums = DMatrix::<f64>::zeros(n, d);
    let mut counts: Vec<Vec<Vec<usize>>> = (0..n)
        .map(|_| (0..d).map(|j| vec![0; schema.levels(j).unwrap_or(0)]).collect())
        .collect();
    let mut tally = |y: &DMatrix<f64>| {
        for i in 0..n {
            for j in 0..d {
                if data.is_missing(i, j) {
                    match schema.levels(j) {
                        None => sums[(i, j)] += y[(i, j)],
                        Some(_) => counts[i][j][y[(i, j)] as usize] += 1,
                    }
                }
            }
        }
    };
    if gibbs {
        let mask: &Mask = data.mask();
        let t = crate::sem::mc_posterior(theta, data, 64, rng)?.responsibilities;
        let mut z = crate::metrics::map_partition(&t);
        let mut y = draw_missing_prepared(theta, plain_laws.as_ref().expect("built above"), &prep, None, &z, data, rng);
        for sweep in 0..GIBBS_BURN_IN + n_draws {
            let l = draw_latent(theta, &y, &z, mask, rng)?;
            z = draw_partition(theta, Some(&l), &y, mask, rng)?;
            y = draw_missing_prepared(theta, &laws, &prep, Some(&l), &z, data, rng);
            if sweep >= GIBBS_BURN_IN {
                tally(&y);
            }
        }
    } else {
        let (t, _) = posterior(theta, data)?;
        let logs: Vec<Vec<f64>> = (0..n).map(|i| t.row(i).iter().map(|p| p.ln()).collect()).collect();
        for _ in 0..n_draws {
            let z: Vec<usize> = logs.iter().map(|w| sample_log_weights(w, rng)).collect();
            let y = draw_missing_prepared(theta, &laws, &prep, None, &z, data, rng);
            tally(&y);
        }
    }
    let mut out = data.values().clone();
    for i in 0..n {
        for j in 0..d {
            if data.is_missing(i, j) {
                out[(i, j)] = match schema.levels(j) {
                    None => sums[(i, j)] / n_draws as f64,
                    Some(_) => mode(&counts[i][j]) as f64,
                };
            }
        }
    }
    Ok(out)
}

fn mode(counts: &[usize]) -> usize {
    let mut best = 0;
    for (l, c) in counts.iter().enumerate() {
        if *c > counts[best] {
            best = l;
        }
    }
    best
}

/// ‖(Ŷ − Y) ⊙ C‖²_F / ‖Y ⊙ C‖²_F over the evaluation cells C.
pub fn imputation_mse(y_hat: &DMatrix<f64>, y_true: &DMatrix<f64>, eval: &Mask) -> Result<f64> {
    if y_hat.shape() != y_true.shape() || eval.shape() != y_true.shape() {
        return Err(Error::Dimension(format!(
            "shapes {:?}, {:?} and {:?} differ",
            y_hat.shape(),
            y_true.shape(),
            eval.shape()
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ((a, b), c) in y_hat.iter().zip(y_true.iter()).zip(eval.iter()) {
        if *c {
            num += (a - b).powi(2);
            den += b * b;
        }
    }
    if den == 0.0 {
        return Err(Error::ZeroDenominator("no evaluation cell carries a nonzero value"));
    }
    Ok(num / den)
}

/// Column-mean imputation of the continuous columns (categorical columns
/// get the most frequent observed level). A reference point for scoring.
pub fn impute_column_means(data: &Dataset) -> DMatrix<f64> {
    let mut out = data.values().clone();
    let schema = data.schema();
    for j in 0..data.d() {
        let obs: Vec<f64> = (0..data.n()).filter(|&i| !data.is_missing(i, j)).map(|i| data.values()[(i, j)]).collect();
        let fill = match schema.levels(j) {
            None if obs.is_empty() => 0.0,
            None => obs.iter().sum::<f64>() / obs.len() as f64,
            Some(m) => {
                let mut c = vec![0; m];
                obs.iter().for_each(|v| c[*v as usize] += 1);
                mode(&c) as f64
            }
        };
        for i in 0..data.n() {
            if data.is_missing(i, j) {
                out[(i, j)] = fill;
            }
        }
    }
    out
}

//! Partition extraction, agreement between partitions, information criteria
//! and the loop that picks the number of classes.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fit::{fit_model, FitResult, ModelConfig};
use crate::mechanisms::{MechanismKind, MechanismSpec};
use crate::models::Dataset;

/// Lower clamp for log responsibilities in the entropy term, roughly
/// log of the smallest subnormal double.
pub const LOG_FLOOR: f64 = -745.0;

/// Row-wise argmax. Ties go to the smallest class index.
pub fn map_partition(resp: &DMatrix<f64>) -> Vec<usize> {
    (0..resp.nrows())
        .map(|i| {
            let mut best = 0;
            for k in 1..resp.ncols() {
                if resp[(i, k)] > resp[(i, best)] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// One-hot n×K matrix for a label vector.
pub fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    let mut z = DMatrix::zeros(labels.len(), k);
    for (i, &l) in labels.iter().enumerate() {
        z[(i, l)] = 1.0;
    }
    z
}

/// Counts n_ab of rows labelled a in the first partition and b in the second.
pub fn contingency_table(a: &[usize], b: &[usize]) -> Result<DMatrix<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let index = |v: &[usize]| {
        let mut m = HashMap::new();
        for &x in v {
            let next = m.len();
            m.entry(x).or_insert(next);
        }
        m
    };
    let (ia, ib) = (index(a), index(b));
    let mut t = DMatrix::zeros(ia.len(), ib.len());
    for (x, y) in a.iter().zip(b) {
        t[(ia[x], ib[y])] += 1.0;
    }
    Ok(t)
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Hubert–Arabie adjusted Rand index. Labels are arbitrary integers, so the
/// value is invariant to relabelling. When both partitions are trivial (all
/// one class, or all singletons) the correction is 0/0; identical
/// partitions then score 1 and anything else 0.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = contingency_table(a, b)?;
    let n = a.len() as f64;
    let sum_ij: f64 = t.iter().map(|&x| choose2(x)).sum();
    let sum_a: f64 = t.row_iter().map(|r| choose2(r.sum())).sum();
    let sum_b: f64 = t.column_iter().map(|c| choose2(c.sum())).sum();
    let total = choose2(n);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max = 0.5 * (sum_a + sum_b);
    let denom = max - expected;
    if denom == 0.0 {
        return Ok(if sum_ij == max { 1.0 } else { 0.0 });
    }
    Ok((sum_ij - expected) / denom)
}

/// Σ_i Σ_k z^MAP_ik log t_ik, with the flag set when a MAP responsibility
/// underflowed and had to be clamped at [`LOG_FLOOR`].
pub fn map_entropy(resp: &DMatrix<f64>) -> (f64, bool) {
    let mut clamped = false;
    let mut total = 0.0;
    for (i, k) in map_partition(resp).into_iter().enumerate() {
        let t = resp[(i, k)];
        let l = if t > 0.0 { t.ln() } else { f64::NEG_INFINITY };
        if l < LOG_FLOOR {
            clamped = true;
            total += LOG_FLOOR;
        } else {
            total += l;
        }
    }
    (total, clamped)
}

/// ℓ − (ν/2) log n.
pub fn bic(log_likelihood: f64, n_params: usize, n: usize) -> f64 {
    log_likelihood - 0.5 * n_params as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Criteria {
    pub bic: f64,
    pub icl: f64,
    /// A MAP responsibility was zero and its log was clamped.
    pub clamped: bool,
}

/// BIC and ICL of a fit on `n` rows.
pub fn criteria(fit: &FitResult, n: usize) -> Criteria {
    let b = bic(fit.log_likelihood, fit.n_params, n);
    let (e, clamped) = map_entropy(&fit.responsibilities);
    Criteria { bic: b, icl: b + e, clamped }
}

/// BIC plus the MAP entropy term; never above the BIC.
pub fn icl(fit: &FitResult, n: usize) -> f64 {
    criteria(fit, n).icl
}

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    #[serde(rename = "K")]
    pub k: usize,
    pub mechanism: MechanismKind,
    pub loglik: f64,
    pub nu: usize,
    #[serde(rename = "BIC")]
    pub bic: f64,
    #[serde(rename = "ICL")]
    pub icl: f64,
    pub status: String,
    #[serde(skip)]
    pub converged: bool,
}

impl Candidate {
    fn failed(k: usize, mechanism: MechanismKind, err: &Error) -> Self {
        Candidate {
            k,
            mechanism,
            loglik: f64::NAN,
            nu: 0,
            bic: f64::NAN,
            icl: f64::NAN,
            status: format!("failed: {err}"),
            converged: false,
        }
    }

    fn from_fit(fit: &FitResult, n: usize) -> Self {
        let c = criteria(fit, n);
        let mut status = if fit.converged { "converged".to_string() } else { "max_iter".to_string() };
        if c.clamped {
            status.push_str(";clamped");
        }
        Candidate {
            k: fit.k(),
            mechanism: fit.spec.kind,
            loglik: fit.log_likelihood,
            nu: fit.n_params,
            bic: c.bic,
            icl: c.icl,
            status,
            converged: fit.converged,
        }
    }

    fn usable(&self) -> bool {
        self.icl.is_finite()
    }
}

/// ICL table over candidates plus the chosen one.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub candidates: Vec<Candidate>,
    /// Index into `candidates`; `None` when every fit failed.
    pub chosen: Option<usize>,
    /// Successful fits, aligned with `candidates` (`None` for failures).
    pub fits: Vec<Option<FitResult>>,
}

impl SelectionReport {
    /// Build from per-candidate outcomes. The winner maximizes ICL among
    /// converged fits (among all successful fits if none converged); ties go
    /// to the smaller parameter count.
    pub fn from_outcomes(outcomes: Vec<(usize, MechanismKind, Result<FitResult>)>, n: usize) -> Self {
        let mut candidates = Vec::with_capacity(outcomes.len());
        let mut fits = Vec::with_capacity(outcomes.len());
        for (k, kind, r) in outcomes {
            match r {
                Ok(fit) => {
                    candidates.push(Candidate::from_fit(&fit, n));
                    fits.push(Some(fit));
                }
                Err(e) => {
                    candidates.push(Candidate::failed(k, kind, &e));
                    fits.push(None);
                }
            }
        }
        let pick = |need_converged: bool| {
            let mut best: Option<usize> = None;
            for (i, c) in candidates.iter().enumerate() {
                if !c.usable() || (need_converged && !c.converged) {
                    continue;
                }
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        let cb = &candidates[b];
                        if c.icl > cb.icl || (c.icl == cb.icl && c.nu < cb.nu) {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
            best
        };
        let chosen = pick(true).or_else(|| pick(false));
        SelectionReport { candidates, chosen, fits }
    }

    pub fn chosen_candidate(&self) -> Option<&Candidate> {
        self.chosen.map(|i| &self.candidates[i])
    }

    pub fn chosen_fit(&self) -> Option<&FitResult> {
        self.chosen.and_then(|i| self.fits[i].as_ref())
    }

    pub fn chosen_k(&self) -> Option<usize> {
        self.chosen_candidate().map(|c| c.k)
    }

    /// CSV with columns K, mechanism, loglik, nu, BIC, ICL, status.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for c in &self.candidates {
            out.serialize(c)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Run `fit` for every K in `k_range` (in parallel) and rank by ICL.
pub fn select_k_with<F>(k_range: &[usize], kind: MechanismKind, n: usize, fit: F) -> Result<SelectionReport>
where
    F: Fn(usize) -> Result<FitResult> + Sync,
{
    if k_range.is_empty() {
        return Err(Error::Config("K range is empty".into()));
    }
    let outcomes: Vec<_> = k_range.par_iter().map(|&k| (k, kind, fit(k))).collect();
    Ok(SelectionReport::from_outcomes(outcomes, n))
}

/// Fit every K in `k_range` under `spec` and pick by ICL. Failed fits are
/// kept in the report with their error.
pub fn select_k(data: &Dataset, k_range: &[usize], spec: MechanismSpec, config: &ModelConfig) -> Result<SelectionReport> {
    select_k_with(k_range, spec.kind, data.n(), |k| fit_model(data, k, spec, config))
}

//! Missingness mechanisms. Every variant is stored as full K×d intercept
//! and slope tables plus a tying pattern; setters re-project onto the
//! pattern so evaluation has a single code path.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distributions::LinkFunction;
use crate::error::{Error, Result};

/// Probabilities are clamped to [PROB_FLOOR, 1 − PROB_FLOOR] before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// The nine mechanism variants. The suffix lists what P(c_ij = 1) may
/// depend on: `y` the value itself, `k` the class in the slope, `z` the
/// class in the intercept, `j` the variable in the intercept.
#[allow(clippy::upper_case_acronyms)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MechanismKind {
    MCAR,
    MNARz,
    MNARzj,
    MNARy,
    MNARyk,
    MNARyz,
    MNARyzj,
    MNARykz,
    MNARykzj,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 9] = [
        MechanismKind::MCAR,
        MechanismKind::MNARz,
        MechanismKind::MNARzj,
        MechanismKind::MNARy,
        MechanismKind::MNARyk,
        MechanismKind::MNARyz,
        MechanismKind::MNARyzj,
        MechanismKind::MNARykz,
        MechanismKind::MNARykzj,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::MCAR => "MCAR",
            MechanismKind::MNARz => "MNARz",
            MechanismKind::MNARzj => "MNARzj",
            MechanismKind::MNARy => "MNARy",
            MechanismKind::MNARyk => "MNARyk",
            MechanismKind::MNARyz => "MNARyz",
            MechanismKind::MNARyzj => "MNARyzj",
            MechanismKind::MNARykz => "MNARykz",
            MechanismKind::MNARykzj => "MNARykzj",
        }
    }

    /// True when the missingness probability involves the possibly missing
    /// value itself.
    pub fn depends_on_y(self) -> bool {
        !matches!(self, MechanismKind::MCAR | MechanismKind::MNARz | MechanismKind::MNARzj)
    }

    /// Index of the intercept group cell (k, j) belongs to.
    pub fn alpha_group(self, k: usize, j: usize, d: usize) -> usize {
        use MechanismKind::*;
        match self {
            MCAR => j,
            MNARz | MNARyz | MNARykz => k,
            MNARzj | MNARyzj | MNARykzj => k * d + j,
            MNARy | MNARyk => 0,
        }
    }

    /// Index of the slope group cell (k, j) belongs to, if slopes are free.
    pub fn beta_group(self, k: usize, j: usize, d: usize) -> Option<usize> {
        use MechanismKind::*;
        match self {
            MCAR | MNARz | MNARzj => None,
            MNARy | MNARyz | MNARyzj => Some(j),
            MNARyk | MNARykz | MNARykzj => Some(k * d + j),
        }
    }

    pub fn n_alpha_groups(self, k: usize, d: usize) -> usize {
        use MechanismKind::*;
        match self {
            MCAR => d,
            MNARz | MNARyz | MNARykz => k,
            MNARzj | MNARyzj | MNARykzj => k * d,
            MNARy | MNARyk => 1,
        }
    }

    pub fn n_beta_groups(self, k: usize, d: usize) -> usize {
        use MechanismKind::*;
        match self {
            MCAR | MNARz | MNARzj => 0,
            MNARy | MNARyz | MNARyzj => d,
            MNARyk | MNARykz | MNARykzj => k * d,
        }
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MechanismKind::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mechanism `{s}`")))
    }
}

/// Number of free mechanism parameters for `kind` with K classes and d
/// variables, all of them continuous.
pub fn free_param_count(kind: MechanismKind, k: usize, d: usize) -> usize {
    kind.n_alpha_groups(k, d) + kind.n_beta_groups(k, d)
}

/// Mechanism kind together with its link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub link: LinkFunction,
}

impl MechanismSpec {
    pub fn new(kind: MechanismKind, link: LinkFunction) -> Self {
        MechanismSpec { kind, link }
    }
}

/// Coefficients of the mechanism P(c_ij = 1 | y_ij, z_ik = 1) = ρ(α_kj + β_kj y_ij).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", try_from = "ParamsRepr")]
pub struct MechanismParams {
    kind: MechanismKind,
    link: LinkFunction,
    alpha: DMatrix<f64>,
    beta: DMatrix<f64>,
    /// Variables whose slope may be nonzero. Categorical columns never
    /// carry a slope.
    self_masked: Vec<bool>,
}

impl MechanismParams {
    /// All-zero coefficients (every cell missing with probability ½).
    pub fn new(kind: MechanismKind, link: LinkFunction, k: usize, d: usize) -> Self {
        MechanismParams {
            kind,
            link,
            alpha: DMatrix::zeros(k, d),
            beta: DMatrix::zeros(k, d),
            self_masked: vec![true; d],
        }
    }

    /// Build from full tables; cells are averaged within their tying
    /// groups so the result satisfies the kind's constraints.
    pub fn from_tables(
        kind: MechanismKind,
        link: LinkFunction,
        alpha: DMatrix<f64>,
        beta: DMatrix<f64>,
    ) -> Result<Self> {
        if alpha.shape() != beta.shape() {
            return Err(Error::Dimension(format!(
                "alpha is {:?}, beta is {:?}",
                alpha.shape(),
                beta.shape()
            )));
        }
        let d = alpha.ncols();
        let mut p = MechanismParams {
            kind,
            link,
            alpha,
            beta,
            self_masked: vec![true; d],
        };
        p.project();
        Ok(p)
    }

    /// Restrict slopes to the flagged variables (zeroing the others).
    pub fn with_self_masked(mut self, self_masked: Vec<bool>) -> Result<Self> {
        if self_masked.len() != self.d() {
            return Err(Error::LengthMismatch {
                left: self_masked.len(),
                right: self.d(),
            });
        }
        self.self_masked = self_masked;
        self.project();
        Ok(self)
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn link(&self) -> LinkFunction {
        self.link
    }

    pub fn spec(&self) -> MechanismSpec {
        MechanismSpec::new(self.kind, self.link)
    }

    pub fn k(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn d(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn alpha(&self, k: usize, j: usize) -> f64 {
        self.alpha[(k, j)]
    }

    pub fn beta(&self, k: usize, j: usize) -> f64 {
        self.beta[(k, j)]
    }

    pub fn alpha_table(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    pub fn beta_table(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn self_masked(&self) -> &[bool] {
        &self.self_masked
    }

    pub fn alpha_group(&self, k: usize, j: usize) -> usize {
        self.kind.alpha_group(k, j, self.d())
    }

    /// Slope group of cell (k, j), `None` when the slope is fixed at zero.
    pub fn beta_group(&self, k: usize, j: usize) -> Option<usize> {
        if self.self_masked[j] {
            self.kind.beta_group(k, j, self.d())
        } else {
            None
        }
    }

    pub fn n_alpha_groups(&self) -> usize {
        self.kind.n_alpha_groups(self.k(), self.d())
    }

    pub fn n_beta_groups(&self) -> usize {
        self.kind.n_beta_groups(self.k(), self.d())
    }

    /// Free parameters, excluding slopes of variables that cannot be
    /// self-masked.
    pub fn free_param_count(&self) -> usize {
        let mut used = vec![false; self.n_beta_groups()];
        for k in 0..self.k() {
            for j in 0..self.d() {
                if let Some(g) = self.beta_group(k, j) {
                    used[g] = true;
                }
            }
        }
        self.n_alpha_groups() + used.iter().filter(|u| **u).count()
    }

    /// Set every cell of intercept group `g`.
    pub fn set_alpha_group(&mut self, g: usize, value: f64) {
        for k in 0..self.k() {
            for j in 0..self.d() {
                if self.alpha_group(k, j) == g {
                    self.alpha[(k, j)] = value;
                }
            }
        }
    }

    /// Set every cell of slope group `g`.
    pub fn set_beta_group(&mut self, g: usize, value: f64) {
        for k in 0..self.k() {
            for j in 0..self.d() {
                if self.beta_group(k, j) == Some(g) {
                    self.beta[(k, j)] = value;
                }
            }
        }
    }

    /// Replace one cell and re-project.
    pub fn set_cell(&mut self, k: usize, j: usize, alpha: f64, beta: f64) {
        let ga = self.alpha_group(k, j);
        self.set_alpha_group(ga, alpha);
        if let Some(gb) = self.beta_group(k, j) {
            self.set_beta_group(gb, beta);
        }
    }

    /// Shift every intercept by `delta`.
    pub fn shift_alpha(&mut self, delta: f64) {
        self.alpha.add_scalar_mut(delta);
    }

    fn project(&mut self) {
        let (kk, d) = (self.k(), self.d());
        let mut sum = vec![0.0; self.n_alpha_groups()];
        let mut cnt = vec![0usize; sum.len()];
        for k in 0..kk {
            for j in 0..d {
                let g = self.alpha_group(k, j);
                sum[g] += self.alpha[(k, j)];
                cnt[g] += 1;
            }
        }
        for k in 0..kk {
            for j in 0..d {
                let g = self.alpha_group(k, j);
                self.alpha[(k, j)] = sum[g] / cnt[g] as f64;
            }
        }
        let mut sum = vec![0.0; self.n_beta_groups()];
        let mut cnt = vec![0usize; sum.len()];
        for k in 0..kk {
            for j in 0..d {
                if let Some(g) = self.beta_group(k, j) {
                    sum[g] += self.beta[(k, j)];
                    cnt[g] += 1;
                }
            }
        }
        for k in 0..kk {
            for j in 0..d {
                self.beta[(k, j)] = match self.beta_group(k, j) {
                    Some(g) => sum[g] / cnt[g] as f64,
                    None => 0.0,
                };
            }
        }
    }

    /// α_kj + β_kj·y. `y` is ignored (and may be NaN) when the slope is zero.
    pub fn linear_predictor(&self, k: usize, j: usize, y: f64) -> f64 {
        let b = self.beta[(k, j)];
        if b == 0.0 {
            self.alpha[(k, j)]
        } else {
            self.alpha[(k, j)] + b * y
        }
    }

    /// P(c_kj = 1 | y).
    pub fn prob_missing(&self, k: usize, j: usize, y: f64) -> f64 {
        self.link.cdf(self.linear_predictor(k, j, y))
    }

    /// log P(c = missing) and log P(c = observed) at linear predictor `eta`,
    /// clamped; the flag reports whether a clamp was hit.
    fn cell_log_prob(&self, eta: f64, missing: bool) -> (f64, bool) {
        let p = if missing { self.link.cdf(eta) } else { self.link.sf(eta) };
        if p < PROB_FLOOR {
            (PROB_FLOOR.ln(), true)
        } else if p > 1.0 - PROB_FLOOR {
            ((1.0 - PROB_FLOOR).ln(), true)
        } else if missing {
            (self.link.log_cdf(eta), false)
        } else {
            (self.link.log_sf(eta), false)
        }
    }

    /// Clamped log P(c_kj = missing) or log P(c_kj = observed) at value `y`.
    pub fn log_cell_prob(&self, k: usize, j: usize, y: f64, missing: bool) -> f64 {
        self.cell_log_prob(self.linear_predictor(k, j, y), missing).0
    }

    fn check_row(&self, k: usize, len_y: usize, len_c: usize) -> Result<()> {
        if k >= self.k() {
            return Err(Error::Dimension(format!("class {k} out of range for K={}", self.k())));
        }
        if len_y != self.d() || len_c != self.d() {
            return Err(Error::Dimension(format!(
                "row lengths {len_y}/{len_c} do not match d={}",
                self.d()
            )));
        }
        Ok(())
    }

    /// log P(c_row | y_row, class k); `c_row[j] == true` marks a missing cell.
    pub fn log_mask_prob(&self, k: usize, y_row: &[f64], c_row: &[bool]) -> Result<f64> {
        self.log_mask_prob_flagged(k, y_row, c_row).map(|(v, _)| v)
    }

    /// As [`log_mask_prob`](Self::log_mask_prob), also reporting whether any
    /// cell probability hit the clamp.
    pub fn log_mask_prob_flagged(&self, k: usize, y_row: &[f64], c_row: &[bool]) -> Result<(f64, bool)> {
        self.check_row(k, y_row.len(), c_row.len())?;
        let mut total = 0.0;
        let mut clamped = false;
        for j in 0..self.d() {
            if self.beta[(k, j)] != 0.0 && !y_row[j].is_finite() {
                return Err(Error::Contract(format!(
                    "value of variable {j} is needed by a self-masked mechanism but is not set"
                )));
            }
            let (v, c) = self.cell_log_prob(self.linear_predictor(k, j, y_row[j]), c_row[j]);
            total += v;
            clamped |= c;
        }
        Ok((total, clamped))
    }

    /// log P(c_row | class k) for mechanisms free of y.
    pub fn log_mask_prob_observed_only(&self, k: usize, c_row: &[bool]) -> Result<f64> {
        if self.kind.depends_on_y() {
            return Err(Error::Contract(format!(
                "{} depends on the missing values; its mask probability has no closed form",
                self.kind
            )));
        }
        self.check_row(k, c_row.len(), c_row.len())?;
        Ok((0..self.d())
            .map(|j| self.cell_log_prob(self.alpha[(k, j)], c_row[j]).0)
            .sum())
    }

    /// P(c_row | class k) for mechanisms free of y.
    pub fn mask_prob_observed_only(&self, k: usize, c_row: &[bool]) -> Result<f64> {
        self.log_mask_prob_observed_only(k, c_row).map(f64::exp)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    kind: MechanismKind,
    link: LinkFunction,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    #[serde(default)]
    self_masked: Option<Vec<bool>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub(crate) fn table_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::Dimension(format!("{what} rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl From<MechanismParams> for ParamsRepr {
    fn from(p: MechanismParams) -> Self {
        ParamsRepr {
            kind: p.kind,
            link: p.link,
            alpha: rows(&p.alpha),
            beta: rows(&p.beta),
            self_masked: Some(p.self_masked),
        }
    }
}

impl TryFrom<ParamsRepr> for MechanismParams {
    type Error = Error;
    fn try_from(r: ParamsRepr) -> Result<Self> {
        let alpha = table_from_rows(&r.alpha, "alpha")?;
        let beta = table_from_rows(&r.beta, "beta")?;
        let d = alpha.ncols();
        let p = MechanismParams::from_tables(r.kind, r.link, alpha, beta)?;
        p.with_self_masked(r.self_masked.unwrap_or_else(|| vec![true; d]))
    }
}

//! Data containers and mixture parameters for continuous, categorical and
//! mixed variables.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::GaussianParams;
use crate::error::{Error, Result};
use crate::mechanisms::{table_from_rows, MechanismParams};

/// Missingness indicators, `true` where the cell is missing.
pub type Mask = DMatrix<bool>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum VariableType {
    Continuous,
    Categorical { levels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub var_type: VariableType,
}

/// Column names and types. Categorical values are level codes
/// `0..levels` in memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSchema {
    pub columns: Vec<ColumnSpec>,
}

impl VariableSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let s = VariableSchema { columns };
        s.validate()?;
        Ok(s)
    }

    /// `d` continuous columns named y1..yd.
    pub fn continuous(d: usize) -> Self {
        VariableSchema {
            columns: (0..d)
                .map(|j| ColumnSpec {
                    name: format!("y{}", j + 1),
                    var_type: VariableType::Continuous,
                })
                .collect(),
        }
    }

    /// Categorical columns with the given level counts, named x1..xd.
    pub fn categorical(levels: &[usize]) -> Result<Self> {
        VariableSchema::new(
            levels
                .iter()
                .enumerate()
                .map(|(j, l)| ColumnSpec {
                    name: format!("x{}", j + 1),
                    var_type: VariableType::Categorical { levels: *l },
                })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::Schema("schema has no columns".into()));
        }
        for c in &self.columns {
            if let VariableType::Categorical { levels } = c.var_type {
                if levels < 2 {
                    return Err(Error::Schema(format!("column `{}` needs at least 2 levels", c.name)));
                }
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.columns.len()
    }

    pub fn is_continuous(&self, j: usize) -> bool {
        matches!(self.columns[j].var_type, VariableType::Continuous)
    }

    pub fn levels(&self, j: usize) -> Option<usize> {
        match self.columns[j].var_type {
            VariableType::Categorical { levels } => Some(levels),
            VariableType::Continuous => None,
        }
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|j| self.is_continuous(*j)).collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        (0..self.d()).filter(|j| !self.is_continuous(*j)).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }
}

/// Data matrix with its missingness mask. Missing cells hold NaN.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: VariableSchema,
    values: DMatrix<f64>,
    mask: Mask,
}

impl Dataset {
    /// Validates observed cells against the schema and blanks masked ones.
    pub fn new(schema: VariableSchema, values: DMatrix<f64>, mask: Mask) -> Result<Self> {
        schema.validate()?;
        let (n, d) = values.shape();
        if d != schema.d() {
            return Err(Error::Schema(format!("data has {d} columns, schema has {}", schema.d())));
        }
        if mask.shape() != (n, d) {
            return Err(Error::Dimension(format!("mask is {:?}, data is {n}x{d}", mask.shape())));
        }
        let mut values = values;
        for j in 0..d {
            for i in 0..n {
                if mask[(i, j)] {
                    values[(i, j)] = f64::NAN;
                    continue;
                }
                let v = values[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Schema(format!("observed cell ({}, {}) is not finite", i + 1, j + 1)));
                }
                if let Some(l) = schema.levels(j) {
                    if v.fract() != 0.0 || v < 0.0 || v >= l as f64 {
                        return Err(Error::Schema(format!(
                            "cell ({}, {}) holds level {} outside 1..={l}",
                            i + 1,
                            j + 1,
                            v + 1.0
                        )));
                    }
                }
            }
        }
        Ok(Dataset { schema, values, mask })
    }

    /// Dataset with missing cells inferred from NaN entries.
    pub fn from_nan(schema: VariableSchema, values: DMatrix<f64>) -> Result<Self> {
        let mask = values.map(|v| v.is_nan());
        Dataset::new(schema, values, mask)
    }

    /// All-continuous dataset.
    pub fn continuous(values: DMatrix<f64>, mask: Mask) -> Result<Self> {
        Dataset::new(VariableSchema::continuous(values.ncols()), values, mask)
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_missing(&self, i: usize, j: usize) -> bool {
        self.mask[(i, j)]
    }

    pub fn missing_rate(&self) -> f64 {
        let total = self.mask.len();
        if total == 0 {
            return 0.0;
        }
        self.mask.iter().filter(|m| **m).count() as f64 / total as f64
    }

    pub fn row_mask(&self, i: usize) -> Vec<bool> {
        self.mask.row(i).iter().copied().collect()
    }

    /// Rows `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let d = self.d();
        Dataset {
            schema: self.schema.clone(),
            values: DMatrix::from_fn(rows.len(), d, |r, j| self.values[(rows[r], j)]),
            mask: Mask::from_fn(rows.len(), d, |r, j| self.mask[(rows[r], j)]),
        }
    }
}

/// Same schema, same mask, equal observed cells (missing cells hold NaN
/// and are not compared).
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(other.values.iter())
                .zip(self.mask.iter())
                .all(|((a, b), m)| *m || a == b)
    }
}

/// Covariance model of the Gaussian block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceStructure {
    Full,
    #[default]
    Diagonal,
}

impl std::str::FromStr for CovarianceStructure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovarianceStructure::Full),
            "diagonal" | "diag" => Ok(CovarianceStructure::Diagonal),
            o => Err(Error::Config(format!("unknown covariance structure `{o}` (full|diagonal)"))),
        }
    }
}

/// Parameters of one class: a Gaussian over the continuous columns (if
/// any) and one probability vector per categorical column.
#[derive(Debug, Clone)]
pub struct ComponentParams {
    pub gaussian: Option<GaussianParams>,
    pub categorical: Vec<Vec<f64>>,
}

/// Per-variable K×ℓ_j probability tables of the categorical block.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalParams {
    pub tables: Vec<DMatrix<f64>>,
}

/// Proportions and class parameters of a finite mixture.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    proportions: Vec<f64>,
    components: Vec<ComponentParams>,
    schema: VariableSchema,
}

impl MixtureParams {
    pub fn new(proportions: Vec<f64>, components: Vec<ComponentParams>, schema: VariableSchema) -> Result<Self> {
        let k = proportions.len();
        if k == 0 || components.len() != k {
            return Err(Error::Dimension(format!(
                "{} proportions for {} components",
                k,
                components.len()
            )));
        }
        if proportions.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return Err(Error::Contract("proportions must be positive".into()));
        }
        let total: f64 = proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("proportions sum to {total}")));
        }
        let proportions = proportions.iter().map(|p| p / total).collect();
        let n_cont = schema.continuous_indices().len();
        let cat = schema.categorical_indices();
        let mut components = components;
        for (kk, comp) in components.iter_mut().enumerate() {
            match (&comp.gaussian, n_cont) {
                (None, 0) => {}
                (Some(g), m) if g.dim() == m => {}
                _ => {
                    return Err(Error::Schema(format!(
                        "component {} does not match the {n_cont} continuous columns",
                        kk + 1
                    )))
                }
            }
            if comp.categorical.len() != cat.len() {
                return Err(Error::Schema(format!(
                    "component {} has {} categorical tables, schema has {}",
                    kk + 1,
                    comp.categorical.len(),
                    cat.len()
                )));
            }
            for (probs, &j) in comp.categorical.iter_mut().zip(&cat) {
                let l = schema.levels(j).expect("categorical column");
                if probs.len() != l || probs.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::Schema(format!("bad probability table for column {}", j + 1)));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Contract(format!("categorical probabilities sum to {s}")));
                }
                probs.iter_mut().for_each(|p| *p /= s);
            }
        }
        Ok(MixtureParams {
            proportions,
            components,
            schema,
        })
    }

    pub fn k(&self) -> usize {
        self.proportions.len()
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn components(&self) -> &[ComponentParams] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &ComponentParams {
        &self.components[k]
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn categorical_params(&self) -> CategoricalParams {
        let cat = self.schema.categorical_indices();
        CategoricalParams {
            tables: (0..cat.len())
                .map(|c| {
                    let l = self.components[0].categorical[c].len();
                    DMatrix::from_fn(self.k(), l, |k, a| self.components[k].categorical[c][a])
                })
                .collect(),
        }
    }

    /// Relabel: new class `k` is old class `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> MixtureParams {
        MixtureParams {
            proportions: perm.iter().map(|&p| self.proportions[p]).collect(),
            components: perm.iter().map(|&p| self.components[p].clone()).collect(),
            schema: self.schema.clone(),
        }
    }

    /// log f_k(y) for a fully specified row.
    pub fn log_component_density(&self, k: usize, y: &[f64]) -> Result<f64> {
        log_component_density(self, k, y)
    }
}

/// log f_k(y_row) for a completed row: Gaussian block plus categorical
/// log-probabilities.
pub fn log_component_density(params: &MixtureParams, k: usize, y: &[f64]) -> Result<f64> {
    let schema = &params.schema;
    if y.len() != schema.d() {
        return Err(Error::Dimension(format!("row has {} values, schema has {}", y.len(), schema.d())));
    }
    let comp = &params.components[k];
    let mut total = 0.0;
    if let Some(g) = &comp.gaussian {
        let cont = schema.continuous_indices();
        let x = DVector::from_iterator(cont.len(), cont.iter().map(|&j| y[j]));
        total += g.log_pdf(&x)?;
    }
    for (c, &j) in schema.categorical_indices().iter().enumerate() {
        let probs = &comp.categorical[c];
        let v = y[j];
        if v.fract() != 0.0 || v < 0.0 || v as usize >= probs.len() {
            return Err(Error::Schema(format!("level {} out of range for column {}", v + 1.0, j + 1)));
        }
        total += probs[v as usize].ln();
    }
    Ok(total)
}

/// Mixture and mechanism parameters together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Theta {
    pub mixture: MixtureParams,
    pub mechanism: MechanismParams,
}

impl Theta {
    pub fn k(&self) -> usize {
        self.mixture.k()
    }

    pub fn permuted(&self, perm: &[usize]) -> Theta {
        let m = &self.mechanism;
        let alpha = DMatrix::from_fn(m.k(), m.d(), |k, j| m.alpha(perm[k], j));
        let beta = DMatrix::from_fn(m.k(), m.d(), |k, j| m.beta(perm[k], j));
        let mechanism = MechanismParams::from_tables(m.kind(), m.link(), alpha, beta)
            .and_then(|p| p.with_self_masked(m.self_masked().to_vec()))
            .expect("same shape");
        Theta {
            mixture: self.mixture.permuted(perm),
            mechanism,
        }
    }
}

/// Σ_i log(π_{z_i} f_{z_i}(y_i) P(c_i | y_i, z_i)) on completed data.
pub fn complete_log_likelihood(
    params: &MixtureParams,
    mech: &MechanismParams,
    y: &DMatrix<f64>,
    z: &[usize],
    c: &Mask,
) -> Result<f64> {
    let (n, d) = y.shape();
    if z.len() != n {
        return Err(Error::LengthMismatch { left: z.len(), right: n });
    }
    if c.shape() != (n, d) || mech.d() != d || mech.k() != params.k() {
        return Err(Error::Dimension("complete-data likelihood inputs disagree".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let k = z[i];
        if k >= params.k() {
            return Err(Error::Dimension(format!("class label {k} out of range")));
        }
        let row: Vec<f64> = y.row(i).iter().copied().collect();
        let crow: Vec<bool> = c.row(i).iter().copied().collect();
        total += params.proportions[k].ln() + log_component_density(params, k, &row)? + mech.log_mask_prob(k, &row, &crow)?;
    }
    Ok(total)
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ComponentRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian: Option<GaussianRepr>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    categorical: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MixtureRepr {
    proportions: Vec<f64>,
    components: Vec<ComponentRepr>,
    schema: VariableSchema,
}

impl Serialize for MixtureParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = MixtureRepr {
            proportions: self.proportions.clone(),
            components: self
                .components
                .iter()
                .map(|c| ComponentRepr {
                    gaussian: c.gaussian.as_ref().map(|g| GaussianRepr {
                        mean: g.mean().iter().copied().collect(),
                        covariance: (0..g.dim()).map(|i| g.covariance().row(i).iter().copied().collect()).collect(),
                    }),
                    categorical: c.categorical.clone(),
                })
                .collect(),
            schema: self.schema.clone(),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for MixtureParams {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = MixtureRepr::deserialize(de)?;
        let components = r
            .components
            .into_iter()
            .map(|c| {
                let gaussian = match c.gaussian {
                    None => None,
                    Some(g) => {
                        let cov = table_from_rows(&g.covariance, "covariance")?;
                        Some(GaussianParams::new(DVector::from_vec(g.mean), cov)?)
                    }
                };
                Ok(ComponentParams {
                    gaussian,
                    categorical: c.categorical,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        MixtureParams::new(r.proportions, components, r.schema).map_err(D::Error::custom)
    }
}

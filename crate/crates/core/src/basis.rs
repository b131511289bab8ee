//! Per-covariate finite bases, standardized to empirical zero mean and unit
//! variance, and the one-dimensional zero-mean kernels they induce.
//!
//! Each covariate `i` gets raw functions `phi_ib`, `b = 1..B_i`. On the
//! training column they are shifted and scaled to `(phi_ib - m_ib) / s_ib`
//! with the biased (1/N) moments, and the constants are frozen so new data is
//! mapped identically. The induced kernel is the inner product of the
//! standardized feature vectors, `k_i(x, x') = Phi_i(x) . Phi_i(x')`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Family of raw basis functions for one covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BasisKind {
    /// Natural cubic spline with knots at empirical quantiles of the column.
    NaturalCubicSpline { num_knots: usize },
    /// Monomials `x, x^2, ..., x^degree`.
    Polynomial { degree: usize },
    /// One indicator per distinct training value. No category is dropped.
    OneHot,
}

impl Default for BasisKind {
    fn default() -> Self {
        BasisKind::NaturalCubicSpline { num_knots: 5 }
    }
}

impl BasisKind {
    fn validate(&self) -> Result<()> {
        match *self {
            BasisKind::NaturalCubicSpline { num_knots } if num_knots < 2 => Err(
                Error::InvalidSpec(format!("natural cubic spline needs at least 2 knots, got {num_knots}")),
            ),
            BasisKind::Polynomial { degree } if degree < 1 => Err(Error::InvalidSpec(
                "polynomial degree must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Basis choice for every covariate: a default plus per-covariate overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub default: BasisKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<usize, BasisKind>,
}

impl BasisSpec {
    pub fn uniform(kind: BasisKind) -> Self {
        BasisSpec {
            default: kind,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, covariate: usize, kind: BasisKind) -> Self {
        self.overrides.insert(covariate, kind);
        self
    }

    pub fn kind_for(&self, covariate: usize) -> &BasisKind {
        self.overrides.get(&covariate).unwrap_or(&self.default)
    }
}

/// Raw (unstandardized) basis functions with their data-dependent constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RawBasis {
    NaturalCubicSpline { knots: Vec<f64> },
    Polynomial { degree: usize },
    OneHot { levels: Vec<f64> },
}

impl RawBasis {
    pub fn dim(&self) -> usize {
        match self {
            RawBasis::NaturalCubicSpline { knots } => knots.len() - 1,
            RawBasis::Polynomial { degree } => *degree,
            RawBasis::OneHot { levels } => levels.len(),
        }
    }

    /// Writes the raw basis values at `x` into `out[..dim]`.
    pub fn eval(&self, x: f64, out: &mut [f64]) {
        match self {
            RawBasis::NaturalCubicSpline { knots } => natural_spline_eval(knots, x, out),
            RawBasis::Polynomial { degree } => {
                let mut v = 1.0;
                for slot in out.iter_mut().take(*degree) {
                    v *= x;
                    *slot = v;
                }
            }
            RawBasis::OneHot { levels } => {
                for (slot, level) in out.iter_mut().zip(levels) {
                    *slot = if x == *level { 1.0 } else { 0.0 };
                }
            }
        }
    }
}

// Truncated-power form of the natural cubic spline: N_1 = x and
// N_{k+2} = d_k - d_{K-1} with d_k = ((x - t_k)^3_+ - (x - t_K)^3_+) / (t_K - t_k).
fn natural_spline_eval(knots: &[f64], x: f64, out: &mut [f64]) {
    let k = knots.len();
    let last = knots[k - 1];
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let tail = cube(x - last);
    let d = |j: usize| (cube(x - knots[j]) - tail) / (last - knots[j]);
    out[0] = x;
    if k > 2 {
        let d_last = d(k - 2);
        for j in 0..k - 2 {
            out[j + 1] = d(j) - d_last;
        }
    }
}

/// Standardized basis for one covariate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateBasis {
    #[serde(flatten)]
    pub raw: RawBasis,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl CovariateBasis {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Standardized feature vector `Phi_i(x)`, written into `out[..dim]`.
    pub fn features_into(&self, x: f64, out: &mut [f64]) {
        self.raw.eval(x, out);
        for ((v, m), s) in out.iter_mut().zip(&self.means).zip(&self.stds) {
            *v = (*v - m) / s;
        }
    }

    pub fn features(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.features_into(x, &mut out);
        out
    }

    /// `k_i(a, b) = Phi_i(a) . Phi_i(b)`.
    pub fn kernel(&self, a: f64, b: f64) -> f64 {
        const STACK: usize = 16;
        let dim = self.dim();
        if dim <= STACK {
            let mut fa = [0.0; STACK];
            let mut fb = [0.0; STACK];
            self.features_into(a, &mut fa[..dim]);
            self.features_into(b, &mut fb[..dim]);
            fa[..dim].iter().zip(&fb[..dim]).map(|(u, v)| u * v).sum()
        } else {
            let fa = self.features(a);
            let fb = self.features(b);
            fa.iter().zip(&fb).map(|(u, v)| u * v).sum()
        }
    }

    fn build(covariate: usize, column: &[f64], kind: &BasisKind) -> Result<Self> {
        kind.validate()?;
        let continuous = !matches!(kind, BasisKind::OneHot);
        if continuous {
            let first = column[0];
            if column.iter().all(|v| *v == first) {
                return Err(Error::ZeroVariance { covariate, basis: 0 });
            }
        }
        let raw = match *kind {
            BasisKind::NaturalCubicSpline { num_knots } => {
                let mut sorted = column.to_vec();
                sorted.sort_by(f64::total_cmp);
                let mut knots: Vec<f64> = (0..num_knots)
                    .map(|k| stats::quantile_sorted(&sorted, k as f64 / (num_knots - 1) as f64))
                    .collect();
                knots.dedup();
                if knots.len() < 2 {
                    return Err(Error::TooFewKnots {
                        covariate,
                        distinct: knots.len(),
                    });
                }
                RawBasis::NaturalCubicSpline { knots }
            }
            BasisKind::Polynomial { degree } => RawBasis::Polynomial { degree },
            BasisKind::OneHot => {
                let mut levels = column.to_vec();
                levels.sort_by(f64::total_cmp);
                levels.dedup();
                RawBasis::OneHot { levels }
            }
        };

        let n = column.len();
        let dim = raw.dim();
        let mut design = DMatrix::<f64>::zeros(n, dim);
        let mut buf = vec![0.0; dim];
        for (row, &x) in column.iter().enumerate() {
            raw.eval(x, &mut buf);
            for (b, v) in buf.iter().enumerate() {
                design[(row, b)] = *v;
            }
        }

        let mut means = Vec::with_capacity(dim);
        let mut stds = Vec::with_capacity(dim);
        for b in 0..dim {
            let col = design.column(b);
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let scale = col.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if var <= (1e-12 * scale.max(f64::MIN_POSITIVE)).powi(2) || var == 0.0 {
                return Err(Error::ZeroVariance { covariate, basis: b });
            }
            means.push(m);
            stds.push(var.sqrt());
        }

        // Linear independence of {1, phi_i1, ...} is checked on the centered block.
        // Indicators always sum to one, so for one-hot only the raw block is checked.
        let mut check = design;
        if continuous {
            for b in 0..dim {
                let (m, s) = (means[b], stds[b]);
                check.column_mut(b).apply(|v| *v = (*v - m) / s);
            }
        }
        let rank = numerical_rank(&check);
        if rank < dim {
            return Err(Error::RankDeficient {
                covariate,
                rank,
                columns: dim,
            });
        }

        Ok(CovariateBasis { raw, means, stds })
    }
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * 1e-10 * (m.nrows().max(m.ncols()) as f64).sqrt();
    sv.iter().filter(|s| **s > tol).count()
}

/// The standardized feature maps for all `p` covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLibrary {
    pub covariates: Vec<CovariateBasis>,
}

impl FeatureLibrary {
    /// Builds one standardized basis per column of `x` (rows are observations).
    pub fn build(x: &DMatrix<f64>, spec: &BasisSpec) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::InvalidConfig(format!(
                "at least 2 rows are needed to build a basis, got {}",
                x.nrows()
            )));
        }
        let covariates = (0..x.ncols())
            .map(|i| {
                let column: Vec<f64> = x.column(i).iter().copied().collect();
                CovariateBasis::build(i, &column, spec.kind_for(i))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureLibrary { covariates })
    }

    pub fn num_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.covariates[i].dim()
    }

    pub fn total_dim(&self) -> usize {
        self.covariates.iter().map(CovariateBasis::dim).sum()
    }

    pub fn covariate(&self, i: usize) -> Result<&CovariateBasis> {
        self.covariates.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.covariates.len(),
        })
    }

    /// One-dimensional zero-mean kernel `k_i(a, b)`.
    pub fn eval_k1(&self, i: usize, a: f64, b: f64) -> Result<f64> {
        Ok(self.covariate(i)?.kernel(a, b))
    }

    /// All `k_i(x_i, y_i)` for two full covariate vectors.
    pub fn k1_values(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let p = self.num_covariates();
        check_len("first point", p, x.len())?;
        check_len("second point", p, y.len())?;
        Ok(self
            .covariates
            .iter()
            .enumerate()
            .map(|(i, c)| c.kernel(x[i], y[i]))
            .collect())
    }

    /// Standardized features of every row of `x`, laid out for kernel loops.
    pub fn feature_block(&self, x: &DMatrix<f64>) -> Result<FeatureBlock> {
        check_len("covariate columns", self.num_covariates(), x.ncols())?;
        let rows = x.nrows();
        let mut offsets = Vec::with_capacity(self.covariates.len() + 1);
        let mut total = 0;
        for c in &self.covariates {
            offsets.push(total);
            total += c.dim();
        }
        offsets.push(total);
        let mut data = vec![0.0; total * rows];
        let mut buf = Vec::new();
        for (i, c) in self.covariates.iter().enumerate() {
            buf.resize(c.dim(), 0.0);
            for n in 0..rows {
                c.features_into(x[(n, i)], &mut buf);
                for (b, v) in buf.iter().enumerate() {
                    data[(offsets[i] + b) * rows + n] = *v;
                }
            }
        }
        Ok(FeatureBlock {
            rows,
            offsets,
            data,
        })
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}

/// Standardized features for a fixed set of rows. The values of basis
/// function `b` of covariate `i` over all rows are contiguous.
#[derive(Clone, Debug)]
pub struct FeatureBlock {
    rows: usize,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl FeatureBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_covariates(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn dim(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Values of basis function `b` of covariate `i` across all rows.
    pub fn column(&self, i: usize, b: usize) -> &[f64] {
        let start = (self.offsets[i] + b) * self.rows;
        &self.data[start..start + self.rows]
    }

    #[inline]
    pub fn value(&self, i: usize, b: usize, row: usize) -> f64 {
        self.data[(self.offsets[i] + b) * self.rows + row]
    }

    /// A new block holding the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> FeatureBlock {
        let total = *self.offsets.last().unwrap();
        let rows = idx.len();
        let mut data = Vec::with_capacity(total * rows);
        for col in 0..total {
            let src = &self.data[col * self.rows..(col + 1) * self.rows];
            data.extend(idx.iter().map(|&r| src[r]));
        }
        FeatureBlock {
            rows,
            offsets: self.offsets.clone(),
            data,
        }
    }

    /// `k_i` between row `a` of `self` and rows `start..start + out.len()` of
    /// `other`, written into `out`.
    #[inline]
    pub fn k1_row(&self, other: &FeatureBlock, i: usize, a: usize, start: usize, out: &mut [f64]) {
        let len = out.len();
        let dim = self.dim(i);
        let first = self.value(i, 0, a);
        for (o, v) in out.iter_mut().zip(&other.column(i, 0)[start..start + len]) {
            *o = first * v;
        }
        for b in 1..dim {
            let w = self.value(i, b, a);
            for (o, v) in out.iter_mut().zip(&other.column(i, b)[start..start + len]) {
                *o += w * v;
            }
        }
    }
}

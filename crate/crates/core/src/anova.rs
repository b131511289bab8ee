//! Functional ANOVA reporting.
//!
//! A fitted kernel model splits exactly into effects
//! `f_V(x) = theta_V sum_n alpha_n prod_{i in V} k_i(x_{n,i}, x_i)`, each
//! orthogonal to lower-order functions under the product of the empirical
//! marginals. Every such effect is linear in the tensor features
//! `(x)_{i in V} [1, Phi_i(x_i)]`, which is the representation used here: the
//! constant slots are zero under the product measure and pick up the
//! projection shadows when pairs are re-expressed under the joint measure.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{check_len, CovariateBasis};
use crate::error::{Error, Result};
use crate::kernel::SkimHyperParams;
use crate::ridge::FittedModel;
use crate::subset::{subsets_up_to, Subset};

/// Reference measure of a decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    /// Product of the covariate marginals.
    Product,
    /// Joint covariate distribution.
    Joint,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Measure::Product => "product",
            Measure::Joint => "joint",
        })
    }
}

/// Covariates with nonzero importance.
pub fn select(hp: &SkimHyperParams) -> Vec<usize> {
    hp.support()
}

/// An effect that is linear in `(x)_{i in V} [1, Phi_i(x_i)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEffect {
    pub subset: Subset,
    pub bases: Vec<CovariateBasis>,
    /// Row-major over the augmented dimensions `dim_i + 1`, first covariate slowest.
    pub coef: Vec<f64>,
}

fn augmented(basis: &CovariateBasis, x: f64) -> Vec<f64> {
    let mut v = vec![0.0; basis.dim() + 1];
    v[0] = 1.0;
    basis.features_into(x, &mut v[1..]);
    v
}

fn contract(coef: &[f64], vecs: &[Vec<f64>]) -> f64 {
    match vecs {
        [] => coef[0],
        [v] => coef.iter().zip(v).map(|(c, f)| c * f).sum(),
        [v, rest @ ..] => {
            let stride = coef.len() / v.len();
            v.iter()
                .enumerate()
                .filter(|(_, f)| **f != 0.0)
                .map(|(a, f)| f * contract(&coef[a * stride..(a + 1) * stride], rest))
                .sum()
        }
    }
}

fn add_outer(t: &mut [f64], scale: f64, vecs: &[&[f64]]) {
    match vecs {
        [] => t[0] += scale,
        [v, rest @ ..] => {
            let stride = t.len() / v.len();
            for (a, f) in v.iter().enumerate() {
                if *f != 0.0 {
                    add_outer(&mut t[a * stride..(a + 1) * stride], scale * f, rest);
                }
            }
        }
    }
}

impl TensorEffect {
    pub fn zero(subset: Subset, bases: Vec<CovariateBasis>) -> Self {
        let len = bases.iter().map(|b| b.dim() + 1).product();
        TensorEffect {
            subset,
            bases,
            coef: vec![0.0; len],
        }
    }

    /// Value at the coordinates `xv` of the subset, in subset order.
    pub fn eval(&self, xv: &[f64]) -> f64 {
        let vecs: Vec<Vec<f64>> = self.bases.iter().zip(xv).map(|(b, x)| augmented(b, *x)).collect();
        contract(&self.coef, &vecs)
    }

    pub fn is_zero(&self) -> bool {
        self.coef.iter().all(|c| *c == 0.0)
    }
}

/// Effect of a black-box predictor obtained by averaging over reference rows
/// with the subset's columns pinned, minus all lower-order effects.
#[derive(Clone)]
pub struct EmpiricalEffect {
    subset: Subset,
    shared: Arc<EmpiricalShared>,
}

type Predictor = dyn Fn(&[f64]) -> f64 + Send + Sync;

struct EmpiricalShared {
    predictor: Box<Predictor>,
    data: DMatrix<f64>,
    intercept: f64,
}

impl EmpiricalShared {
    /// Average prediction with the columns `cols` set to `vals`.
    fn pinned_mean(&self, cols: &[usize], vals: &[f64]) -> f64 {
        let n = self.data.nrows();
        let mut row = vec![0.0; self.data.ncols()];
        let mut acc = 0.0;
        for r in 0..n {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.data[(r, c)];
            }
            for (c, v) in cols.iter().zip(vals) {
                row[*c] = *v;
            }
            acc += (self.predictor)(&row);
        }
        acc / n as f64
    }
}

impl EmpiricalEffect {
    pub fn eval(&self, xv: &[f64]) -> f64 {
        // Inclusion-exclusion over the subsets of V, with g_{} = intercept.
        let cols = self.subset.indices();
        let k = cols.len();
        let mut acc = 0.0;
        for mask in 0u32..(1 << k) {
            let picked: Vec<usize> = (0..k).filter(|b| mask & (1 << b) != 0).collect();
            let g = if picked.is_empty() {
                self.shared.intercept
            } else {
                let c: Vec<usize> = picked.iter().map(|&b| cols[b]).collect();
                let v: Vec<f64> = picked.iter().map(|&b| xv[b]).collect();
                self.shared.pinned_mean(&c, &v)
            };
            let sign = if (k - picked.len()) % 2 == 0 { 1.0 } else { -1.0 };
            acc += sign * g;
        }
        acc
    }
}

impl fmt::Debug for EmpiricalEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EmpiricalEffect")
            .field("subset", &self.subset)
            .field("reference_rows", &self.shared.data.nrows())
            .finish()
    }
}

/// An effect given directly as a function of the subset's coordinates.
#[derive(Clone)]
pub struct FnEffect {
    pub subset: Subset,
    pub f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for FnEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnEffect").field("subset", &self.subset).finish()
    }
}

#[derive(Clone, Debug)]
pub enum Effect {
    Tensor(TensorEffect),
    Empirical(EmpiricalEffect),
    Function(FnEffect),
}

impl Effect {
    pub fn subset(&self) -> &Subset {
        match self {
            Effect::Tensor(t) => &t.subset,
            Effect::Empirical(e) => &e.subset,
            Effect::Function(e) => &e.subset,
        }
    }

    pub fn eval(&self, xv: &[f64]) -> f64 {
        match self {
            Effect::Tensor(t) => t.eval(xv),
            Effect::Empirical(e) => e.eval(xv),
            Effect::Function(e) => (e.f)(xv),
        }
    }

    /// Value at a full covariate row.
    pub fn eval_row(&self, x: &[f64]) -> f64 {
        let xv: Vec<f64> = self.subset().indices().iter().map(|&i| x[i]).collect();
        self.eval(&xv)
    }
}

/// Intercept plus effects indexed by covariate subsets.
#[derive(Clone, Debug)]
pub struct AnovaDecomposition {
    pub measure: Measure,
    pub intercept: f64,
    /// Sorted by subset size, then lexicographically.
    pub effects: Vec<Effect>,
    pub order: usize,
    pub num_covariates: usize,
    pub provenance: String,
}

pub(crate) fn sort_effects(effects: &mut [Effect]) {
    effects.sort_by(|a, b| {
        let (a, b) = (a.subset(), b.subset());
        a.len().cmp(&b.len()).then_with(|| a.cmp(b))
    });
}

impl AnovaDecomposition {
    pub fn effect(&self, subset: &Subset) -> Option<&Effect> {
        self.effects.iter().find(|e| e.subset() == subset)
    }

    pub fn subsets(&self) -> Vec<Subset> {
        self.effects.iter().map(|e| e.subset().clone()).collect()
    }

    /// Value of `subset`'s effect at a full row; zero for absent effects.
    pub fn eval_effect(&self, subset: &Subset, x: &[f64]) -> f64 {
        self.effect(subset).map_or(0.0, |e| e.eval_row(x))
    }

    /// `f_{} + sum_V f_V(x_V)`.
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept + self.effects.iter().map(|e| e.eval_row(x)).sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_len("covariate columns", self.num_covariates, x.ncols())?;
        let values = self.effect_values(x)?;
        Ok((0..x.nrows())
            .map(|n| self.intercept + values.iter().map(|v| v[n]).sum::<f64>())
            .collect())
    }

    /// Values of every effect at every row of `x`, one vector per effect.
    pub fn effect_values(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        check_len("covariate columns", self.num_covariates, x.ncols())?;
        Ok(self
            .effects
            .par_iter()
            .map(|e| {
                let cols = e.subset().indices();
                let mut xv = vec![0.0; cols.len()];
                (0..x.nrows())
                    .map(|n| {
                        for (v, &c) in xv.iter_mut().zip(cols) {
                            *v = x[(n, c)];
                        }
                        e.eval(&xv)
                    })
                    .collect()
            })
            .collect())
    }
}

/// The effect of subset `v` in the product-measure decomposition of `model`.
pub fn extract_effect(model: &FittedModel, v: &Subset) -> Result<TensorEffect> {
    if v.len() > model.order {
        return Err(Error::SubsetTooLarge {
            size: v.len(),
            order: model.order,
        });
    }
    let p = model.num_covariates();
    if let Some(&i) = v.indices().iter().find(|&&i| i >= p) {
        return Err(Error::IndexOutOfRange { index: i, len: p });
    }
    let bases: Vec<CovariateBasis> = v.indices().iter().map(|&i| model.lib.covariates[i].clone()).collect();
    let mut effect = TensorEffect::zero(v.clone(), bases);
    let theta = model.hp.theta(v.indices());
    if theta == 0.0 || v.is_empty() {
        return Ok(effect);
    }
    let rows: Vec<Vec<Vec<f64>>> = (0..model.train_x.nrows())
        .map(|n| {
            effect
                .bases
                .iter()
                .zip(v.indices())
                .map(|(b, &i)| {
                    let mut a = augmented(b, model.train_x[(n, i)]);
                    a[0] = 0.0;
                    a
                })
                .collect()
        })
        .collect();
    for (alpha, vecs) in model.alpha.iter().zip(&rows) {
        let refs: Vec<&[f64]> = vecs.iter().map(Vec::as_slice).collect();
        add_outer(&mut effect.coef, theta * alpha, &refs);
    }
    Ok(effect)
}

/// Exact decomposition of `model` under the product of the empirical marginals.
/// Only effects with nonzero weight are listed.
pub fn product_decomposition(model: &FittedModel) -> Result<AnovaDecomposition> {
    let support = model.selected();
    let subsets: Vec<Subset> = subsets_up_to(&support, model.order)
        .into_iter()
        .filter(|s| model.hp.theta(s.indices()) != 0.0)
        .collect();
    let effects = subsets
        .par_iter()
        .map(|s| extract_effect(model, s).map(Effect::Tensor))
        .collect::<Result<Vec<_>>>()?;
    let eta0 = model.hp.eta()[0];
    Ok(AnovaDecomposition {
        measure: Measure::Product,
        intercept: eta0 * eta0 * model.alpha.iter().sum::<f64>(),
        effects,
        order: model.order,
        num_covariates: model.num_covariates(),
        provenance: "kernel-model".into(),
    })
}

/// Per-effect variances over a sample of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub effects: Vec<EffectVariance>,
    /// `sum_V var(f_V)`.
    pub sum_of_variances: f64,
    /// `var(sum_V f_V)`.
    pub total_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectVariance {
    pub subset: Subset,
    pub variance: f64,
    /// Fraction of `total_variance`; zero when the total is zero.
    pub share: f64,
}

fn sample_variance(v: &[f64]) -> f64 {
    crate::stats::variance(v)
}

pub fn variance_decomposition(decomp: &AnovaDecomposition, sample: &DMatrix<f64>) -> Result<VarianceReport> {
    if sample.nrows() == 0 {
        return Err(Error::EmptySample);
    }
    let values = decomp.effect_values(sample)?;
    let total: Vec<f64> = (0..sample.nrows()).map(|n| values.iter().map(|v| v[n]).sum()).collect();
    let total_variance = sample_variance(&total);
    let effects: Vec<EffectVariance> = decomp
        .effects
        .iter()
        .zip(&values)
        .map(|(e, v)| {
            let variance = sample_variance(v);
            EffectVariance {
                subset: e.subset().clone(),
                variance,
                share: if total_variance > 0.0 { variance / total_variance } else { 0.0 },
            }
        })
        .collect();
    Ok(VarianceReport {
        sum_of_variances: effects.iter().map(|e| e.variance).sum(),
        total_variance,
        effects,
    })
}

/// A source of covariate rows.
pub trait RowSampler: Sync {
    fn num_covariates(&self) -> usize;
    fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64>;
}

/// Resamples whole rows with replacement.
#[derive(Clone, Debug)]
pub struct JointResampler {
    pub data: DMatrix<f64>,
}

impl RowSampler for JointResampler {
    fn num_covariates(&self) -> usize {
        self.data.ncols()
    }

    fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let n = self.data.nrows();
        let mut out = DMatrix::zeros(count, self.data.ncols());
        for r in 0..count {
            let src = rng.gen_range(0..n);
            out.row_mut(r).copy_from(&self.data.row(src));
        }
        out
    }
}

/// Resamples each column independently with replacement.
#[derive(Clone, Debug)]
pub struct ProductResampler {
    pub data: DMatrix<f64>,
}

impl RowSampler for ProductResampler {
    fn num_covariates(&self) -> usize {
        self.data.ncols()
    }

    fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let n = self.data.nrows();
        let mut out = DMatrix::zeros(count, self.data.ncols());
        for c in 0..self.data.ncols() {
            for r in 0..count {
                out[(r, c)] = self.data[(rng.gen_range(0..n), c)];
            }
        }
        out
    }
}

/// Draws each row from a closure.
pub struct FnSampler<F> {
    pub p: usize,
    pub draw: F,
}

impl<F> RowSampler for FnSampler<F>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    fn num_covariates(&self) -> usize {
        self.p
    }

    fn sample(&self, count: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(count, self.p);
        for r in 0..count {
            let row = (self.draw)(rng);
            for (c, v) in row.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        out
    }
}

/// Projection of one pair effect onto `span{1, Phi_i, Phi_j}` under the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCoefficients {
    pub i: usize,
    pub j: usize,
    pub psi0: f64,
    pub psi_i: Vec<f64>,
    pub psi_j: Vec<f64>,
    /// Estimated covariance of `[psi0, psi_i, psi_j]`, row-major.
    pub covariance: Vec<f64>,
    /// `||G psi - D^T t|| / ||D^T t||` for the normal equations.
    pub normal_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeOfBasisCoefficients {
    pub pairs: Vec<PairCoefficients>,
    pub samples: usize,
    #[serde(skip)]
    bases: BTreeMap<usize, CovariateBasis>,
}

impl ChangeOfBasisCoefficients {
    /// Monte Carlo standard error of `f^joint_V(x_V) - f^product_V(x_V)`
    /// implied by the regression covariances.
    pub fn deviation_se(&self, subset: &Subset, xv: &[f64]) -> f64 {
        let feats = |i: usize, x: f64| self.bases.get(&i).map(|b| b.features(x));
        let quad = |cov: &[f64], k: usize, z: &[(usize, f64)]| -> f64 {
            let mut acc = 0.0;
            for &(a, za) in z {
                for &(b, zb) in z {
                    acc += za * zb * cov[a * k + b];
                }
            }
            acc
        };
        let mut var = 0.0;
        match subset.indices() {
            [i] => {
                let Some(phi) = feats(*i, xv[0]) else { return 0.0 };
                for pc in self.pairs.iter().filter(|pc| pc.i == *i || pc.j == *i) {
                    let k = 1 + pc.psi_i.len() + pc.psi_j.len();
                    let offset = if pc.i == *i { 1 } else { 1 + pc.psi_i.len() };
                    let z: Vec<(usize, f64)> = phi.iter().enumerate().map(|(b, f)| (offset + b, *f)).collect();
                    var += quad(&pc.covariance, k, &z);
                }
            }
            [i, j] => {
                if let Some(pc) = self.pairs.iter().find(|pc| pc.i == *i && pc.j == *j) {
                    let (Some(fi), Some(fj)) = (feats(*i, xv[0]), feats(*j, xv[1])) else { return 0.0 };
                    let k = 1 + fi.len() + fj.len();
                    let mut z = vec![(0, 1.0)];
                    z.extend(fi.iter().enumerate().map(|(b, f)| (1 + b, *f)));
                    z.extend(fj.iter().enumerate().map(|(b, f)| (1 + fi.len() + b, *f)));
                    var = quad(&pc.covariance, k, &z);
                }
            }
            _ => {}
        }
        var.max(0.0).sqrt()
    }
}

/// Re-expresses a product-measure decomposition of order 2 under the
/// distribution of `sampler`, from `w` draws.
pub fn change_basis<S: RowSampler + ?Sized>(
    decomp: &AnovaDecomposition,
    sampler: &S,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(AnovaDecomposition, ChangeOfBasisCoefficients)> {
    if decomp.order != 2 {
        return Err(Error::UnsupportedOrder(decomp.order));
    }
    if decomp.measure != Measure::Product {
        return Err(Error::InvalidConfig("change of basis starts from a product-measure decomposition".into()));
    }
    check_len("sampler covariates", decomp.num_covariates, sampler.num_covariates())?;
    let mut tensors = Vec::with_capacity(decomp.effects.len());
    for e in &decomp.effects {
        match e {
            Effect::Tensor(t) => tensors.push(t.clone()),
            Effect::Empirical(_) | Effect::Function(_) => {
                return Err(Error::InvalidConfig(
                    "change of basis needs finite-basis effects from a kernel model".into(),
                ))
            }
        }
    }
    let pairs: Vec<&TensorEffect> = tensors.iter().filter(|t| t.subset.len() == 2 && !t.is_zero()).collect();
    let needed = pairs
        .iter()
        .map(|t| 1 + t.bases[0].dim() + t.bases[1].dim())
        .max()
        .unwrap_or(0);
    if !pairs.is_empty() && w < needed + 1 {
        return Err(Error::InsufficientSamples { needed: needed + 1, got: w });
    }

    let mut bases = BTreeMap::new();
    let coefficients: Vec<PairCoefficients> = if pairs.is_empty() {
        Vec::new()
    } else {
        let sample = sampler.sample(w, rng);
        pairs
            .par_iter()
            .map(|t| regress_pair(t, &sample))
            .collect::<Result<Vec<_>>>()?
    };
    for t in &pairs {
        for (i, b) in t.subset.indices().iter().zip(&t.bases) {
            bases.entry(*i).or_insert_with(|| b.clone());
        }
    }

    let mut intercept = decomp.intercept;
    let mut mains: BTreeMap<usize, TensorEffect> = BTreeMap::new();
    let mut others: Vec<TensorEffect> = Vec::new();
    for t in tensors {
        if t.subset.len() == 1 {
            mains.insert(t.subset.indices()[0], t);
        } else {
            others.push(t);
        }
    }
    for pc in &coefficients {
        intercept += pc.psi0;
        let pair = others
            .iter_mut()
            .find(|t| t.subset.indices() == [pc.i, pc.j])
            .expect("pair effect present");
        let dj = pc.psi_j.len() + 1;
        pair.coef[0] -= pc.psi0;
        for (a, v) in pc.psi_i.iter().enumerate() {
            pair.coef[(a + 1) * dj] -= v;
        }
        for (b, v) in pc.psi_j.iter().enumerate() {
            pair.coef[b + 1] -= v;
        }
        for (idx, psi) in [(pc.i, &pc.psi_i), (pc.j, &pc.psi_j)] {
            let main = mains
                .entry(idx)
                .or_insert_with(|| TensorEffect::zero(Subset::single(idx), vec![bases[&idx].clone()]));
            for (a, v) in psi.iter().enumerate() {
                main.coef[a + 1] += v;
            }
        }
    }
    let mut effects: Vec<Effect> = mains.into_values().chain(others).map(Effect::Tensor).collect();
    sort_effects(&mut effects);
    Ok((
        AnovaDecomposition {
            measure: Measure::Joint,
            intercept,
            effects,
            order: decomp.order,
            num_covariates: decomp.num_covariates,
            provenance: decomp.provenance.clone(),
        },
        ChangeOfBasisCoefficients {
            pairs: coefficients,
            samples: w,
            bases,
        },
    ))
}

fn regress_pair(t: &TensorEffect, sample: &DMatrix<f64>) -> Result<PairCoefficients> {
    let (i, j) = (t.subset.indices()[0], t.subset.indices()[1]);
    let (bi, bj) = (t.bases[0].dim(), t.bases[1].dim());
    let k = 1 + bi + bj;
    let w = sample.nrows();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut z = vec![0.0; k];
    let mut targets = Vec::with_capacity(w);
    let mut designs = Vec::with_capacity(w * k);
    for n in 0..w {
        let (xi, xj) = (sample[(n, i)], sample[(n, j)]);
        z[0] = 1.0;
        t.bases[0].features_into(xi, &mut z[1..1 + bi]);
        t.bases[1].features_into(xj, &mut z[1 + bi..]);
        let y = t.eval(&[xi, xj]);
        for a in 0..k {
            rhs[a] += z[a] * y;
            for b in a..k {
                gram[(a, b)] += z[a] * z[b];
            }
        }
        targets.push(y);
        designs.extend_from_slice(&z);
    }
    for a in 0..k {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= 1e-10 * max {
        return Err(Error::RankDeficientPair { i, j });
    }
    let chol = gram.clone().cholesky().ok_or(Error::RankDeficientPair { i, j })?;
    let psi = chol.solve(&rhs);
    let resid_norm = (&gram * &psi - &rhs).norm();
    let normal_residual = if rhs.norm() > 0.0 { resid_norm / rhs.norm() } else { resid_norm };

    let rss: f64 = targets
        .iter()
        .zip(designs.chunks(k))
        .map(|(y, z)| {
            let fit: f64 = z.iter().zip(psi.iter()).map(|(a, b)| a * b).sum();
            (y - fit).powi(2)
        })
        .sum();
    let dof = (w - k).max(1) as f64;
    let inv = chol.inverse() * (rss / dof);
    Ok(PairCoefficients {
        i,
        j,
        psi0: psi[0],
        psi_i: psi.rows(1, bi).iter().copied().collect(),
        psi_j: psi.rows(1 + bi, bj).iter().copied().collect(),
        covariance: inv.transpose().iter().copied().collect(),
        normal_residual,
    })
}

/// Decomposition of a black-box predictor under the product of the empirical
/// marginals of `x`, listing every subset of size at most `order`.
pub fn empirical_product_anova<F>(predictor: F, x: &DMatrix<f64>, order: usize) -> Result<AnovaDecomposition>
where
    F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
{
    if order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if x.nrows() == 0 {
        return Err(Error::EmptySample);
    }
    let mut shared = EmpiricalShared {
        predictor: Box::new(predictor),
        data: x.clone(),
        intercept: 0.0,
    };
    shared.intercept = shared.pinned_mean(&[], &[]);
    let intercept = shared.intercept;
    let shared = Arc::new(shared);
    let all: Vec<usize> = (0..x.ncols()).collect();
    let effects = subsets_up_to(&all, order)
        .into_iter()
        .map(|subset| {
            Effect::Empirical(EmpiricalEffect {
                subset,
                shared: Arc::clone(&shared),
            })
        })
        .collect();
    Ok(AnovaDecomposition {
        measure: Measure::Product,
        intercept,
        effects,
        order,
        num_covariates: x.ncols(),
        provenance: "black-box".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisKind, BasisSpec, FeatureLibrary};
    use crate::ridge;
    use crate::rng;

    fn toy_model(kappa: Vec<f64>) -> FittedModel {
        let n = 30;
        let p = kappa.len();
        let x = DMatrix::from_fn(n, p, |i, j| ((i * 11 + j * 5) as f64 * 0.377).sin());
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] * x[(i, 1)] + x[(i, 1)].powi(3)).collect();
        let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 2 })).unwrap();
        let hp = SkimHyperParams::from_kappa(kappa, vec![0.8, 1.2, 0.9], 0.3).unwrap();
        ridge::solve(&lib, &hp, &x, &y).unwrap()
    }

    #[test]
    fn select_is_support() {
        let hp = SkimHyperParams::from_kappa(vec![0.0, 0.3, 0.0], vec![1.0, 1.0], 1.0).unwrap();
        assert_eq!(select(&hp), vec![1]);
        let hp = SkimHyperParams::from_kappa(vec![0.0; 3], vec![1.0, 1.0], 1.0).unwrap();
        assert!(select(&hp).is_empty());
    }

    #[test]
    fn sum_identity_and_zero_effects() {
        let model = toy_model(vec![0.7, 0.5, 0.0, 0.4]);
        let decomp = product_decomposition(&model).unwrap();
        assert_eq!(decomp.effects.len(), 6);
        assert!(decomp.effect(&Subset::single(2)).is_none());
        let z = extract_effect(&model, &Subset::pair(0, 2)).unwrap();
        assert!(z.is_zero());
        let pred = model.predict(&model.train_x).unwrap();
        let recon = decomp.predict(&model.train_x).unwrap();
        for (a, b) in pred.iter().zip(&recon) {
            assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn effect_too_large() {
        let model = toy_model(vec![0.7, 0.5, 0.3]);
        assert!(matches!(
            extract_effect(&model, &Subset::new(vec![0, 1, 2])),
            Err(Error::SubsetTooLarge { .. })
        ));
    }

    #[test]
    fn product_effects_have_zero_training_mean() {
        let model = toy_model(vec![0.7, 0.5, 0.6]);
        let decomp = product_decomposition(&model).unwrap();
        for e in &decomp.effects {
            if e.subset().len() == 1 {
                let i = e.subset().indices()[0];
                let m: f64 = (0..model.train_x.nrows())
                    .map(|n| e.eval(&[model.train_x[(n, i)]]))
                    .sum::<f64>()
                    / model.train_x.nrows() as f64;
                assert!(m.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_model_has_no_variance() {
        let model = toy_model(vec![0.0, 0.0]);
        let decomp = product_decomposition(&model).unwrap();
        assert!(decomp.effects.is_empty());
        let report = variance_decomposition(&decomp, &model.train_x).unwrap();
        assert_eq!(report.total_variance, 0.0);
        assert!(variance_decomposition(&decomp, &DMatrix::zeros(0, 2)).is_err());
    }

    #[test]
    fn single_effect_carries_all_variance() {
        let mut model = toy_model(vec![0.7, 0.0, 0.0]);
        model.hp = SkimHyperParams::from_kappa(vec![0.7, 0.0, 0.0], vec![1.0, 1.0, 1.0], 0.3).unwrap();
        let decomp = product_decomposition(&model).unwrap();
        let report = variance_decomposition(&decomp, &model.train_x).unwrap();
        assert_eq!(report.effects.len(), 1);
        assert!((report.effects[0].share - 1.0).abs() < 1e-12);
    }

    #[test]
    fn change_basis_reconstructs_and_errors() {
        let model = toy_model(vec![0.7, 0.5, 0.6]);
        let decomp = product_decomposition(&model).unwrap();
        let sampler = JointResampler {
            data: model.train_x.clone(),
        };
        let mut r = rng::stream(1, "mc");
        let (joint, coefs) = change_basis(&decomp, &sampler, 500, &mut r).unwrap();
        assert_eq!(joint.measure, Measure::Joint);
        assert_eq!(coefs.pairs.len(), 3);
        assert!(coefs.pairs.iter().all(|p| p.normal_residual < 1e-8));
        let a = decomp.predict(&model.train_x).unwrap();
        let b = joint.predict(&model.train_x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-8 * (1.0 + u.abs()));
        }
        assert!(matches!(
            change_basis(&decomp, &sampler, 5, &mut r),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn change_basis_creates_missing_mains() {
        let mut model = toy_model(vec![0.7, 0.5]);
        model.hp = SkimHyperParams::from_kappa(vec![0.7, 0.5], vec![1.0, 0.0, 1.0], 0.3).unwrap();
        let decomp = product_decomposition(&model).unwrap();
        assert_eq!(decomp.effects.len(), 1);
        let sampler = JointResampler {
            data: model.train_x.clone(),
        };
        let (joint, _) = change_basis(&decomp, &sampler, 400, &mut rng::stream(2, "mc")).unwrap();
        assert_eq!(joint.subsets(), vec![Subset::single(0), Subset::single(1), Subset::pair(0, 1)]);
    }

    #[test]
    fn joint_requires_order_two() {
        let n = 12;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 3 + j) as f64).cos());
        let y: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
        let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 1 })).unwrap();
        let hp = SkimHyperParams::from_kappa(vec![0.5, 0.5], vec![1.0, 1.0], 0.3).unwrap();
        let model = ridge::solve(&lib, &hp, &x, &y).unwrap();
        let decomp = product_decomposition(&model).unwrap();
        let sampler = ProductResampler { data: x };
        assert!(matches!(
            change_basis(&decomp, &sampler, 100, &mut rng::stream(0, "mc")),
            Err(Error::UnsupportedOrder(1))
        ));
    }

    #[test]
    fn empirical_anova_basics() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 3.0, 2.0, 5.0, 3.0, 4.0, 6.0, 0.0]);
        let c = empirical_product_anova(|_| 7.0, &x, 2).unwrap();
        assert_eq!(c.intercept, 7.0);
        assert!(c.effects.iter().all(|e| e.eval(&[0.3, 0.4][..e.subset().len()]).abs() < 1e-12));
        let lin = empirical_product_anova(|r| r[0], &x, 2).unwrap();
        assert!((lin.intercept - 3.0).abs() < 1e-12);
        assert!((lin.eval_effect(&Subset::single(0), &[10.0, 0.0]) - 7.0).abs() < 1e-12);
        assert!(lin.eval_effect(&Subset::pair(0, 1), &[10.0, 2.0]).abs() < 1e-12);
        assert!(empirical_product_anova(|r| r[0], &x, 3).is_err());
    }
}

//! The sparse kernel interaction kernel.
//!
//! With per-covariate importances `kappa`, per-order strengths `eta` and
//! one-dimensional kernels `k_i`, the kernel is
//!
//! ```text
//! k(x, y) = sum_{|V| <= Q} eta_{|V|}^2 prod_{i in V} kappa_i^2 k_i(x_i, y_i)
//! ```
//!
//! The inner sums over subsets of size `q` are elementary symmetric
//! polynomials of `z_i = kappa_i^2 k_i`, which Newton's identities recover from
//! the power sums `k^s = sum_i z_i^s` in `O(pQ)` work per pair. A subset
//! enumeration is kept alongside as an independent check.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{check_len, FeatureBlock, FeatureLibrary};
use crate::error::{Error, Result};

/// Largest covariate count accepted by the subset-enumeration kernel.
pub const BRUTEFORCE_MAX_P: usize = 20;

/// Kernel hyperparameters.
///
/// `kappa` is authoritative for kernel evaluation. When the parameters come
/// from training, `raw` holds the unconstrained values and
/// `kappa_i = max(raw_i^2 / (raw_i^2 + 1) - trunc_level, 0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkimHyperParams {
    kappa: Vec<f64>,
    eta: Vec<f64>,
    sigma_noise: f64,
    trunc_level: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    raw: Option<Vec<f64>>,
}

/// `U = r^2 / (r^2 + 1)`.
pub fn importance(raw: f64) -> f64 {
    let sq = raw * raw;
    sq / (sq + 1.0)
}

impl SkimHyperParams {
    /// Hyperparameters from unconstrained values and a truncation level.
    pub fn from_raw(raw: Vec<f64>, eta: Vec<f64>, sigma_noise: f64, trunc_level: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&trunc_level) {
            return Err(Error::InvalidConfig(format!(
                "truncation level must lie in [0, 1), got {trunc_level}"
            )));
        }
        let kappa = raw
            .iter()
            .map(|r| (importance(*r) - trunc_level).max(0.0))
            .collect();
        let hp = SkimHyperParams {
            kappa,
            eta,
            sigma_noise,
            trunc_level,
            raw: Some(raw),
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Hyperparameters with importances given directly.
    pub fn from_kappa(kappa: Vec<f64>, eta: Vec<f64>, sigma_noise: f64) -> Result<Self> {
        let hp = SkimHyperParams {
            kappa,
            eta,
            sigma_noise,
            trunc_level: 0.0,
            raw: None,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Checks the field invariants; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.eta.len() < 2 {
            return Err(Error::ZeroOrder);
        }
        if let Some(bad) = self.kappa.iter().find(|k| !(**k >= 0.0) || !k.is_finite()) {
            return Err(Error::InvalidConfig(format!("kappa must be finite and nonnegative, got {bad}")));
        }
        if self.eta.iter().any(|e| !e.is_finite()) || !self.sigma_noise.is_finite() {
            return Err(Error::InvalidConfig("eta and sigma_noise must be finite".into()));
        }
        if let Some(raw) = &self.raw {
            check_len("raw importances", self.kappa.len(), raw.len())?;
            for (r, k) in raw.iter().zip(&self.kappa) {
                let expect = (importance(*r) - self.trunc_level).max(0.0);
                if expect != *k {
                    return Err(Error::InvalidConfig(format!(
                        "kappa {k} inconsistent with raw value {r} at truncation {}",
                        self.trunc_level
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    pub fn raw(&self) -> Option<&[f64]> {
        self.raw.as_deref()
    }

    pub fn sigma_noise(&self) -> f64 {
        self.sigma_noise
    }

    pub fn trunc_level(&self) -> f64 {
        self.trunc_level
    }

    /// Ridge penalty `lambda = sigma_noise^2`.
    pub fn ridge(&self) -> f64 {
        self.sigma_noise * self.sigma_noise
    }

    /// Maximum interaction order `Q`.
    pub fn order(&self) -> usize {
        self.eta.len() - 1
    }

    pub fn num_covariates(&self) -> usize {
        self.kappa.len()
    }

    /// Indices with `kappa_i != 0`.
    pub fn support(&self) -> Vec<usize> {
        self.kappa
            .iter()
            .enumerate()
            .filter(|(_, k)| **k != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Effect weight `theta_V = eta_{|V|}^2 prod_{i in V} kappa_i^2`; zero for `|V| > Q`.
    pub fn theta(&self, subset: &[usize]) -> f64 {
        match self.eta.get(subset.len()) {
            Some(e) => subset.iter().fold(e * e, |acc, i| acc * self.kappa[*i] * self.kappa[*i]),
            None => 0.0,
        }
    }
}

/// Power sums `k^s` (s = 1..Q) and elementary kernels `kbar_q` (q = 0..Q) at one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RecursionBuffers {
    pub kpow: Vec<f64>,
    pub kbar: Vec<f64>,
}

/// Newton's identities from the one-dimensional kernel values at one pair.
pub fn recursion(kappa: &[f64], k1: &[f64], order: usize) -> RecursionBuffers {
    let mut kpow = vec![0.0; order];
    for (k, v) in kappa.iter().zip(k1) {
        let z = k * k * v;
        let mut zp = 1.0;
        for slot in kpow.iter_mut() {
            zp *= z;
            *slot += zp;
        }
    }
    let mut kbar = vec![0.0; order + 1];
    kbar[0] = 1.0;
    for q in 1..=order {
        let mut acc = 0.0;
        for s in 1..=q {
            let term = kbar[q - s] * kpow[s - 1];
            if s % 2 == 1 {
                acc += term;
            } else {
                acc -= term;
            }
        }
        kbar[q] = acc / q as f64;
    }
    RecursionBuffers { kpow, kbar }
}

/// Kernel value from one-dimensional kernel values via the recursion.
pub fn skim_from_k1(kappa: &[f64], eta: &[f64], k1: &[f64]) -> Result<f64> {
    check_len("one-dimensional kernel values", kappa.len(), k1.len())?;
    if eta.len() < 2 {
        return Err(Error::ZeroOrder);
    }
    let buf = recursion(kappa, k1, eta.len() - 1);
    Ok(eta.iter().zip(&buf.kbar).map(|(e, kb)| e * e * kb).sum())
}

/// Kernel value from one-dimensional kernel values by enumerating subsets.
pub fn skim_from_k1_bruteforce(kappa: &[f64], eta: &[f64], k1: &[f64]) -> Result<f64> {
    check_len("one-dimensional kernel values", kappa.len(), k1.len())?;
    let p = kappa.len();
    if p > BRUTEFORCE_MAX_P {
        return Err(Error::TooManyCovariates {
            p,
            max: BRUTEFORCE_MAX_P,
        });
    }
    if eta.len() < 2 {
        return Err(Error::ZeroOrder);
    }
    let order = eta.len() - 1;
    let mut total = 0.0;
    for mask in 0u32..(1u32 << p) {
        let size = mask.count_ones() as usize;
        if size > order {
            continue;
        }
        let mut prod = eta[size] * eta[size];
        for i in (0..p).filter(|i| mask & (1 << i) != 0) {
            prod *= kappa[i] * kappa[i] * k1[i];
        }
        total += prod;
    }
    Ok(total)
}

/// Kernel value at one pair of covariate vectors.
pub fn eval_skim(lib: &FeatureLibrary, hp: &SkimHyperParams, x: &[f64], y: &[f64]) -> Result<f64> {
    check_len("kernel weights", lib.num_covariates(), hp.num_covariates())?;
    let k1 = lib.k1_values(x, y)?;
    skim_from_k1(hp.kappa(), hp.eta(), &k1)
}

/// Subset-enumeration kernel value; a test oracle for [`eval_skim`].
pub fn eval_skim_bruteforce(
    lib: &FeatureLibrary,
    hp: &SkimHyperParams,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    check_len("kernel weights", lib.num_covariates(), hp.num_covariates())?;
    if lib.num_covariates() > BRUTEFORCE_MAX_P {
        return Err(Error::TooManyCovariates {
            p: lib.num_covariates(),
            max: BRUTEFORCE_MAX_P,
        });
    }
    let k1 = lib.k1_values(x, y)?;
    skim_from_k1_bruteforce(hp.kappa(), hp.eta(), &k1)
}

/// Pairwise kernel matrix between the rows of `xa` and the rows of `xb`.
pub fn gram_matrix(
    lib: &FeatureLibrary,
    hp: &SkimHyperParams,
    xa: &DMatrix<f64>,
    xb: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_len("kernel weights", lib.num_covariates(), hp.num_covariates())?;
    let fa = lib.feature_block(xa)?;
    let fb = lib.feature_block(xb)?;
    let active = hp.support();
    Ok(gram_parts(&fa, &fb, hp.kappa(), hp.eta(), &active, false, false).kernel)
}

/// Row-major dense storage for per-pair intermediate values.
#[derive(Clone, Debug)]
pub(crate) struct RowMajor {
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMajor {
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// A kernel matrix together with the elementary kernels at every pair.
#[derive(Clone, Debug)]
pub(crate) struct GramParts {
    pub kernel: DMatrix<f64>,
    /// `elementary[q - 1]` holds `kbar_q` for q = 1..Q (empty unless requested).
    pub elementary: Vec<RowMajor>,
}

struct RowScratch {
    k: Vec<f64>,
    z: Vec<f64>,
    zp: Vec<f64>,
    pows: Vec<Vec<f64>>,
}

impl RowScratch {
    fn new(len: usize, order: usize) -> Self {
        RowScratch {
            k: vec![0.0; len],
            z: vec![0.0; len],
            zp: vec![0.0; len],
            pows: vec![vec![0.0; len]; order],
        }
    }
}

// Elementary kernels kbar_1..kbar_Q between row `n` of `a` and rows `start..` of `b`.
fn row_elementary(
    a: &FeatureBlock,
    b: &FeatureBlock,
    n: usize,
    start: usize,
    kappa: &[f64],
    active: &[usize],
    order: usize,
) -> Vec<Vec<f64>> {
    let len = b.rows() - start;
    let mut s = RowScratch::new(len, order);
    for &i in active {
        let w = kappa[i] * kappa[i];
        a.k1_row(b, i, n, start, &mut s.k);
        for ((z, zp), k) in s.z.iter_mut().zip(s.zp.iter_mut()).zip(&s.k) {
            *z = w * k;
            *zp = *z;
        }
        for (p, zp) in s.pows[0].iter_mut().zip(&s.zp) {
            *p += zp;
        }
        for q in 1..order {
            for (zp, z) in s.zp.iter_mut().zip(&s.z) {
                *zp *= z;
            }
            for (p, zp) in s.pows[q].iter_mut().zip(&s.zp) {
                *p += zp;
            }
        }
    }
    let mut ebar: Vec<Vec<f64>> = Vec::with_capacity(order);
    for q in 1..=order {
        let mut e = vec![0.0; len];
        for sidx in 1..=q {
            let sign = if sidx % 2 == 1 { 1.0 } else { -1.0 };
            let pw = &s.pows[sidx - 1];
            if sidx == q {
                for (ev, pv) in e.iter_mut().zip(pw) {
                    *ev += sign * pv;
                }
            } else {
                let prev = &ebar[q - sidx - 1];
                for ((ev, pv), lower) in e.iter_mut().zip(pw).zip(prev) {
                    *ev += sign * lower * pv;
                }
            }
        }
        let inv = 1.0 / q as f64;
        e.iter_mut().for_each(|v| *v *= inv);
        ebar.push(e);
    }
    ebar
}

/// Kernel matrix over feature blocks, restricted to the `active` covariates.
///
/// When `symmetric` is set, `a` and `b` must hold the same rows; only the
/// upper triangle is computed and then mirrored.
pub(crate) fn gram_parts(
    a: &FeatureBlock,
    b: &FeatureBlock,
    kappa: &[f64],
    eta: &[f64],
    active: &[usize],
    symmetric: bool,
    keep_elementary: bool,
) -> GramParts {
    let order = eta.len() - 1;
    let (na, nb) = (a.rows(), b.rows());
    let eta_sq: Vec<f64> = eta.iter().map(|e| e * e).collect();
    let rows: Vec<Vec<Vec<f64>>> = (0..na)
        .into_par_iter()
        .map(|n| {
            let start = if symmetric { n } else { 0 };
            row_elementary(a, b, n, start, kappa, active, order)
        })
        .collect();

    let mut kernel = DMatrix::<f64>::zeros(na, nb);
    let mut elementary: Vec<RowMajor> = if keep_elementary {
        (0..order)
            .map(|_| RowMajor {
                cols: nb,
                data: vec![0.0; na * nb],
            })
            .collect()
    } else {
        Vec::new()
    };
    for (n, ebar) in rows.into_iter().enumerate() {
        let start = if symmetric { n } else { 0 };
        for (off, m) in (start..nb).enumerate() {
            let mut v = eta_sq[0];
            for q in 0..order {
                v += eta_sq[q + 1] * ebar[q][off];
            }
            kernel[(n, m)] = v;
            if symmetric {
                kernel[(m, n)] = v;
            }
        }
        if keep_elementary {
            for (q, e) in ebar.iter().enumerate() {
                let store = &mut elementary[q];
                for (off, m) in (start..nb).enumerate() {
                    store.data[n * nb + m] = e[off];
                    if symmetric {
                        store.data[m * nb + n] = e[off];
                    }
                }
            }
        }
    }
    GramParts { kernel, elementary }
}

/// Vector-Jacobian product of [`gram_parts`]: given `weights` (same shape as
/// the kernel matrix), returns `sum_nm W_nm dK_nm / dkappa_i` for every
/// covariate and `sum_nm W_nm dK_nm / deta_q` for every order.
///
/// In the symmetric case the kernel was built from one triangle, so both
/// `W_nm` and `W_mn` multiply the same derivative.
pub(crate) fn gram_vjp(
    a: &FeatureBlock,
    b: &FeatureBlock,
    kappa: &[f64],
    eta: &[f64],
    active: &[usize],
    parts: &GramParts,
    weights: &DMatrix<f64>,
    symmetric: bool,
) -> (Vec<f64>, Vec<f64>) {
    let order = eta.len() - 1;
    let p = kappa.len();
    let (na, nb) = (a.rows(), b.rows());
    assert_eq!(parts.elementary.len(), order, "elementary kernels were not kept");
    let eta_sq: Vec<f64> = eta.iter().map(|e| e * e).collect();

    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..na)
        .into_par_iter()
        .map(|n| {
            let start = if symmetric { n } else { 0 };
            let len = nb - start;
            let mut w = vec![0.0; len];
            for (off, m) in (start..nb).enumerate() {
                w[off] = if symmetric && m != n {
                    weights[(n, m)] + weights[(m, n)]
                } else {
                    weights[(n, m)]
                };
            }
            let ebar: Vec<&[f64]> = parts
                .elementary
                .iter()
                .map(|e| &e.row(n)[start..])
                .collect();

            let mut g_eta = vec![0.0; order + 1];
            g_eta[0] = w.iter().sum::<f64>();
            for q in 1..=order {
                g_eta[q] = w.iter().zip(ebar[q - 1]).map(|(a, b)| a * b).sum::<f64>();
            }

            let mut g_kappa = vec![0.0; active.len()];
            let mut k = vec![0.0; len];
            let mut z = vec![0.0; len];
            let mut prev = vec![0.0; len];
            let mut d = vec![0.0; len];
            for (slot, &i) in active.iter().enumerate() {
                let wk = kappa[i] * kappa[i];
                a.k1_row(b, i, n, start, &mut k);
                for (zv, kv) in z.iter_mut().zip(&k) {
                    *zv = wk * kv;
                }
                // kbar_r without covariate i: e_r - z * e_{r-1}^{(-i)}.
                prev.iter_mut().for_each(|v| *v = 1.0);
                d.iter_mut().for_each(|v| *v = eta_sq[1]);
                for r in 1..order {
                    let er = ebar[r - 1];
                    for (((pv, dv), e), zv) in prev.iter_mut().zip(d.iter_mut()).zip(er).zip(&z) {
                        *pv = e - zv * *pv;
                        *dv += eta_sq[r + 1] * *pv;
                    }
                }
                let acc: f64 = w
                    .iter()
                    .zip(&d)
                    .zip(&k)
                    .map(|((wv, dv), kv)| wv * dv * kv)
                    .sum();
                g_kappa[slot] = 2.0 * kappa[i] * acc;
            }
            (g_kappa, g_eta)
        })
        .collect();

    let mut grad_kappa = vec![0.0; p];
    let mut grad_eta = vec![0.0; order + 1];
    for (gk, ge) in partials {
        for (slot, &i) in active.iter().enumerate() {
            grad_kappa[i] += gk[slot];
        }
        for (acc, v) in grad_eta.iter_mut().zip(&ge) {
            *acc += v;
        }
    }
    for (g, e) in grad_eta.iter_mut().zip(eta) {
        *g *= 2.0 * e;
    }
    (grad_kappa, grad_eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisKind, BasisSpec};

    #[test]
    fn zero_kappa_gives_intercept() {
        let v = skim_from_k1(&[0.0, 0.0, 0.0], &[1.5, 2.0, 3.0], &[1.0, -2.0, 5.0]).unwrap();
        assert_eq!(v, 2.25);
    }

    #[test]
    fn three_covariate_example() {
        let kappa = [1.0, 0.5, 0.0];
        let eta = [1.0, 1.0, 1.0];
        let k1 = [2.0, 1.0, 3.0];
        let fast = skim_from_k1(&kappa, &eta, &k1).unwrap();
        let brute = skim_from_k1_bruteforce(&kappa, &eta, &k1).unwrap();
        assert!((fast - 3.75).abs() < 1e-15);
        assert!((brute - 3.75).abs() < 1e-15);
    }

    #[test]
    fn bruteforce_two_covariates() {
        let v = skim_from_k1_bruteforce(&[1.0, 1.0], &[0.0, 1.0, 1.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 19.0);
    }

    #[test]
    fn order_one_is_linear() {
        let kappa = [0.3, 0.7, 1.1];
        let k1 = [0.5, -1.0, 2.0];
        let v = skim_from_k1_bruteforce(&kappa, &[2.0, 0.5], &k1).unwrap();
        let expect = 4.0 + 0.25 * kappa.iter().zip(&k1).map(|(k, v)| k * k * v).sum::<f64>();
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn bruteforce_rejects_large_p() {
        let p = BRUTEFORCE_MAX_P + 1;
        let err = skim_from_k1_bruteforce(&vec![1.0; p], &[1.0, 1.0], &vec![1.0; p]).unwrap_err();
        assert!(matches!(err, Error::TooManyCovariates { .. }));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            skim_from_k1(&[1.0, 1.0], &[1.0, 1.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn raw_parameterization() {
        let hp = SkimHyperParams::from_raw(vec![1.0, 0.0, 2.0], vec![1.0, 1.0, 1.0], 0.5, 0.0).unwrap();
        assert_eq!(hp.kappa(), &[0.5, 0.0, 0.8]);
        let hp = SkimHyperParams::from_raw(vec![1.0, 2.0], vec![1.0, 1.0], 0.5, 0.6).unwrap();
        assert_eq!(hp.kappa()[0], 0.0);
        assert!((hp.kappa()[1] - 0.2).abs() < 1e-15);
        assert_eq!(hp.support(), vec![1]);
        assert!(SkimHyperParams::from_raw(vec![1.0], vec![1.0, 1.0], 0.5, 1.0).is_err());
        assert!(SkimHyperParams::from_kappa(vec![-0.1], vec![1.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn theta_weights() {
        let hp = SkimHyperParams::from_kappa(vec![0.5, 2.0, 0.0], vec![1.0, 3.0, 2.0], 1.0).unwrap();
        assert_eq!(hp.theta(&[]), 1.0);
        assert_eq!(hp.theta(&[0]), 9.0 * 0.25);
        assert_eq!(hp.theta(&[0, 1]), 4.0 * 0.25 * 4.0);
        assert_eq!(hp.theta(&[1, 2]), 0.0);
        assert_eq!(hp.theta(&[0, 1, 2]), 0.0);
    }

    #[test]
    fn gram_single_row_and_zero_kappa() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -0.5, 0.9, 0.7, -0.3]);
        let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 2 })).unwrap();
        let hp = SkimHyperParams::from_kappa(vec![0.8, 1.2], vec![0.5, 1.0, 0.7], 0.1).unwrap();
        let row = x.rows(0, 1).into_owned();
        let g = gram_matrix(&lib, &hp, &row, &row).unwrap();
        let direct = eval_skim(&lib, &hp, &[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert!((g[(0, 0)] - direct).abs() < 1e-13);

        let zero = SkimHyperParams::from_kappa(vec![0.0, 0.0], vec![0.5, 1.0, 0.7], 0.1).unwrap();
        let g = gram_matrix(&lib, &zero, &x, &x).unwrap();
        assert!(g.iter().all(|v| *v == 0.25));
    }

    #[test]
    fn symmetric_parts_match_full() {
        let x = DMatrix::from_fn(6, 3, |i, j| ((i * 3 + j * 7) as f64 * 0.61).sin());
        let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 2 })).unwrap();
        let block = lib.feature_block(&x).unwrap();
        let kappa = [0.9, 0.4, 1.3];
        let eta = [0.7, 1.1, 0.6, 0.9];
        let active = [0, 1, 2];
        let sym = gram_parts(&block, &block, &kappa, &eta, &active, true, true);
        let full = gram_parts(&block, &block, &kappa, &eta, &active, false, true);
        for n in 0..6 {
            for m in 0..6 {
                assert!((sym.kernel[(n, m)] - full.kernel[(n, m)]).abs() < 1e-12);
                let xn: Vec<f64> = x.row(n).iter().copied().collect();
                let xm: Vec<f64> = x.row(m).iter().copied().collect();
                let hp = SkimHyperParams::from_kappa(kappa.to_vec(), eta.to_vec(), 1.0).unwrap();
                let direct = eval_skim(&lib, &hp, &xn, &xm).unwrap();
                assert!((full.kernel[(n, m)] - direct).abs() < 1e-12 * (1.0 + direct.abs()));
            }
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let x = DMatrix::from_fn(5, 3, |i, j| ((i * 5 + j * 11) as f64 * 0.37).cos());
        let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 2 })).unwrap();
        let block = lib.feature_block(&x).unwrap();
        let kappa = vec![0.9, 0.4, 1.3];
        let eta = vec![0.7, 1.1, 0.6, 0.9];
        let active = [0, 1, 2];
        let weights = DMatrix::from_fn(5, 5, |i, j| ((i * 2 + j) as f64 * 0.9).sin());
        let objective = |kappa: &[f64], eta: &[f64]| {
            let parts = gram_parts(&block, &block, kappa, eta, &active, true, false);
            parts.kernel.component_mul(&weights).sum()
        };
        for symmetric in [true, false] {
            let parts = gram_parts(&block, &block, &kappa, &eta, &active, symmetric, true);
            let (gk, ge) = gram_vjp(&block, &block, &kappa, &eta, &active, &parts, &weights, symmetric);
            let h = 1e-6;
            for i in 0..3 {
                let mut up = kappa.clone();
                let mut dn = kappa.clone();
                up[i] += h;
                dn[i] -= h;
                let fd = (objective(&up, &eta) - objective(&dn, &eta)) / (2.0 * h);
                assert!((fd - gk[i]).abs() < 1e-6 * (1.0 + fd.abs()), "kappa {i}: {fd} vs {}", gk[i]);
            }
            for q in 0..4 {
                let mut up = eta.clone();
                let mut dn = eta.clone();
                up[q] += h;
                dn[q] -= h;
                let fd = (objective(&kappa, &up) - objective(&kappa, &dn)) / (2.0 * h);
                assert!((fd - ge[q]).abs() < 1e-6 * (1.0 + fd.abs()), "eta {q}: {fd} vs {}", ge[q]);
            }
        }
    }
}

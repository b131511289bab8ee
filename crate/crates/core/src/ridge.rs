//! Kernel ridge regression with the sparse interaction kernel.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::basis::{check_len, FeatureLibrary};
use crate::error::{Error, Result};
use crate::kernel::{self, SkimHyperParams};

pub mod oracle;

/// A solved kernel ridge regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub alpha: Vec<f64>,
    #[serde(with = "rows")]
    pub train_x: DMatrix<f64>,
    pub hp: SkimHyperParams,
    pub lib: FeatureLibrary,
    pub order: usize,
}

/// Cholesky factor of `K + lambda I`, with a single jitter retry.
pub(crate) fn factorize(mut system: DMatrix<f64>, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    let n = system.nrows();
    for d in 0..n {
        system[(d, d)] += lambda;
    }
    let trace = system.trace();
    match system.clone().cholesky() {
        Some(chol) if lambda > 0.0 || well_conditioned(&chol) => Ok(chol),
        _ if lambda == 0.0 => Err(Error::Singular(
            "kernel matrix is singular with zero noise; use a positive sigma_noise".into(),
        )),
        _ => {
            let jitter = 1e-10 * trace / n as f64;
            warn!("Cholesky factorization failed; retrying with diagonal jitter {jitter:e}");
            for d in 0..n {
                system[(d, d)] += jitter;
            }
            system
                .cholesky()
                .ok_or_else(|| Error::Singular("kernel system is not positive definite".into()))
        }
    }
}

fn well_conditioned(chol: &Cholesky<f64, Dyn>) -> bool {
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > 1e-13 * max
}

/// Solves `(K + sigma_noise^2 I) alpha = y` over the rows of `x`.
pub fn solve(lib: &FeatureLibrary, hp: &SkimHyperParams, x: &DMatrix<f64>, y: &[f64]) -> Result<FittedModel> {
    check_len("kernel weights", lib.num_covariates(), hp.num_covariates())?;
    check_len("response", x.nrows(), y.len())?;
    if x.nrows() == 0 {
        return Err(Error::InvalidConfig("cannot solve with zero rows".into()));
    }
    if let Some(n) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("response row {n} is not finite")));
    }
    let block = lib.feature_block(x)?;
    let active = hp.support();
    let k = kernel::gram_parts(&block, &block, hp.kappa(), hp.eta(), &active, true, false).kernel;
    let chol = factorize(k, hp.ridge())?;
    let alpha = chol.solve(&DVector::from_column_slice(y));
    Ok(FittedModel {
        alpha: alpha.iter().copied().collect(),
        train_x: x.clone(),
        hp: hp.clone(),
        lib: lib.clone(),
        order: hp.order(),
    })
}

impl FittedModel {
    pub fn num_covariates(&self) -> usize {
        self.train_x.ncols()
    }

    /// `f(x) = sum_n alpha_n k(x_n, x)` for every row of `x_new`.
    pub fn predict(&self, x_new: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_len("covariate columns", self.num_covariates(), x_new.ncols())?;
        let fa = self.lib.feature_block(x_new)?;
        let fb = self.lib.feature_block(&self.train_x)?;
        let active = self.hp.support();
        let k = kernel::gram_parts(&fa, &fb, self.hp.kappa(), self.hp.eta(), &active, false, false).kernel;
        let alpha = DVector::from_column_slice(&self.alpha);
        Ok((k * alpha).iter().copied().collect())
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        let row = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.predict(&row)?[0])
    }

    /// Covariates with nonzero importance.
    pub fn selected(&self) -> Vec<usize> {
        self.hp.support()
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        check_len("alpha", self.train_x.nrows(), self.alpha.len())?;
        check_len("library covariates", self.train_x.ncols(), self.lib.num_covariates())?;
        check_len("kernel weights", self.train_x.ncols(), self.hp.num_covariates())?;
        if self.order != self.hp.order() {
            return Err(Error::InvalidConfig(format!(
                "model order {} disagrees with eta length {}",
                self.order,
                self.hp.eta().len()
            )));
        }
        Ok(())
    }
}

/// Serializes a matrix as an array of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        (m.ncols(), rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (ncols, rows): (usize, Vec<Vec<f64>>) = Deserialize::deserialize(d)?;
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(flat.len() / ncols.max(1), ncols, &flat))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisKind, BasisSpec};

    fn toy(n: usize, p: usize) -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(n, p, |i, j| ((i * 7 + j * 3) as f64 * 0.713).sin());
        let y = (0..n).map(|i| x[(i, 0)] * 2.0 - x[(i, p - 1)].powi(2)).collect();
        (x, y)
    }

    fn lib(x: &DMatrix<f64>) -> FeatureLibrary {
        FeatureLibrary::build(x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 2 })).unwrap()
    }

    #[test]
    fn single_row_scalar_solve() {
        let (x, _) = toy(4, 2);
        let lib = lib(&x);
        let hp = SkimHyperParams::from_kappa(vec![0.7, 0.3], vec![1.0, 1.0, 0.5], 0.8).unwrap();
        let row = x.rows(1, 1).into_owned();
        let model = solve(&lib, &hp, &row, &[2.5]).unwrap();
        let xr: Vec<f64> = row.row(0).iter().copied().collect();
        let k11 = kernel::eval_skim(&lib, &hp, &xr, &xr).unwrap();
        assert!((model.alpha[0] - 2.5 / (k11 + 0.64)).abs() < 1e-12);
    }

    #[test]
    fn interpolates_without_noise() {
        let (x, y) = toy(8, 3);
        let lib = lib(&x);
        let hp = SkimHyperParams::from_kappa(vec![1.0, 0.8, 1.2], vec![1.0, 1.0, 1.0], 0.0).unwrap();
        let model = solve(&lib, &hp, &x, &y).unwrap();
        let pred = model.predict(&x).unwrap();
        for (p, t) in pred.iter().zip(&y) {
            assert!((p - t).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_kappa_constant_predictions() {
        let (x, y) = toy(6, 2);
        let lib = lib(&x);
        let hp = SkimHyperParams::from_kappa(vec![0.0, 0.0], vec![1.3, 1.0, 1.0], 0.5).unwrap();
        let model = solve(&lib, &hp, &x, &y).unwrap();
        let pred = model.predict(&x).unwrap();
        let expect = 1.69 * model.alpha.iter().sum::<f64>();
        for p in pred {
            assert!((p - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_zero_noise_errors() {
        let (x, y) = toy(6, 2);
        let lib = lib(&x);
        let hp = SkimHyperParams::from_kappa(vec![0.0, 0.0], vec![1.0, 1.0, 1.0], 0.0).unwrap();
        let err = solve(&lib, &hp, &x, &y).unwrap_err();
        assert!(matches!(err, Error::Singular(ref m) if m.contains("positive sigma_noise")));
    }

    #[test]
    fn identity_system() {
        let chol = factorize(DMatrix::identity(3, 3), 0.0).unwrap();
        let sol = chol.solve(&DVector::from_vec(vec![1.0, -2.0, 3.0]));
        assert_eq!(sol.as_slice(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn response_scaling_is_linear() {
        let (x, y) = toy(10, 3);
        let lib = lib(&x);
        let hp = SkimHyperParams::from_kappa(vec![0.6, 0.9, 0.2], vec![1.0, 0.8, 0.4], 0.3).unwrap();
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let a = solve(&lib, &hp, &x, &y).unwrap().predict(&x).unwrap();
        let b = solve(&lib, &hp, &x, &y2).unwrap().predict(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((2.0 * u - v).abs() < 1e-10 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let (x, mut y) = toy(5, 2);
        let lib = lib(&x);
        let hp = SkimHyperParams::from_kappa(vec![0.5, 0.5], vec![1.0, 1.0, 1.0], 0.3).unwrap();
        assert!(matches!(solve(&lib, &hp, &x, &y[..4]), Err(Error::DimensionMismatch { .. })));
        y[2] = f64::NAN;
        assert!(matches!(solve(&lib, &hp, &x, &y), Err(Error::InvalidConfig(_))));
        let model = solve(&lib, &hp, &x, &[1.0; 5]).unwrap();
        assert!(matches!(
            model.predict(&DMatrix::zeros(2, 3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}

//! Weight-space ridge regression over the explicit tensor-product features.
//!
//! Each effect `V` with `|V| <= Q` contributes the features `Phi_V = (x) Phi_i`
//! and its coefficient block is penalized by `||Theta_V||^2 / theta_V`; blocks
//! with `theta_V = 0` are pinned at zero. Predictions from this model must agree
//! with the kernel-space solve, which makes it an independent check on the
//! kernel recursion and on the dual solve.

use nalgebra::{DMatrix, DVector};

use crate::basis::{check_len, FeatureLibrary};
use crate::error::{Error, Result};
use crate::kernel::SkimHyperParams;
use crate::subset::{subsets_up_to, Subset};

#[derive(Clone, Debug)]
pub struct WeightSpaceModel {
    lib: FeatureLibrary,
    /// Effects kept in the expansion with their `sqrt(theta_V)` scaling.
    blocks: Vec<(Subset, f64)>,
    /// Coefficients of the scaled features, block after block.
    coef: Vec<f64>,
}

fn tensor_features(lib: &FeatureLibrary, subset: &Subset, x: &[f64], scale: f64, out: &mut Vec<f64>) {
    let mut acc = vec![scale];
    for &i in subset.indices() {
        let phi = lib.covariates[i].features(x[i]);
        acc = acc.iter().flat_map(|a| phi.iter().map(move |f| a * f)).collect();
    }
    out.extend(acc);
}

impl WeightSpaceModel {
    pub fn fit(lib: &FeatureLibrary, hp: &SkimHyperParams, x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        check_len("response", x.nrows(), y.len())?;
        let p = lib.num_covariates();
        let all: Vec<usize> = (0..p).collect();
        let mut blocks = Vec::new();
        let intercept = hp.theta(&[]);
        if intercept > 0.0 {
            blocks.push((Subset::empty(), intercept.sqrt()));
        }
        for s in subsets_up_to(&all, hp.order()) {
            let theta = hp.theta(s.indices());
            if theta > 0.0 {
                blocks.push((s, theta.sqrt()));
            }
        }
        let model = WeightSpaceModel {
            lib: lib.clone(),
            blocks,
            coef: Vec::new(),
        };
        let design = model.design(x);
        let lambda = hp.ridge();
        let mut gram = design.transpose() * &design;
        for d in 0..gram.nrows() {
            gram[(d, d)] += lambda;
        }
        let rhs = design.transpose() * DVector::from_column_slice(y);
        let coef = gram
            .cholesky()
            .ok_or_else(|| Error::Singular("weight-space normal equations".into()))?
            .solve(&rhs);
        Ok(WeightSpaceModel {
            coef: coef.iter().copied().collect(),
            ..model
        })
    }

    /// Number of explicit features.
    pub fn dim(&self) -> usize {
        self.blocks
            .iter()
            .map(|(s, _)| s.indices().iter().map(|i| self.lib.dim(*i)).product::<usize>())
            .sum()
    }

    fn design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(x.nrows(), dim);
        let mut buf = Vec::with_capacity(dim);
        for n in 0..x.nrows() {
            let row: Vec<f64> = x.row(n).iter().copied().collect();
            buf.clear();
            for (s, scale) in &self.blocks {
                tensor_features(&self.lib, s, &row, *scale, &mut buf);
            }
            for (c, v) in buf.iter().enumerate() {
                out[(n, c)] = *v;
            }
        }
        out
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let design = self.design(x);
        (design * DVector::from_column_slice(&self.coef)).iter().copied().collect()
    }
}

//! Hyperparameter learning by gradient descent on a Monte Carlo
//! leave-M-out cross-validation loss.
//!
//! Each iteration draws a random split of the rows into `N - M` fitting rows
//! and `M` held-out rows, solves the ridge system on the fitting rows and
//! scores the held-out rows. The gradient of that loss with respect to the
//! unconstrained importances, the order strengths and the noise scale is
//! obtained by differentiating through the linear solve with the adjoint
//! identity `d alpha = -C^{-1} (dC) alpha`. A truncation level that only grows
//! turns importances into exact zeros, and a zero importance receives a zero
//! gradient, so once a covariate is dropped it stays dropped.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::basis::{check_len, BasisSpec, FeatureBlock, FeatureLibrary};
use crate::error::{Error, Result};
use crate::kernel::{self, importance, SkimHyperParams};
use crate::ridge::{self, FittedModel};
use crate::{rng, stats};

/// Truncation-level schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TruncSchedule {
    /// Iteration at which truncation starts; `None` means a quarter of the run.
    pub warmup_iters: Option<usize>,
    pub initial_drop_quantile: f64,
    pub growth: f64,
    pub cap: f64,
}

impl Default for TruncSchedule {
    fn default() -> Self {
        TruncSchedule {
            warmup_iters: None,
            initial_drop_quantile: 0.25,
            growth: 0.01,
            cap: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iters: usize,
    pub learning_rate: f64,
    /// Held-out rows per iteration; `None` means `round(0.2 N)`.
    pub holdout_size: Option<usize>,
    pub schedule: TruncSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            learning_rate: 0.1,
            holdout_size: None,
            schedule: TruncSchedule::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn warmup(&self) -> usize {
        self.schedule
            .warmup_iters
            .unwrap_or_else(|| (self.iters as f64 / 4.0).round() as usize)
            .max(1)
    }

    pub fn holdout_for(&self, n: usize) -> usize {
        self.holdout_size
            .unwrap_or_else(|| (0.2 * n as f64).round() as usize)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let m = self.holdout_for(n);
        if m == 0 || m >= n {
            return Err(Error::InvalidConfig(format!(
                "holdout size must satisfy 0 < M < N, got M = {m}, N = {n}"
            )));
        }
        let s = &self.schedule;
        if !(s.cap > 0.0 && s.cap < 1.0) {
            return Err(Error::InvalidConfig(format!("truncation cap must lie in (0, 1), got {}", s.cap)));
        }
        if !(s.growth > 0.0) {
            return Err(Error::InvalidConfig(format!("truncation growth must be positive, got {}", s.growth)));
        }
        if !(0.0..=1.0).contains(&s.initial_drop_quantile) {
            return Err(Error::InvalidConfig("initial drop quantile must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Truncation level for iteration `t` (1-based).
pub fn trunc_schedule(importances: &[f64], c_prev: f64, t: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup();
    let s = &cfg.schedule;
    if t < warmup {
        0.0
    } else if t == warmup {
        if importances.is_empty() {
            0.0
        } else {
            stats::quantile(importances, s.initial_drop_quantile).min(s.cap)
        }
    } else {
        ((1.0 + s.growth) * c_prev).min(s.cap).max(c_prev)
    }
}

/// Gradient of the cross-validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub kappa: Vec<f64>,
    /// Present when the hyperparameters carry unconstrained values.
    pub raw: Option<Vec<f64>>,
    pub eta: Vec<f64>,
    pub sigma_noise: f64,
}

/// Rows used for fitting and the complementary held-out rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub fit: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Split {
    /// Uses `fit` as the fitting rows; every other row of `0..n` is held out.
    pub fn from_fit_rows(n: usize, fit: &[usize]) -> Result<Self> {
        let mut mask = vec![false; n];
        for &r in fit {
            if r >= n {
                return Err(Error::InvalidHoldout(format!("row {r} out of range for {n} rows")));
            }
            if mask[r] {
                return Err(Error::InvalidHoldout(format!("row {r} listed twice")));
            }
            mask[r] = true;
        }
        let holdout: Vec<usize> = (0..n).filter(|r| !mask[*r]).collect();
        if fit.is_empty() {
            return Err(Error::InvalidHoldout("empty fitting split".into()));
        }
        if holdout.is_empty() {
            return Err(Error::InvalidHoldout("empty holdout".into()));
        }
        Ok(Split {
            fit: fit.to_vec(),
            holdout,
        })
    }

    pub fn random<R: rand::Rng>(n: usize, holdout: usize, rng: &mut R) -> Self {
        let mut fit = index::sample(rng, n, n - holdout).into_vec();
        fit.sort_unstable();
        Split::from_fit_rows(n, &fit).expect("sampled split is valid")
    }
}

struct Objective<'a> {
    features: &'a FeatureBlock,
    y: &'a [f64],
}

impl Objective<'_> {
    fn evaluate(&self, hp: &SkimHyperParams, split: &Split, want_grad: bool) -> Result<(f64, Option<Gradient>)> {
        let fa = self.features.select_rows(&split.fit);
        let fh = self.features.select_rows(&split.holdout);
        let ya = DVector::from_iterator(split.fit.len(), split.fit.iter().map(|&r| self.y[r]));
        let yh = DVector::from_iterator(split.holdout.len(), split.holdout.iter().map(|&r| self.y[r]));
        let m = split.holdout.len() as f64;
        let active = hp.support();

        let parts_aa = kernel::gram_parts(&fa, &fa, hp.kappa(), hp.eta(), &active, true, want_grad);
        let parts_ha = kernel::gram_parts(&fh, &fa, hp.kappa(), hp.eta(), &active, false, want_grad);
        let chol = ridge::factorize(parts_aa.kernel.clone(), hp.ridge())?;
        let alpha = chol.solve(&ya);
        let resid = &yh - &parts_ha.kernel * &alpha;
        let loss = resid.norm_squared() / m;
        if !loss.is_finite() {
            return Err(non_finite("cross-validation loss", hp));
        }
        if !want_grad {
            return Ok((loss, None));
        }

        // Adjoints: dL/dK_HA = -(2/M) r alpha^T; dL/dC = -beta alpha^T with
        // beta = C^{-1} g and g = dL/dalpha = -(2/M) K_HA^T r.
        let g = parts_ha.kernel.transpose() * &resid * (-2.0 / m);
        let beta = chol.solve(&g);
        let w_ha: DMatrix<f64> = &resid * alpha.transpose() * (-2.0 / m);
        let w_aa: DMatrix<f64> = -(&beta * alpha.transpose());

        let (gk_aa, ge_aa) = kernel::gram_vjp(&fa, &fa, hp.kappa(), hp.eta(), &active, &parts_aa, &w_aa, true);
        let (gk_ha, ge_ha) = kernel::gram_vjp(&fh, &fa, hp.kappa(), hp.eta(), &active, &parts_ha, &w_ha, false);
        let grad_kappa: Vec<f64> = gk_aa.iter().zip(&gk_ha).map(|(a, b)| a + b).collect();
        let grad_eta: Vec<f64> = ge_aa.iter().zip(&ge_ha).map(|(a, b)| a + b).collect();
        let grad_sigma = -2.0 * hp.sigma_noise() * beta.dot(&alpha);

        let grad_raw = hp.raw().map(|raw| {
            raw.iter()
                .zip(&grad_kappa)
                .map(|(r, gk)| {
                    if importance(*r) > hp.trunc_level() {
                        let denom = r * r + 1.0;
                        gk * 2.0 * r / (denom * denom)
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<f64>>()
        });

        let finite = grad_kappa.iter().chain(&grad_eta).all(|v| v.is_finite())
            && grad_sigma.is_finite()
            && grad_raw.as_ref().map_or(true, |g| g.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(non_finite("gradient", hp));
        }
        Ok((
            loss,
            Some(Gradient {
                kappa: grad_kappa,
                raw: grad_raw,
                eta: grad_eta,
                sigma_noise: grad_sigma,
            }),
        ))
    }
}

fn non_finite(context: &str, hp: &SkimHyperParams) -> Error {
    let kappa_max = hp.kappa().iter().cloned().fold(0.0, f64::max);
    Error::NonFinite {
        context: context.to_string(),
        snapshot: format!(
            "active = {}, max kappa = {kappa_max:e}, eta = {:?}, sigma_noise = {:e}, trunc = {}",
            hp.support().len(),
            hp.eta(),
            hp.sigma_noise(),
            hp.trunc_level()
        ),
    }
}

fn check_shapes(lib: &FeatureLibrary, hp: &SkimHyperParams, x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
    check_len("kernel weights", lib.num_covariates(), hp.num_covariates())?;
    check_len("covariate columns", lib.num_covariates(), x.ncols())?;
    check_len("response", x.nrows(), y.len())
}

/// Mean squared error on the held-out rows after fitting on `split.fit`.
pub fn mc_cv_loss(
    lib: &FeatureLibrary,
    hp: &SkimHyperParams,
    x: &DMatrix<f64>,
    y: &[f64],
    split: &Split,
) -> Result<f64> {
    check_shapes(lib, hp, x, y)?;
    let features = lib.feature_block(x)?;
    Objective { features: &features, y }
        .evaluate(hp, split, false)
        .map(|(l, _)| l)
}

/// Loss and its exact gradient for a fixed split.
pub fn grad(
    lib: &FeatureLibrary,
    hp: &SkimHyperParams,
    x: &DMatrix<f64>,
    y: &[f64],
    split: &Split,
) -> Result<(f64, Gradient)> {
    check_shapes(lib, hp, x, y)?;
    let features = lib.feature_block(x)?;
    let (loss, g) = Objective { features: &features, y }.evaluate(hp, split, true)?;
    Ok((loss, g.expect("gradient requested")))
}

/// One row of the optimization trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub loss: f64,
    pub trunc_level: f64,
    pub active: usize,
    pub sigma_noise: f64,
    pub eta: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
    /// Covariates with nonzero importance at each iteration.
    pub active_sets: Vec<Vec<u32>>,
}

impl TrainTrace {
    /// Number of (covariate, iteration) events where a zero importance became nonzero.
    pub fn absorption_violations(&self) -> usize {
        let mut violations = 0;
        for w in self.active_sets.windows(2) {
            violations += w[1].iter().filter(|i| w[0].binary_search(i).is_err()).count();
        }
        violations
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let order = self.rows.first().map_or(0, |r| r.eta.len());
        let mut header = String::from("t,loss,c,active,sigma");
        for q in 0..order {
            header.push_str(&format!(",eta{q}"));
        }
        writeln!(out, "{header}")?;
        for r in &self.rows {
            let mut line = format!("{},{},{},{},{}", r.t, r.loss, r.trunc_level, r.active, r.sigma_noise);
            for e in &r.eta {
                line.push_str(&format!(",{e}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Learns the hyperparameters and returns the final ridge fit on all rows.
pub fn fit(
    x: &DMatrix<f64>,
    y: &[f64],
    spec: &BasisSpec,
    order: usize,
    cfg: &TrainConfig,
) -> Result<(FittedModel, TrainTrace)> {
    let lib = FeatureLibrary::build(x, spec)?;
    fit_with_library(lib, x, y, order, cfg)
}

/// As [`fit`], with an already built feature library.
pub fn fit_with_library(
    lib: FeatureLibrary,
    x: &DMatrix<f64>,
    y: &[f64],
    order: usize,
    cfg: &TrainConfig,
) -> Result<(FittedModel, TrainTrace)> {
    if order == 0 {
        return Err(Error::ZeroOrder);
    }
    check_len("covariate columns", lib.num_covariates(), x.ncols())?;
    check_len("response", x.nrows(), y.len())?;
    if let Some(n) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("response row {n} is not finite")));
    }
    let n = x.nrows();
    cfg.validate(n)?;
    let holdout = cfg.holdout_for(n);
    let p = lib.num_covariates();
    let features = lib.feature_block(x)?;
    let objective = Objective { features: &features, y };

    let mut raw = vec![1.0; p];
    let mut eta = vec![1.0; order + 1];
    let mut sigma = (0.5 * stats::variance(y)).sqrt();
    let mut c_prev = 0.0;
    let mut holdout_rng = rng::stream(cfg.seed, "holdout");
    let mut trace = TrainTrace::default();

    for t in 1..=cfg.iters {
        let importances: Vec<f64> = raw.iter().map(|r| importance(*r)).collect();
        let c = trunc_schedule(&importances, c_prev, t, cfg);
        let hp = SkimHyperParams::from_raw(raw.clone(), eta.clone(), sigma, c)?;
        let split = Split::random(n, holdout, &mut holdout_rng);
        let (loss, g) = objective.evaluate(&hp, &split, true)?;
        let g = g.expect("gradient requested");

        let active = hp.support();
        trace.rows.push(TraceRow {
            t,
            loss,
            trunc_level: c,
            active: active.len(),
            sigma_noise: sigma,
            eta: eta.clone(),
        });
        trace.active_sets.push(active.iter().map(|&i| i as u32).collect());

        let g_raw = g.raw.expect("trainer parameters carry raw values");
        for (r, d) in raw.iter_mut().zip(&g_raw) {
            *r -= cfg.learning_rate * d;
        }
        for (e, d) in eta.iter_mut().zip(&g.eta) {
            *e -= cfg.learning_rate * d;
        }
        sigma -= cfg.learning_rate * g.sigma_noise;
        c_prev = c;
        log::debug!("iter {t}: loss {loss:.6}, c {c:.4}, active {}", active.len());
    }

    let hp = SkimHyperParams::from_raw(raw, eta, sigma, c_prev)?;
    let model = ridge::solve(&lib, &hp, x, y)?;
    Ok((model, trace))
}

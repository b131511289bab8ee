//! Synthetic regression scenarios with known functional ANOVA effects, and
//! the selection and estimation metrics used to score a fit against them.
//!
//! Covariates are iid Uniform[-1, 1]. The first five covariates carry one
//! trend each; main effects are the standardized trends and pair effects are
//! products of two standardized trends, so every true effect is centered and
//! orthogonal to the lower-order effects under the product measure. Effect
//! amplitudes split the signal variance according to the regime.

use std::collections::BTreeSet;
use std::sync::Arc;

use gauss_quad::GaussLegendre;
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anova::{sort_effects, AnovaDecomposition, Effect, FnEffect, Measure};
use crate::error::{Error, Result};
use crate::rng;
use crate::subset::Subset;

pub const NUM_ACTIVE: usize = 5;
const QUAD_NODES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    WeakMain,
    Equal,
    MainOnly,
    /// No signal; the response is pure noise.
    Null,
}

impl Regime {
    /// Fractions of the signal variance carried by all mains and all pairs.
    pub fn shares(self) -> (f64, f64) {
        match self {
            Regime::WeakMain => (0.01, 0.99),
            Regime::Equal => (0.5, 0.5),
            Regime::MainOnly => (1.0, 0.0),
            Regime::Null => (0.0, 0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::WeakMain => "weak-main",
            Regime::Equal => "equal",
            Regime::MainOnly => "main-only",
            Regime::Null => "null",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trend {
    Linear,
    Sine,
    Logistic,
    Quadratic,
    Exponential,
}

impl Trend {
    pub const ALL: [Trend; NUM_ACTIVE] = [
        Trend::Linear,
        Trend::Sine,
        Trend::Logistic,
        Trend::Quadratic,
        Trend::Exponential,
    ];

    pub fn raw(self, x: f64) -> f64 {
        match self {
            Trend::Linear => x,
            Trend::Sine => (2.0 * std::f64::consts::PI * x).sin(),
            Trend::Logistic => 1.0 / (1.0 + (-5.0 * x).exp()),
            Trend::Quadratic => x * x,
            Trend::Exponential => x.exp(),
        }
    }
}

/// Expectation under Uniform[-1, 1].
pub fn uniform_mean<F: FnMut(f64) -> f64>(f: F) -> f64 {
    let quad = GaussLegendre::new(QUAD_NODES).expect("valid quadrature degree");
    0.5 * quad.integrate(-1.0, 1.0, f)
}

/// A trend rescaled to mean 0 and variance 1 under Uniform[-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardTrend {
    pub trend: Trend,
    pub mean: f64,
    pub std: f64,
}

impl StandardTrend {
    pub fn new(trend: Trend) -> Self {
        let mean = uniform_mean(|x| trend.raw(x));
        let var = uniform_mean(|x| (trend.raw(x) - mean).powi(2));
        StandardTrend {
            trend,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.trend.raw(x) - self.mean) / self.std
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub p: usize,
    pub n: usize,
    pub regime: Regime,
    pub r2: f64,
    /// Signal variance of the regimes that carry signal.
    pub signal_variance: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            p: 250,
            n: 1000,
            regime: Regime::Equal,
            r2: 0.8,
            signal_variance: 20.0,
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.p < NUM_ACTIVE {
            return Err(Error::InvalidConfig(format!(
                "scenarios need at least {NUM_ACTIVE} covariates, got {}",
                self.p
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("scenario needs at least one row".into()));
        }
        if !(self.r2 > 0.0 && self.r2 <= 1.0) {
            return Err(Error::InvalidConfig(format!("R^2 must lie in (0, 1], got {}", self.r2)));
        }
        if !(self.signal_variance >= 0.0) {
            return Err(Error::InvalidConfig("signal variance must be nonnegative".into()));
        }
        Ok(())
    }

    /// Noise variance that gives the target `R^2` at the nominal signal variance.
    pub fn noise_variance(&self) -> f64 {
        self.signal_variance * (1.0 - self.r2) / self.r2
    }
}

/// The data-generating function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p: usize,
    pub trends: Vec<StandardTrend>,
    pub main_amplitude: f64,
    pub pair_amplitude: f64,
    pub noise_variance: f64,
}

impl GroundTruth {
    pub fn new(s: &Scenario) -> Self {
        let (main_share, pair_share) = s.regime.shares();
        let mains = NUM_ACTIVE as f64;
        let pairs = (NUM_ACTIVE * (NUM_ACTIVE - 1) / 2) as f64;
        GroundTruth {
            p: s.p,
            trends: Trend::ALL.iter().map(|t| StandardTrend::new(*t)).collect(),
            main_amplitude: (s.signal_variance * main_share / mains).sqrt(),
            pair_amplitude: (s.signal_variance * pair_share / pairs).sqrt(),
            noise_variance: s.noise_variance(),
        }
    }

    /// Covariates that enter some nonzero effect.
    pub fn active(&self) -> Vec<usize> {
        if self.main_amplitude > 0.0 || self.pair_amplitude > 0.0 {
            (0..NUM_ACTIVE).collect()
        } else {
            Vec::new()
        }
    }

    /// Nonzero effects, mains first.
    pub fn subsets(&self) -> Vec<Subset> {
        let mut out = Vec::new();
        if self.main_amplitude > 0.0 {
            out.extend((0..NUM_ACTIVE).map(Subset::single));
        }
        if self.pair_amplitude > 0.0 {
            for i in 0..NUM_ACTIVE {
                for j in i + 1..NUM_ACTIVE {
                    out.push(Subset::pair(i, j));
                }
            }
        }
        out
    }

    /// Value of the true effect of `subset` at its coordinates `xv`.
    pub fn effect(&self, subset: &Subset, xv: &[f64]) -> f64 {
        match subset.indices() {
            [i] if *i < NUM_ACTIVE => self.main_amplitude * self.trends[*i].eval(xv[0]),
            [i, j] if *j < NUM_ACTIVE => {
                self.pair_amplitude * self.trends[*i].eval(xv[0]) * self.trends[*j].eval(xv[1])
            }
            _ => 0.0,
        }
    }

    pub fn f(&self, x: &[f64]) -> f64 {
        self.subsets()
            .iter()
            .map(|s| {
                let xv: Vec<f64> = s.indices().iter().map(|&i| x[i]).collect();
                self.effect(s, &xv)
            })
            .sum()
    }

    /// Variance of each true effect by quadrature under Uniform[-1, 1].
    pub fn effect_variances(&self) -> Vec<(Subset, f64)> {
        let second_moment = |t: &StandardTrend| uniform_mean(|x| t.eval(x).powi(2));
        self.subsets()
            .into_iter()
            .map(|s| {
                let v = match s.indices() {
                    [i] => self.main_amplitude.powi(2) * second_moment(&self.trends[*i]),
                    [i, j] => {
                        self.pair_amplitude.powi(2) * second_moment(&self.trends[*i]) * second_moment(&self.trends[*j])
                    }
                    _ => 0.0,
                };
                (s, v)
            })
            .collect()
    }

    /// Total signal variance; effects are orthogonal, so the variances add.
    pub fn signal_variance(&self) -> f64 {
        self.effect_variances().iter().map(|(_, v)| v).sum()
    }

    /// The truth as a product-measure decomposition.
    pub fn decomposition(&self) -> AnovaDecomposition {
        let truth = Arc::new(self.clone());
        let mut effects: Vec<Effect> = self
            .subsets()
            .into_iter()
            .map(|s| {
                let t = Arc::clone(&truth);
                let key = s.clone();
                Effect::Function(FnEffect {
                    subset: s,
                    f: Arc::new(move |xv: &[f64]| t.effect(&key, xv)),
                })
            })
            .collect();
        sort_effects(&mut effects);
        AnovaDecomposition {
            measure: Measure::Product,
            intercept: 0.0,
            effects,
            order: 2,
            num_covariates: self.p,
            provenance: "ground-truth".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub truth: GroundTruth,
}

pub fn uniform_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn generate(s: &Scenario) -> Result<SyntheticData> {
    s.validate()?;
    let truth = GroundTruth::new(s);
    let x = uniform_rows(s.n, s.p, &mut rng::stream(s.seed, "covariates"));
    let mut noise = rng::stream(s.seed, "noise");
    let sd = truth.noise_variance.sqrt();
    let y = (0..s.n)
        .map(|n| {
            let row: Vec<f64> = x.row(n).iter().copied().collect();
            let e: f64 = StandardNormal.sample(&mut noise);
            truth.f(&row) + sd * e
        })
        .collect();
    Ok(SyntheticData { x, y, truth })
}

/// Selection counts and estimation error buckets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub correct_selected: usize,
    pub wrong_selected: usize,
    pub correct_not_selected: usize,
    /// Inactive covariates left out; the four counts sum to `p`.
    pub wrong_not_selected: usize,
    pub correct_selected_main: f64,
    pub correct_not_selected_main: f64,
    pub wrong_selected_main: f64,
    pub correct_selected_pair: f64,
    pub correct_not_selected_pair: f64,
    pub wrong_selected_pair: f64,
    pub total_sse: f64,
    pub signal_variance: f64,
    pub total_sse_over_signal: f64,
}

impl EvalReport {
    pub fn bucket_sum(&self) -> f64 {
        self.correct_selected_main
            + self.correct_not_selected_main
            + self.wrong_selected_main
            + self.correct_selected_pair
            + self.correct_not_selected_pair
            + self.wrong_selected_pair
    }
}

/// Scores an estimated decomposition against the truth, with squared norms
/// estimated from `mc_points` fresh Uniform[-1, 1] draws.
///
/// A true effect counts as selected when all its covariates are selected.
/// Estimated effects of order above two go to the wrong-selected pair bucket.
pub fn evaluate(
    decomp: &AnovaDecomposition,
    truth: &GroundTruth,
    selection: &[usize],
    mc_points: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if mc_points == 0 {
        return Err(Error::EmptySample);
    }
    let selected: BTreeSet<usize> = selection.iter().copied().collect();
    let active: BTreeSet<usize> = truth.active().into_iter().collect();
    let p = truth.p;
    let mut report = EvalReport {
        correct_selected: selected.intersection(&active).count(),
        wrong_selected: selected.difference(&active).count(),
        correct_not_selected: active.difference(&selected).count(),
        ..EvalReport::default()
    };
    report.wrong_not_selected = p - report.correct_selected - report.wrong_selected - report.correct_not_selected;

    // Only the covariates that some effect touches need draws.
    let true_subsets = truth.subsets();
    let mut involved: BTreeSet<usize> = active.clone();
    for e in &decomp.effects {
        involved.extend(e.subset().indices().iter().copied());
    }
    let involved: Vec<usize> = involved.into_iter().collect();
    let draws = uniform_rows(mc_points, involved.len(), rng);
    let column = |i: usize| involved.binary_search(&i).expect("covariate drawn");

    let sq_norm = |f: &dyn Fn(&[f64]) -> f64, subset: &Subset| -> f64 {
        let cols: Vec<usize> = subset.indices().iter().map(|&i| column(i)).collect();
        let mut xv = vec![0.0; cols.len()];
        let mut acc = 0.0;
        for n in 0..mc_points {
            for (v, &c) in xv.iter_mut().zip(&cols) {
                *v = draws[(n, c)];
            }
            acc += f(&xv).powi(2);
        }
        acc / mc_points as f64
    };

    for s in &true_subsets {
        let is_main = s.len() == 1;
        let est = decomp.effect(s);
        if s.is_subset_of(selection) {
            let err = sq_norm(
                &|xv: &[f64]| truth.effect(s, xv) - est.map_or(0.0, |e| e.eval(xv)),
                s,
            );
            if is_main {
                report.correct_selected_main += err;
            } else {
                report.correct_selected_pair += err;
            }
        } else {
            let norm = sq_norm(&|xv: &[f64]| truth.effect(s, xv), s);
            if is_main {
                report.correct_not_selected_main += norm;
            } else {
                report.correct_not_selected_pair += norm;
            }
        }
    }
    for e in &decomp.effects {
        let s = e.subset();
        if true_subsets.contains(s) {
            continue;
        }
        let norm = sq_norm(&|xv: &[f64]| e.eval(xv), s);
        if s.len() == 1 {
            report.wrong_selected_main += norm;
        } else {
            report.wrong_selected_pair += norm;
        }
    }
    report.total_sse = report.bucket_sum();
    report.signal_variance = truth.signal_variance();
    report.total_sse_over_signal = if report.signal_variance > 0.0 {
        report.total_sse / report.signal_variance
    } else {
        0.0
    };
    Ok(report)
}

/// Decomposition with no effects, for baselines.
pub fn null_decomposition(p: usize) -> AnovaDecomposition {
    AnovaDecomposition {
        measure: Measure::Product,
        intercept: 0.0,
        effects: Vec::new(),
        order: 2,
        num_covariates: p,
        provenance: "null".into(),
    }
}

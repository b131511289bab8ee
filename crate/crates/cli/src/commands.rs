use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;
use skimfa::anova::{self, AnovaDecomposition, ChangeOfBasisCoefficients, JointResampler, ProductResampler};
use skimfa::synthbench::{self, EvalReport, Scenario};
use skimfa::trainer::{self, TrainConfig};
use skimfa::{rng, FittedModel, Measure, Subset};

use crate::data::{read_config, read_json, read_table, sanitize, write_json, write_table};
use crate::manifest::Recorder;
use crate::{
    AppError, BenchConfig, DecomposeConfig, FitConfig, GenerateConfig, MeasureArg, PredictConfig, RunConfig,
    SelectConfig, TrainArgs,
};

const MODEL_FORMAT: &str = "skimfa-model/1";
/// Rows used for the sum-identity self-check.
const IDENTITY_POINTS: usize = 100;

/// A fitted model together with the names needed to read new data.
#[derive(Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub covariates: Vec<String>,
    pub target: String,
    pub model: FittedModel,
}

pub fn run(config: RunConfig) -> Result<(), AppError> {
    match config {
        RunConfig::Fit(c) => fit(c),
        RunConfig::Predict(c) => predict(c),
        RunConfig::Select(c) => select(c),
        RunConfig::Decompose(c) => decompose(c),
        RunConfig::Bench(c) => bench(c),
        RunConfig::Generate(c) => generate(c),
    }
}

fn create_dir(out: &Path) -> Result<(), AppError> {
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))
}

fn train_config(t: &TrainArgs, n: usize, seed: u64) -> Result<TrainConfig, AppError> {
    if !(t.holdout_frac > 0.0 && t.holdout_frac < 1.0) {
        return Err(AppError::User(format!(
            "--holdout-frac must lie in (0, 1), got {}",
            t.holdout_frac
        )));
    }
    Ok(TrainConfig {
        iters: t.iters,
        learning_rate: t.lr,
        holdout_size: Some((t.holdout_frac * n as f64).round() as usize),
        seed,
        ..TrainConfig::default()
    })
}

fn load_model(path: &Path) -> Result<ModelFile, AppError> {
    let file: ModelFile = read_json(path)?;
    if file.format != MODEL_FORMAT {
        return Err(AppError::User(format!(
            "{}: unsupported model format '{}'",
            path.display(),
            file.format
        )));
    }
    file.model.validate()?;
    if file.covariates.len() != file.model.num_covariates() {
        return Err(AppError::User(format!("{}: covariate names do not match the model", path.display())));
    }
    Ok(file)
}

fn write_trace(path: &Path, trace: &trainer::TrainTrace) -> Result<(), AppError> {
    let file = fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    trace.write_csv(&mut w).map_err(|e| AppError::io(path, e))?;
    w.flush().map_err(|e| AppError::io(path, e))
}

fn fit(c: FitConfig) -> Result<(), AppError> {
    let table = read_table(&c.input, Some(&c.target), None)?;
    let y = table.y.clone().expect("target requested");
    let cfg = train_config(&c.train, y.len(), c.seed)?;
    info!("fitting {} rows x {} covariates", table.x.nrows(), table.x.ncols());
    let (model, trace) = trainer::fit(&table.x, &y, &c.train.basis_spec(), c.train.q, &cfg)?;
    create_dir(&c.out)?;
    let mut rec = Recorder::new();
    rec.input(&c.input);

    let selected: Vec<&String> = model.selected().iter().map(|&i| &table.names[i]).collect();
    info!("selected {} covariates", selected.len());
    write_json(&c.out.join("selected.json"), &json!({ "selected": selected, "indices": model.selected() }))?;
    rec.output("selected.json");
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        covariates: table.names.clone(),
        target: c.target.clone(),
        model,
    };
    write_json(&c.out.join("model.json"), &file)?;
    rec.output("model.json");
    write_trace(&c.out.join("trace.csv"), &trace)?;
    rec.output("trace.csv");
    rec.check("absorption_violations", json!(trace.absorption_violations()));
    let seed = c.seed;
    let out = c.out.clone();
    rec.finish(&out, RunConfig::Fit(c), seed)
}

fn predict(c: PredictConfig) -> Result<(), AppError> {
    let file = load_model(&c.model)?;
    let table = read_table(&c.input, None, Some(&file.covariates))?;
    let pred = file.model.predict(&table.x)?;
    create_dir(&c.out)?;
    let path = c.out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| AppError::io(&path, e.into()))?;
    w.write_record(["prediction"]).map_err(|e| AppError::io(&path, e.into()))?;
    for v in pred {
        w.write_record([v.to_string()]).map_err(|e| AppError::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| AppError::io(&path, e))?;
    let mut rec = Recorder::new();
    rec.input(&c.model);
    rec.input(&c.input);
    rec.output("predictions.csv");
    let out = c.out.clone();
    rec.finish(&out, RunConfig::Predict(c), 0)
}

fn select(c: SelectConfig) -> Result<(), AppError> {
    let file = load_model(&c.model)?;
    let idx = anova::select(&file.model.hp);
    let names: Vec<&String> = idx.iter().map(|&i| &file.covariates[i]).collect();
    let kappa: Vec<f64> = idx.iter().map(|&i| file.model.hp.kappa()[i]).collect();
    for (name, k) in names.iter().zip(&kappa) {
        println!("{name}\t{k}");
    }
    if let Some(out) = c.out.clone() {
        create_dir(&out)?;
        write_json(&out.join("selected.json"), &json!({ "selected": names, "indices": idx, "kappa": kappa }))?;
        let mut rec = Recorder::new();
        rec.input(&c.model);
        rec.output("selected.json");
        rec.finish(&out, RunConfig::Select(c), 0)?;
    }
    Ok(())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Grid points of an effect: one row per point, coordinates in subset order.
fn effect_grid(model: &FittedModel, subset: &Subset, g: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = subset
        .indices()
        .iter()
        .map(|&i| {
            let col = model.train_x.column(i);
            linspace(col.min(), col.max(), g)
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Serialize)]
struct EffectSummary {
    covariates: Vec<String>,
    indices: Vec<usize>,
    variance: f64,
    share: f64,
    file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_deviation_from_product: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mc_tolerance: Option<f64>,
}

fn decompose(c: DecomposeConfig) -> Result<(), AppError> {
    let file = load_model(&c.model)?;
    let model = &file.model;
    let product = anova::product_decomposition(model)?;
    let mut coefficients: Option<ChangeOfBasisCoefficients> = None;
    let decomp: AnovaDecomposition = match c.measure {
        MeasureArg::Product => product.clone(),
        MeasureArg::Joint => {
            if model.order != 2 {
                return Err(AppError::User(format!(
                    "the joint measure needs a model with q = 2, this model has q = {}",
                    model.order
                )));
            }
            let sampler = JointResampler {
                data: model.train_x.clone(),
            };
            let mut r = rng::stream(c.seed, "mc-basis");
            let (joint, coefs) = anova::change_basis(&product, &sampler, c.mc_samples, &mut r)?;
            coefficients = Some(coefs);
            joint
        }
    };

    let mut r = rng::stream(c.seed, "mc-variance");
    let sample = match decomp.measure {
        Measure::Product => anova::RowSampler::sample(
            &ProductResampler {
                data: model.train_x.clone(),
            },
            c.mc_samples.max(1),
            &mut r,
        ),
        Measure::Joint => anova::RowSampler::sample(
            &JointResampler {
                data: model.train_x.clone(),
            },
            c.mc_samples.max(1),
            &mut r,
        ),
    };
    let variance = anova::variance_decomposition(&decomp, &sample)?;

    create_dir(&c.out)?;
    let mut rec = Recorder::new();
    rec.input(&c.model);
    let intercept_path = c.out.join("intercept.csv");
    fs::write(&intercept_path, format!("effect,value\nintercept,{}\n", decomp.intercept))
        .map_err(|e| AppError::io(&intercept_path, e))?;
    rec.output("intercept.csv");

    let mut summaries = Vec::new();
    for (effect, var) in decomp.effects.iter().zip(&variance.effects) {
        let subset = effect.subset();
        let names: Vec<String> = subset.indices().iter().map(|&i| file.covariates[i].clone()).collect();
        let fname = format!(
            "effect_{}.csv",
            names.iter().map(|n| sanitize(n)).collect::<Vec<_>>().join("__")
        );
        let path = c.out.join(&fname);
        let mut w = csv::Writer::from_path(&path).map_err(|e| AppError::io(&path, e.into()))?;
        let mut header = names.clone();
        header.push("value".into());
        w.write_record(&header).map_err(|e| AppError::io(&path, e.into()))?;
        let mut max_dev: f64 = 0.0;
        let mut max_se: f64 = 0.0;
        for point in effect_grid(model, subset, c.grid.max(1)) {
            let v = effect.eval(&point);
            if let Some(coefs) = &coefficients {
                let base = product.effect(subset).map_or(0.0, |e| e.eval(&point));
                max_dev = max_dev.max((v - base).abs());
                max_se = max_se.max(coefs.deviation_se(subset, &point));
            }
            let mut rec_row: Vec<String> = point.iter().map(|x| x.to_string()).collect();
            rec_row.push(v.to_string());
            w.write_record(&rec_row).map_err(|e| AppError::io(&path, e.into()))?;
        }
        w.flush().map_err(|e| AppError::io(&path, e))?;
        rec.output(fname.clone());
        summaries.push(EffectSummary {
            covariates: names,
            indices: subset.indices().to_vec(),
            variance: var.variance,
            share: var.share,
            file: fname,
            max_deviation_from_product: coefficients.as_ref().map(|_| max_dev),
            mc_tolerance: coefficients.as_ref().map(|_| 3.0 * max_se),
        });
    }

    // Sum identity on the first training rows.
    let k = model.train_x.nrows().min(IDENTITY_POINTS);
    let rows: DMatrix<f64> = model.train_x.rows(0, k).into_owned();
    let pred = model.predict(&rows)?;
    let recon = decomp.predict(&rows)?;
    let max_err = pred.iter().zip(&recon).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = pred.iter().map(|a| a.abs()).fold(1.0, f64::max);
    let identity = json!({ "points": k, "max_abs_error": max_err, "passed": max_err <= 1e-8 * scale });

    write_json(
        &c.out.join("decomposition.json"),
        &json!({
            "measure": decomp.measure,
            "intercept": decomp.intercept,
            "order": decomp.order,
            "effects": summaries,
            "sum_identity": identity,
            "change_of_basis": coefficients,
        }),
    )?;
    rec.output("decomposition.json");
    let shares: Vec<_> = variance
        .effects
        .iter()
        .map(|e| {
            let names: Vec<&String> = e.subset.indices().iter().map(|&i| &file.covariates[i]).collect();
            json!({ "covariates": names, "variance": e.variance, "share": e.share })
        })
        .collect();
    write_json(
        &c.out.join("variance_shares.json"),
        &json!({
            "effects": shares,
            "sum_of_variances": variance.sum_of_variances,
            "total_variance": variance.total_variance,
            "samples": sample.nrows(),
        }),
    )?;
    rec.output("variance_shares.json");
    rec.check("sum_identity", identity);
    let seed = c.seed;
    let out = c.out.clone();
    rec.finish(&out, RunConfig::Decompose(c), seed)
}

fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x{i}")).collect()
}

fn scenario(regime: crate::RegimeArg, s: &crate::ScenarioArgs, seed: u64) -> Scenario {
    Scenario {
        p: s.p,
        n: s.n,
        regime: regime.into(),
        r2: s.r2,
        signal_variance: s.signal_variance,
        seed,
    }
}

fn generate(c: GenerateConfig) -> Result<(), AppError> {
    let s = scenario(c.regime, &c.scenario, c.seed);
    let data = synthbench::generate(&s)?;
    create_dir(&c.out)?;
    let mut rec = Recorder::new();
    write_table(&c.out.join("data.csv"), &covariate_names(s.p), &data.x, Some(("y", &data.y)))?;
    rec.output("data.csv");
    write_json(
        &c.out.join("truth.json"),
        &json!({
            "scenario": s,
            "truth": data.truth,
            "signal_variance": data.truth.signal_variance(),
            "effect_variances": data.truth.effect_variances(),
        }),
    )?;
    rec.output("truth.json");
    let seed = c.seed;
    let out = c.out.clone();
    rec.finish(&out, RunConfig::Generate(c), seed)
}

const BENCH_HEADER: [&str; 18] = [
    "method",
    "regime",
    "p",
    "n",
    "seed",
    "correct_selected",
    "wrong_selected",
    "correct_not_selected",
    "wrong_not_selected",
    "correct_selected_main",
    "correct_not_selected_main",
    "wrong_selected_main",
    "correct_selected_pair",
    "correct_not_selected_pair",
    "wrong_selected_pair",
    "total_sse",
    "signal_variance",
    "total_sse_over_signal",
];

fn bench_row(method: &str, s: &Scenario, r: &EvalReport) -> Vec<String> {
    let mut row = vec![
        method.to_string(),
        s.regime.name().to_string(),
        s.p.to_string(),
        s.n.to_string(),
        s.seed.to_string(),
    ];
    for c in [r.correct_selected, r.wrong_selected, r.correct_not_selected, r.wrong_not_selected] {
        row.push(c.to_string());
    }
    for v in [
        r.correct_selected_main,
        r.correct_not_selected_main,
        r.wrong_selected_main,
        r.correct_selected_pair,
        r.correct_not_selected_pair,
        r.wrong_selected_pair,
        r.total_sse,
        r.signal_variance,
        r.total_sse_over_signal,
    ] {
        row.push(v.to_string());
    }
    row
}

fn bench(mut c: BenchConfig) -> Result<(), AppError> {
    if let Some(path) = c.config.clone() {
        let out = c.out.clone();
        c = read_config(&path)?;
        c.out = out;
    }
    if c.regimes.is_empty() || c.seeds.is_empty() {
        return Err(AppError::User("bench needs at least one regime and one seed".into()));
    }
    create_dir(&c.out)?;
    let mut rec = Recorder::new();
    let method = c.train.label();
    let mut reports = Vec::new();
    let csv_path = c.out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| AppError::io(&csv_path, e.into()))?;
    w.write_record(BENCH_HEADER).map_err(|e| AppError::io(&csv_path, e.into()))?;
    for &regime in &c.regimes {
        for &seed in &c.seeds {
            let s = scenario(regime, &c.scenario, seed);
            info!("bench {} p = {} seed = {seed}", s.regime.name(), s.p);
            let data = synthbench::generate(&s)?;
            let cfg = train_config(&c.train, s.n, seed)?;
            let (model, trace) = trainer::fit(&data.x, &data.y, &c.train.basis_spec(), c.train.q, &cfg)?;
            let decomp = anova::product_decomposition(&model)?;
            let mut r = rng::stream(seed, "mc-eval");
            let report = synthbench::evaluate(&decomp, &data.truth, &model.selected(), c.mc_samples, &mut r)?;
            let trace_name = format!("trace_{}_{seed}.csv", s.regime.name());
            write_trace(&c.out.join(&trace_name), &trace)?;
            rec.output(trace_name);
            w.write_record(bench_row(&method, &s, &report))
                .map_err(|e| AppError::io(&csv_path, e.into()))?;
            reports.push(json!({
                "method": method,
                "regime": s.regime,
                "p": s.p,
                "n": s.n,
                "seed": seed,
                "selected": model.selected(),
                "absorption_violations": trace.absorption_violations(),
                "report": report,
            }));
        }
    }
    w.flush().map_err(|e| AppError::io(&csv_path, e))?;
    rec.output("report.csv");
    write_json(&c.out.join("reports.json"), &reports)?;
    rec.output("reports.json");
    let seed = c.seeds[0];
    let out = c.out.clone();
    rec.finish(&out, RunConfig::Bench(c), seed)
}

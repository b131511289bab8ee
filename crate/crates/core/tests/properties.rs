use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skimfa::kernel::{self, skim_from_k1, skim_from_k1_bruteforce};
use skimfa::ridge::{self, oracle::WeightSpaceModel};
use skimfa::trainer::{self, Split, TrainConfig};
use skimfa::{BasisKind, BasisSpec, FeatureLibrary, SkimHyperParams};

fn random_x(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_hp(rng: &mut ChaCha8Rng, p: usize, q: usize, sigma: f64) -> SkimHyperParams {
    let kappa = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
    let eta = (0..=q).map(|_| rng.gen_range(0.2..1.5)).collect();
    SkimHyperParams::from_kappa(kappa, eta, sigma).unwrap()
}

fn spline_lib(x: &DMatrix<f64>, knots: usize) -> FeatureLibrary {
    FeatureLibrary::build(x, &BasisSpec::uniform(BasisKind::NaturalCubicSpline { num_knots: knots })).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn recursion_matches_enumeration(
        kappa in prop::collection::vec(0.0f64..1.5, 1..=8),
        k1 in prop::collection::vec(-2.0f64..4.0, 8),
        eta in prop::collection::vec(-1.5f64..1.5, 2..=4),
    ) {
        let k1 = &k1[..kappa.len()];
        let fast = skim_from_k1(&kappa, &eta, k1).unwrap();
        let slow = skim_from_k1_bruteforce(&kappa, &eta, k1).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }

    #[test]
    fn order_two_closed_form(
        kappa in prop::collection::vec(0.0f64..1.5, 2..=12),
        k1 in prop::collection::vec(-2.0f64..4.0, 12),
        eta in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let k1 = &k1[..kappa.len()];
        let z: Vec<f64> = kappa.iter().zip(k1).map(|(k, v)| k * k * v).collect();
        let s1: f64 = z.iter().sum();
        let s2: f64 = z.iter().map(|v| v * v).sum();
        let closed = 0.5 * eta[2] * eta[2] * (s1 * s1 - s2) + eta[1] * eta[1] * s1 + eta[0] * eta[0];
        let fast = skim_from_k1(&kappa, &eta, k1).unwrap();
        prop_assert!((fast - closed).abs() <= 1e-12 * (1.0 + closed.abs()));
    }

    #[test]
    fn k1_symmetric_and_nonnegative_on_diagonal(seed in any::<u64>(), a in -1.5f64..1.5, b in -1.5f64..1.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 20, 2);
        let lib = spline_lib(&x, 5);
        prop_assert_eq!(lib.eval_k1(0, a, b).unwrap(), lib.eval_k1(0, b, a).unwrap());
        prop_assert!(lib.eval_k1(1, a, a).unwrap() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eval_skim_symmetric_and_zero_kappa_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 6;
        let x = random_x(&mut rng, 30, p);
        let lib = spline_lib(&x, 4);
        let mut kappa: Vec<f64> = (0..p).map(|_| rng.gen_range(0.0..1.0)).collect();
        kappa[2] = 0.0;
        let hp = SkimHyperParams::from_kappa(kappa, vec![1.0, 0.7, 0.9, 0.4], 0.1).unwrap();
        let u: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = kernel::eval_skim(&lib, &hp, &u, &v).unwrap();
        prop_assert_eq!(a, kernel::eval_skim(&lib, &hp, &v, &u).unwrap());
        let mut u2 = u.clone();
        u2[2] = rng.gen_range(-3.0..3.0);
        prop_assert_eq!(a, kernel::eval_skim(&lib, &hp, &u2, &v).unwrap());
    }

    #[test]
    fn gram_symmetric_psd(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 25, 5);
        let lib = spline_lib(&x, 5);
        let hp = random_hp(&mut rng, 5, 3, 0.1);
        let k = kernel::gram_matrix(&lib, &hp, &x, &x).unwrap();
        let asym = (&k - k.transpose()).abs().max();
        prop_assert!(asym < 1e-12);
        let min_eig = k.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min_eig >= -1e-8 * k.trace());
    }

    #[test]
    fn features_standardized_and_sections_centered(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 40, 3);
        let spec = BasisSpec::uniform(BasisKind::NaturalCubicSpline { num_knots: 5 })
            .with_override(1, BasisKind::Polynomial { degree: 3 });
        let lib = FeatureLibrary::build(&x, &spec).unwrap();
        let block = lib.feature_block(&x).unwrap();
        for i in 0..3 {
            for b in 0..lib.dim(i) {
                let col = block.column(i, b);
                let mean = col.iter().sum::<f64>() / 40.0;
                let var = col.iter().map(|v| v * v).sum::<f64>() / 40.0 - mean * mean;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var - 1.0).abs() < 1e-8);
            }
            let t = rng.gen_range(-1.0..1.0);
            let section: f64 = (0..40).map(|n| lib.eval_k1(i, t, x[(n, i)]).unwrap()).sum::<f64>() / 40.0;
            prop_assert!(section.abs() < 1e-8);
        }
    }

    #[test]
    fn spline_linear_outside_knots(seed in any::<u64>(), h in 0.05f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 30, 1);
        let lib = spline_lib(&x, 5);
        let c = lib.covariate(0).unwrap();
        for start in [1.2, -1.2 - 2.0 * h] {
            let f0 = c.features(start);
            let f1 = c.features(start + h);
            let f2 = c.features(start + 2.0 * h);
            for b in 0..c.dim() {
                prop_assert!((f2[b] - 2.0 * f1[b] + f0[b]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn library_json_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_x(&mut rng, 30, 3);
        for n in 0..30 {
            x[(n, 2)] = (n % 3) as f64;
        }
        let spec = BasisSpec::default().with_override(2, BasisKind::OneHot);
        let lib = FeatureLibrary::build(&x, &spec).unwrap();
        let text = serde_json::to_string(&lib).unwrap();
        let back: FeatureLibrary = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, lib);
    }

    #[test]
    fn kernel_and_weight_space_agree(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 20, 3);
        let y: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 2 })).unwrap();
        let hp = random_hp(&mut rng, 3, 2, 0.5);
        let model = ridge::solve(&lib, &hp, &x, &y).unwrap();
        let oracle = WeightSpaceModel::fit(&lib, &hp, &x, &y).unwrap();
        let xt = random_x(&mut rng, 15, 3);
        let a = model.predict(&xt).unwrap();
        let b = oracle.predict(&xt);
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-8 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn predictions_invariant_to_row_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 25, 4);
        let y: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let lib = spline_lib(&x, 4);
        let hp = random_hp(&mut rng, 4, 2, 0.4);
        let mut perm: Vec<usize> = (0..25).collect();
        for i in (1..25).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let xp = DMatrix::from_fn(25, 4, |r, c| x[(perm[r], c)]);
        let yp: Vec<f64> = perm.iter().map(|&r| y[r]).collect();
        let xt = random_x(&mut rng, 10, 4);
        let a = ridge::solve(&lib, &hp, &x, &y).unwrap().predict(&xt).unwrap();
        let b = ridge::solve(&lib, &hp, &xp, &yp).unwrap().predict(&xt).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() < 1e-12 * (1.0 + u.abs()) + 1e-12);
        }
    }

    #[test]
    fn training_error_grows_with_regularization(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 25, 3);
        let y: Vec<f64> = (0..25).map(|n| x[(n, 0)] * x[(n, 1)] + rng.gen_range(-0.5..0.5)).collect();
        let lib = spline_lib(&x, 5);
        let base = random_hp(&mut rng, 3, 2, 0.0);
        let mut prev = -1.0;
        for sigma in [0.05, 0.1, 0.3, 0.7, 1.5, 4.0] {
            let hp = SkimHyperParams::from_kappa(base.kappa().to_vec(), base.eta().to_vec(), sigma).unwrap();
            let pred = ridge::solve(&lib, &hp, &x, &y).unwrap().predict(&x).unwrap();
            let mse = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 25.0;
            prop_assert!(mse >= prev - 1e-12, "mse {mse} after {prev}");
            prev = mse;
        }
    }

    #[test]
    fn zero_importance_gets_zero_gradient(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_x(&mut rng, 20, 5);
        let y: Vec<f64> = (0..20).map(|n| x[(n, 0)] + rng.gen_range(-0.2..0.2)).collect();
        let lib = spline_lib(&x, 4);
        let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..2.0)).collect();
        let hp = SkimHyperParams::from_raw(raw, vec![1.0, 1.0, 1.0], 0.6, 0.4).unwrap();
        let split = Split::random(20, 5, &mut rng);
        let (_, g) = trainer::grad(&lib, &hp, &x, &y, &split).unwrap();
        let g_raw = g.raw.unwrap();
        for i in 0..5 {
            if hp.kappa()[i] == 0.0 {
                prop_assert_eq!(g_raw[i], 0.0);
            }
        }
    }
}

#[test]
fn mc_cv_loss_is_unbiased_for_the_exact_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, m) = (6, 2);
    let x = random_x(&mut rng, n, 2);
    let y: Vec<f64> = (0..n).map(|r| x[(r, 0)] - x[(r, 1)] + rng.gen_range(-0.3..0.3)).collect();
    let lib = FeatureLibrary::build(&x, &BasisSpec::uniform(BasisKind::Polynomial { degree: 1 })).unwrap();
    let hp = SkimHyperParams::from_kappa(vec![0.6, 0.8], vec![0.5, 1.0, 0.7], 0.4).unwrap();

    let mut exact = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let fit: Vec<usize> = (0..n).filter(|r| *r != a && *r != b).collect();
            let split = Split::from_fit_rows(n, &fit).unwrap();
            exact.push(trainer::mc_cv_loss(&lib, &hp, &x, &y, &split).unwrap());
        }
    }
    let exact_mean = exact.iter().sum::<f64>() / exact.len() as f64;

    let draws = 2000;
    let losses: Vec<f64> = (0..draws)
        .map(|_| {
            let split = Split::random(n, m, &mut rng);
            trainer::mc_cv_loss(&lib, &hp, &x, &y, &split).unwrap()
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / draws as f64;
    let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let se = (var / draws as f64).sqrt();
    assert!((mean - exact_mean).abs() <= 2.0 * se, "mean {mean} exact {exact_mean} se {se}");
}

#[test]
fn fit_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_x(&mut rng, 40, 6);
    let y: Vec<f64> = (0..40).map(|n| x[(n, 0)] * x[(n, 1)] + x[(n, 2)]).collect();
    let cfg = TrainConfig {
        iters: 30,
        seed: 9,
        ..TrainConfig::default()
    };
    let (a, ta) = trainer::fit(&x, &y, &BasisSpec::default(), 2, &cfg).unwrap();
    let (b, tb) = trainer::fit(&x, &y, &BasisSpec::default(), 2, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(ta, tb);
    assert!(ta.rows.windows(2).all(|w| w[0].trunc_level <= w[1].trunc_level && w[1].trunc_level <= 0.75));
}

#[test]
fn model_json_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_x(&mut rng, 15, 3);
    let y: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lib = spline_lib(&x, 5);
    let hp = random_hp(&mut rng, 3, 2, 0.3);
    let model = ridge::solve(&lib, &hp, &x, &y).unwrap();
    let text = serde_json::to_string(&model).unwrap();
    let back: skimfa::FittedModel = serde_json::from_str(&text).unwrap();
    assert_eq!(back, model);
}

#[test]
fn synthetic_response_variance_matches_design() {
    use skimfa::synthbench::{self, Regime, Scenario};
    for regime in [Regime::WeakMain, Regime::Equal, Regime::MainOnly] {
        let s = Scenario {
            p: 10,
            n: 10_000,
            regime,
            seed: 21,
            ..Scenario::default()
        };
        let data = synthbench::generate(&s).unwrap();
        let var = skimfa::stats::variance(&data.y);
        let target = s.signal_variance + s.noise_variance();
        assert!((var - target).abs() <= 0.05 * target, "{regime:?}: var {var} target {target}");
    }
}

#[test]
fn effect_variance_scales_with_amplitude_squared() {
    use skimfa::synthbench::{GroundTruth, Scenario};
    let truth = GroundTruth::new(&Scenario::default());
    let mut scaled = truth.clone();
    scaled.main_amplitude *= 3.0;
    scaled.pair_amplitude *= 0.5;
    for ((s, v), (_, w)) in truth.effect_variances().iter().zip(scaled.effect_variances()) {
        let factor = if s.len() == 1 { 9.0 } else { 0.25 };
        assert!((w - factor * v).abs() <= 1e-10 * (1.0 + w.abs()), "{s}");
    }
}

#[test]
fn error_buckets_add_up_to_total() {
    use skimfa::synthbench::{self, Scenario};
    let s = Scenario {
        p: 12,
        n: 150,
        seed: 4,
        ..Scenario::default()
    };
    let data = synthbench::generate(&s).unwrap();
    let cfg = TrainConfig {
        iters: 40,
        seed: 4,
        ..TrainConfig::default()
    };
    let (model, _) = trainer::fit(&data.x, &data.y, &BasisSpec::default(), 2, &cfg).unwrap();
    let decomp = skimfa::anova::product_decomposition(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = synthbench::evaluate(&decomp, &data.truth, &model.selected(), 5000, &mut rng).unwrap();
    assert!((r.bucket_sum() - r.total_sse).abs() <= 1e-9 * (1.0 + r.total_sse));
    assert_eq!(r.correct_selected + r.wrong_selected + r.correct_not_selected + r.wrong_not_selected, 12);
}

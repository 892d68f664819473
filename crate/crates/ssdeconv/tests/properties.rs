//! Cross-module invariants: filter-interval exactness on Gaussian models,
//! coverage sanity across all four benchmark models, the convolution
//! error-ordering pattern, and property tests over random inputs.

use nalgebra::DMatrix;
use proptest::prelude::*;
use ssdeconv::harness::*;
use ssdeconv::*;

/// The filter interval has asymptotically exact coverage: on a Gaussian
/// model its empirical coverage over 200 replicates stays within three
/// binomial standard deviations of the nominal level.
#[test]
fn filter_interval_coverage_is_exact_on_gaussian_model() {
    let spec = BenchmarkModel::S1.spec();
    let level = 0.95;
    let replicates = 200u64;
    let budget_draws = 100_000usize;
    let mut hits = 0usize;
    for r in 0..replicates {
        let sim = generate_series(&spec, 500, rng::derive(7, r * 16), 1_000).unwrap();
        let budget = McBudget {
            draws: budget_draws,
            seed: rng::derive(7, r * 16 + 4),
            ..McBudget::default()
        };
        // Only the filter operation is needed; quantile-search it directly.
        let b = spec.measurement();
        let radius = {
            let norms = {
                let mut rng = rng::stream(budget.seed, 0);
                let mut buf = [0.0f64];
                let mut v: Vec<f64> = (0..budget.draws)
                    .map(|_| {
                        spec.measurement_noise().sample_into(&mut rng, &mut buf);
                        buf[0].abs()
                    })
                    .collect();
                v.sort_by(|a, c| a.partial_cmp(c).unwrap());
                v
            };
            search_quantile(
                |x| norms.partition_point(|v| *v <= x) as f64 / norms.len() as f64,
                level,
                budget.tol,
                budget.max_doublings,
            )
            .unwrap()
            .quantile
        };
        let y_n = sim.observations.last_observation();
        let x_n = sim.last_state();
        let center = b.clone().try_inverse().unwrap() * y_n;
        if (x_n - center).amax() <= radius {
            hits += 1;
        }
    }
    let coverage = hits as f64 / replicates as f64;
    let sigma = (level * (1.0 - level) / replicates as f64).sqrt();
    assert!(
        (coverage - level).abs() <= 3.0 * sigma,
        "filter coverage {coverage} outside 3 sigma of {level}"
    );
}

/// Gross-error guard: on every benchmark model and every interval kind,
/// estimated coverage (plus three binomial sigma) overlaps [0.80, 1.0] at
/// the 0.95 nominal level, at desk scale.
#[test]
fn coverage_sanity_on_all_benchmark_models() {
    for model in [
        BenchmarkModel::O1,
        BenchmarkModel::S1,
        BenchmarkModel::O2,
        BenchmarkModel::S2,
    ] {
        let two_dim = model.dim() == 2;
        let mut config = ExperimentConfig::new(model, if two_dim { 250 } else { 300 }, 0, 5);
        config.replicates = if two_dim { 10 } else { 30 };
        config.node_count = if two_dim { 1_000 } else { 2_000 };
        config.mc_draws = if two_dim { 4_000 } else { 20_000 };
        config.burn_in = 300;
        let report = run_table2(&config).unwrap_or_else(|e| panic!("{model}: {e}"));
        let sigma = 3.0 * (0.95f64 * 0.05 / config.replicates as f64).sqrt();
        for method in &report.methods {
            for (i, cov) in method.coverage.iter().enumerate() {
                assert!(
                    cov + sigma >= 0.80 && cov - sigma <= 1.0,
                    "{model} {} kind {i}: coverage {cov} incompatible with [0.80, 1.0]",
                    method.method
                );
            }
        }
    }
}

/// Convolving the noise-density estimate with the known measurement law
/// improves it: the predictive-root density errors sit below the raw
/// noise-density error on average.
#[test]
fn convolved_estimators_beat_raw_density_on_average() {
    let mut config = ExperimentConfig::new(BenchmarkModel::S1, 300, 30, 11);
    config.node_count = 2_000;
    config.conv_draws = 1_000;
    config.t2_samples = 10_000;
    config.burn_in = 300;
    let report = run_table1(&config).unwrap();
    assert!(
        report.state_root_err.mean < report.noise_density_err.mean,
        "state-root error {} not below noise-density error {}",
        report.state_root_err.mean,
        report.noise_density_err.mean
    );
    assert!(
        report.obs_root_err.mean < report.noise_density_err.mean,
        "obs-root error {} not below noise-density error {}",
        report.obs_root_err.mean,
        report.noise_density_err.mean
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Moore-Penrose reflexivity on random square matrices. Near-singular
    /// draws legitimately amplify rounding by the pseudo-inverse magnitude,
    /// so the tolerance scales with it.
    #[test]
    fn pseudo_inverse_is_reflexive(entries in proptest::collection::vec(-3.0f64..3.0, 9)) {
        let m = DMatrix::from_row_slice(3, 3, &entries);
        let p = pseudo_inverse(&m);
        let back = &p * &m * &p;
        let scale = (1.0 + p.norm() * m.norm()) * p.norm().max(1.0);
        prop_assert!((back - &p).norm() < 1e-12 * scale);
    }

    /// Characteristic functions are bounded by one and conjugate-symmetric.
    #[test]
    fn char_fn_bounded_and_conjugate_symmetric(
        t in proptest::collection::vec(-6.0f64..6.0, 2),
        sigma in 0.2f64..2.0,
        shape in 0.3f64..3.0,
    ) {
        let families = [
            NoiseFamily::gaussian_iid(2, sigma).unwrap(),
            NoiseFamily::gamma_difference_iid(2, shape, 1.0).unwrap(),
        ];
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        for fam in &families {
            let phi = fam.char_fn(&t);
            let phi_neg = fam.char_fn(&neg);
            prop_assert!(phi.norm() <= 1.0 + 1e-12);
            prop_assert!((phi_neg.re - phi.re).abs() <= 1e-12);
            prop_assert!((phi_neg.im + phi.im).abs() <= 1e-12);
        }
    }

    /// The quantile search respects its Lipschitz error bound on smooth
    /// strictly increasing CDFs.
    #[test]
    fn search_quantile_error_bound(level in 0.05f64..0.99, scale in 0.5f64..4.0) {
        let m = move |x: f64| 1.0 - (-x / scale).exp();
        let res = search_quantile(m, level, 1e-3, 60).unwrap();
        // Lipschitz constant of m is 1/scale.
        prop_assert!((m(res.quantile) - level).abs() <= 1e-3 / scale + 1e-12);
    }
}

/// The interval report JSON wire format carries exactly the documented
/// fields.
#[test]
fn interval_report_wire_format() {
    let eta = NoiseFamily::gaussian_iid(1, 1.0).unwrap();
    let series = ObservationSeries::new(DMatrix::from_column_slice(4, 1, &[0.1, -0.4, 0.9, 0.2]))
        .unwrap();
    let density = TruthDensity(&eta);
    let budget = McBudget {
        draws: 2_000,
        seed: 1,
        ..McBudget::default()
    };
    let reports = predict_intervals(
        &series,
        &DMatrix::identity(1, 1),
        &eta,
        &density,
        &DMatrix::from_element(1, 1, 0.5),
        0.9,
        &budget,
    )
    .unwrap();
    let json = serde_json::to_value(&reports[0]).unwrap();
    let obj = json.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["center", "evaluations", "kind", "level", "radius"]);
    assert_eq!(obj["kind"], "filter");
    let back: IntervalReport = serde_json::from_value(json).unwrap();
    assert_eq!(back.radius, reports[0].radius);
    assert_eq!(back.center, reports[0].center);
}

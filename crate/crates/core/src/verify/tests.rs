use super::*;
use crate::data::{Dataset, DatasetManifest};
use crate::error::Error;
use crate::network::{NetworkConfig, VariantKind};
use crate::ssm::SsmParams;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::TrainConfig;

fn find<'a, T: Real>(cases: &'a [GradCase<T>], name: &str) -> &'a GradCase<T> {
    cases
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no case {name}"))
}

#[test]
fn linear_layer_is_exact_to_rounding() {
    let cases = operation_cases::<f64>();
    let case = find(&cases, "linear");
    let pairs = central_differences(&case.inputs, &*case.build, 1e-6).unwrap();
    for (a, n) in pairs {
        assert!(normwise_error(&a, &n) < 1e-8, "{}", normwise_error(&a, &n));
    }
}

#[test]
fn modulated_scan_passes_at_l6_n4() {
    let cases = operation_cases::<f64>();
    let case = find(&cases, "scan.modulated");
    assert_eq!(case.inputs[0].shape(), &[6, 3]);
    assert_eq!(case.inputs[2].shape(), &[4]);
    let pairs = central_differences(&case.inputs, &*case.build, 1e-6).unwrap();
    let worst = pairs.iter().map(|(a, n)| normwise_error(a, n)).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn every_operation_case_passes_in_f64() {
    let report = grad_check("ops", &operation_cases::<f64>(), GradProfile::F64).unwrap();
    let failed: Vec<_> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| (&c.name, c.observed))
        .collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn every_operation_case_passes_in_f32() {
    let report = grad_check_against(
        "ops32",
        &operation_cases::<f32>(),
        &operation_cases::<f64>(),
        GradProfile::F32,
    )
    .unwrap();
    let failed: Vec<_> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| (&c.name, c.observed))
        .collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn one_block_network_passes_in_f64() {
    let case = network_case::<f64>(VariantKind::FullPc).unwrap();
    let report = grad_check("net", &[case], GradProfile::F64).unwrap();
    assert!(report.passed, "{:?}", report.checks);
}

#[test]
fn mismatched_reference_is_rejected() {
    let mut reference = operation_cases::<f64>();
    reference.swap(0, 1);
    let r = grad_check_against("x", &operation_cases::<f32>(), &reference, GradProfile::F32);
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn non_finite_gradient_is_an_error() {
    let case = GradCase::<f64> {
        name: "log_of_negative".into(),
        inputs: vec![Tensor::full(vec![2], -1.0)],
        build: Box::new(|t: &mut Tape<'_, f64>, v: &[Var]| {
            let l = t.unary(crate::tensor::UnaryKind::Log, v[0])?;
            t.sum(l)
        }),
    };
    let r = grad_check("bad", &[case], GradProfile::F64);
    assert!(matches!(r, Err(Error::NonFinite(_))), "{r:?}");
}

#[test]
fn stepwise_oracle_matches_hand_recurrence() {
    // One channel, one slot, zero weights: step = softplus(0) = ln 2, B = C = 1.
    let mut p = SsmParams::<f64>::zeros(1, 1);
    p.input_bias = vec![1.0];
    p.readout_bias = vec![1.0];
    p.skip = vec![0.0];
    let d = 2f64.ln();
    let decay = (-d).exp();
    let gain = 1.0 - decay;
    let y = stepwise_scan(&[1.0, 0.0], None, &p);
    assert!((y[0] - gain).abs() < 1e-15);
    assert!((y[1] - decay * gain).abs() < 1e-15);
}

#[test]
fn scan_suite_small_grid_passes() {
    let report = scan_oracle_suite(&[1, 2, 3, 17], &[0, 1, 2]).unwrap();
    assert!(report.passed, "{}", render_summary(&[report.clone()]));
    assert_eq!(report.checks.len(), 4 * 3 + 2);
}

#[test]
fn reports_round_trip_through_json_with_nan() {
    let mut r = ProbeReport::new("demo", &[1, 2]);
    r.measure(Some(1), "x", f64::NAN);
    r.measure(None, "y", 2.5);
    r.check("c", "x < 1", 0.5, true, 2);
    r.soft_check("s", "y > 3", 2.5, false, 1);
    assert!(r.passed);
    let back = ProbeReport::from_json(&r.to_json().unwrap()).unwrap();
    assert!(back.values("x")[0].is_nan());
    assert_eq!(back.values("y"), vec![2.5]);
    assert_eq!(back.checks, r.checks);

    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path()).unwrap();
    let mut failing = ProbeReport::new("other", &[]);
    failing.check("hard", "never", 1.0, false, 1);
    assert!(!failing.passed);
    failing.save(dir.path()).unwrap();
    let loaded = load_reports(dir.path()).unwrap();
    assert_eq!(
        loaded.iter().map(|r| r.probe.as_str()).collect::<Vec<_>>(),
        ["demo", "other"]
    );
    let table = render_summary(&loaded);
    assert!(table.contains("warn") && table.contains("FAIL"));
    assert!(table.ends_with("2 probe(s), 1 failed\n"));
}

#[test]
fn seed_majority_needs_two_thirds() {
    assert!(seed_majority(2, 3));
    assert!(!seed_majority(1, 3));
    assert!(seed_majority(1, 1));
    assert!(!seed_majority(0, 0));
}

#[test]
fn quadratic_toy_matches_top_eigenvalue() {
    // f(W) = 0.5 |W x - y|^2 over a 3x3 W has Hessian I (x) x x^T, top eigenvalue |x|^2.
    let x = [0.7, -1.3, 0.4];
    let y = [0.2, 0.1, -0.5];
    let grad = |w: &[f64]| -> crate::error::Result<Vec<f64>> {
        let mut g = vec![0.0; 9];
        for i in 0..3 {
            let r = (0..3).map(|j| w[i * 3 + j] * x[j]).sum::<f64>() - y[i];
            for j in 0..3 {
                g[i * 3 + j] = r * x[j];
            }
        }
        Ok(g)
    };
    let theta = [0.1, 0.2, -0.3, 0.4, 0.0, 0.5, -0.6, 0.7, 0.8];
    let start = [1.0, -0.5, 0.3, 0.2, 0.9, -0.1, 0.4, 0.4, -0.7];
    let est = lipschitz_estimate(&grad, &theta, &[true; 9], &start, 4, 1e-3).unwrap();
    let truth: f64 = x.iter().map(|v| v * v).sum();
    assert!((est.max - truth).abs() <= 0.1 * truth, "{} vs {truth}", est.max);
}

#[test]
fn lipschitz_rejects_zero_radius() {
    let grad = |w: &[f64]| -> crate::error::Result<Vec<f64>> { Ok(w.to_vec()) };
    let r = lipschitz_estimate(&grad, &[1.0], &[true], &[1.0], 2, 0.0);
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn lipschitz_ignores_frozen_coordinates() {
    // Curvature 100 on the frozen coordinate, 2 on the free one.
    let grad = |w: &[f64]| -> crate::error::Result<Vec<f64>> { Ok(vec![100.0 * w[0], 2.0 * w[1]]) };
    let est = lipschitz_estimate(&grad, &[0.3, 0.3], &[false, true], &[1.0, 1.0], 3, 1e-2).unwrap();
    assert!((est.max - 2.0).abs() < 1e-9, "{}", est.max);
}

#[test]
fn trunk_params_exclude_branches() {
    assert!(is_trunk_param("enc0.0.ssm.a_log"));
    assert!(!is_trunk_param("enc0.0.crn.mlp1.w"));
    assert!(!is_trunk_param("enc0.0.fuse.l2.b"));
    assert!(!is_trunk_param("enc0.0.cnn.w"));
}

#[test]
fn variance_needs_two_runs() {
    let runs = vec![vec![vec![0.5, 0.5]]];
    assert!(matches!(variance_and_bias(&runs, &[0]), Err(Error::Precondition(_))));
    let runs = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]];
    let (v, b) = variance_and_bias(&runs, &[0]).unwrap();
    assert!((v - 1.0).abs() < 1e-15 && (b - 0.5).abs() < 1e-15);
}

fn tiny_network(variant: VariantKind) -> NetworkConfig {
    NetworkConfig {
        variant,
        ..one_block_config(variant)
    }
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        lr0: 3e-3,
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn bias_variance_rejects_single_resample() {
    let cfg = BiasVarianceConfig {
        n_resamples: 1,
        ..BiasVarianceConfig::default()
    };
    assert!(matches!(
        bias_variance_probe(&[VariantKind::FullPc], &cfg, &[0]),
        Err(Error::Precondition(_))
    ));
}

fn tiny_bias_variance(dry_run: bool) -> BiasVarianceConfig {
    BiasVarianceConfig {
        network: tiny_network(VariantKind::FullPc),
        train: TrainConfig {
            dry_run,
            epochs: 1,
            ..tiny_train()
        },
        manifest: DatasetManifest {
            height: 32,
            width: 32,
            ..DatasetManifest::default()
        },
        pool_size: 4,
        val_size: 2,
        n_resamples: 3,
        probe_points: 16,
    }
}

#[test]
fn frozen_model_has_zero_variance() {
    let report = bias_variance_probe(
        &[VariantKind::FullPc, VariantKind::PlainE2e],
        &tiny_bias_variance(true),
        &[5],
    )
    .unwrap();
    assert_eq!(report.values("full.variance"), vec![0.0]);
    assert_eq!(report.values("e2e.variance"), vec![0.0]);
    assert!(report.values("full.bias2")[0] > 0.0);
    assert_eq!(report.checks.len(), 1);
}

#[test]
fn trained_models_vary_across_resamples() {
    let report = bias_variance_probe(&[VariantKind::PlainE2e], &tiny_bias_variance(false), &[5]).unwrap();
    assert!(report.values("e2e.variance")[0] > 0.0);
    assert_eq!(report.values("e2e.excluded"), vec![0.0]);
    assert!(report.checks.is_empty());
}

fn tiny_data() -> Dataset {
    Dataset::generate(&DatasetManifest {
        n_samples: 6,
        height: 32,
        width: 32,
        split: [4.0 / 6.0, 2.0 / 6.0, 0.0],
        ..DatasetManifest::default()
    })
    .unwrap()
}

#[test]
fn untrained_variant_records_budget_plus_one() {
    let data = tiny_data();
    let train = TrainConfig {
        dry_run: true,
        ..tiny_train()
    };
    let report = convergence_experiment(
        &[VariantKind::FullPc, VariantKind::PlainE2e],
        &data,
        &tiny_network(VariantKind::FullPc),
        &train,
        0.99,
        1,
        &[3],
    )
    .unwrap();
    assert_eq!(report.values("full.epochs_to"), vec![3.0]);
    assert_eq!(report.values("e2e.epochs_to"), vec![3.0]);
    assert_eq!(report.values("epoch_ratio"), vec![1.0]);
    // Both at the sentinel, within the target: still not a success.
    assert!(!report.passed);
}

#[test]
fn identical_runs_give_identical_curves() {
    let data = tiny_data();
    let run = || {
        convergence_experiment(
            &[VariantKind::FullPc],
            &data,
            &tiny_network(VariantKind::FullPc),
            &tiny_train(),
            0.99,
            1,
            &[4],
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.measurements, b.measurements);
    assert!(a.checks.is_empty());
}

#[test]
fn smoothness_probe_is_deterministic_and_positive() {
    let data = tiny_data();
    let batch = &data.samples[..2];
    let run = || {
        smoothness_probe(
            &[VariantKind::FullPc, VariantKind::PlainE2e],
            batch,
            &tiny_network(VariantKind::FullPc),
            &TrainConfig::default(),
            2,
            1e-3,
            &[1],
        )
        .unwrap()
    };
    let a = run();
    assert_eq!(a.measurements, run().measurements);
    assert!(a.values("full.lipschitz")[0] > 0.0);
    assert!(a.values("lipschitz_ratio")[0].is_finite());
}

#[test]
fn data_efficiency_scales_epochs_by_subset() {
    let data = Dataset::generate(&DatasetManifest {
        n_samples: 12,
        height: 32,
        width: 32,
        split: [10.0 / 12.0, 2.0 / 12.0, 0.0],
        ..DatasetManifest::default()
    })
    .unwrap();
    let train = TrainConfig {
        epochs: 1,
        ..tiny_train()
    };
    let report = data_efficiency_probe(
        VariantKind::PlainE2e,
        &data,
        &tiny_network(VariantKind::PlainE2e),
        &train,
        0.2,
        0.95,
        0,
    )
    .unwrap();
    assert_eq!(report.values("full.samples"), vec![10.0]);
    assert_eq!(report.values("subset.samples"), vec![2.0]);
    assert_eq!(report.values("subset.epochs"), vec![5.0]);
    assert!(report.checks[0].soft);
    assert!(report.passed);
}

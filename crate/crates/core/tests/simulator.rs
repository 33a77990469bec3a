use fedcvlc::pipeline::SCALE_METADATA_BYTES;
use fedcvlc::quantizer::QuantizerKind;
use fedcvlc::sim::fedavg::{self, local_train};
use fedcvlc::sim::model::{Model, ModelSpec};
use fedcvlc::sim::{self, BudgetSpec, CompressorSpec, DataSpec, FLConfig};

fn config(compressor: CompressorSpec, rounds: usize) -> FLConfig {
    FLConfig::from_json(&format!(
        r#"{{
            "n_clients": 10, "clients_per_round": 4, "local_iters": 3,
            "batch_size": 16, "learning_rate": 0.1, "rounds": {rounds}, "seed": 21,
            "data": {{"kind": "synthetic", "n_classes": 4, "n_features": 8,
                      "samples_per_client": 60, "test_samples": 200,
                      "separation": 2.0, "noise": 1.0, "labels_per_client": 2}},
            "model": {{"kind": "mlp", "hidden": 12}},
            "compressor": {},
            "budget": {{"b_bits": 1024, "R": 3}}
        }}"#,
        serde_json::to_string(&compressor).unwrap()
    ))
    .unwrap()
}

#[test]
fn separable_logistic_task_is_learned() {
    let cfg = FLConfig {
        n_clients: 20,
        clients_per_round: 5,
        local_iters: 5,
        batch_size: 20,
        learning_rate: 0.5,
        rounds: 200,
        seed: 1,
        data: DataSpec::Synthetic {
            n_classes: 2,
            n_features: 5,
            samples_per_client: 40,
            test_samples: 400,
            separation: 3.0,
            noise: 0.5,
            labels_per_client: None,
        },
        model: ModelSpec::Logistic,
        compressor: CompressorSpec::None,
        budget: BudgetSpec {
            b_bits: 1024,
            r: 2,
            h_bits: 128,
        },
        quantizer: QuantizerKind::Pq,
        k_stride: 1,
        error_feedback: false,
    };
    let metrics = sim::run_federated(&cfg).unwrap();
    assert_eq!(metrics.len(), 200);
    let best = metrics.iter().map(|m| m.test_accuracy).fold(0.0, f64::max);
    assert!(best >= 0.95, "best accuracy {best}");
}

#[test]
fn same_seed_same_metrics() {
    for c in [CompressorSpec::FedCvlc, CompressorSpec::Fixed { y: 8 }] {
        let a = sim::run_federated(&config(c, 15)).unwrap();
        let b = sim::run_federated(&config(c, 15)).unwrap();
        let rows = |m: &[sim::RoundMetrics]| m.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
        assert_eq!(rows(&a), rows(&b));
        let mut other = config(c, 15);
        other.seed = 22;
        assert_ne!(rows(&a), rows(&sim::run_federated(&other).unwrap()));
    }
}

/// Per client and round, the optimized plan's bound is no larger than that
/// of the 6-bit and 32-bit fixed plans under the same fit and scale.
#[test]
fn bound_never_exceeds_fixed_length_baselines() {
    for kind in [QuantizerKind::Pq, QuantizerKind::Qsgd] {
        let mut cfg = config(CompressorSpec::FedCvlc, 40);
        cfg.quantizer = kind;
        sim::run_federated_traced(&cfg, |t| {
            let mut fixed_mean = 0.0;
            for c in &t.clients {
                let (g6, g32) = c.baseline_gammas.unwrap();
                assert!(
                    c.gamma <= g6 && c.gamma <= g32,
                    "{} vs {g6}, {g32}",
                    c.gamma
                );
                fixed_mean += g6 / t.clients.len() as f64;
            }
            assert!(t.metrics.mean_gamma <= fixed_mean * (1.0 + 1e-12));
        })
        .unwrap();
    }
}

#[test]
fn reported_traffic_is_actual_bytes() {
    for c in [
        CompressorSpec::FedCvlc,
        CompressorSpec::Topk,
        CompressorSpec::Fixed { y: 6 },
        CompressorSpec::None,
    ] {
        let cfg = config(c, 10);
        sim::run_federated_traced(&cfg, |t| {
            let mut total = 0;
            for r in &t.clients {
                let packets: usize = r.packet_sizes.iter().sum();
                let expected = match c {
                    CompressorSpec::FedCvlc => packets + SCALE_METADATA_BYTES,
                    CompressorSpec::None => 4 * t.params.len(),
                    _ => packets,
                };
                assert_eq!(r.bytes, expected);
                assert!(r.packet_sizes.len() <= 3 && r.packet_sizes.iter().all(|&s| s <= 128));
                total += r.bytes as u64;
            }
            assert_eq!(t.metrics.uplink_bytes_total, total);
        })
        .unwrap();
    }
}

#[test]
fn error_feedback_runs_deterministically() {
    let mut cfg = config(CompressorSpec::FedCvlc, 12);
    cfg.error_feedback = true;
    let a = sim::run_federated(&cfg).unwrap();
    let b = sim::run_federated(&cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|m| m.train_loss.is_finite()));
}

/// One full-batch step returns `lr * grad`, and the gradient agrees with
/// central differences of the loss.
#[test]
fn one_full_batch_step_is_scaled_gradient() {
    let data = DataSpec::Synthetic {
        n_classes: 3,
        n_features: 4,
        samples_per_client: 15,
        test_samples: 0,
        separation: 1.0,
        noise: 1.0,
        labels_per_client: None,
    }
    .build(1, 3)
    .unwrap();
    let ds = &data.clients[0];
    for spec in [ModelSpec::Logistic, ModelSpec::Mlp { hidden: 4 }] {
        let model = Model::new(spec, 4, 3);
        let w: Vec<f64> = (0..model.num_params())
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 10.0)
            .collect();
        let lr = 0.3;
        let u = local_train(&model, &w, ds, 1, 1000, lr, 0).unwrap();
        let h = 1e-5;
        for (i, ui) in u.values().iter().enumerate() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += h;
            wm[i] -= h;
            let fd = lr * (model.loss(&wp, ds) - model.loss(&wm, ds)) / (2.0 * h);
            assert!(
                (ui - fd).abs() <= 1e-4 * fd.abs().max(1e-3 * lr),
                "{spec:?} [{i}]: {ui} vs {fd}"
            );
        }
    }
}

#[test]
fn sampled_clients_are_distinct() {
    for t in 0..50 {
        let s = fedavg::sample_clients(20, 5, 9, t);
        assert_eq!(s.len(), 5);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(s.iter().all(|&c| c < 20));
    }
}

use tost_core::harness::{
    baseline_sdpa, bench_scaling, layerwise_experiment, sdpa_weights, synth_subspaces, BankMode,
    BenchConfig, BenchOp, LayerwiseConfig, SynthSpec,
};
use tost_core::linalg::Matrix;

fn layerwise(seed: u64, layers: usize, mode: BankMode, normalize: bool) -> LayerwiseConfig {
    LayerwiseConfig {
        synth: SynthSpec {
            d: 16,
            p: 4,
            k: 4,
            tokens_per_group: 12,
            noise_std: 0.0,
            seed,
        },
        layers,
        tau: 1e-2 / 16.0,
        eta: 1.0,
        epsilon: 1.0,
        mode,
        normalize_membership: normalize,
        bank_seed: seed + 100,
    }
}

#[test]
fn oracle_trace_decreases_on_separated_groups() {
    for seed in 0..10 {
        for normalize in [true, false] {
            let trace = layerwise_experiment(&layerwise(seed, 8, BankMode::Oracle, normalize)).unwrap();
            assert_eq!(trace.rows.len(), 9);
            for w in trace.rows.windows(2) {
                if w[0].grad_norm >= 1e-9 {
                    assert!(w[1].compression_var < w[0].compression_var, "seed {seed}: {w:?}");
                }
            }
            assert!(trace.total_decrease() >= 1e-4);
        }
    }
}

#[test]
fn single_layer_oracle_step() {
    let trace = layerwise_experiment(&layerwise(3, 1, BankMode::Oracle, true)).unwrap();
    assert!(trace.rows[1].compression_var <= trace.rows[0].compression_var + 1e-9);
}

#[test]
fn fixed_mode_emits_full_trace() {
    let trace = layerwise_experiment(&layerwise(1, 5, BankMode::Fixed, true)).unwrap();
    assert_eq!(trace.rows.len(), 6);
    assert!(trace.rows.iter().all(|r| r.compression_var.is_finite()));
    assert_eq!(layerwise_experiment(&layerwise(1, 0, BankMode::Fixed, true)).unwrap().rows.len(), 1);
}

#[test]
fn noisy_data_still_runs() {
    let mut config = layerwise(2, 4, BankMode::Oracle, true);
    config.synth.noise_std = 0.05;
    let trace = layerwise_experiment(&config).unwrap();
    assert!(trace.rows.iter().all(|r| r.compression_var.is_finite()));
}

#[test]
fn sdpa_matches_naive_softmax_attention() {
    let data = synth_subspaces(&SynthSpec {
        d: 6,
        p: 2,
        k: 3,
        tokens_per_group: 3,
        noise_std: 0.1,
        seed: 4,
    })
    .unwrap();
    let z = &data.tokens;
    let wq = Matrix::from_fn(6, 2, |r, c| ((r + 2 * c) as f64 * 0.7).sin());
    let wk = Matrix::from_fn(6, 2, |r, c| ((3 * r + c) as f64 * 0.3).cos());
    let wv = Matrix::from_fn(6, 2, |r, c| (r as f64 - c as f64) * 0.2);
    let q = wq.t_matmul(z).unwrap();
    let k = wk.t_matmul(z).unwrap();
    let v = wv.t_matmul(z).unwrap();
    let n = z.cols();
    let mut want = Matrix::zeros(2, n);
    for a in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|b| (q[(0, a)] * k[(0, b)] + q[(1, a)] * k[(1, b)]) / 2f64.sqrt())
            .collect();
        let total: f64 = logits.iter().map(|x| x.exp()).sum();
        for b in 0..n {
            let w = logits[b].exp() / total;
            for i in 0..2 {
                want[(i, a)] += w * v[(i, b)];
            }
        }
    }
    let got = baseline_sdpa(z, &wq, &wk, &wv).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-12);
    let weights = sdpa_weights(z, &wq, &wk).unwrap();
    for a in 0..n {
        assert!((weights.row(a).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn bench_report_shape() {
    let config = BenchConfig {
        ops: vec![BenchOp::Tssa, BenchOp::Sdpa],
        ns: vec![32, 64, 128],
        d: 8,
        k: 2,
        p: 2,
        ..BenchConfig::default()
    };
    let reports = bench_scaling(&config).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.cells.len(), 3);
        assert!(r.slope.is_finite());
        assert!(r.cells.iter().all(|c| c.median_s > 0.0 && c.iqr_s >= 0.0));
    }
}

use anyhow::{bail, Context};
use serde::Serialize;
use tost_core::coding_rate::SpectralFn;
use tost_core::harness::{
    bench_scaling, layerwise_experiment, scaling_checks, BankMode, BenchConfig, BenchOp,
    LayerwiseConfig, SynthSpec,
};
use tost_core::linalg::Matrix;
use tost_core::model::{init_model, load_model, model_forward, save_model, InitMode};
use tost_core::par;
use tost_core::verify::{
    bound_check, equivalence_suite, grad_check, BankKind, BoundConfig, EquivalenceConfig,
    GradConfig,
};

use crate::args::{
    BankModeArg, BenchArgs, BoundArgs, Command, Format, ForwardArgs, GradArgs, LayerwiseArgs,
    MembershipArg, Precision, RunArgs, RunConfig,
};
use crate::report::{Report, SCHEMA_VERSION};

/// Slack allowed on consecutive entries of an oracle-mode trace.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// `Ok(true)` on pass, `Ok(false)` on an assertion failure, `Err` on a usage or precondition error.
pub fn dispatch(command: &Command) -> anyhow::Result<bool> {
    let cfg = command.run_args().resolve()?;
    let name = command.name();
    match command {
        Command::BoundCheck(a) => bound(name, a, &cfg),
        Command::GradCheck(a) => grad(name, a, &cfg),
        Command::Equivalence(a) => equivalence(name, a, &cfg),
        Command::Layerwise(a) => layerwise(name, a, &cfg),
        Command::Bench(a) => bench(name, a, &cfg),
        Command::Forward(a) => forward(name, a, &cfg),
    }
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

struct Common {
    seed: u64,
    threads: usize,
    format: Format,
}

impl Common {
    fn new(cfg: &RunConfig, default_threads: usize) -> Self {
        Self {
            seed: cfg.seed.unwrap_or(0),
            threads: cfg.threads.unwrap_or(default_threads),
            format: cfg.format.unwrap_or(Format::Csv),
        }
    }

    fn emit<C: Serialize, S: Serialize, R: Serialize>(
        &self,
        command: &str,
        cfg: &RunConfig,
        pass: bool,
        config: C,
        summary: S,
        rows: Vec<R>,
    ) -> anyhow::Result<bool> {
        let report = Report {
            schema_version: SCHEMA_VERSION,
            command,
            seed: self.seed,
            threads: self.threads,
            pass,
            config,
            summary,
            rows,
        };
        report.write(self.format, cfg.output.as_deref())?;
        Ok(pass)
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

#[derive(Serialize)]
struct BoundRow {
    trial: usize,
    kind: BankKind,
    d: usize,
    n: usize,
    k: usize,
    p: usize,
    gap: f64,
    oracle_gap: f64,
    seed: u64,
}

#[derive(Serialize)]
struct BoundSummary {
    trials: usize,
    min_gap: f64,
    max_abs_oracle_gap: f64,
    violations: usize,
}

fn bound(name: &str, _args: &BoundArgs, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = Common::new(cfg, default_threads());
    let defaults = BoundConfig::default();
    let config = BoundConfig {
        trials: cfg.trials.unwrap_or(defaults.trials),
        seed: common.seed,
        max_d: cfg.d.unwrap_or(defaults.max_d),
        max_n: cfg.n.unwrap_or(defaults.max_n),
        max_k: cfg.k.unwrap_or(defaults.max_k),
    };
    let report = par::with_threads(common.threads, || bound_check(&config))?;
    let pass = report.pass();
    eprintln!(
        "# tost {name} seed={} trials={} min_gap={:e} max_abs_oracle_gap={:e} violations={} {}",
        common.seed,
        config.trials,
        report.min_gap,
        report.max_abs_oracle_gap,
        report.violations,
        verdict(pass)
    );
    let summary = BoundSummary {
        trials: config.trials,
        min_gap: report.min_gap,
        max_abs_oracle_gap: report.max_abs_oracle_gap,
        violations: report.violations,
    };
    let rows = report
        .trials
        .iter()
        .map(|t| BoundRow {
            trial: t.trial,
            kind: t.kind,
            d: t.d,
            n: t.n,
            k: t.k,
            p: t.p,
            gap: t.gap,
            oracle_gap: t.oracle_gap,
            seed: common.seed,
        })
        .collect();
    common.emit(name, cfg, pass, config, summary, rows)
}

#[derive(Serialize)]
struct GradRow {
    trial: usize,
    d: usize,
    n: usize,
    k: usize,
    p: usize,
    max_rel_error: f64,
    seed: u64,
}

#[derive(Serialize)]
struct GradSummary {
    trials: usize,
    max_rel_error: f64,
    tolerance: f64,
    failures: usize,
}

fn grad(name: &str, args: &GradArgs, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = Common::new(cfg, default_threads());
    let defaults = GradConfig::default();
    let config = GradConfig {
        trials: cfg.trials.unwrap_or(defaults.trials),
        seed: common.seed,
        max_d: cfg.d.unwrap_or(defaults.max_d),
        max_n: cfg.n.unwrap_or(defaults.max_n),
        max_k: cfg.k.unwrap_or(defaults.max_k),
        flip_sign: args.flip_sign,
        ..defaults
    };
    let report = par::with_threads(common.threads, || grad_check(&config))?;
    let pass = report.pass();
    eprintln!(
        "# tost {name} seed={} trials={} max_rel_error={:e} flip_sign={} {}",
        common.seed,
        config.trials,
        report.max_rel_error,
        config.flip_sign,
        verdict(pass)
    );
    let summary = GradSummary {
        trials: config.trials,
        max_rel_error: report.max_rel_error,
        tolerance: tost_core::verify::GRAD_TOL,
        failures: report.failures,
    };
    let rows = report
        .trials
        .iter()
        .map(|t| GradRow {
            trial: t.trial,
            d: t.d,
            n: t.n,
            k: t.k,
            p: t.p,
            max_rel_error: t.max_rel_error,
            seed: common.seed,
        })
        .collect();
    common.emit(name, cfg, pass, config, summary, rows)
}

#[derive(Serialize)]
struct CheckRow<'a> {
    check: &'a str,
    trials: usize,
    worst: f64,
    threshold: f64,
    failures: usize,
    pass: bool,
    seed: u64,
}

fn equivalence(name: &str, _args: &RunArgs, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = Common::new(cfg, default_threads());
    let defaults = EquivalenceConfig::default();
    let config = EquivalenceConfig {
        trials: cfg.trials.unwrap_or(defaults.trials),
        seed: common.seed,
        max_d: cfg.d.unwrap_or(defaults.max_d),
        max_n: cfg.n.unwrap_or(defaults.max_n),
        max_k: cfg.k.unwrap_or(defaults.max_k),
    };
    let report = par::with_threads(common.threads, || equivalence_suite(&config))?;
    let pass = report.pass();
    eprintln!("# tost {name} seed={} trials={} {}", common.seed, config.trials, verdict(pass));
    for c in &report.checks {
        eprintln!("#   {:<26} worst={:e} threshold={:e} {}", c.name, c.worst, c.threshold, verdict(c.pass()));
    }
    let rows: Vec<CheckRow> = report
        .checks
        .iter()
        .map(|c| CheckRow {
            check: &c.name,
            trials: c.trials,
            worst: c.worst,
            threshold: c.threshold,
            failures: c.failures,
            pass: c.pass(),
            seed: common.seed,
        })
        .collect();
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.check).collect();
    common.emit(name, cfg, pass, config, serde_json::json!({ "failed_checks": failed }), rows)
}

#[derive(Serialize)]
struct LayerRow {
    layer: usize,
    compression_var: f64,
    expansion: f64,
    grad_norm: f64,
    seed: u64,
}

#[derive(Serialize)]
struct LayerSummary {
    monotone: Option<bool>,
    max_increase: Option<f64>,
    total_decrease: f64,
    slack: f64,
}

fn layerwise(name: &str, args: &LayerwiseArgs, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = Common::new(cfg, default_threads());
    let d = cfg.d.unwrap_or(16);
    let k = cfg.k.unwrap_or(4);
    let n = cfg.n.unwrap_or(48);
    if !n.is_multiple_of(k) {
        bail!("--n ({n}) must be a multiple of --k ({k}) for balanced groups");
    }
    let epsilon = cfg.epsilon.unwrap_or(1.0);
    let alpha = d as f64 / (epsilon * epsilon);
    let mode = match args.mode {
        BankModeArg::Oracle => BankMode::Oracle,
        BankModeArg::Fixed => BankMode::Fixed,
    };
    let config = LayerwiseConfig {
        synth: SynthSpec {
            d,
            p: cfg.p.unwrap_or(4),
            k,
            tokens_per_group: n / k,
            noise_std: cfg.noise_std.unwrap_or(0.0),
            seed: common.seed,
        },
        layers: cfg.layers.unwrap_or(8),
        tau: cfg.tau.unwrap_or(1e-2 / alpha),
        eta: cfg.eta.unwrap_or(1.0),
        epsilon,
        mode,
        normalize_membership: args.membership == MembershipArg::Normalized,
        bank_seed: common.seed.wrapping_add(1),
    };
    let trace = par::with_threads(common.threads, || layerwise_experiment(&config))?;
    let checked = mode == BankMode::Oracle;
    let monotone = trace.is_non_increasing(MONOTONE_SLACK);
    let pass = !checked || monotone;
    eprintln!(
        "# tost {name} seed={} mode={:?} layers={} total_decrease={:e} {}",
        common.seed,
        mode,
        config.layers,
        trace.total_decrease(),
        if checked { verdict(pass) } else { "UNCHECKED" }
    );
    let summary = LayerSummary {
        monotone: checked.then_some(monotone),
        max_increase: (trace.rows.len() > 1).then(|| trace.max_increase()),
        total_decrease: trace.total_decrease(),
        slack: MONOTONE_SLACK,
    };
    let rows = trace
        .rows
        .iter()
        .map(|r| LayerRow {
            layer: r.layer,
            compression_var: r.compression_var,
            expansion: r.expansion,
            grad_norm: r.grad_norm,
            seed: common.seed,
        })
        .collect();
    common.emit(name, cfg, pass, config, summary, rows)
}

#[derive(Serialize)]
struct BenchRow {
    op: BenchOp,
    n: usize,
    median_s: f64,
    iqr_s: f64,
    peak_bytes: Option<u64>,
    slope: f64,
    threads: usize,
    seed: u64,
}

fn bench(name: &str, args: &BenchArgs, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = Common::new(cfg, 1);
    let ops = args
        .ops
        .iter()
        .map(|s| s.parse::<BenchOp>())
        .collect::<Result<Vec<_>, _>>()?;
    let config = BenchConfig {
        ops,
        ns: args.ns.clone(),
        d: cfg.d.unwrap_or(128),
        k: cfg.k.unwrap_or(8),
        p: cfg.p.unwrap_or(16),
        reps: args.reps,
        threads: common.threads,
        seed: common.seed,
    };
    let reports = bench_scaling(&config)?;
    let checks = scaling_checks(&reports);
    let all_pass = checks.iter().all(|c| c.pass);
    let pass = !args.assert || all_pass;
    eprintln!("# tost {name} seed={} threads={} precision=double", common.seed, common.threads);
    for r in &reports {
        eprintln!("#   {:<12} slope={:.3}", r.op.name(), r.slope);
    }
    for c in checks.iter().filter(|c| !c.pass) {
        eprintln!("#   {} {} = {:.3} outside [{}, {}]", c.op.name(), c.name, c.value, c.lo, c.hi);
    }
    let rows = reports
        .iter()
        .flat_map(|r| {
            r.cells.iter().map(|c| BenchRow {
                op: r.op,
                n: c.n,
                median_s: c.median_s,
                iqr_s: c.iqr_s,
                peak_bytes: c.peak_bytes,
                slope: r.slope,
                threads: r.threads,
                seed: common.seed,
            })
        })
        .collect();
    let summary = serde_json::json!({
        "precision": Precision::Double,
        "asserted": args.assert,
        "windows_pass": all_pass,
        "checks": checks,
    });
    common.emit(name, cfg, pass, config, summary, rows)
}

#[derive(Serialize)]
struct ForwardRow {
    layer: usize,
    compression_var: f64,
    expansion: f64,
    seed: u64,
}

fn forward(name: &str, args: &ForwardArgs, cfg: &RunConfig) -> anyhow::Result<bool> {
    let common = Common::new(cfg, default_threads());
    let mut model = match &args.model {
        Some(path) => load_model(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let d = cfg.d.unwrap_or(16);
            let mode = if args.attention_only { InitMode::OracleReady } else { InitMode::Random };
            init_model(
                d,
                cfg.p.unwrap_or(4),
                cfg.k.unwrap_or(4),
                cfg.h.unwrap_or(4 * d),
                cfg.layers.unwrap_or(4),
                common.seed,
                mode,
            )?
        }
    };
    if args.causal {
        model.make_causal(None);
    }
    for block in &mut model.layers {
        let base = block.attention.base_mut();
        if let Some(tau) = cfg.tau {
            base.tau = tau;
        }
        if let Some(eta) = cfg.eta {
            base.eta = eta;
        }
        if let Some(eps) = cfg.epsilon {
            base.f = SpectralFn::from_epsilon(model.dims.d, eps)?;
        }
    }
    if let Some(path) = &args.save_model {
        save_model(&model, path).with_context(|| format!("saving {}", path.display()))?;
    }
    let n = cfg.n.unwrap_or(64);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(common.seed);
    let z = Matrix::gaussian(model.dims.d, n, &mut rng);
    let (out, trace) = par::with_threads(common.threads, || model_forward(&z, &model, true))?;
    let trace = trace.unwrap_or_default();
    eprintln!(
        "# tost {name} seed={} layers={} n={n} output_norm={:e}",
        common.seed,
        model.depth(),
        out.frobenius()
    );
    let rows = trace
        .iter()
        .map(|r| ForwardRow {
            layer: r.layer,
            compression_var: r.compression_var,
            expansion: r.expansion,
            seed: common.seed,
        })
        .collect();
    let summary = serde_json::json!({ "n": n, "output_frobenius": out.frobenius(), "dims": model.dims });
    let config = serde_json::json!({ "causal": args.causal, "attention_only": args.attention_only, "loaded": args.model.is_some() });
    common.emit(name, cfg, true, config, summary, rows)
}

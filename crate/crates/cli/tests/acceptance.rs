//! Acceptance suite: one PASS/FAIL line per criterion, at the stated
//! tolerances and runtime limits. Exits non-zero if any criterion fails.

use std::process::Command;
use std::time::{Duration, Instant};

use serde_json::Value;
use tost_core::alloc_track::CountingAllocator;
use tost_core::harness::{
    bench_scaling, layerwise_experiment, scaling_checks, BankMode, BenchConfig, LayerwiseConfig,
    SynthSpec,
};
use tost_core::verify::{
    bound_check, causality_check, descent_check, equivalence_suite, grad_check, strictness_check,
    BoundConfig, CheckResult, EquivalenceConfig, EquivalenceReport, GradConfig,
};

#[global_allocator]
static ALLOC: CountingAllocator = CountingAllocator;

const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn criterion(
    id: u32,
    title: &str,
    limit: Option<Duration>,
    f: impl FnOnce() -> Outcome,
) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let pass = out.pass && in_time;
    let timing = match limit {
        Some(l) => format!("{:.2}s (limit {}s)", elapsed.as_secs_f64(), l.as_secs()),
        None => format!("{:.2}s", elapsed.as_secs_f64()),
    };
    println!(
        "[{}] criterion {id:>2}: {title} — {}; {timing}",
        if pass { "PASS" } else { "FAIL" },
        out.detail
    );
    pass
}

fn check<'a>(report: &'a EquivalenceReport, name: &str) -> &'a CheckResult {
    report.checks.iter().find(|c| c.name == name).expect("check present")
}

fn describe(c: &CheckResult) -> String {
    format!("{} worst={:.2e} (≤ {:.0e}) over {} trials", c.name, c.worst, c.threshold, c.trials)
}

fn c1() -> Outcome {
    match bound_check(&BoundConfig {
        trials: 1000,
        seed: SEED,
        max_d: 12,
        max_n: 20,
        max_k: 4,
    }) {
        Ok(r) => {
            let low_rank = r.trials.iter().filter(|t| t.p < t.d).count();
            Outcome::new(
                r.pass(),
                format!(
                    "1000 trials ({low_rank} with p < d), violations={}, min gap={:.2e}, max |oracle gap|={:.2e}",
                    r.violations, r.min_gap, r.max_abs_oracle_gap
                ),
            )
        }
        Err(e) => Outcome::error(e),
    }
}

fn c2() -> Outcome {
    match strictness_check(100, SEED) {
        Ok(r) => {
            let min_off = r.off_diagonals.iter().copied().fold(f64::INFINITY, f64::min);
            Outcome::new(
                r.failures == 0,
                format!(
                    "100 non-diagonalizing banks (min off-diagonal {min_off:.2e}), min gap={:.2e} (> 1e-6), failures={}",
                    r.min_gap, r.failures
                ),
            )
        }
        Err(e) => Outcome::error(e),
    }
}

fn c3() -> Outcome {
    match grad_check(&GradConfig {
        trials: 100,
        seed: SEED,
        ..GradConfig::default()
    }) {
        Ok(r) => Outcome::new(
            r.pass() && r.max_rel_error <= 1e-5,
            format!("100 instances (d ≤ 8, n ≤ 10), max relative error={:.2e} (≤ 1e-5)", r.max_rel_error),
        ),
        Err(e) => Outcome::error(e),
    }
}

fn c4(eq: &EquivalenceReport) -> Outcome {
    let a = check(eq, "gradient_identity");
    let b = check(eq, "per_token_form");
    Outcome::new(a.pass() && b.pass(), format!("{}; {}", describe(a), describe(b)))
}

fn c5(eq: &EquivalenceReport) -> Outcome {
    let causality = match causality_check(50, SEED, 32) {
        Ok(c) => c,
        Err(e) => return Outcome::error(e),
    };
    let prefix = check(eq, "causal_prefix_oracle");
    let stream = check(eq, "streaming_consistency");
    Outcome::new(
        causality.pass() && prefix.pass() && stream.pass(),
        format!(
            "causality bitwise on {} instances (n ≤ 32, all j): {} mismatches; {}; streaming bitwise mismatches={}",
            causality.trials,
            causality.failures,
            describe(prefix),
            stream.failures
        ),
    )
}

fn c6(eq: &EquivalenceReport) -> Outcome {
    let c = check(eq, "permutation_equivariance");
    Outcome::new(c.pass(), format!("all 21 transpositions at n = 7, attention and membership: {}", describe(c)))
}

fn c7() -> Outcome {
    let mut worst_increase = f64::NEG_INFINITY;
    let mut min_decrease = f64::INFINITY;
    let mut pass = true;
    let seeds = 0..5u64;
    for seed in seeds.clone() {
        let config = LayerwiseConfig {
            synth: SynthSpec {
                d: 16,
                p: 4,
                k: 4,
                tokens_per_group: 12,
                noise_std: 0.0,
                seed,
            },
            layers: 8,
            tau: 1e-2 / 16.0,
            eta: 1.0,
            epsilon: 1.0,
            mode: BankMode::Oracle,
            normalize_membership: true,
            bank_seed: seed + 1,
        };
        match layerwise_experiment(&config) {
            Ok(t) => {
                worst_increase = worst_increase.max(t.max_increase());
                min_decrease = min_decrease.min(t.total_decrease());
                pass &= t.is_non_increasing(1e-9) && t.total_decrease() >= 1e-4;
            }
            Err(e) => return Outcome::error(e),
        }
    }
    Outcome::new(
        pass,
        format!(
            "{} seeds, 8 layers: largest step increase={worst_increase:.2e} (≤ 1e-9), smallest total decrease={min_decrease:.2e} (≥ 1e-4)",
            seeds.count()
        ),
    )
}

fn c8() -> Outcome {
    let reports = match bench_scaling(&BenchConfig::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let checks = scaling_checks(&reports);
    let slopes: Vec<String> = reports.iter().map(|r| format!("{} slope={:.3}", r.op.name(), r.slope)).collect();
    let memory: Vec<String> = checks
        .iter()
        .filter(|c| c.name.starts_with("memory 4096"))
        .map(|c| format!("{} {}={:.2}x", c.op.name(), c.name, c.value))
        .collect();
    let has_memory = checks.iter().filter(|c| c.name.starts_with("memory")).count() >= 3;
    Outcome::new(
        has_memory && checks.iter().all(|c| c.pass),
        format!("{}; {}", slopes.join(", "), memory.join(", ")),
    )
}

fn c9() -> Outcome {
    match descent_check(100, SEED) {
        Ok(r) => {
            let min_drop = r
                .trials
                .iter()
                .filter(|t| !t.skipped)
                .map(|t| t.before - t.after)
                .fold(f64::INFINITY, f64::min);
            Outcome::new(
                r.pass(),
                format!(
                    "100 instances, τ ≤ 1e-3/α: failures={}, skipped={}, smallest decrease={min_drop:.2e}",
                    r.failures, r.skipped
                ),
            )
        }
        Err(e) => Outcome::error(e),
    }
}

fn tost(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tost"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.code() != Some(0) {
        return Err(format!("{args:?} exited with {:?}", out.status.code()));
    }
    Ok(out.stdout)
}

/// Drops wall-clock fields from a bench report.
fn strip_timing(mut v: Value) -> Value {
    if let Some(rows) = v["rows"].as_array_mut() {
        for row in rows {
            let obj = row.as_object_mut().expect("row object");
            for key in ["median_s", "iqr_s", "slope"] {
                obj.remove(key);
            }
        }
    }
    if let Some(obj) = v.as_object_mut() {
        obj.remove("summary");
        obj.remove("pass");
    }
    v
}

fn c10() -> Outcome {
    let runs: &[&[&str]] = &[
        &["bound-check", "--seed", "7", "--trials", "200"],
        &["grad-check", "--seed", "7", "--trials", "30"],
        &["equivalence", "--seed", "7", "--trials", "30"],
        &["layerwise", "--seed", "7"],
        &["layerwise", "--seed", "7", "--mode", "fixed", "--membership", "plain"],
        &["forward", "--seed", "7", "--layers", "3", "--causal"],
    ];
    let mut compared = 0;
    for args in runs {
        for format in ["csv", "json"] {
            let full = [*args, &["--format", format]].concat();
            match (tost(&full), tost(&full)) {
                (Ok(a), Ok(b)) if a == b && !a.is_empty() => compared += 1,
                (Ok(_), Ok(_)) => return Outcome::new(false, format!("{full:?} differs between runs")),
                (Err(e), _) | (_, Err(e)) => return Outcome::new(false, e),
            }
        }
    }
    let bench = ["bench", "--seed", "7", "--ns", "64,128,256", "--d", "16", "--k", "2", "--p", "4", "--format", "json"];
    let parse = |bytes: Vec<u8>| serde_json::from_slice::<Value>(&bytes).map(strip_timing);
    match (tost(&bench).map(parse), tost(&bench).map(parse)) {
        (Ok(Ok(a)), Ok(Ok(b))) if a == b => compared += 1,
        (Ok(Ok(_)), Ok(Ok(_))) => return Outcome::new(false, "bench structure differs between runs"),
        _ => return Outcome::new(false, "bench run failed"),
    }
    Outcome::new(
        true,
        format!("{compared} seeded reports byte-identical across two runs (bench compared without timing fields)"),
    )
}

fn main() {
    let mut results = Vec::new();
    results.push(criterion(1, "variational bound", Some(Duration::from_secs(30)), c1));
    results.push(criterion(2, "equality characterization", None, c2));
    results.push(criterion(3, "gradient", Some(Duration::from_secs(10)), c3));

    let suite_start = Instant::now();
    let eq = equivalence_suite(&EquivalenceConfig {
        trials: 100,
        seed: SEED,
        max_d: 8,
        max_n: 32,
        max_k: 3,
    });
    let suite = format!("shared identity suite {:.2}s", suite_start.elapsed().as_secs_f64());
    let with_suite = |o: Outcome| Outcome::new(o.pass, format!("{} ({suite})", o.detail));
    match &eq {
        Ok(eq) => {
            results.push(criterion(4, "operator identities", None, || with_suite(c4(eq))));
            results.push(criterion(5, "causality", None, || with_suite(c5(eq))));
            results.push(criterion(6, "permutation equivariance", None, || with_suite(c6(eq))));
        }
        Err(e) => {
            for (id, title) in [(4, "operator identities"), (5, "causality"), (6, "permutation equivariance")] {
                results.push(criterion(id, title, None, || Outcome::error(e)));
            }
        }
    }
    results.push(criterion(7, "layer-wise compression", Some(Duration::from_secs(10)), c7));
    results.push(criterion(8, "complexity", Some(Duration::from_secs(300)), c8));
    results.push(criterion(9, "descent property", None, c9));
    results.push(criterion(10, "determinism", None, c10));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}

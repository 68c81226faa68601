use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alloc_track::measure_peak;
use crate::causal::{causal_tssa_attention, CausalParams};
use crate::coding_rate::ProjectionBank;
use crate::error::{Result, TostError};
use crate::linalg::Matrix;
use crate::par;
use crate::tssa::{tssa_attention, TssaParams};

use super::sdpa::baseline_sdpa;

/// Minimum number of timed repetitions per grid cell.
pub const MIN_REPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchOp {
    Tssa,
    CausalTssa,
    Sdpa,
}

impl BenchOp {
    pub const ALL: [BenchOp; 3] = [BenchOp::Tssa, BenchOp::CausalTssa, BenchOp::Sdpa];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Tssa => "tssa",
            BenchOp::CausalTssa => "causal_tssa",
            BenchOp::Sdpa => "sdpa",
        }
    }
}

impl std::str::FromStr for BenchOp {
    type Err = TostError;

    fn from_str(s: &str) -> Result<Self> {
        BenchOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| TostError::Config(format!("unknown operator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ops: Vec<BenchOp>,
    pub ns: Vec<usize>,
    pub d: usize,
    pub k: usize,
    pub p: usize,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ops: BenchOp::ALL.to_vec(),
            ns: vec![1024, 2048, 4096, 8192, 16384],
            d: 128,
            k: 8,
            p: 16,
            reps: MIN_REPS,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub n: usize,
    /// Median wall time in seconds.
    pub median_s: f64,
    /// Interquartile range of the wall time in seconds.
    pub iqr_s: f64,
    /// Peak bytes allocated by the operator call, when allocation accounting is active.
    pub peak_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub op: BenchOp,
    pub d: usize,
    pub k: usize,
    pub p: usize,
    pub reps: usize,
    pub threads: usize,
    pub cells: Vec<BenchCell>,
    /// Least-squares slope of `log(median time)` against `log n`.
    pub slope: f64,
}

impl BenchReport {
    /// `peak(n_to) / peak(n_from)`, if both cells exist and were measured.
    pub fn memory_growth(&self, n_from: usize, n_to: usize) -> Option<f64> {
        let peak = |n| {
            self.cells
                .iter()
                .find(|c| c.n == n)
                .and_then(|c| c.peak_bytes)
        };
        growth_ratio(peak(n_from)?, peak(n_to)?)
    }
}

pub fn growth_ratio(from: u64, to: u64) -> Option<f64> {
    (from > 0).then(|| to as f64 / from as f64)
}

/// Ordinary least-squares slope of `ln y` on `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let m = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / m;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = logs.iter().map(|&(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|&(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

struct Inputs {
    z: Matrix,
    bank: ProjectionBank,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
}

fn inputs(config: &BenchConfig, n: usize) -> Result<Inputs> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (n as u64).wrapping_mul(0x9E37_79B9));
    let w_scale = 1.0 / (config.d as f64).sqrt();
    Ok(Inputs {
        z: Matrix::gaussian(config.d, n, &mut rng),
        bank: ProjectionBank::random_orthonormal(config.d, config.p, config.k, config.seed)?,
        wq: Matrix::gaussian(config.d, config.p, &mut rng).scale(w_scale),
        wk: Matrix::gaussian(config.d, config.p, &mut rng).scale(w_scale),
        wv: Matrix::gaussian(config.d, config.p, &mut rng).scale(w_scale),
    })
}

fn run_op(op: BenchOp, x: &Inputs, tssa: &TssaParams, causal: &CausalParams) -> Result<Matrix> {
    match op {
        BenchOp::Tssa => tssa_attention(&x.z, &x.bank, tssa),
        BenchOp::CausalTssa => causal_tssa_attention(&x.z, &x.bank, causal),
        BenchOp::Sdpa => baseline_sdpa(&x.z, &x.wq, &x.wk, &x.wv),
    }
}

fn bench_cell(op: BenchOp, config: &BenchConfig, n: usize) -> Result<BenchCell> {
    let x = inputs(config, n)?;
    let tssa = TssaParams::new(config.d);
    let causal = CausalParams::new(tssa.clone());
    // warm-up doubles as the allocation measurement
    let (warm, peak) = measure_peak(|| run_op(op, &x, &tssa, &causal));
    drop(warm?);
    let mut times = Vec::with_capacity(config.reps);
    for _ in 0..config.reps {
        let start = Instant::now();
        let out = run_op(op, &x, &tssa, &causal)?;
        times.push(start.elapsed().as_secs_f64().max(1e-9));
        drop(out);
    }
    times.sort_by(f64::total_cmp);
    Ok(BenchCell {
        n,
        median_s: quantile(&times, 0.5),
        iqr_s: quantile(&times, 0.75) - quantile(&times, 0.25),
        peak_bytes: peak.map(|b| b as u64),
    })
}

/// Acceptance window for the fitted slope of the linear-time operators.
pub const LINEAR_SLOPE: (f64, f64) = (0.8, 1.3);
/// Acceptance window for the fitted slope of the quadratic baseline.
pub const QUADRATIC_SLOPE: (f64, f64) = (1.7, 2.3);
/// Largest allowed peak-memory growth of a linear-time operator from `n` to `4n`.
pub const LINEAR_MEMORY_MAX: f64 = 4.5;
/// Smallest required peak-memory growth of the baseline from `n` to `4n`.
pub const QUADRATIC_MEMORY_MIN: f64 = 12.0;
/// The baseline memory check only applies from this `n` on, where the `n²` term dominates.
pub const QUADRATIC_MEMORY_FROM: usize = 4096;

/// One pass/fail judgement on a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingCheck {
    pub op: BenchOp,
    /// `"slope"` or `"memory n->4n"` with the concrete sizes.
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

impl ScalingCheck {
    fn new(op: BenchOp, name: String, value: f64, lo: f64, hi: f64) -> Self {
        Self {
            op,
            name,
            value,
            lo,
            hi,
            pass: value >= lo && value <= hi,
        }
    }
}

/// Slope windows for every report, plus memory growth for every `(n, 4n)`
/// pair in the grid (baseline pairs only from [`QUADRATIC_MEMORY_FROM`]).
/// Memory checks are skipped when allocation accounting was inactive.
pub fn scaling_checks(reports: &[BenchReport]) -> Vec<ScalingCheck> {
    let mut out = Vec::new();
    for r in reports {
        let quadratic = r.op == BenchOp::Sdpa;
        let (lo, hi) = if quadratic { QUADRATIC_SLOPE } else { LINEAR_SLOPE };
        out.push(ScalingCheck::new(r.op, "slope".into(), r.slope, lo, hi));
        for c in &r.cells {
            let to = c.n * 4;
            if quadratic && c.n < QUADRATIC_MEMORY_FROM {
                continue;
            }
            let Some(growth) = r.memory_growth(c.n, to) else {
                continue;
            };
            let name = format!("memory {}->{}", c.n, to);
            out.push(if quadratic {
                ScalingCheck::new(r.op, name, growth, QUADRATIC_MEMORY_MIN, f64::INFINITY)
            } else {
                ScalingCheck::new(r.op, name, growth, 0.0, LINEAR_MEMORY_MAX)
            });
        }
    }
    out
}

/// Times each operator over the `n` grid on identical random inputs, on a pool
/// of exactly `config.threads` workers.
pub fn bench_scaling(config: &BenchConfig) -> Result<Vec<BenchReport>> {
    if config.ns.len() < 3 {
        return Err(TostError::Config(format!(
            "the n grid needs at least 3 points, got {}",
            config.ns.len()
        )));
    }
    if config.ns.contains(&0) {
        return Err(TostError::Config("grid sizes must be positive".into()));
    }
    if config.reps < MIN_REPS {
        return Err(TostError::Config(format!("at least {MIN_REPS} repetitions required")));
    }
    if config.ops.is_empty() {
        return Err(TostError::Config("no operators selected".into()));
    }
    if config.p > config.d || config.p == 0 || config.k == 0 {
        return Err(TostError::Config("need 1 <= p <= d and K >= 1".into()));
    }
    par::with_threads(config.threads, || {
        config
            .ops
            .iter()
            .map(|&op| {
                let cells = config
                    .ns
                    .iter()
                    .map(|&n| bench_cell(op, config, n))
                    .collect::<Result<Vec<_>>>()?;
                let pts: Vec<(f64, f64)> = cells.iter().map(|c| (c.n as f64, c.median_s)).collect();
                Ok(BenchReport {
                    op,
                    d: config.d,
                    k: config.k,
                    p: config.p,
                    reps: config.reps,
                    threads: config.threads,
                    slope: fit_loglog_slope(&pts),
                    cells,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((fit_loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert_eq!(quantile(&v, 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn rejects_small_grids() {
        let config = BenchConfig {
            ns: vec![16, 32],
            ..BenchConfig::default()
        };
        assert!(matches!(bench_scaling(&config), Err(TostError::Config(_))));
        let config = BenchConfig {
            ns: vec![8, 16, 32],
            reps: 2,
            ..BenchConfig::default()
        };
        assert!(bench_scaling(&config).is_err());
    }

    #[test]
    fn tiny_grid_runs() {
        let config = BenchConfig {
            ns: vec![8, 16, 32],
            d: 8,
            k: 2,
            p: 2,
            ..BenchConfig::default()
        };
        let reports = bench_scaling(&config).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert_eq!(r.cells.len(), 3);
            assert!(r.cells.iter().all(|c| c.median_s > 0.0));
            assert_eq!(r.threads, 1);
        }
    }

    #[test]
    fn op_names_round_trip() {
        for op in BenchOp::ALL {
            assert_eq!(op.name().parse::<BenchOp>().unwrap(), op);
        }
        assert!("flash".parse::<BenchOp>().is_err());
    }

    fn report(op: BenchOp, slope: f64, peaks: &[(usize, u64)]) -> BenchReport {
        BenchReport {
            op,
            d: 1,
            k: 1,
            p: 1,
            reps: MIN_REPS,
            threads: 1,
            cells: peaks
                .iter()
                .map(|&(n, b)| BenchCell {
                    n,
                    median_s: 1.0,
                    iqr_s: 0.0,
                    peak_bytes: Some(b),
                })
                .collect(),
            slope,
        }
    }

    #[test]
    fn scaling_checks_apply_windows() {
        let linear = report(BenchOp::Tssa, 1.05, &[(1024, 100), (2048, 200), (4096, 400)]);
        let quad = report(BenchOp::Sdpa, 2.0, &[(1024, 10), (4096, 100), (16384, 1600)]);
        let checks = scaling_checks(&[linear, quad]);
        let names: Vec<_> = checks.iter().map(|c| (c.op, c.name.as_str(), c.pass)).collect();
        assert_eq!(
            names,
            vec![
                (BenchOp::Tssa, "slope", true),
                (BenchOp::Tssa, "memory 1024->4096", true),
                (BenchOp::Sdpa, "slope", true),
                (BenchOp::Sdpa, "memory 4096->16384", true),
            ]
        );
        let bad = report(BenchOp::CausalTssa, 1.9, &[(8, 1), (32, 20), (64, 30)]);
        assert!(scaling_checks(&[bad]).iter().all(|c| !c.pass));
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coding_rate::{
    oracle_bases, variational_bound_gap, weighted_covariance, Membership, ProjectionBank, SpectralFn,
};
use crate::error::{Result, TostError};
use crate::linalg::{orthonormalize_columns, random_orthonormal_with, Matrix};
use crate::par;

use super::trial_rng;

/// Gap values below `-BOUND_TOL` are violations of the bound.
pub const BOUND_TOL: f64 = 1e-8;
/// Oracle banks must close the gap to within this.
pub const ORACLE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_d: usize,
    pub max_n: usize,
    pub max_k: usize,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            max_d: 12,
            max_n: 20,
            max_k: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    /// Square random orthogonal bases.
    FullRank,
    /// `d x p` bases whose span contains the (rank-`r`) token span.
    LowRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTrial {
    pub trial: usize,
    pub kind: BankKind,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub gap: f64,
    pub oracle_gap: f64,
}

impl BoundTrial {
    pub fn violates(&self) -> bool {
        self.gap < -BOUND_TOL || self.oracle_gap.abs() > ORACLE_TOL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub config: BoundConfig,
    pub trials: Vec<BoundTrial>,
    pub min_gap: f64,
    pub max_abs_oracle_gap: f64,
    pub violations: usize,
}

impl BoundReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// `p` orthonormal columns whose span contains the orthonormal columns of `span`,
/// mixed by a random rotation so no column is aligned with `span` by construction.
fn containing_basis(span: &Matrix, p: usize, rng: &mut impl Rng) -> Result<Matrix> {
    let (d, r) = span.shape();
    let extra = random_orthonormal_with(d, p - r, rng).ok();
    let mut cols = Matrix::zeros(d, p);
    for j in 0..r {
        cols.set_col(j, &span.col(j));
    }
    if let Some(e) = extra {
        for j in 0..(p - r) {
            cols.set_col(r + j, &e.col(j));
        }
    }
    orthonormalize_columns(&mut cols)?;
    let mix = random_orthonormal_with(p, p, rng)?;
    cols.matmul(&mix)
}

fn run_trial(config: &BoundConfig, trial: usize) -> Result<BoundTrial> {
    let mut rng = trial_rng(config.seed, trial);
    let d = rng.gen_range(1..=config.max_d);
    let n = rng.gen_range(1..=config.max_n);
    let k = rng.gen_range(1..=config.max_k);
    let f = SpectralFn::new(d as f64 * rng.gen_range(0.1..2.0))?;
    let pi = Membership::random(n, k, rng.gen_range(0.0..3.0), &mut rng);
    let kind = if trial.is_multiple_of(2) { BankKind::FullRank } else { BankKind::LowRank };

    let (z, bank, p) = match kind {
        BankKind::FullRank => {
            let z = Matrix::gaussian(d, n, &mut rng).scale(rng.gen_range(0.1..3.0));
            let bases = (0..k)
                .map(|_| random_orthonormal_with(d, d, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            (z, ProjectionBank::new(bases)?, d)
        }
        BankKind::LowRank => {
            let r = rng.gen_range(1..=d.min(n));
            let p = rng.gen_range(r..=d);
            let span = random_orthonormal_with(d, r, &mut rng)?;
            let coeffs = Matrix::gaussian(r, n, &mut rng).scale(rng.gen_range(0.1..3.0));
            let z = span.matmul(&coeffs)?;
            let bases = (0..k)
                .map(|_| containing_basis(&span, p, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            (z, ProjectionBank::new(bases)?, p)
        }
    };
    let gap = variational_bound_gap(&z, &pi, &bank, &f)?;
    let oracle = oracle_bases(&z, &pi, p)?;
    let oracle_gap = variational_bound_gap(&z, &pi, &oracle, &f)?;
    Ok(BoundTrial {
        trial,
        kind,
        d,
        n,
        k,
        p,
        gap,
        oracle_gap,
    })
}

/// Random trials of the variational bound with full-rank and low-rank banks
/// meeting the image condition, plus the oracle-bank tightness check.
pub fn bound_check(config: &BoundConfig) -> Result<BoundReport> {
    if config.trials == 0 {
        return Err(TostError::Config("trials must be at least 1".into()));
    }
    if config.max_d == 0 || config.max_n == 0 || config.max_k == 0 {
        return Err(TostError::Config("dimension limits must be at least 1".into()));
    }
    let trials = par::map_indexed(config.trials, |t| run_trial(config, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let min_gap = trials.iter().map(|t| t.gap).fold(f64::INFINITY, f64::min);
    let max_abs_oracle_gap = trials.iter().map(|t| t.oracle_gap.abs()).fold(0.0, f64::max);
    let violations = trials.iter().filter(|t| t.violates()).count();
    Ok(BoundReport {
        config: *config,
        trials,
        min_gap,
        max_abs_oracle_gap,
        violations,
    })
}

/// Off-diagonal magnitude a bank must leave in some group covariance to count
/// as non-diagonalizing.
pub const OFF_DIAGONAL_MIN: f64 = 1e-3;
/// Required gap for a non-diagonalizing bank under a strictly concave `f`.
pub const STRICT_GAP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrictnessReport {
    pub trials: usize,
    pub seed: u64,
    pub gaps: Vec<f64>,
    pub off_diagonals: Vec<f64>,
    pub min_gap: f64,
    pub failures: usize,
}

/// Square orthogonal banks that do not diagonalize some group covariance must
/// leave a strictly positive gap when `f = log(1 + αx)`.
pub fn strictness_check(trials: usize, seed: u64) -> Result<StrictnessReport> {
    if trials == 0 {
        return Err(TostError::Config("trials must be at least 1".into()));
    }
    let rows = par::map_indexed(trials, |t| -> Result<(f64, f64)> {
        let mut rng = trial_rng(seed ^ 0x5354_5249_4354, t);
        loop {
            let d = rng.gen_range(2..=8);
            let n = rng.gen_range(2..=12);
            let k = rng.gen_range(1..=3);
            let z = Matrix::gaussian(d, n, &mut rng);
            let pi = Membership::random(n, k, 1.0, &mut rng);
            let bases = (0..k)
                .map(|_| random_orthonormal_with(d, d, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let bank = ProjectionBank::new(bases)?;
            let off = (0..k)
                .map(|h| {
                    let w = pi.column(h);
                    let nk: f64 = w.iter().sum();
                    let c = weighted_covariance(&z, &w).scale(1.0 / nk);
                    let u = bank.basis(h);
                    u.t_matmul(&c).and_then(|m| m.matmul(u)).map(|m| m.max_off_diag())
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            if off < OFF_DIAGONAL_MIN {
                continue;
            }
            let f = SpectralFn::new(d as f64)?;
            return Ok((variational_bound_gap(&z, &pi, &bank, &f)?, off));
        }
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let off_diagonals = rows.iter().map(|r| r.1).collect();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let failures = gaps.iter().filter(|&&g| g <= STRICT_GAP).count();
    Ok(StrictnessReport {
        trials,
        seed,
        gaps,
        off_diagonals,
        min_gap,
        failures,
    })
}

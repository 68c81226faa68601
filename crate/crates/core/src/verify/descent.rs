use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coding_rate::{grad_variational, variational_compression, ProjectionBank};
use crate::error::{Result, TostError};
use crate::linalg::{random_orthonormal_with, Matrix};
use crate::par;
use crate::tssa::{estimate_membership, token_update, TssaParams};

use super::trial_rng;

/// Step size as a multiple of `1/α`.
pub const DESCENT_STEP: f64 = 1e-3;
/// Instances whose gradient is smaller than this are skipped.
pub const GRAD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrial {
    pub trial: usize,
    pub before: f64,
    pub after: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

impl DescentTrial {
    pub fn decreased(&self) -> bool {
        self.after < self.before
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentReport {
    pub seed: u64,
    pub trials: Vec<DescentTrial>,
    pub failures: usize,
    pub skipped: usize,
}

impl DescentReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

fn run_trial(seed: u64, trial: usize) -> Result<DescentTrial> {
    let mut rng = trial_rng(seed ^ 0x4445_5343, trial);
    let d = rng.gen_range(1..=10);
    let n = rng.gen_range(1..=16);
    let k = rng.gen_range(1..=4);
    let p = rng.gen_range(1..=d);
    let z = Matrix::gaussian(d, n, &mut rng).scale(rng.gen_range(0.2..3.0));
    let bases = (0..k)
        .map(|_| random_orthonormal_with(d, p, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let bank = ProjectionBank::new(bases)?;
    let alpha = d as f64 * rng.gen_range(0.5..2.0);
    let params = TssaParams::new(d)
        .with_alpha(alpha)?
        .with_tau(DESCENT_STEP / alpha * rng.gen_range(0.1..1.0))
        .with_normalized_membership(rng.gen_bool(0.5));

    let pi = estimate_membership(&z, &bank, &params)?;
    let grad_norm = grad_variational(&z, &pi, &bank, &params.f)?.frobenius();
    let before = variational_compression(&z, &pi, &bank, &params.f)?;
    let next = token_update(&z, &bank, &params)?;
    let after = variational_compression(&next, &pi, &bank, &params.f)?;
    Ok(DescentTrial {
        trial,
        before,
        after,
        grad_norm,
        skipped: grad_norm < GRAD_FLOOR,
    })
}

/// One residual step with a small `τ` must strictly lower `R^var` at the
/// membership estimated before the step.
pub fn descent_check(trials: usize, seed: u64) -> Result<DescentReport> {
    if trials == 0 {
        return Err(TostError::Config("trials must be at least 1".into()));
    }
    let trials = par::map_indexed(trials, |t| run_trial(seed, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let skipped = trials.iter().filter(|t| t.skipped).count();
    let failures = trials.iter().filter(|t| !t.skipped && !t.decreased()).count();
    Ok(DescentReport {
        seed,
        trials,
        failures,
        skipped,
    })
}

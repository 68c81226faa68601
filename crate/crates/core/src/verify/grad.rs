use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coding_rate::{grad_variational, variational_compression, ConcaveFn, Membership, ProjectionBank, SpectralFn};
use crate::error::{Result, TostError};
use crate::linalg::{random_orthonormal_with, Matrix};
use crate::par;

use super::trial_rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Pass threshold on the worst elementwise relative error.
pub const GRAD_TOL: f64 = 1e-5;
/// Denominator floor so entries that are zero in both gradients do not divide by zero.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradConfig {
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub max_d: usize,
    pub max_n: usize,
    pub max_k: usize,
    /// Negate the analytic gradient; the check must then fail.
    pub flip_sign: bool,
}

impl Default for GradConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            step: FD_STEP,
            max_d: 8,
            max_n: 10,
            max_k: 3,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTrial {
    pub trial: usize,
    pub d: usize,
    pub n: usize,
    pub k: usize,
    pub p: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub config: GradConfig,
    pub trials: Vec<GradTrial>,
    pub max_rel_error: f64,
    pub failures: usize,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }
}

/// Elementwise `|a − b| / max(|a|, |b|, REL_FLOOR)`, maximized over entries.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// Central differences of `R^var` with respect to every entry of `Z`, at fixed `Π` and bank.
pub fn finite_difference_grad<F: ConcaveFn>(
    z: &Matrix,
    pi: &Membership,
    bank: &ProjectionBank,
    f: &F,
    h: f64,
) -> Result<Matrix> {
    let (d, n) = z.shape();
    let mut out = Matrix::zeros(d, n);
    let mut zp = z.clone();
    for r in 0..d {
        for c in 0..n {
            let x = z[(r, c)];
            zp[(r, c)] = x + h;
            let up = variational_compression(&zp, pi, bank, f)?;
            zp[(r, c)] = x - h;
            let down = variational_compression(&zp, pi, bank, f)?;
            zp[(r, c)] = x;
            out[(r, c)] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

fn run_trial(config: &GradConfig, trial: usize) -> Result<GradTrial> {
    let mut rng = trial_rng(config.seed ^ 0x4752_4144, trial);
    let d = rng.gen_range(1..=config.max_d);
    let n = rng.gen_range(1..=config.max_n);
    // Every fourth trial is the single-group, full-basis case.
    let (k, p) = if trial % 4 == 3 {
        (1, d)
    } else {
        (rng.gen_range(1..=config.max_k), rng.gen_range(1..=d))
    };
    let z = Matrix::gaussian(d, n, &mut rng);
    let pi = if k == 1 {
        Membership::uniform(n, 1)
    } else {
        Membership::random(n, k, rng.gen_range(0.0..2.0), &mut rng)
    };
    let bases = (0..k)
        .map(|_| random_orthonormal_with(d, p, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let bank = ProjectionBank::new(bases)?;
    let f = SpectralFn::new(d as f64 * rng.gen_range(0.5..2.0))?;

    let mut analytic = grad_variational(&z, &pi, &bank, &f)?;
    if config.flip_sign {
        analytic = analytic.scale(-1.0);
    }
    let numeric = finite_difference_grad(&z, &pi, &bank, &f, config.step)?;
    Ok(GradTrial {
        trial,
        d,
        n,
        k,
        p,
        max_rel_error: relative_error(&analytic, &numeric),
    })
}

/// Analytic gradient of `R^var` against central differences on random small instances.
pub fn grad_check(config: &GradConfig) -> Result<GradReport> {
    if config.trials == 0 {
        return Err(TostError::Config("trials must be at least 1".into()));
    }
    if !(config.step.is_finite() && config.step > 0.0) {
        return Err(TostError::Config(format!("step must be positive, got {}", config.step)));
    }
    if config.max_d == 0 || config.max_n == 0 || config.max_k == 0 {
        return Err(TostError::Config("dimension limits must be at least 1".into()));
    }
    let trials = par::map_indexed(config.trials, |t| run_trial(config, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = trials.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    let failures = trials.iter().filter(|t| t.max_rel_error.is_nan() || t.max_rel_error > GRAD_TOL).count();
    Ok(GradReport {
        config: *config,
        trials,
        max_rel_error,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = grad_check(&GradConfig {
            trials: 20,
            ..GradConfig::default()
        })
        .unwrap();
        assert!(report.pass(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn sign_flip_is_caught() {
        let report = grad_check(&GradConfig {
            trials: 8,
            flip_sign: true,
            ..GradConfig::default()
        })
        .unwrap();
        assert!(!report.pass());
        assert!(report.max_rel_error > 1.0);
    }

    #[test]
    fn relative_error_of_shape_mismatch_is_infinite() {
        assert!(relative_error(&Matrix::zeros(2, 2), &Matrix::zeros(2, 3)).is_infinite());
    }
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal::{causal_membership, causal_tssa_attention, CausalParams, CausalStream};
use crate::coding_rate::{grad_variational, Membership, ProjectionBank};
use crate::error::{Result, TostError};
use crate::linalg::{random_orthonormal_with, Matrix};
use crate::par;
use crate::tssa::{
    diag_gate, estimate_membership, tssa_attention, tssa_attention_with_membership, token_update,
    TssaParams,
};

use super::trial_rng;

pub const IDENTITY_TOL: f64 = 1e-10;
pub const PREFIX_TOL: f64 = 1e-10;
pub const PERMUTATION_TOL: f64 = 1e-12;
/// Sequence length for the transposition sweep.
pub const PERMUTATION_N: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_d: usize,
    pub max_n: usize,
    pub max_k: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 0,
            max_d: 8,
            max_n: 32,
            max_k: 3,
        }
    }
}

/// Outcome of one identity over all trials. `worst` is the largest max-norm
/// discrepancy seen; bitwise checks use a threshold of zero and compare bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub worst: f64,
    pub threshold: f64,
    pub failures: usize,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.failures == 0
    }

    fn collect(name: &str, threshold: f64, worsts: Vec<(f64, bool)>) -> Self {
        Self {
            name: name.into(),
            trials: worsts.len(),
            worst: worsts.iter().map(|w| w.0).fold(0.0, f64::max),
            threshold,
            failures: worsts.iter().filter(|w| !w.1).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub config: EquivalenceConfig,
    pub checks: Vec<CheckResult>,
}

impl EquivalenceReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(CheckResult::pass)
    }
}

struct Instance {
    z: Matrix,
    bank: ProjectionBank,
    params: TssaParams,
}

fn instance(rng: &mut ChaCha8Rng, config: &EquivalenceConfig, n: usize) -> Result<Instance> {
    let d = rng.gen_range(1..=config.max_d);
    let k = rng.gen_range(1..=config.max_k);
    let p = rng.gen_range(1..=d);
    let z = Matrix::gaussian(d, n, rng).scale(rng.gen_range(0.2..2.0));
    let bases = (0..k)
        .map(|_| random_orthonormal_with(d, p, rng))
        .collect::<Result<Vec<_>>>()?;
    let params = TssaParams::new(d)
        .with_tau(rng.gen_range(0.1..2.0))
        .with_eta(rng.gen_range(0.5..2.0))
        .with_alpha(d as f64 * rng.gen_range(0.5..2.0))?
        .with_normalized_membership(rng.gen_bool(0.5));
    Ok(Instance {
        z,
        bank: ProjectionBank::new(bases)?,
        params,
    })
}

fn bitwise_equal(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape()
        && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// `Σ_k Π_jk [z_j − (τ/n) U_k D_k U_kᵀ z_j]`, evaluated one token and one head at a time.
pub fn per_token_update(
    z: &Matrix,
    pi: &Membership,
    bank: &ProjectionBank,
    params: &TssaParams,
) -> Result<Matrix> {
    let (d, n) = z.shape();
    let gates = (0..bank.k())
        .map(|k| diag_gate(z, &pi.column(k), bank.basis(k), &params.f))
        .collect::<Result<Vec<_>>>()?;
    let step = params.tau / n as f64;
    let mut out = Matrix::zeros(d, n);
    for j in 0..n {
        let zj = z.col(j);
        let mut col = vec![0.0; d];
        for (k, gate) in gates.iter().enumerate() {
            let u = bank.basis(k);
            let weight = pi.as_matrix()[(j, k)];
            let head = u.t_matmul(&Matrix::from_vec(d, 1, zj.clone())?)?;
            let gated = Matrix::from_fn(u.cols(), 1, |i, _| gate[i] * head[(i, 0)]);
            let back = u.matmul(&gated)?;
            for r in 0..d {
                col[r] += weight * (zj[r] - step * back[(r, 0)]);
            }
        }
        out.set_col(j, &col);
    }
    Ok(out)
}

fn trial_n(rng: &mut ChaCha8Rng, config: &EquivalenceConfig, trial: usize) -> usize {
    if trial == 0 {
        1
    } else {
        rng.gen_range(1..=config.max_n)
    }
}

fn gradient_identity(config: &EquivalenceConfig, trial: usize) -> Result<(f64, bool)> {
    let mut rng = trial_rng(config.seed ^ 0x4944_454e, trial);
    let n = trial_n(&mut rng, config, trial);
    let inst = instance(&mut rng, config, n)?;
    let pi = estimate_membership(&inst.z, &inst.bank, &inst.params)?;
    let attn = tssa_attention(&inst.z, &inst.bank, &inst.params)?;
    let grad = grad_variational(&inst.z, &pi, &inst.bank, &inst.params.f)?;
    let err = attn.max_abs_diff(&grad.scale(-inst.params.tau));
    Ok((err, err <= IDENTITY_TOL))
}

fn per_token_identity(config: &EquivalenceConfig, trial: usize) -> Result<(f64, bool)> {
    let mut rng = trial_rng(config.seed ^ 0x544f_4b45, trial);
    let n = trial_n(&mut rng, config, trial);
    let inst = instance(&mut rng, config, n)?;
    let pi = estimate_membership(&inst.z, &inst.bank, &inst.params)?;
    let batch = token_update(&inst.z, &inst.bank, &inst.params)?;
    let direct = per_token_update(&inst.z, &pi, &inst.bank, &inst.params)?;
    let err = batch.max_abs_diff(&direct);
    Ok((err, err <= IDENTITY_TOL))
}

/// Column `j` of the causal operator against the non-causal operator on the
/// length-`j` prefix. With normalized membership each causal row carries its
/// own prefix normalization, so the oracle feeds those rows in explicitly;
/// without normalization the plain non-causal operator is the oracle.
fn prefix_oracle(config: &EquivalenceConfig, trial: usize) -> Result<(f64, bool)> {
    let mut rng = trial_rng(config.seed ^ 0x5052_4546, trial);
    let n = trial_n(&mut rng, config, trial);
    let inst = instance(&mut rng, config, n)?;
    let params = CausalParams::new(inst.params.clone());
    let causal = causal_tssa_attention(&inst.z, &inst.bank, &params)?;
    let pi = causal_membership(&inst.z, &inst.bank, &params)?;
    let mut worst: f64 = 0.0;
    for j in 1..=n {
        let prefix = inst.z.cols_range(0, j);
        let full = if inst.params.normalize_membership {
            tssa_attention_with_membership(&prefix, &pi.prefix(j), &inst.bank, &inst.params)?
        } else {
            tssa_attention(&prefix, &inst.bank, &inst.params)?
        };
        let last = full.col(j - 1);
        let col = causal.col(j - 1);
        for (a, b) in last.iter().zip(&col) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst, worst <= PREFIX_TOL))
}

fn streaming(config: &EquivalenceConfig, trial: usize) -> Result<(f64, bool)> {
    let mut rng = trial_rng(config.seed ^ 0x5354_5245, trial);
    let n = trial_n(&mut rng, config, trial);
    let inst = instance(&mut rng, config, n)?;
    let bias = Matrix::gaussian(n, inst.bank.k(), &mut rng);
    let params = CausalParams::new(inst.params.clone()).with_bias(bias);
    let batch = causal_tssa_attention(&inst.z, &inst.bank, &params)?;
    let mut stream = CausalStream::new(&inst.bank, &params)?;
    let mut streamed = Matrix::zeros(inst.z.rows(), n);
    for j in 0..n {
        streamed.set_col(j, &stream.push(&inst.z.col(j))?.output);
    }
    Ok((batch.max_abs_diff(&streamed), bitwise_equal(&batch, &streamed)))
}

fn permutation(config: &EquivalenceConfig, trial: usize) -> Result<(f64, bool)> {
    let mut rng = trial_rng(config.seed ^ 0x5045_524d, trial);
    let inst = instance(&mut rng, config, PERMUTATION_N)?;
    let attn = tssa_attention(&inst.z, &inst.bank, &inst.params)?;
    let pi = estimate_membership(&inst.z, &inst.bank, &inst.params)?;
    let mut worst: f64 = 0.0;
    for a in 0..PERMUTATION_N {
        for b in (a + 1)..PERMUTATION_N {
            let mut perm: Vec<usize> = (0..PERMUTATION_N).collect();
            perm.swap(a, b);
            let zp = inst.z.permute_cols(&perm);
            let attn_p = tssa_attention(&zp, &inst.bank, &inst.params)?;
            let pi_p = estimate_membership(&zp, &inst.bank, &inst.params)?;
            worst = worst
                .max(attn_p.max_abs_diff(&attn.permute_cols(&perm)))
                .max(pi_p.as_matrix().max_abs_diff(pi.permute_rows(&perm).as_matrix()));
        }
    }
    Ok((worst, worst <= PERMUTATION_TOL))
}

fn causality_trial(seed: u64, max_n: usize, trial: usize) -> Result<(f64, bool)> {
    let config = EquivalenceConfig {
        seed,
        max_n,
        ..EquivalenceConfig::default()
    };
    let mut rng = trial_rng(seed ^ 0x4341_5553, trial);
    let n = trial_n(&mut rng, &config, trial);
    let inst = instance(&mut rng, &config, n)?;
    let bias = Matrix::gaussian(n, inst.bank.k(), &mut rng).scale(0.5);
    let params = CausalParams::new(inst.params.clone()).with_bias(bias);
    let base = causal_tssa_attention(&inst.z, &inst.bank, &params)?;
    let base_pi = causal_membership(&inst.z, &inst.bank, &params)?;
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for j in 1..n {
        let mut z = inst.z.clone();
        let noise = Matrix::gaussian(z.rows(), n - j, &mut rng).scale(rng.gen_range(0.1..10.0));
        for c in j..n {
            z.set_col(c, &noise.col(c - j));
        }
        let out = causal_tssa_attention(&z, &inst.bank, &params)?;
        let pi = causal_membership(&z, &inst.bank, &params)?;
        let (a, b) = (base.cols_range(0, j), out.cols_range(0, j));
        let (pa, pb) = (base_pi.as_matrix().rows_range(0, j), pi.as_matrix().rows_range(0, j));
        worst = worst.max(a.max_abs_diff(&b)).max(pa.max_abs_diff(&pb));
        exact &= bitwise_equal(&a, &b) && bitwise_equal(&pa, &pb);
    }
    Ok((worst, exact))
}

/// Outputs and membership rows at positions `≤ j` must be bitwise unchanged
/// when every token after `j` is replaced, for every `j`.
pub fn causality_check(trials: usize, seed: u64, max_n: usize) -> Result<CheckResult> {
    if trials == 0 || max_n == 0 {
        return Err(TostError::Config("trials and max_n must be at least 1".into()));
    }
    let rows = par::map_indexed(trials, |t| causality_trial(seed, max_n, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckResult::collect("causality", 0.0, rows))
}

fn run_check(
    name: &str,
    threshold: f64,
    config: &EquivalenceConfig,
    f: impl Fn(&EquivalenceConfig, usize) -> Result<(f64, bool)> + Sync,
) -> Result<CheckResult> {
    let rows = par::map_indexed(config.trials, |t| f(config, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckResult::collect(name, threshold, rows))
}

/// The operator identity suite. Trial 0 of each sequence-length-varying check uses `n = 1`.
pub fn equivalence_suite(config: &EquivalenceConfig) -> Result<EquivalenceReport> {
    if config.trials == 0 {
        return Err(TostError::Config("trials must be at least 1".into()));
    }
    if config.max_d == 0 || config.max_n == 0 || config.max_k == 0 {
        return Err(TostError::Config("dimension limits must be at least 1".into()));
    }
    let checks = vec![
        run_check("gradient_identity", IDENTITY_TOL, config, gradient_identity)?,
        run_check("per_token_form", IDENTITY_TOL, config, per_token_identity)?,
        run_check("causal_prefix_oracle", PREFIX_TOL, config, prefix_oracle)?,
        run_check("permutation_equivariance", PERMUTATION_TOL, config, permutation)?,
        run_check("streaming_consistency", 0.0, config, streaming)?,
        causality_check(config.trials, config.seed, config.max_n)?,
    ];
    Ok(EquivalenceReport {
        config: *config,
        checks,
    })
}

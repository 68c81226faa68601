use serde::{Deserialize, Serialize};

use crate::coding_rate::{
    expansion_rate, grad_variational, oracle_bases, variational_compression, ProjectionBank,
};
use crate::error::Result;
use crate::linalg::Matrix;
use crate::tssa::{estimate_membership, tssa_attention_with_membership, TssaParams};

use super::synth::{synth_subspaces, SynthSpec};

/// Cap on the alternating membership/bank refinement that seeds oracle mode.
pub const ORACLE_INIT_MAX_ITERS: usize = 200;
/// The refinement stops once no membership entry moves by more than this.
pub const ORACLE_INIT_TOL: f64 = 1e-12;

/// How the attention-only stack chooses its projection banks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankMode {
    /// Re-fit every layer's bank to the current features with `oracle_bases`.
    Oracle,
    /// Reuse the initial random bank at every layer.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseConfig {
    pub synth: SynthSpec,
    pub layers: usize,
    pub tau: f64,
    pub eta: f64,
    /// `α = d / ε²`.
    pub epsilon: f64,
    pub mode: BankMode,
    pub normalize_membership: bool,
    /// Seed of the initial random bank.
    pub bank_seed: u64,
}

impl LayerwiseConfig {
    pub fn alpha(&self) -> f64 {
        self.synth.d as f64 / (self.epsilon * self.epsilon)
    }
}

/// One entry of the layer-wise trace, measured at the input of layer `layer`
/// (entry `L` is the output of the last layer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseRow {
    pub layer: usize,
    pub compression_var: f64,
    pub expansion: f64,
    /// Frobenius norm of the gradient of the compression objective at this point.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseTrace {
    pub config: LayerwiseConfig,
    pub rows: Vec<LayerwiseRow>,
}

impl LayerwiseTrace {
    /// Largest increase between consecutive entries (≤ 0 for a non-increasing trace).
    pub fn max_increase(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| w[1].compression_var - w[0].compression_var)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `first − last` compression value.
    pub fn total_decrease(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => a.compression_var - b.compression_var,
            _ => 0.0,
        }
    }

    pub fn is_non_increasing(&self, slack: f64) -> bool {
        self.rows.len() < 2 || self.max_increase() <= slack
    }
}

/// Runs `L` attention-only compression steps on synthetic subspace data.
///
/// At each layer the membership is estimated from the current bank; in
/// oracle mode the bank is then re-fit to the current features under that
/// membership. Oracle mode starts from a consistent pair: the random initial
/// bank is refined by alternating membership estimation and oracle re-fits
/// until the membership settles, so layer 0 does not record an arbitrary bank. The recorded value is `R^var(Z^ℓ, Π^ℓ | bank^ℓ)` and the step
/// is taken at that same `(Π^ℓ, bank^ℓ)`. The trace has `L + 1` rows.
pub fn layerwise_experiment(config: &LayerwiseConfig) -> Result<LayerwiseTrace> {
    let data = synth_subspaces(&config.synth)?;
    let rows = layerwise_run(data.tokens, config)?;
    Ok(LayerwiseTrace {
        config: *config,
        rows,
    })
}

/// The stack of [`layerwise_experiment`] applied to caller-supplied tokens
/// (`d`, `p`, `K` are taken from `config.synth`).
pub fn layerwise_run(tokens: Matrix, config: &LayerwiseConfig) -> Result<Vec<LayerwiseRow>> {
    let SynthSpec { d, p, k, .. } = config.synth;
    let params = TssaParams::new(d)
        .with_tau(config.tau)
        .with_eta(config.eta)
        .with_alpha(config.alpha())?
        .with_normalized_membership(config.normalize_membership);
    let f = params.f;

    let mut z = tokens;
    let mut bank = ProjectionBank::random_orthonormal(d, p, k, config.bank_seed)?;
    if config.mode == BankMode::Oracle {
        bank = settle_oracle_bank(&z, bank, &params)?;
    }
    let mut rows = Vec::with_capacity(config.layers + 1);
    for layer in 0..=config.layers {
        let pi = estimate_membership(&z, &bank, &params)?;
        if config.mode == BankMode::Oracle {
            bank = oracle_bases(&z, &pi, p)?;
        }
        rows.push(LayerwiseRow {
            layer,
            compression_var: variational_compression(&z, &pi, &bank, &f)?,
            expansion: expansion_rate(&z, f.alpha())?,
            grad_norm: grad_variational(&z, &pi, &bank, &f)?.frobenius(),
        });
        if layer < config.layers {
            z = z.add(&tssa_attention_with_membership(&z, &pi, &bank, &params)?)?;
        }
    }
    Ok(rows)
}

fn settle_oracle_bank(z: &Matrix, mut bank: ProjectionBank, params: &TssaParams) -> Result<ProjectionBank> {
    let mut prev: Option<Matrix> = None;
    for _ in 0..ORACLE_INIT_MAX_ITERS {
        let pi = estimate_membership(z, &bank, params)?;
        bank = oracle_bases(z, &pi, bank.p())?;
        let pi = pi.into_matrix();
        if prev.as_ref().is_some_and(|p| p.max_abs_diff(&pi) <= ORACLE_INIT_TOL) {
            break;
        }
        prev = Some(pi);
    }
    Ok(bank)
}

//! Command-line grammar and the optional JSON config file.
//!
//! Every field of [`RunConfig`] can come from `--config FILE` or from a flag
//! of the same name; flags win.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "tost", version, about = "Verification suites and benchmarks for token statistics self-attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Random trials of the variational compression bound and its oracle tightness.
    BoundCheck(BoundArgs),
    /// Analytic gradient of the variational compression against central differences.
    GradCheck(GradArgs),
    /// Operator identities, causal prefix oracle, permutation equivariance, streaming.
    Equivalence(RunArgs),
    /// Per-layer compression trace of an attention-only stack on synthetic subspaces.
    Layerwise(LayerwiseArgs),
    /// Time and peak-memory scaling of the attention operators.
    Bench(BenchArgs),
    /// Forward pass of a (loaded or freshly initialized) model with its objective trace.
    Forward(ForwardArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::BoundCheck(_) => "bound-check",
            Command::GradCheck(_) => "grad-check",
            Command::Equivalence(_) => "equivalence",
            Command::Layerwise(_) => "layerwise",
            Command::Bench(_) => "bench",
            Command::Forward(_) => "forward",
        }
    }

    pub fn run_args(&self) -> &RunArgs {
        match self {
            Command::BoundCheck(a) => &a.run,
            Command::GradCheck(a) => &a.run,
            Command::Equivalence(a) => a,
            Command::Layerwise(a) => &a.run,
            Command::Bench(a) => &a.run,
            Command::Forward(a) => &a.run,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Double,
    Single,
}

/// Shared run parameters. Which ones a subcommand reads is listed in the README.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub d: Option<usize>,
    pub p: Option<usize>,
    #[serde(alias = "K")]
    pub k: Option<usize>,
    pub n: Option<usize>,
    #[serde(alias = "L")]
    pub layers: Option<usize>,
    pub h: Option<usize>,
    pub tau: Option<f64>,
    pub eta: Option<f64>,
    pub epsilon: Option<f64>,
    pub noise_std: Option<f64>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
    pub precision: Option<Precision>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fields set in `self` override those in `base`.
    pub fn over(self, base: RunConfig) -> RunConfig {
        RunConfig {
            d: self.d.or(base.d),
            p: self.p.or(base.p),
            k: self.k.or(base.k),
            n: self.n.or(base.n),
            layers: self.layers.or(base.layers),
            h: self.h.or(base.h),
            tau: self.tau.or(base.tau),
            eta: self.eta.or(base.eta),
            epsilon: self.epsilon.or(base.epsilon),
            noise_std: self.noise_std.or(base.noise_std),
            seed: self.seed.or(base.seed),
            trials: self.trials.or(base.trials),
            output: self.output.or(base.output),
            format: self.format.or(base.format),
            precision: self.precision.or(base.precision),
            threads: self.threads.or(base.threads),
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with any of the run parameters; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Token dimension (an upper bound for the randomized suites).
    #[arg(long)]
    pub d: Option<usize>,
    /// Projection width per head.
    #[arg(long)]
    pub p: Option<usize>,
    /// Number of heads / groups.
    #[arg(long, visible_alias = "K")]
    pub k: Option<usize>,
    /// Number of tokens (an upper bound for the randomized suites).
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of layers.
    #[arg(long, visible_alias = "L")]
    pub layers: Option<usize>,
    /// MLP hidden width.
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Quantization precision; `α = d / ε²`.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Report path; standard output when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Worker threads.
    #[arg(long, env = "TOST_THREADS")]
    pub threads: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let flags = RunConfig {
            d: self.d,
            p: self.p,
            k: self.k,
            n: self.n,
            layers: self.layers,
            h: self.h,
            tau: self.tau,
            eta: self.eta,
            epsilon: self.epsilon,
            noise_std: self.noise_std,
            seed: self.seed,
            trials: self.trials,
            output: self.output.clone(),
            format: self.format,
            precision: self.precision,
            threads: self.threads,
        };
        let file = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let merged = flags.over(file);
        if merged.precision == Some(Precision::Single) {
            bail!("single precision is not supported; use --precision double");
        }
        for (name, v) in [
            ("d", merged.d),
            ("p", merged.p),
            ("k", merged.k),
            ("n", merged.n),
            ("h", merged.h),
            ("trials", merged.trials),
            ("threads", merged.threads),
        ] {
            if v == Some(0) {
                bail!("--{name} must be at least 1");
            }
        }
        for (name, v) in [("tau", merged.tau), ("eta", merged.eta), ("epsilon", merged.epsilon)] {
            if let Some(x) = v {
                if !(x.is_finite() && x > 0.0) {
                    bail!("--{name} must be positive and finite, got {x}");
                }
            }
        }
        if let Some(s) = merged.noise_std {
            if !(s.is_finite() && s >= 0.0) {
                bail!("--noise-std must be non-negative, got {s}");
            }
        }
        Ok(merged)
    }
}

#[derive(Debug, Clone, Args)]
pub struct BoundArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GradArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Negate the analytic gradient (negative control: the check must fail).
    #[arg(long)]
    pub flip_sign: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BankModeArg {
    Oracle,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MembershipArg {
    /// Projected features scaled to unit row norm before the softmax.
    Normalized,
    /// Raw projected energies.
    Plain,
}

#[derive(Debug, Clone, Args)]
pub struct LayerwiseArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value = "oracle")]
    pub mode: BankModeArg,
    #[arg(long, value_enum, default_value = "normalized")]
    pub membership: MembershipArg,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Operators to time.
    #[arg(long, value_delimiter = ',', default_value = "tssa,causal_tssa,sdpa")]
    pub ops: Vec<String>,
    /// Token counts.
    #[arg(long, value_delimiter = ',', default_value = "1024,2048,4096,8192,16384")]
    pub ns: Vec<usize>,
    /// Timed repetitions per cell (after one warm-up).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Exit 1 when a slope or memory-growth window is violated.
    #[arg(long)]
    pub assert: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Load the model from this container instead of initializing one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Write the model used to this container.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Use causal attention in every block.
    #[arg(long)]
    pub causal: bool,
    /// Initialize with a zero MLP (attention-only blocks).
    #[arg(long)]
    pub attention_only: bool,
}

//! Synthetic workloads, the quadratic attention baseline, the layer-wise
//! compression experiment and the time/memory scaling benchmark.

mod bench;
mod layerwise;
mod sdpa;
mod synth;

pub use bench::{
    bench_scaling, fit_loglog_slope, growth_ratio, scaling_checks, BenchCell, BenchConfig,
    BenchOp, BenchReport, ScalingCheck, LINEAR_MEMORY_MAX, LINEAR_SLOPE, QUADRATIC_MEMORY_FROM,
    QUADRATIC_MEMORY_MIN, QUADRATIC_SLOPE,
};
pub use layerwise::{
    layerwise_experiment, layerwise_run, BankMode, LayerwiseConfig, LayerwiseRow, LayerwiseTrace,
};
pub use sdpa::{baseline_sdpa, sdpa_weights};
pub use synth::{synth_subspaces, SynthData, SynthSpec};

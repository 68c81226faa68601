//! Randomized verification suites for the bound, the gradient and the
//! operator identities. Every suite is deterministic in its seed: trial `t`
//! draws from its own ChaCha stream, so results do not depend on thread count.

mod bound;
mod descent;
mod equivalence;
mod grad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use bound::{
    bound_check, strictness_check, BankKind, BoundConfig, BoundReport, BoundTrial, StrictnessReport,
    BOUND_TOL, OFF_DIAGONAL_MIN, ORACLE_TOL, STRICT_GAP,
};
pub use descent::{descent_check, DescentReport, DescentTrial, DESCENT_STEP, GRAD_FLOOR};
pub use equivalence::{
    causality_check, equivalence_suite, per_token_update, CheckResult, EquivalenceConfig,
    EquivalenceReport, IDENTITY_TOL, PERMUTATION_N, PERMUTATION_TOL, PREFIX_TOL,
};
pub use grad::{
    finite_difference_grad, grad_check, relative_error, GradConfig, GradReport, GradTrial, FD_STEP,
    GRAD_TOL, REL_FLOOR,
};

pub(crate) fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

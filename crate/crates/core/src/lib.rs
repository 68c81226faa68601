//! Token statistics self-attention: coding-rate objectives, the linear-time
//! attention operator derived from their variational bound, a causal variant,
//! transformer blocks built on it, and verification/benchmark harnesses.

pub mod alloc_track;
pub mod causal;
pub mod coding_rate;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod par;
pub mod tssa;
pub mod verify;

pub use causal::{causal_membership, causal_tssa_attention, causal_token_update, CausalParams, CausalStream};
pub use coding_rate::{
    compression_rate, expansion_rate, general_compression, grad_variational, oracle_bases,
    variational_bound_gap, variational_compression, ConcaveFn, Membership, ProjectionBank,
    SpectralFn,
};
pub use error::{Result, TostError};
pub use linalg::{sym_eig, EigenDecomposition, Matrix};
pub use tssa::{estimate_membership, token_update, tssa_attention, TssaParams};

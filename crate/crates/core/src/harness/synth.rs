use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TostError};
use crate::linalg::{random_orthonormal_with, Matrix};

/// Tokens drawn from `K` mutually orthogonal `p`-dimensional subspaces of `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d: usize,
    pub p: usize,
    pub k: usize,
    pub tokens_per_group: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    /// `d x (K · tokens_per_group)`, grouped contiguously by label.
    pub tokens: Matrix,
    pub labels: Vec<usize>,
    /// The `K` orthonormal `d x p` subspace bases.
    pub bases: Vec<Matrix>,
}

/// Splits a random `d x d` orthogonal matrix into `K` blocks of `p` columns and
/// draws each token as `basis_k · c + noise_std · g` with standard normal `c`, `g`.
pub fn synth_subspaces(spec: &SynthSpec) -> Result<SynthData> {
    let SynthSpec {
        d,
        p,
        k,
        tokens_per_group,
        noise_std,
        seed,
    } = *spec;
    if d == 0 || p == 0 || k == 0 || tokens_per_group == 0 {
        return Err(TostError::Config("synthetic dimensions must be at least 1".into()));
    }
    if p * k > d {
        return Err(TostError::Config(format!(
            "{k} orthogonal {p}-dimensional subspaces do not fit in dimension {d}"
        )));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(TostError::Config("noise_std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_orthonormal_with(d, d, &mut rng)?;
    let bases: Vec<Matrix> = (0..k).map(|g| q.cols_range(g * p, (g + 1) * p)).collect();
    let n = k * tokens_per_group;
    let mut tokens = Matrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for (g, basis) in bases.iter().enumerate() {
        for t in 0..tokens_per_group {
            let j = g * tokens_per_group + t;
            let coeffs: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in 0..d {
                let signal: f64 = (0..p).map(|i| basis[(r, i)] * coeffs[i]).sum();
                let noise: f64 = StandardNormal.sample(&mut rng);
                tokens[(r, j)] = signal + noise_std * noise;
            }
            labels.push(g);
        }
    }
    Ok(SynthData {
        tokens,
        labels,
        bases,
    })
}

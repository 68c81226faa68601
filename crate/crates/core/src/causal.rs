//! Causal token statistics attention.
//!
//! Position `j` only sees tokens `1..=j`. All statistics a position needs
//! (per-head row energies for the membership normalization, membership-weighted
//! second moments, and group weights) are running sums, so a sequence is
//! processed in one left-to-right pass with `O(K·p)` state. The batch entry
//! points drive the same [`CausalStream`] that incremental callers use.

use serde::{Deserialize, Serialize};

use crate::coding_rate::{ConcaveFn, Membership, ProjectionBank, EMPTY_GROUP};
use crate::error::{dim_err, Result, TostError};
use crate::linalg::{axpy, dot, softmax_in_place, Matrix};
use crate::tssa::{check_inputs, TssaParams};

/// Causal layer parameters: the shared attention hyperparameters plus an
/// optional additive pre-softmax bias `b` of shape `(sequence length, K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalParams {
    pub base: TssaParams,
    pub bias: Option<Matrix>,
}

impl CausalParams {
    pub fn new(base: TssaParams) -> Self {
        Self { base, bias: None }
    }

    pub fn with_bias(mut self, bias: Matrix) -> Self {
        self.bias = Some(bias);
        self
    }

    fn validate(&self, bank: &ProjectionBank, n: usize) -> Result<()> {
        self.base.validate(bank)?;
        if let Some(b) = &self.bias {
            if b.cols() != bank.k() || b.rows() < n {
                return dim_err(format!(
                    "bias is {:?}, need at least {n} rows and {} columns",
                    b.shape(),
                    bank.k()
                ));
            }
        }
        Ok(())
    }
}

/// Running state for causal attention over one sequence.
#[derive(Debug, Clone)]
pub struct CausalStream<'a> {
    bank: &'a ProjectionBank,
    params: &'a CausalParams,
    /// Per head, running `Σ_t (U_kᵀ z_t)_i²` for the membership normalization.
    energy: Vec<Vec<f64>>,
    /// Per head, running `Σ_t Π_tk (U_kᵀ z_t)_i²`.
    moments: Vec<Vec<f64>>,
    /// Per head, running `Σ_t Π_tk`.
    weight: Vec<f64>,
    pos: usize,
    proj: Vec<Vec<f64>>,
    /// `U_kᵀ` per head, so projections and write-backs run over contiguous rows.
    bases_t: Vec<Matrix>,
}

/// Output of one [`CausalStream::push`].
#[derive(Debug, Clone, PartialEq)]
pub struct CausalStep {
    /// Attention output for this position (length `d`).
    pub output: Vec<f64>,
    /// Membership row for this position (length `K`).
    pub membership: Vec<f64>,
}

impl<'a> CausalStream<'a> {
    pub fn new(bank: &'a ProjectionBank, params: &'a CausalParams) -> Result<Self> {
        params.validate(bank, 0)?;
        let (k, p) = (bank.k(), bank.p());
        Ok(Self {
            bank,
            params,
            energy: vec![vec![0.0; p]; k],
            moments: vec![vec![0.0; p]; k],
            weight: vec![0.0; k],
            pos: 0,
            proj: vec![vec![0.0; p]; k],
            bases_t: bank.bases().iter().map(Matrix::transpose).collect(),
        })
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Consumes the next token and returns its output and membership row.
    pub fn push(&mut self, z: &[f64]) -> Result<CausalStep> {
        let bank = self.bank;
        let base = &self.params.base;
        let (d, p, k) = (bank.d(), bank.p(), bank.k());
        if z.len() != d {
            return dim_err(format!("token has length {}, expected {d}", z.len()));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(TostError::Validation("token has non-finite entries".into()));
        }
        let bias_row = match &self.params.bias {
            Some(b) if self.pos >= b.rows() => {
                return dim_err(format!("bias covers {} positions", b.rows()));
            }
            Some(b) => Some(b.row(self.pos)),
            None => None,
        };

        for (ut, proj) in self.bases_t.iter().zip(&mut self.proj) {
            for (i, x) in proj.iter_mut().enumerate() {
                *x = dot(ut.row(i), z);
            }
        }

        let mut logits = vec![0.0; k];
        for h in 0..k {
            let proj = &self.proj[h];
            let energy = &mut self.energy[h];
            let mut s = 0.0;
            for i in 0..p {
                let x2 = proj[i] * proj[i];
                if base.normalize_membership {
                    energy[i] += x2;
                    let norm = energy[i].sqrt().max(base.norm_eps);
                    s += x2 / (norm * norm);
                } else {
                    s += x2;
                }
            }
            if let Some(b) = bias_row {
                s += b[h];
            }
            logits[h] = s / (2.0 * base.eta);
        }
        softmax_in_place(&mut logits);
        let membership = logits;

        self.pos += 1;
        let step = base.tau / self.pos as f64;
        let mut output = vec![0.0; d];
        let mut gated = vec![0.0; p];
        for h in 0..k {
            let pi = membership[h];
            let proj = &self.proj[h];
            self.weight[h] += pi;
            for (m, x) in self.moments[h].iter_mut().zip(proj) {
                *m += pi * x * x;
            }
            let nk = self.weight[h];
            if nk < EMPTY_GROUP {
                continue;
            }
            for i in 0..p {
                gated[i] = pi * base.f.grad(self.moments[h][i] / nk) * proj[i];
            }
            match &base.w {
                Some(w) => {
                    for (r, out) in output.iter_mut().enumerate() {
                        for i in 0..p {
                            *out -= w[(r, h * p + i)] * gated[i];
                        }
                    }
                }
                None => {
                    let ut = &self.bases_t[h];
                    for (i, &g) in gated.iter().enumerate() {
                        axpy(-step * g, ut.row(i), &mut output);
                    }
                }
            }
        }
        Ok(CausalStep { output, membership })
    }
}

fn run(z: &Matrix, bank: &ProjectionBank, params: &CausalParams) -> Result<(Matrix, Matrix)> {
    check_inputs(z, bank)?;
    params.validate(bank, z.cols())?;
    let (d, n) = z.shape();
    let mut stream = CausalStream::new(bank, params)?;
    // token-major copies keep every push on contiguous memory
    let tokens = z.transpose();
    let mut out_t = Matrix::zeros(n, d);
    let mut pi = Matrix::zeros(n, bank.k());
    for j in 0..n {
        let step = stream.push(tokens.row(j))?;
        out_t.row_mut(j).copy_from_slice(&step.output);
        pi.row_mut(j).copy_from_slice(&step.membership);
    }
    Ok((out_t.transpose(), pi))
}

/// Membership where row `j` is normalized with prefix statistics of tokens `1..=j` only.
pub fn causal_membership(
    z: &Matrix,
    bank: &ProjectionBank,
    params: &CausalParams,
) -> Result<Membership> {
    let (_, pi) = run(z, bank, params)?;
    Membership::new(pi)
}

/// Causal attention output: column `j` is
/// `−(τ/j) Σ_k Π_jk U_k Diag(∇f[prefix second moments]) U_kᵀ z_j`.
pub fn causal_tssa_attention(
    z: &Matrix,
    bank: &ProjectionBank,
    params: &CausalParams,
) -> Result<Matrix> {
    Ok(run(z, bank, params)?.0)
}

/// `Z + causal_tssa_attention(Z)`.
pub fn causal_token_update(
    z: &Matrix,
    bank: &ProjectionBank,
    params: &CausalParams,
) -> Result<Matrix> {
    z.add(&causal_tssa_attention(z, bank, params)?)
}

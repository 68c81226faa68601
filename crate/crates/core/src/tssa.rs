//! Token statistics self-attention.
//!
//! Each head projects the tokens onto its basis, estimates the second moment
//! of every projected direction under the head's membership weights, gates the
//! projections by `∇f` of those moments and maps them back. No token-by-token
//! interaction is ever formed: time is `O(K·p·d·n)` and the working set is the
//! `K` projected `p x n` blocks plus the `n x K` membership.

use serde::{Deserialize, Serialize};

use crate::coding_rate::{ConcaveFn, Membership, ProjectionBank, SpectralFn, EMPTY_GROUP};
use crate::error::{dim_err, Result, TostError};
use crate::linalg::{axpy, softmax_in_place, Matrix};
use crate::par;

/// Hyperparameters of one attention layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TssaParams {
    /// Step size of the compression step.
    pub tau: f64,
    /// Membership softmax temperature.
    pub eta: f64,
    pub f: SpectralFn,
    /// Optional `d x pK` output matrix replacing `(τ/n)[U_1, ..., U_K]`.
    pub w: Option<Matrix>,
    /// Normalize each projected feature row to unit norm before scoring membership.
    pub normalize_membership: bool,
    /// Floor on row norms in the normalization.
    pub norm_eps: f64,
}

impl TssaParams {
    /// Defaults for dimension `d`: `ε = 1` (so `α = d`), `τ = η = 1`, normalized membership.
    pub fn new(d: usize) -> Self {
        Self {
            tau: 1.0,
            eta: 1.0,
            f: SpectralFn::new(d.max(1) as f64).expect("positive"),
            w: None,
            normalize_membership: true,
            norm_eps: 1e-12,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.f = SpectralFn::new(alpha)?;
        Ok(self)
    }

    pub fn with_normalized_membership(mut self, on: bool) -> Self {
        self.normalize_membership = on;
        self
    }

    pub fn with_output_matrix(mut self, w: Matrix) -> Self {
        self.w = Some(w);
        self
    }

    pub fn alpha(&self) -> f64 {
        self.f.alpha()
    }

    pub fn validate(&self, bank: &ProjectionBank) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(TostError::Validation(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(TostError::Validation(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(TostError::Validation("norm_eps must be positive".into()));
        }
        if let Some(w) = &self.w {
            if w.shape() != (bank.d(), bank.p() * bank.k()) {
                return dim_err(format!(
                    "output matrix is {:?}, bank needs {}x{}",
                    w.shape(),
                    bank.d(),
                    bank.p() * bank.k()
                ));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_inputs(z: &Matrix, bank: &ProjectionBank) -> Result<()> {
    if !z.is_finite() {
        return Err(TostError::Validation("token matrix has non-finite entries".into()));
    }
    if z.rows() != bank.d() {
        return dim_err(format!("tokens have dimension {}, bank {}", z.rows(), bank.d()));
    }
    if z.cols() == 0 {
        return dim_err("no tokens");
    }
    Ok(())
}

/// `U_kᵀ Z` for every head.
pub(crate) fn head_projections(z: &Matrix, bank: &ProjectionBank) -> Vec<Matrix> {
    par::map_indexed(bank.k(), |k| {
        bank.basis(k).t_matmul(z).expect("dimension checked by caller")
    })
}

/// Reciprocal row norms of a projected block, floored at `1/eps`.
pub(crate) fn reciprocal_row_norms(proj: &Matrix, eps: f64) -> Vec<f64> {
    (0..proj.rows())
        .map(|i| {
            let norm = proj.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 / norm.max(eps)
        })
        .collect()
}

fn membership_from_projections(projs: &[Matrix], params: &TssaParams) -> Membership {
    let k = projs.len();
    let n = projs[0].cols();
    let scales: Vec<Vec<f64>> = projs
        .iter()
        .map(|p| {
            if params.normalize_membership {
                reciprocal_row_norms(p, params.norm_eps)
            } else {
                vec![1.0; p.rows()]
            }
        })
        .collect();
    let mut logits = Matrix::zeros(n, k);
    for (h, (proj, y)) in projs.iter().zip(&scales).enumerate() {
        for (i, &yi) in y.iter().enumerate() {
            let yi2 = yi * yi;
            for (j, &x) in proj.row(i).iter().enumerate() {
                logits[(j, h)] += x * x * yi2;
            }
        }
    }
    let inv = 1.0 / (2.0 * params.eta);
    for j in 0..n {
        let row = logits.row_mut(j);
        for v in row.iter_mut() {
            *v *= inv;
        }
        softmax_in_place(row);
    }
    Membership::from_stochastic(logits)
}

/// Soft assignment of each token to each head: a softmax over heads of the
/// projected energy `‖U_kᵀ z_j‖² / 2η`, optionally with every projected
/// feature row scaled to unit norm first.
pub fn estimate_membership(
    z: &Matrix,
    bank: &ProjectionBank,
    params: &TssaParams,
) -> Result<Membership> {
    check_inputs(z, bank)?;
    params.validate(bank)?;
    Ok(membership_from_projections(&head_projections(z, bank), params))
}

/// `∇f[(UᵀZ)^{⊙2} π / ⟨π, 1⟩]`: one gate value per projected direction.
pub fn diag_gate<F: ConcaveFn>(z: &Matrix, pi: &[f64], u: &Matrix, f: &F) -> Result<Vec<f64>> {
    if u.rows() != z.rows() || pi.len() != z.cols() {
        return dim_err("diag_gate shapes disagree");
    }
    if pi.iter().any(|&x| x < 0.0) {
        return Err(TostError::Validation("membership weights must be non-negative".into()));
    }
    let nk: f64 = pi.iter().sum();
    if nk <= 0.0 {
        return Err(TostError::DegenerateGroup { group: 0 });
    }
    let mut gates = vec![0.0; u.cols()];
    let mut row = vec![0.0; z.cols()];
    for (i, g) in gates.iter_mut().enumerate() {
        row.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..z.rows() {
            axpy(u[(r, i)], z.row(r), &mut row);
        }
        let m = row.iter().zip(pi).map(|(x, w)| x * x * w).sum::<f64>() / nk;
        *g = f.grad(m);
    }
    Ok(gates)
}

/// Turns `U_kᵀZ` into `D_k U_kᵀ Z Diag(π_k)` in place. Returns false for an empty head.
fn gate_in_place<F: ConcaveFn>(proj: &mut Matrix, w: &[f64], f: &F) -> bool {
    let nk: f64 = w.iter().sum();
    if nk < EMPTY_GROUP {
        return false;
    }
    for i in 0..proj.rows() {
        let row = proj.row_mut(i);
        let m = row.iter().zip(w).map(|(x, wj)| x * x * wj).sum::<f64>() / nk;
        let g = f.grad(m);
        for (x, wj) in row.iter_mut().zip(w) {
            *x *= g * wj;
        }
    }
    true
}

fn attention_from_projections(
    mut projs: Vec<Matrix>,
    pi: &Membership,
    bank: &ProjectionBank,
    params: &TssaParams,
) -> Matrix {
    let (d, p, n) = (bank.d(), bank.p(), pi.n());
    let active = par::map_mut_indexed(&mut projs, |k, proj| {
        gate_in_place(proj, &pi.column(k), &params.f)
    });

    let mut out = Matrix::zeros(d, n);
    let step = params.tau / n as f64;
    for (k, gated) in projs.iter().enumerate() {
        if !active[k] {
            continue;
        }
        for r in 0..d {
            let out_row = out.row_mut(r);
            for i in 0..p {
                let coeff = match &params.w {
                    Some(w) => -w[(r, k * p + i)],
                    None => -step * bank.basis(k)[(r, i)],
                };
                if coeff != 0.0 {
                    axpy(coeff, gated.row(i), out_row);
                }
            }
        }
    }
    out
}

/// The attention output `−(τ/n) Σ_k U_k D_k U_kᵀ Z Diag(π_k)` with `Π` estimated from `Z`.
///
/// With an output matrix `W` the left factor `(τ/n)[U_1, ..., U_K]` is replaced by `W`.
pub fn tssa_attention(z: &Matrix, bank: &ProjectionBank, params: &TssaParams) -> Result<Matrix> {
    check_inputs(z, bank)?;
    params.validate(bank)?;
    let projs = head_projections(z, bank);
    let pi = membership_from_projections(&projs, params);
    Ok(attention_from_projections(projs, &pi, bank, params))
}

/// As [`tssa_attention`] but with a caller-supplied membership.
pub fn tssa_attention_with_membership(
    z: &Matrix,
    pi: &Membership,
    bank: &ProjectionBank,
    params: &TssaParams,
) -> Result<Matrix> {
    check_inputs(z, bank)?;
    params.validate(bank)?;
    if pi.n() != z.cols() || pi.k() != bank.k() {
        return dim_err(format!(
            "membership is {}x{}, need {}x{}",
            pi.n(),
            pi.k(),
            z.cols(),
            bank.k()
        ));
    }
    Ok(attention_from_projections(head_projections(z, bank), pi, bank, params))
}

/// One residual compression step: `Z + tssa_attention(Z)`.
pub fn token_update(z: &Matrix, bank: &ProjectionBank, params: &TssaParams) -> Result<Matrix> {
    z.add(&tssa_attention(z, bank, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gate_of_zero_tokens_is_alpha() {
        let f = SpectralFn::new(4.0).unwrap();
        let u = Matrix::identity(3).cols_range(0, 2);
        let g = diag_gate(&Matrix::zeros(3, 5), &[1.0; 5], &u, &f).unwrap();
        assert_eq!(g, vec![4.0, 4.0]);
    }

    #[test]
    fn gate_hand_example() {
        let f = SpectralFn::new(1.0).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let g = diag_gate(&z, &[1.0, 1.0], &Matrix::identity(2), &f).unwrap();
        assert_abs_diff_eq!(g[0], 1.0 / 6.0, epsilon = 1e-15);
        assert_eq!(g[1], 1.0);
    }

    #[test]
    fn gate_decreases_with_moment() {
        let f = SpectralFn::new(2.0).unwrap();
        let u = Matrix::identity(1);
        let mut last = f64::INFINITY;
        for s in [0.0, 0.5, 1.0, 2.0, 10.0] {
            let z = Matrix::from_rows(&[vec![s]]).unwrap();
            let g = diag_gate(&z, &[1.0], &u, &f).unwrap()[0];
            assert_abs_diff_eq!(g, 2.0 / (1.0 + 2.0 * s * s), epsilon = 1e-15);
            assert!(g < last && g > 0.0 && g <= 2.0);
            last = g;
        }
    }

    #[test]
    fn gate_rejects_empty_group() {
        let f = SpectralFn::new(1.0).unwrap();
        assert!(matches!(
            diag_gate(&Matrix::zeros(2, 2), &[0.0, 0.0], &Matrix::identity(2), &f),
            Err(TostError::DegenerateGroup { .. })
        ));
    }

    #[test]
    fn membership_symmetric_heads_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = crate::linalg::random_orthonormal(5, 2, 3).unwrap();
        let bank = ProjectionBank::new(vec![u.clone(), u]).unwrap();
        let z = Matrix::gaussian(5, 6, &mut rng);
        for normalize in [true, false] {
            let params = TssaParams::new(5).with_normalized_membership(normalize);
            let pi = estimate_membership(&z, &bank, &params).unwrap();
            for j in 0..6 {
                assert_abs_diff_eq!(pi.as_matrix()[(j, 0)], 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn membership_of_zero_tokens_is_uniform() {
        let bank = ProjectionBank::random_orthonormal(4, 2, 3, 0).unwrap();
        for normalize in [true, false] {
            let params = TssaParams::new(4).with_normalized_membership(normalize);
            let pi = estimate_membership(&Matrix::zeros(4, 3), &bank, &params).unwrap();
            assert!(pi.as_matrix().max_abs_diff(&Matrix::from_fn(3, 3, |_, _| 1.0 / 3.0)) < 1e-15);
        }
    }

    #[test]
    fn hot_temperature_flattens_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = ProjectionBank::random_orthonormal(6, 2, 3, 1).unwrap();
        let z = Matrix::gaussian(6, 10, &mut rng).scale(3.0);
        let params = TssaParams::new(6).with_eta(1e12).with_normalized_membership(false);
        let pi = estimate_membership(&z, &bank, &params).unwrap();
        assert!(pi.as_matrix().max_abs_diff(&Matrix::from_fn(10, 3, |_, _| 1.0 / 3.0)) < 1e-6);
    }

    #[test]
    fn zero_tokens_give_zero_output() {
        let bank = ProjectionBank::random_orthonormal(4, 2, 2, 0).unwrap();
        let params = TssaParams::new(4);
        let z = Matrix::zeros(4, 5);
        assert_eq!(tssa_attention(&z, &bank, &params).unwrap(), z);
        assert_eq!(token_update(&z, &bank, &params).unwrap(), z);
        let w = Matrix::from_fn(4, 4, |i, j| (i + j) as f64);
        let params = params.with_output_matrix(w);
        assert_eq!(tssa_attention(&z, &bank, &params).unwrap(), z);
    }

    #[test]
    fn output_matrix_equal_to_scaled_bank_matches_plain_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = ProjectionBank::random_orthonormal(6, 2, 3, 4).unwrap();
        let z = Matrix::gaussian(6, 9, &mut rng);
        let params = TssaParams::new(6).with_tau(0.7);
        let plain = tssa_attention(&z, &bank, &params).unwrap();
        let w = bank.stacked().scale(0.7 / 9.0);
        let with_w = tssa_attention(&z, &bank, &params.with_output_matrix(w)).unwrap();
        assert!(plain.max_abs_diff(&with_w) < 1e-14);
    }

    #[test]
    fn validation_errors() {
        let bank = ProjectionBank::random_orthonormal(4, 2, 2, 0).unwrap();
        let z = Matrix::zeros(3, 2);
        assert!(matches!(
            tssa_attention(&z, &bank, &TssaParams::new(4)),
            Err(TostError::Dimension(_))
        ));
        let z = Matrix::zeros(4, 2);
        assert!(tssa_attention(&z, &bank, &TssaParams::new(4).with_tau(0.0)).is_err());
        assert!(tssa_attention(&z, &bank, &TssaParams::new(4).with_eta(-1.0)).is_err());
        let bad_w = TssaParams::new(4).with_output_matrix(Matrix::zeros(4, 3));
        assert!(tssa_attention(&z, &bank, &bad_w).is_err());
    }
}

//! Coding-rate objectives: expansion and compression rates, the generalized
//! spectral compression, its variational upper bound over projection banks,
//! and the closed-form gradient of that bound.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result, TostError};
use crate::linalg::{self, sym_eig, Matrix};
use crate::par;

/// Groups whose total membership falls below this weight are treated as empty.
pub const EMPTY_GROUP: f64 = 1e-12;
/// Row-sum tolerance accepted by [`Membership::new`].
pub const ROW_SUM_TOL: f64 = 1e-8;
/// Orthonormality tolerance for a bank to count as orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;
/// Max-norm tolerance on the component of a group covariance outside a basis span.
pub const IMAGE_TOL: f64 = 1e-8;

/// A scalar function that is concave, non-decreasing, and vanishes at zero.
pub trait ConcaveFn: Sync {
    fn eval(&self, x: f64) -> f64;
    fn grad(&self, x: f64) -> f64;
}

/// `f(x) = log(1 + αx)` with `α = d/ε²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralFn {
    alpha: f64,
}

impl SpectralFn {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(TostError::Validation(format!("alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }

    /// `α = d / ε²`.
    pub fn from_epsilon(d: usize, epsilon: f64) -> Result<Self> {
        Self::new(d as f64 / (epsilon * epsilon))
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl ConcaveFn for SpectralFn {
    #[inline]
    fn eval(&self, x: f64) -> f64 {
        (self.alpha * x).ln_1p()
    }

    #[inline]
    fn grad(&self, x: f64) -> f64 {
        self.alpha / (1.0 + self.alpha * x)
    }
}

/// Row-stochastic `n x K` soft assignment of tokens to groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pi: Matrix,
}

impl Membership {
    /// Validates non-negativity and unit row sums.
    pub fn new(pi: Matrix) -> Result<Self> {
        if !pi.is_finite() {
            return Err(TostError::Validation("membership has non-finite entries".into()));
        }
        for j in 0..pi.rows() {
            let row = pi.row(j);
            if row.iter().any(|&x| x < 0.0) {
                return Err(TostError::Validation(format!("membership row {j} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(TostError::Validation(format!("membership row {j} sums to {s}")));
            }
        }
        Ok(Self { pi })
    }

    /// Rows already known to be stochastic (softmax outputs).
    pub(crate) fn from_stochastic(pi: Matrix) -> Self {
        Self { pi }
    }

    /// One-hot rows from labels in `0..k`.
    pub fn hard(labels: &[usize], k: usize) -> Result<Self> {
        if labels.is_empty() || k == 0 {
            return dim_err("hard membership needs at least one token and one group");
        }
        let mut pi = Matrix::zeros(labels.len(), k);
        for (j, &l) in labels.iter().enumerate() {
            if l >= k {
                return dim_err(format!("label {l} out of range for {k} groups"));
            }
            pi[(j, l)] = 1.0;
        }
        Ok(Self { pi })
    }

    pub fn uniform(n: usize, k: usize) -> Self {
        Self {
            pi: Matrix::from_fn(n, k, |_, _| 1.0 / k as f64),
        }
    }

    /// Random soft membership: softmax of Gaussian logits scaled by `sharpness`.
    pub fn random(n: usize, k: usize, sharpness: f64, rng: &mut impl rand::Rng) -> Self {
        let mut pi = Matrix::gaussian(n, k, rng).scale(sharpness);
        for j in 0..n {
            linalg::softmax_in_place(pi.row_mut(j));
        }
        Self { pi }
    }

    pub fn n(&self) -> usize {
        self.pi.rows()
    }

    pub fn k(&self) -> usize {
        self.pi.cols()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.pi
    }

    pub fn into_matrix(self) -> Matrix {
        self.pi
    }

    /// Column `π_k`.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.pi.col(k)
    }

    /// `n_k = ⟨π_k, 1⟩`.
    pub fn group_weight(&self, k: usize) -> f64 {
        (0..self.n()).map(|j| self.pi[(j, k)]).sum()
    }

    /// Rows `0..len`, renormalization-free (rows stay stochastic).
    pub fn prefix(&self, len: usize) -> Membership {
        Membership {
            pi: self.pi.rows_range(0, len),
        }
    }

    /// Row `j` of the result is row `perm[j]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Membership {
        Membership {
            pi: self.pi.permute_rows(perm),
        }
    }
}

/// `K` projection bases `U_k`, each `d x p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionBank {
    bases: Vec<Matrix>,
}

impl ProjectionBank {
    pub fn new(bases: Vec<Matrix>) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| TostError::Dimension("projection bank is empty".into()))?;
        let (d, p) = first.shape();
        if p > d {
            return dim_err(format!("basis width {p} exceeds dimension {d}"));
        }
        if bases.iter().any(|b| b.shape() != (d, p)) {
            return dim_err("bank members have differing shapes");
        }
        if bases.iter().any(|b| !b.is_finite()) {
            return Err(TostError::Validation("bank has non-finite entries".into()));
        }
        Ok(Self { bases })
    }

    /// `K` independent seeded orthonormal `d x p` bases.
    pub fn random_orthonormal(d: usize, p: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return dim_err("bank needs at least one head");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bases = (0..k)
            .map(|_| linalg::random_orthonormal_with(d, p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(bases)
    }

    /// `K` copies of the first `p` standard basis vectors.
    pub fn identity(d: usize, p: usize, k: usize) -> Result<Self> {
        Self::new(vec![Matrix::identity(d).cols_range(0, p); k])
    }

    pub fn k(&self) -> usize {
        self.bases.len()
    }

    pub fn d(&self) -> usize {
        self.bases[0].rows()
    }

    pub fn p(&self) -> usize {
        self.bases[0].cols()
    }

    pub fn basis(&self, k: usize) -> &Matrix {
        &self.bases[k]
    }

    pub fn bases(&self) -> &[Matrix] {
        &self.bases
    }

    pub fn is_orthonormal(&self) -> bool {
        self.bases
            .iter()
            .all(|u| u.orthonormality_error() <= ORTHONORMAL_TOL)
    }

    /// `[U_1, ..., U_K]` as a `d x pK` matrix.
    pub fn stacked(&self) -> Matrix {
        let (d, p) = (self.d(), self.p());
        Matrix::from_fn(d, p * self.k(), |r, c| self.bases[c / p][(r, c % p)])
    }
}

fn check_tokens(z: &Matrix) -> Result<()> {
    if z.rows() == 0 || z.cols() == 0 {
        return dim_err("token matrix must have at least one feature and one token");
    }
    if !z.is_finite() {
        return Err(TostError::Validation("token matrix has non-finite entries".into()));
    }
    Ok(())
}

fn check_membership(z: &Matrix, pi: &Membership) -> Result<()> {
    if pi.n() != z.cols() {
        return dim_err(format!("membership has {} rows for {} tokens", pi.n(), z.cols()));
    }
    Ok(())
}

fn check_bank(z: &Matrix, pi: &Membership, bank: &ProjectionBank) -> Result<()> {
    if bank.d() != z.rows() {
        return dim_err(format!("bank dimension {} vs token dimension {}", bank.d(), z.rows()));
    }
    if bank.k() != pi.k() {
        return dim_err(format!("bank has {} heads, membership {} groups", bank.k(), pi.k()));
    }
    Ok(())
}

/// `Z Diag(w) Zᵀ`.
pub fn weighted_covariance(z: &Matrix, w: &[f64]) -> Matrix {
    let d = z.rows();
    let mut c = Matrix::zeros(d, d);
    for a in 0..d {
        let za = z.row(a);
        for b in a..d {
            let zb = z.row(b);
            let v: f64 = za.iter().zip(zb).zip(w).map(|((x, y), wj)| x * y * wj).sum();
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    c
}

/// Eigenvalues of `Z Diag(w) Zᵀ · scale`, computed on the smaller of the
/// `d x d` covariance and the `n x n` weighted Gram matrix.
fn weighted_spectrum(z: &Matrix, w: &[f64], scale: f64) -> Result<Vec<f64>> {
    let (d, n) = z.shape();
    let m = if d <= n {
        weighted_covariance(z, w).scale(scale)
    } else {
        let sw: Vec<f64> = w.iter().map(|x| x.max(0.0).sqrt()).collect();
        let mut g = z.t_matmul(z)?;
        for i in 0..n {
            for j in 0..n {
                g[(i, j)] *= sw[i] * sw[j] * scale;
            }
        }
        g
    };
    Ok(sym_eig(&m)?.eigenvalues)
}

/// `Σ_i f(λ_i(M))` for a symmetric PSD matrix.
pub fn spectral_sum<F: ConcaveFn>(m: &Matrix, f: &F) -> Result<f64> {
    Ok(sym_eig(m)?.eigenvalues.iter().map(|&l| f.eval(l.max(0.0))).sum())
}

/// `Σ_i f((QᵀMQ)_ii)`; an upper bound on [`spectral_sum`] for orthogonal `Q`.
pub fn diagonal_sum<F: ConcaveFn>(m: &Matrix, q: &Matrix, f: &F) -> Result<f64> {
    let qm = q.t_matmul(m)?;
    Ok((0..q.cols())
        .map(|i| {
            let v: f64 = (0..m.rows()).map(|r| qm[(i, r)] * q[(r, i)]).sum();
            f.eval(v.max(0.0))
        })
        .sum())
}

/// `R(Z) = ½ log det(I + α Z Zᵀ / n)`.
pub fn expansion_rate(z: &Matrix, alpha: f64) -> Result<f64> {
    check_tokens(z)?;
    let f = SpectralFn::new(alpha)?;
    let n = z.cols();
    let ones = vec![1.0; n];
    let eigs = weighted_spectrum(z, &ones, 1.0 / n as f64)?;
    Ok(0.5 * eigs.iter().map(|&l| f.eval(l.max(0.0))).sum::<f64>())
}

/// `R_c(Z, Π) = ½ Σ_k (n_k/n) log det(I + α Z Diag(π_k) Zᵀ / n_k)`.
pub fn compression_rate(z: &Matrix, pi: &Membership, alpha: f64) -> Result<f64> {
    general_compression(z, pi, &SpectralFn::new(alpha)?)
}

/// `R_{c,f}(Z, Π) = ½ Σ_k (n_k/n) Σ_i f(λ_i(Z Diag(π_k) Zᵀ / n_k))`.
pub fn general_compression<F: ConcaveFn>(z: &Matrix, pi: &Membership, f: &F) -> Result<f64> {
    check_tokens(z)?;
    check_membership(z, pi)?;
    let n = z.cols() as f64;
    let terms = par::map_indexed(pi.k(), |k| -> Result<f64> {
        let w = pi.column(k);
        let nk: f64 = w.iter().sum();
        if nk < EMPTY_GROUP {
            return Ok(0.0);
        }
        let eigs = weighted_spectrum(z, &w, 1.0 / nk)?;
        Ok(nk / n * eigs.iter().map(|&l| f.eval(l.max(0.0))).sum::<f64>())
    });
    let mut total = 0.0;
    for t in terms {
        total += t?;
    }
    Ok(0.5 * total)
}

/// Second moments `(UᵀZ)^{⊙2} π / ⟨π, 1⟩` of the projected tokens, plus the projection itself.
pub(crate) fn projected_moments(z: &Matrix, u: &Matrix, w: &[f64], nk: f64) -> (Matrix, Vec<f64>) {
    let proj = u.t_matmul(z).expect("bank dimension checked by caller");
    let moments = (0..proj.rows())
        .map(|i| {
            proj.row(i)
                .iter()
                .zip(w)
                .map(|(x, wj)| x * x * wj)
                .sum::<f64>()
                / nk
        })
        .collect();
    (proj, moments)
}

/// `R^var_{c,f}(Z, Π | {U_k}) = ½ Σ_k (n_k/n) Σ_i f((U_kᵀ Z Diag(π_k) Zᵀ U_k)_ii / n_k)`.
///
/// The diagonal is read off `(U_kᵀZ)^{⊙2} π_k`; no `d x d` covariance is formed.
pub fn variational_compression<F: ConcaveFn>(
    z: &Matrix,
    pi: &Membership,
    bank: &ProjectionBank,
    f: &F,
) -> Result<f64> {
    check_tokens(z)?;
    check_membership(z, pi)?;
    check_bank(z, pi, bank)?;
    let n = z.cols() as f64;
    let terms = par::map_indexed(bank.k(), |k| {
        let w = pi.column(k);
        let nk: f64 = w.iter().sum();
        if nk < EMPTY_GROUP {
            return 0.0;
        }
        let (_, moments) = projected_moments(z, bank.basis(k), &w, nk);
        nk / n * moments.iter().map(|&m| f.eval(m)).sum::<f64>()
    });
    Ok(0.5 * terms.iter().sum::<f64>())
}

/// Per-group top-`p` eigenvectors of `Z Diag(π_k) Zᵀ`.
pub fn oracle_bases(z: &Matrix, pi: &Membership, p: usize) -> Result<ProjectionBank> {
    check_tokens(z)?;
    check_membership(z, pi)?;
    if p == 0 || p > z.rows() {
        return dim_err(format!("oracle basis width {p} must be in 1..={}", z.rows()));
    }
    let bases = par::map_indexed(pi.k(), |k| {
        let c = weighted_covariance(z, &pi.column(k));
        sym_eig(&c).map(|e| e.top_vectors(p))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    ProjectionBank::new(bases)
}

/// Largest entry of `(I − UUᵀ) M`: how far the image of `M` leaves the span of `U`.
pub fn image_residual(m: &Matrix, u: &Matrix) -> Result<f64> {
    let coeffs = u.t_matmul(m)?;
    let inside = u.matmul(&coeffs)?;
    Ok(m.sub(&inside)?.max_abs())
}

/// `R^var_{c,f} − R_{c,f}`, which is non-negative whenever the bound's hypotheses hold.
///
/// For an orthonormal bank the image condition is checked per group on the
/// normalized covariance `Z Diag(π_k) Zᵀ / n_k`, and a violation is reported as
/// a precondition error.
pub fn variational_bound_gap<F: ConcaveFn>(
    z: &Matrix,
    pi: &Membership,
    bank: &ProjectionBank,
    f: &F,
) -> Result<f64> {
    check_tokens(z)?;
    check_membership(z, pi)?;
    check_bank(z, pi, bank)?;
    if bank.is_orthonormal() {
        for k in 0..bank.k() {
            let w = pi.column(k);
            let nk: f64 = w.iter().sum();
            if nk < EMPTY_GROUP {
                continue;
            }
            let c = weighted_covariance(z, &w).scale(1.0 / nk);
            let resid = image_residual(&c, bank.basis(k))?;
            if resid > IMAGE_TOL * c.max_abs().max(1.0) {
                return Err(TostError::Precondition(format!(
                    "group {k} covariance leaves the basis span (residual {resid:.3e})"
                )));
            }
        }
    }
    Ok(variational_compression(z, pi, bank, f)? - general_compression(z, pi, f)?)
}

/// `∇_Z R^var_{c,f} = (1/n) Σ_k U_k Diag(∇f[(U_kᵀZ)^{⊙2} π_k / n_k]) U_kᵀ Z Diag(π_k)`, at fixed `Π`.
pub fn grad_variational<F: ConcaveFn>(
    z: &Matrix,
    pi: &Membership,
    bank: &ProjectionBank,
    f: &F,
) -> Result<Matrix> {
    check_tokens(z)?;
    check_membership(z, pi)?;
    check_bank(z, pi, bank)?;
    let (d, n) = z.shape();
    let parts = par::map_indexed(bank.k(), |k| -> Result<Option<Matrix>> {
        let w = pi.column(k);
        let nk: f64 = w.iter().sum();
        if nk < EMPTY_GROUP {
            return Ok(None);
        }
        let u = bank.basis(k);
        let (proj, moments) = projected_moments(z, u, &w, nk);
        let gated = Matrix::from_fn(proj.rows(), n, |i, j| f.grad(moments[i]) * proj[(i, j)] * w[j]);
        u.matmul(&gated).map(Some)
    });
    let mut out = Matrix::zeros(d, n);
    for part in parts {
        if let Some(m) = part? {
            out = out.add(&m)?;
        }
    }
    Ok(out.scale(1.0 / n as f64))
}

use crate::error::{dim_err, Result};
use crate::linalg::{dot, softmax_in_place, Matrix};

fn projections(z: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<(Matrix, Matrix)> {
    if wq.shape() != wk.shape() || wq.rows() != z.rows() {
        return dim_err(format!(
            "sdpa weights {:?}/{:?} on {}-dimensional tokens",
            wq.shape(),
            wk.shape(),
            z.rows()
        ));
    }
    Ok((wq.t_matmul(z)?, wk.t_matmul(z)?))
}

fn scores(q: &Matrix, k: &Matrix) -> Matrix {
    let (p, n) = q.shape();
    let scale = 1.0 / (p as f64).sqrt();
    // token-major copies so each score is a contiguous dot product
    let qt = q.transpose();
    let kt = k.transpose();
    let mut s = Matrix::zeros(n, n);
    for a in 0..n {
        let qa = qt.row(a);
        let row = s.row_mut(a);
        for (b, x) in row.iter_mut().enumerate() {
            *x = dot(qa, kt.row(b)) * scale;
        }
        softmax_in_place(row);
    }
    s
}

/// Row-stochastic `n x n` attention weights `softmax((WqᵀZ)ᵀ(WkᵀZ) / √p)`.
pub fn sdpa_weights(z: &Matrix, wq: &Matrix, wk: &Matrix) -> Result<Matrix> {
    let (q, k) = projections(z, wq, wk)?;
    Ok(scores(&q, &k))
}

/// Scaled dot-product attention, returned as a `p x n` matrix (one column per query).
///
/// The full `n x n` weight matrix is materialized.
pub fn baseline_sdpa(z: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Matrix> {
    if wv.shape() != wq.shape() {
        return dim_err("value weights must match query weights");
    }
    let (q, k) = projections(z, wq, wk)?;
    let v = wv.t_matmul(z)?;
    let weights = scores(&q, &k);
    let (p, n) = v.shape();
    let mut out = Matrix::zeros(p, n);
    for a in 0..n {
        let w = weights.row(a);
        for i in 0..p {
            out[(i, a)] = dot(w, v.row(i));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (Matrix, Matrix, Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        (
            Matrix::gaussian(6, n, &mut rng),
            Matrix::gaussian(6, 3, &mut rng),
            Matrix::gaussian(6, 3, &mut rng),
            Matrix::gaussian(6, 3, &mut rng),
        )
    }

    #[test]
    fn single_token_returns_values() {
        let (z, wq, wk, wv) = setup(1);
        let out = baseline_sdpa(&z, &wq, &wk, &wv).unwrap();
        assert!(out.max_abs_diff(&wv.t_matmul(&z).unwrap()) <= 1e-15);
    }

    #[test]
    fn rows_are_stochastic() {
        let (z, wq, wk, _) = setup(9);
        let w = sdpa_weights(&z, &wq, &wk).unwrap();
        for a in 0..9 {
            assert!((w.row(a).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn row_shift_invariance() {
        let mut row = vec![0.3, -1.0, 2.5];
        let mut shifted: Vec<f64> = row.iter().map(|x| x + 7.0).collect();
        softmax_in_place(&mut row);
        softmax_in_place(&mut shifted);
        for (a, b) in row.iter().zip(&shifted) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn permutation_equivariant() {
        let (z, wq, wk, wv) = setup(6);
        let base = baseline_sdpa(&z, &wq, &wk, &wv).unwrap();
        for a in 0..6 {
            for b in (a + 1)..6 {
                let mut perm: Vec<usize> = (0..6).collect();
                perm.swap(a, b);
                let out = baseline_sdpa(&z.permute_cols(&perm), &wq, &wk, &wv).unwrap();
                assert!(out.max_abs_diff(&base.permute_cols(&perm)) <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let (z, wq, _, wv) = setup(3);
        assert!(baseline_sdpa(&z, &wq, &Matrix::zeros(5, 3), &wv).is_err());
    }
}

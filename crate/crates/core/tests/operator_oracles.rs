//! The attention operators against direct, loop-by-loop evaluations of their
//! defining formulas.

#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tost_core::causal::{causal_membership, causal_tssa_attention, CausalParams};
use tost_core::coding_rate::ProjectionBank;
use tost_core::linalg::{random_orthonormal_with, Matrix};
use tost_core::tssa::{estimate_membership, tssa_attention, TssaParams};

struct Case {
    z: Matrix,
    bank: ProjectionBank,
    params: TssaParams,
}

fn case(seed: u64, d: usize, n: usize, k: usize, p: usize, normalize: bool) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Matrix::gaussian(d, n, &mut rng);
    let bases = (0..k).map(|_| random_orthonormal_with(d, p, &mut rng).unwrap()).collect();
    let params = TssaParams::new(d)
        .with_tau(rng.gen_range(0.2..1.5))
        .with_eta(rng.gen_range(0.5..2.0))
        .with_normalized_membership(normalize);
    Case {
        z,
        bank: ProjectionBank::new(bases).unwrap(),
        params,
    }
}

fn proj(u: &Matrix, z: &Matrix, i: usize, j: usize) -> f64 {
    (0..z.rows()).map(|r| u[(r, i)] * z[(r, j)]).sum()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Membership of token `j` with row normalization taken over tokens `0..len`.
fn membership_row(c: &Case, j: usize, len: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let (k, p) = (c.bank.k(), c.bank.p());
    let logits: Vec<f64> = (0..k)
        .map(|h| {
            let u = c.bank.basis(h);
            let mut s = 0.0;
            for i in 0..p {
                let x = proj(u, &c.z, i, j);
                if c.params.normalize_membership {
                    let e: f64 = (0..len).map(|t| proj(u, &c.z, i, t).powi(2)).sum();
                    let y = 1.0 / e.sqrt().max(c.params.norm_eps);
                    s += (x * y).powi(2);
                } else {
                    s += x * x;
                }
            }
            (s + bias.map_or(0.0, |b| b[h])) / (2.0 * c.params.eta)
        })
        .collect();
    softmax(&logits)
}

fn naive_tssa(c: &Case) -> Matrix {
    let (d, n) = c.z.shape();
    let (k, p) = (c.bank.k(), c.bank.p());
    let alpha = c.params.alpha();
    let pi: Vec<Vec<f64>> = (0..n).map(|j| membership_row(c, j, n, None)).collect();
    let mut out = Matrix::zeros(d, n);
    for h in 0..k {
        let u = c.bank.basis(h);
        let nk: f64 = (0..n).map(|j| pi[j][h]).sum();
        for i in 0..p {
            let m: f64 = (0..n).map(|j| pi[j][h] * proj(u, &c.z, i, j).powi(2)).sum::<f64>() / nk;
            let gate = alpha / (1.0 + alpha * m);
            for j in 0..n {
                let coeff = -c.params.tau / n as f64 * gate * proj(u, &c.z, i, j) * pi[j][h];
                for r in 0..d {
                    out[(r, j)] += coeff * u[(r, i)];
                }
            }
        }
    }
    out
}

/// Every column recomputed from scratch on its prefix, with its own prefix-normalized membership.
fn naive_causal(c: &Case, bias: Option<&Matrix>) -> (Matrix, Matrix) {
    let (d, n) = c.z.shape();
    let (k, p) = (c.bank.k(), c.bank.p());
    let alpha = c.params.alpha();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|j| membership_row(c, j, j + 1, bias.map(|b| b.row(j))))
        .collect();
    let mut out = Matrix::zeros(d, n);
    for j in 0..n {
        for h in 0..k {
            let u = c.bank.basis(h);
            let nk: f64 = (0..=j).map(|t| rows[t][h]).sum();
            for i in 0..p {
                let m: f64 = (0..=j).map(|t| rows[t][h] * proj(u, &c.z, i, t).powi(2)).sum::<f64>() / nk;
                let gate = alpha / (1.0 + alpha * m);
                let coeff = -c.params.tau / (j + 1) as f64 * rows[j][h] * gate * proj(u, &c.z, i, j);
                for r in 0..d {
                    out[(r, j)] += coeff * u[(r, i)];
                }
            }
        }
    }
    let pi = Matrix::from_fn(n, k, |j, h| rows[j][h]);
    (out, pi)
}

#[test]
fn tssa_matches_direct_formula() {
    for (seed, d, n, k, p) in [(0, 4, 6, 2, 2), (1, 8, 11, 3, 5), (2, 1, 3, 1, 1), (3, 6, 1, 4, 6)] {
        for normalize in [true, false] {
            let c = case(seed, d, n, k, p, normalize);
            let got = tssa_attention(&c.z, &c.bank, &c.params).unwrap();
            assert!(got.max_abs_diff(&naive_tssa(&c)) <= 1e-12, "seed {seed}");
            let pi = estimate_membership(&c.z, &c.bank, &c.params).unwrap();
            for j in 0..n {
                let want = membership_row(&c, j, n, None);
                for h in 0..k {
                    assert!((pi.as_matrix()[(j, h)] - want[h]).abs() <= 1e-13);
                }
            }
        }
    }
}

#[test]
fn causal_matches_prefix_recomputation() {
    for (seed, d, n, k, p) in [(10, 4, 9, 2, 2), (11, 7, 16, 3, 4), (12, 3, 1, 2, 3)] {
        for normalize in [true, false] {
            let c = case(seed, d, n, k, p, normalize);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bias = Matrix::gaussian(n, k, &mut rng);
            for b in [None, Some(bias)] {
                let mut params = CausalParams::new(c.params.clone());
                if let Some(b) = &b {
                    params = params.with_bias(b.clone());
                }
                let (want_out, want_pi) = naive_causal(&c, b.as_ref());
                let out = causal_tssa_attention(&c.z, &c.bank, &params).unwrap();
                let pi = causal_membership(&c.z, &c.bank, &params).unwrap();
                assert!(out.max_abs_diff(&want_out) <= 1e-12, "seed {seed}");
                assert!(pi.as_matrix().max_abs_diff(&want_pi) <= 1e-13);
            }
        }
    }
}

#[test]
fn output_matrix_equal_to_scaled_bank_is_neutral() {
    let c = case(20, 6, 8, 3, 2, true);
    let w = c.bank.stacked().scale(c.params.tau / 8.0);
    let with_w = c.params.clone().with_output_matrix(w);
    let a = tssa_attention(&c.z, &c.bank, &c.params).unwrap();
    let b = tssa_attention(&c.z, &c.bank, &with_w).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn membership_rows_are_distributions(seed in any::<u64>(), n in 1usize..20, k in 1usize..5, normalize in any::<bool>()) {
        let c = case(seed, 6, n, k, 3, normalize);
        let pi = estimate_membership(&c.z, &c.bank, &c.params).unwrap();
        for j in 0..n {
            let row = pi.as_matrix().row(j);
            prop_assert!(row.iter().all(|&x| x > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn tssa_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..12, shift in 1usize..11) {
        let c = case(seed, 5, n, 3, 2, true);
        let perm: Vec<usize> = (0..n).map(|j| (j + shift) % n).collect();
        let a = tssa_attention(&c.z, &c.bank, &c.params).unwrap().permute_cols(&perm);
        let b = tssa_attention(&c.z.permute_cols(&perm), &c.bank, &c.params).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn causal_prefix_is_self_contained(seed in any::<u64>(), n in 2usize..16, cut in 1usize..15) {
        let cut = cut.min(n - 1);
        let c = case(seed, 5, n, 2, 3, true);
        let params = CausalParams::new(c.params.clone());
        let full = causal_tssa_attention(&c.z, &c.bank, &params).unwrap();
        let head = causal_tssa_attention(&c.z.cols_range(0, cut), &c.bank, &params).unwrap();
        prop_assert_eq!(full.cols_range(0, cut), head);
    }
}

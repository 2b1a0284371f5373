//! Singular values against an independent two-sided Jacobi eigen-solver
//! applied to the Gram matrix.

use fusion_core::numerics::{normal_draw, singular_values, svd_singular_values, RngState, Tensor};
use proptest::prelude::*;

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotation.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

fn gram(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut g = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            g[i * cols + j] = (0..rows).map(|r| m[r * cols + i] * m[r * cols + j]).sum();
        }
    }
    g
}

fn check_against_oracle(rows: usize, cols: usize, seed: u64) -> f64 {
    let m: Tensor<f64> = normal_draw(&mut RngState::new(seed), &[rows, cols]);
    let sigma = singular_values(m.data(), rows, cols).unwrap();
    let oracle: Vec<f64> = jacobi_eigenvalues(gram(m.data(), rows, cols), cols)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    sigma
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn random_5x4_matches_eigen_oracle() {
    for seed in 0..10 {
        let err = check_against_oracle(5, 4, seed);
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn random_20x8_matches_eigen_oracle() {
    for seed in 0..10 {
        let err = check_against_oracle(20, 8, 100 + seed);
        assert!(err < 1e-8, "seed {seed}: {err:e}");
    }
}

#[test]
fn wide_matrix_matches_its_transpose() {
    let m: Tensor<f64> = normal_draw(&mut RngState::new(4), &[3, 9]);
    let mut t = vec![0.0; 27];
    for i in 0..3 {
        for j in 0..9 {
            t[j * 3 + i] = m.data()[i * 9 + j];
        }
    }
    let a = singular_values(m.data(), 3, 9).unwrap();
    let b = singular_values(&t, 9, 3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn energy_identity_and_ordering(rows in 1usize..12, cols in 1usize..12, seed in 0u64..1000) {
        let m: Tensor<f64> = normal_draw(&mut RngState::new(seed), &[rows, cols]);
        let k = rows.min(cols);
        let s = svd_singular_values(m.data(), rows, cols, k).unwrap();
        let fro: f64 = m.data().iter().map(|v| v * v).sum();
        let energy: f64 = s.iter().map(|v| v * v).sum();
        prop_assert!(((energy - fro) / fro).abs() < 1e-6);
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&v| v >= 0.0));
    }
}

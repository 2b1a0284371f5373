//! Fréchet distance between Gaussian fits of pooled-pixel features.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side of the pooled grid per channel.
pub const POOL_GRID: usize = 8;

/// Added to both covariance diagonals when either is singular.
pub const REGULARIZER: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FrechetResult {
    pub distance: f64,
    /// Whether [`REGULARIZER`] was added to the covariances.
    pub regularized: bool,
}

/// Average-pools each channel of a `[C, S, S]` image to an
/// `POOL_GRID x POOL_GRID` grid and flattens channel-major.
pub fn pooled_features(image: &Tensor<f32>) -> Result<Vec<f64>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Argument(format!("expected [C, S, S], got {:?}", image.shape())));
    };
    if h != w || h % POOL_GRID != 0 {
        return Err(Error::Argument(format!(
            "image side {h}x{w} is not a square multiple of {POOL_GRID}"
        )));
    }
    let cell = h / POOL_GRID;
    let norm = (cell * cell) as f64;
    let d = image.data();
    let mut out = Vec::with_capacity(c * POOL_GRID * POOL_GRID);
    for ch in 0..c {
        for gy in 0..POOL_GRID {
            for gx in 0..POOL_GRID {
                let mut s = 0.0;
                for y in gy * cell..(gy + 1) * cell {
                    for x in gx * cell..(gx + 1) * cell {
                        s += d[(ch * h + y) * w + x] as f64;
                    }
                }
                out.push(s / norm);
            }
        }
    }
    Ok(out)
}

fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples per set, got {n}")));
    }
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(Error::dim("frechet features", &[dim], &[bad.len()]));
    }
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))` between Gaussian
/// fits of two feature sets. Covariances whose smallest eigenvalue is not
/// above `1e-12` get [`REGULARIZER`] on the diagonal of both.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    let (mu_a, mut sa) = moments(a)?;
    let (mu_b, mut sb) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::dim("frechet features", &[mu_a.len()], &[mu_b.len()]));
    }
    let regularized = min_eigenvalue(&sa) <= 1e-12 || min_eigenvalue(&sb) <= 1e-12;
    if regularized {
        let eye = DMatrix::<f64>::identity(sa.nrows(), sa.ncols()) * REGULARIZER;
        sa += &eye;
        sb += &eye;
    }
    // tr((Sa Sb)^(1/2)) = tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)); the inner matrix is symmetric PSD
    let ra = psd_sqrt(&sa);
    let mut inner = &ra * &sb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (mu_a - mu_b).norm_squared();
    let distance = diff + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(FrechetResult {
        distance: distance.max(0.0),
        regularized,
    })
}

/// Fréchet distance between two image sets on pooled-pixel features.
pub fn pixel_frechet(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> Result<FrechetResult> {
    let fa = a.iter().map(pooled_features).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(pooled_features).collect::<Result<Vec<_>>>()?;
    frechet_from_features(&fa, &fb)
}

//! Singular values by one-sided (Hestenes) Jacobi rotation.
//!
//! Columns of a working copy are orthogonalized pairwise until every pair is
//! orthogonal to machine precision; the column norms are then the singular
//! values. Attention maps here are at most a few hundred per side, where the
//! method is both fast enough and accurate to near machine precision.

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

/// All singular values of the row-major `rows x cols` matrix, descending.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(Error::dim("svd", &[rows, cols], &[data.len()]));
    }
    // Work column-major on the orientation with more rows than columns.
    let (m, n, mut a) = if rows >= cols {
        let mut a = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                a[j * rows + i] = data[i * cols + j];
            }
        }
        (rows, cols, a)
    } else {
        (cols, rows, data.to_vec())
    };

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = column_pair(&mut a, m, p, q);
                let alpha: f64 = cp.iter().map(|v| v * v).sum();
                let beta: f64 = cq.iter().map(|v| v * v).sum();
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = a
        .chunks(m)
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sigma.sort_by(|x, y| y.total_cmp(x));
    Ok(sigma)
}

fn column_pair(a: &mut [f64], m: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    let (left, right) = a.split_at_mut(q * m);
    (&mut left[p * m..(p + 1) * m], &mut right[..m])
}

/// Top `k` singular values, descending. `k` must be in `1..=min(rows, cols)`.
pub fn svd_singular_values(data: &[f64], rows: usize, cols: usize, k: usize) -> Result<Vec<f64>> {
    let limit = rows.min(cols);
    if k == 0 || k > limit {
        return Err(Error::Argument(format!(
            "requested {k} singular values from a {rows}x{cols} matrix (allowed 1..={limit})"
        )));
    }
    let mut all = singular_values(data, rows, cols)?;
    all.truncate(k);
    Ok(all)
}

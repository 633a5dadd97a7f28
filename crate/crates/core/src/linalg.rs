//! Small dense linear algebra helpers: cyclic Jacobi eigendecomposition for
//! symmetric matrices and a singular-value oracle built on it. Sizes here
//! are tiny (summary dimensions, layer widths), so O(n^3) sweeps are fine.

use crate::tensor::Tensor;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as rows), sorted descending.
pub fn jacobi_eigh(a: &Tensor, tol: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols(), "jacobi_eigh needs a square matrix");
    let mut m: Vec<f64> = a.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol * 1e-3 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vpk = v[p * n + k];
                    let vqk = v[q * n + k];
                    v[p * n + k] = c * vpk - s * vqk;
                    v[q * n + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| (m[i * n + i], v[i * n..(i + 1) * n].to_vec()))
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let (vals, vecs): (Vec<f64>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
    (vals, vecs)
}

/// Largest singular value via the eigenvalues of W^T W (exact small-matrix
/// oracle, independent of the power-iteration path).
pub fn svd_spectral_norm(w: &Tensor) -> f64 {
    let (r, c) = (w.rows(), w.cols());
    // form the smaller Gram matrix
    let k = r.min(c);
    let mut gram = vec![0.0; k * k];
    if c <= r {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += w.at(t, i) * w.at(t, j);
                }
                gram[i * c + j] = acc;
            }
        }
    } else {
        for i in 0..r {
            for j in 0..r {
                let mut acc = 0.0;
                for t in 0..c {
                    acc += w.at(i, t) * w.at(j, t);
                }
                gram[i * r + j] = acc;
            }
        }
    }
    let g = Tensor::raw(vec![k, k], gram);
    let (vals, _) = jacobi_eigh(&g, 1e-14);
    vals.first().map_or(0.0, |v| v.max(0.0).sqrt())
}

//! Small dense-matrix helpers shared by the simulation and diagnostics code.
//!
//! State dimensions are tiny (d <= 3), so determinants and inverses are
//! closed-form; anything larger or least-squares shaped goes through
//! nalgebra.

use nalgebra::{DMatrix, DVector};

/// Determinant of a d x d row-major matrix, d <= 3.
pub(crate) fn det_small(d: usize, m: &[f64]) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => DMatrix::from_row_slice(d, d, m).determinant(),
    }
}

/// Inverse of a d x d row-major matrix into `out`. Returns false when the
/// determinant magnitude falls below `det_floor`.
pub(crate) fn invert_small(d: usize, m: &[f64], out: &mut [f64], det_floor: f64) -> bool {
    let det = det_small(d, m);
    if !det.is_finite() || det.abs() <= det_floor {
        return false;
    }
    let inv = 1.0 / det;
    match d {
        1 => out[0] = inv,
        2 => {
            out[0] = m[3] * inv;
            out[1] = -m[1] * inv;
            out[2] = -m[2] * inv;
            out[3] = m[0] * inv;
        }
        3 => {
            out[0] = (m[4] * m[8] - m[5] * m[7]) * inv;
            out[1] = (m[2] * m[7] - m[1] * m[8]) * inv;
            out[2] = (m[1] * m[5] - m[2] * m[4]) * inv;
            out[3] = (m[5] * m[6] - m[3] * m[8]) * inv;
            out[4] = (m[0] * m[8] - m[2] * m[6]) * inv;
            out[5] = (m[2] * m[3] - m[0] * m[5]) * inv;
            out[6] = (m[3] * m[7] - m[4] * m[6]) * inv;
            out[7] = (m[1] * m[6] - m[0] * m[7]) * inv;
            out[8] = (m[0] * m[4] - m[1] * m[3]) * inv;
        }
        _ => {
            let inv = match DMatrix::from_row_slice(d, d, m).try_inverse() {
                Some(mat) => mat,
                None => return false,
            };
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = inv[(i, j)];
                }
            }
        }
    }
    out.iter().all(|v| v.is_finite())
}

/// C = A * B for row-major d x d matrices.
pub(crate) fn matmul_small(d: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i * d + k] * b[k * d + j];
            }
            c[i * d + j] = s;
        }
    }
}

/// Frobenius norm of a row-major matrix.
pub(crate) fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Ordinary least squares with SVD-based rank detection.
#[derive(Debug, Clone)]
pub(crate) struct OlsFit {
    pub coeffs: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub rank: usize,
    pub n_obs: usize,
}

/// Fits `y ~ X beta`. Returns None when the system is empty. `std_errors`
/// use the homoskedastic OLS covariance with the pseudo-inverse of X'X.
pub(crate) fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<OlsFit> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 || n != y.len() {
        return None;
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    let tol = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let beta = svd.solve(y, tol).ok()?;

    let resid = y - x * &beta;
    let dof = n.saturating_sub(rank).max(1);
    let sigma2 = resid.norm_squared() / dof as f64;

    // Var(beta) = sigma^2 V S^{-2} V'
    let vt = svd.v_t.as_ref()?;
    let mut ses = vec![0.0; p];
    for j in 0..p {
        let mut var = 0.0;
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > tol {
                let vkj = vt[(k, j)];
                var += vkj * vkj / (s * s);
            }
        }
        ses[j] = (sigma2 * var).sqrt();
    }

    Some(OlsFit {
        coeffs: beta.iter().cloned().collect(),
        std_errors: ses,
        rank,
        n_obs: n,
    })
}

/// Sample mean and standard error of the mean.
pub(crate) fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Percentile by linear interpolation on the sorted sample, q in [0, 1].
pub(crate) fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

//! Small dense symmetric linear algebra at f64: cyclic Jacobi
//! eigendecomposition and the PSD matrix square root built on it.
//!
//! Matrices are row-major `Vec<f64>` with explicit dimension; feature
//! dimensions here stay small (tens to a few hundred), where Jacobi is
//! accurate and has no tuning knobs.

/// Eigendecomposition of a symmetric matrix: returns `(eigenvalues, v)`
/// with `a = v * diag(eigenvalues) * v^T`, eigenvectors in the columns of
/// `v`.
pub fn sym_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n, "matrix size mismatch");
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    if n <= 1 {
        return (m, v);
    }

    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| ((p + 1)..n).map(move |q| (p, q)))
            .map(|(p, q)| m[p * n + q] * m[p * n + q])
            .sum();
        if off <= scale * 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
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
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| m[i * n + i]).collect();
    (eigenvalues, v)
}

/// `c = a * b` for row-major square matrices.
pub fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at
/// zero to absorb numerical drift.
pub fn sqrtm_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (eigs, v) = sym_eig(a, n);
    // v * diag(sqrt(max(eig, 0))) * v^T
    let mut scaled = vec![0.0; n * n]; // v * diag
    for i in 0..n {
        for j in 0..n {
            scaled[i * n + j] = v[i * n + j] * eigs[j].max(0.0).sqrt();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += scaled[i * n + k] * v[j * n + k];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn max_asymmetry(a: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst
}

pub fn min_eigenvalue(a: &[f64], n: usize) -> f64 {
    let (eigs, _) = sym_eig(a, n);
    eigs.into_iter().fold(f64::INFINITY, f64::min)
}

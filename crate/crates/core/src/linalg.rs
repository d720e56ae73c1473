//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff for square-root factors of local Gram
/// matrices. Variable-order cluster bases are generally linearly dependent once
/// restricted to the leaves, so the Gram matrices have an exact null space that
/// has to be discarded. On the factor, null modes sit near machine precision
/// while genuine modes stay above roughly `1e-6`.
pub const FACTOR_CUTOFF: f64 = 1e-10;

/// Rank-truncated square-root factor `F` (`r × n`, `FᵀF ≈ AᵀA`) and the
/// pseudo-inverse of `AᵀA`, from a QR step followed by an SVD of `a`.
pub fn factor_pinv(a: DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return (DMatrix::zeros(0, n), DMatrix::zeros(n, n));
    }
    let r = if a.nrows() > n { a.qr().r() } else { a };
    let svd = svd(r);
    let vt = svd.vt;
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&j| {
            let s = svd.singular_values[j];
            s > 0.0 && s > rel_tol * smax
        })
        .collect();
    let mut factor = DMatrix::zeros(keep.len(), n);
    let mut scaled = DMatrix::zeros(keep.len(), n);
    for (row, &j) in keep.iter().enumerate() {
        let s = svd.singular_values[j];
        factor.row_mut(row).copy_from(&(vt.row(j) * s));
        scaled.row_mut(row).copy_from(&(vt.row(j) / (s * s)));
    }
    let vk = DMatrix::from_fn(keep.len(), n, |i, c| vt[(keep[i], c)]);
    (factor, vk.tr_mul(&scaled))
}

/// Thin singular value decomposition by LAPACK.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub vt: DMatrix<f64>,
}

/// LAPACK SVD. The pure-Rust SVD of nalgebra occasionally returns factors that
/// do not reproduce the input for matrices with clustered singular values.
pub fn svd(a: DMatrix<f64>) -> Svd {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Svd {
            u: DMatrix::zeros(m, 0),
            singular_values: DVector::zeros(0),
            vt: DMatrix::zeros(0, n),
        };
    }
    let s = nalgebra_lapack::SVD::new(a).expect("LAPACK SVD converged");
    Svd {
        u: s.u.columns(0, k).into_owned(),
        singular_values: s.singular_values,
        vt: s.vt.rows(0, k).into_owned(),
    }
}

/// Gathers `v[idx[k]]`.
pub fn gather(v: &[f64], idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖` (absolute if `b = 0`).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let nb = b.norm();
    let d = (a - b).norm();
    if nb > 0.0 {
        d / nb
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_pinv_matches() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0, 3.0, 1.0, 2.0, 5.0, 1.0]);
        let q = a.transpose() * &a;
        let (f, p) = factor_pinv(a, 1e-10);
        assert_eq!(f.nrows(), 2);
        assert!((f.transpose() * &f - &q).norm() < 1e-12 * q.norm());
        assert!((&q * &p * &q - &q).norm() < 1e-12 * q.norm());
        assert!((&p * &q * &p - &p).norm() < 1e-12 * p.norm());
    }

    #[test]
    fn svd_reconstructs() {
        let a = DMatrix::from_fn(7, 4, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.0);
        let s = svd(a.clone());
        let back = &s.u * DMatrix::from_diagonal(&s.singular_values) * &s.vt;
        assert!((back - &a).norm() < 1e-12 * a.norm());
        assert_eq!(s.u.shape(), (7, 4));
    }
}

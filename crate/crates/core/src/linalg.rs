//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Relative margin used by every positive-definiteness test in the crate.
pub const PD_REL_MARGIN: f64 = 1e-10;

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factor of `m`, provided `m - margin * scale * I` is still
/// positive definite. `scale` sets what "relative" means for the caller.
pub fn factor_pd(m: &DMatrix<f64>, scale: f64, margin: f64) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let n = m.nrows();
    let shift = margin * scale.abs();
    if shift > 0.0 {
        let shifted = m - DMatrix::<f64>::identity(n, n) * shift;
        Cholesky::new(shifted)?;
    }
    Cholesky::new(m.clone())
}

/// Smallest eigenvalue of a symmetric matrix (explicit eigensolve).
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().min()
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigenvalues().max()
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(n);
    let mut off = 0;
    for p in parts {
        out.rows_mut(off, p.len()).copy_from(p);
        off += p.len();
    }
    out
}

/// `max |a - b| / max(1, max |b|)`.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.amax().max(1.0);
    (a - b).amax() / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_pd_rejects_boundary() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(factor_pd(&m, 1.0, PD_REL_MARGIN).is_none());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-12]);
        assert!(factor_pd(&m, 1.0, PD_REL_MARGIN).is_none());
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-6]);
        assert!(factor_pd(&m, 1.0, PD_REL_MARGIN).is_some());
    }

    #[test]
    fn block_diag_places_blocks() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::from_element(2, 1, 3.0);
        let m = block_diag(&[a, b]);
        assert_eq!(m.shape(), (3, 2));
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(2, 1)], 3.0);
        assert_eq!(m[(0, 1)], 0.0);
    }
}

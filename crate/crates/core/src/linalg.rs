//! Dense symmetric helpers on top of LAPACK.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use ndarray_linalg::{EigValsh, Eigh, UPLO};

use crate::error::{Error, Result};

/// Ascending eigenvalues and orthonormal eigenvectors (columns).
pub fn eigh(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let s = symmetrized(a);
    s.eigh(UPLO::Lower).map_err(|e| Error::Numerical(format!("eigh: {e}")))
}

/// Ascending eigenvalues of the symmetric part of `a`.
pub fn eigvalsh(a: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let s = symmetrized(a);
    s.eigvalsh(UPLO::Lower).map_err(|e| Error::Numerical(format!("eigvalsh: {e}")))
}

pub fn symmetrized(a: &ArrayView2<f64>) -> Array2<f64> {
    let mut s = a.to_owned();
    s += &a.t();
    s *= 0.5;
    s
}

pub fn frobenius(a: &ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// max |a_ij - a_ji| / max |a_ij|, zero for the zero matrix.
pub fn asymmetry(a: &ArrayView2<f64>) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst / scale
}

/// Relative Frobenius distance, falling back to absolute when `reference` vanishes.
pub fn relative_residual(a: &ArrayView2<f64>, reference: &ArrayView2<f64>) -> f64 {
    let diff = frobenius(&(a - reference).view());
    let scale = frobenius(reference);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Q diag(f(λ)) Qᵀ.
pub fn spectral_apply(values: &Array1<f64>, vectors: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let scaled = vectors * &values.mapv(&f).insert_axis(Axis(0));
    scaled.dot(&vectors.t())
}

/// Symmetric positive semidefinite square root; negative rounding noise is clipped.
pub fn psd_sqrt(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = eigh(a)?;
    Ok(spectral_apply(&vals, &vecs, |x| x.max(0.0).sqrt()))
}

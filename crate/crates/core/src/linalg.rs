//! Dense symmetric-matrix kernels: eigendecomposition, projection onto the
//! PSD cone, operator norm.
//!
//! Every entry point symmetrizes its input as `(S + Sᵀ)/2` before doing any
//! work, so callers can pass matrices that picked up rounding asymmetry.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used when deciding whether a matrix is PSD.
pub const PSD_TOL: f64 = 1e-8;

/// Eigendecomposition `S = V diag(λ) Vᵀ` with eigenvalues sorted in
/// nonincreasing order and orthonormal eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SymEigen {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let d = self.dim();
        let mut scaled = self.eigenvectors.clone();
        for j in 0..d {
            let w = f(self.eigenvalues[j]);
            scaled.column_mut(j).scale_mut(w);
        }
        symmetrize(&(scaled * self.eigenvectors.transpose()))
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }

    /// Columns spanning the eigenspace of the `k` largest eigenvalues.
    pub fn top_eigenvectors(&self, k: usize) -> Matrix {
        self.eigenvectors.columns(0, k).into_owned()
    }
}

pub fn symmetrize(s: &Matrix) -> Matrix {
    (s + s.transpose()) * 0.5
}

pub(crate) fn ensure_square(s: &Matrix) -> Result<usize> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            found: s.ncols(),
        });
    }
    Ok(s.nrows())
}

pub(crate) fn ensure_finite(s: &Matrix, what: &'static str) -> Result<()> {
    if s.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn sym_eigen(s: &Matrix) -> Result<SymEigen> {
    let d = ensure_square(s)?;
    if d == 0 {
        return Err(Error::invalid("cannot decompose an empty matrix"));
    }
    ensure_finite(s, "matrix passed to sym_eigen")?;
    let eig = SymmetricEigen::new(symmetrize(s));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let eigenvalues = Vector::from_iterator(d, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = Matrix::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEigen {
        eigenvalues,
        eigenvectors,
    })
}

/// Frobenius-nearest PSD matrix: clamp negative eigenvalues to zero.
pub fn proj_psd(s: &Matrix) -> Result<Matrix> {
    let eig = sym_eigen(s)?;
    if eig.min_eigenvalue() >= 0.0 {
        return Ok(symmetrize(s));
    }
    Ok(eig.reconstruct_with(|l| l.max(0.0)))
}

/// Projection onto `{Σ PSD : λ_max(Σ) ≤ cap}`, i.e. eigenvalues clipped to
/// `[0, cap]`.
pub fn proj_psd_capped(s: &Matrix, cap: f64) -> Result<Matrix> {
    let eig = sym_eigen(s)?;
    if eig.min_eigenvalue() >= 0.0 && eig.max_eigenvalue() <= cap {
        return Ok(symmetrize(s));
    }
    Ok(eig.reconstruct_with(|l| l.clamp(0.0, cap)))
}

/// Projection onto the PSD cone (optionally capped at `cap`) that also
/// reports the smallest and largest eigenvalue of the result.
pub fn proj_psd_with_spectrum(s: &Matrix, cap: Option<f64>) -> Result<(Matrix, f64, f64)> {
    let eig = sym_eigen(s)?;
    let hi = cap.unwrap_or(f64::INFINITY);
    let clip = |l: f64| l.clamp(0.0, hi);
    let (lo_out, hi_out) = (clip(eig.min_eigenvalue()), clip(eig.max_eigenvalue()));
    if eig.min_eigenvalue() >= 0.0 && eig.max_eigenvalue() <= hi {
        return Ok((symmetrize(s), lo_out, hi_out));
    }
    Ok((eig.reconstruct_with(clip), lo_out, hi_out))
}

/// Largest absolute eigenvalue.
pub fn op_norm(s: &Matrix) -> Result<f64> {
    let eig = sym_eigen(s)?;
    Ok(eig.max_eigenvalue().abs().max(eig.min_eigenvalue().abs()))
}

pub fn min_eigenvalue(s: &Matrix) -> Result<f64> {
    Ok(sym_eigen(s)?.min_eigenvalue())
}

/// Frobenius inner product `⟨A, B⟩ = tr(AᵀB)`.
pub fn frob_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `xᵀ S x` without forming `S x` explicitly.
pub fn quad_form(s: &Matrix, x: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for j in 0..d {
        let col = s.column(j);
        let mut inner = 0.0;
        for i in 0..d {
            inner += x[i] * col[i];
        }
        acc += inner * x[j];
    }
    acc
}

/// `xᵀ S y`.
pub fn bilinear_form(s: &Matrix, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for j in 0..d {
        let col = s.column(j);
        let mut inner = 0.0;
        for i in 0..d {
            inner += x[i] * col[i];
        }
        acc += inner * y[j];
    }
    acc
}

/// Accumulates `w · x xᵀ` into `acc` (upper and lower triangle both).
pub fn add_scaled_outer(acc: &mut Matrix, w: f64, x: &[f64]) {
    let d = x.len();
    for j in 0..d {
        let wx = w * x[j];
        for i in 0..d {
            acc[(i, j)] += wx * x[i];
        }
    }
}

//! Small dense linear-algebra helpers shared by the solvers.
//!
//! All systems in this crate are symmetric and at most a few hundred rows, so
//! Cholesky with a trace-scaled ridge fallback is the workhorse. The ridge is a
//! last resort: solves are attempted unmodified first.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Ridge factor applied (times the trace) when a symmetric factorization fails.
const RIDGE_FACTOR: f64 = 1e-10;

fn ridged<F: Scalar>(a: &DMatrix<F>) -> DMatrix<F> {
    let mut b = a.clone();
    let bump = F::cast(RIDGE_FACTOR) * a.trace().abs() + F::cast(f64::MIN_POSITIVE);
    for i in 0..b.nrows() {
        b[(i, i)] += bump;
    }
    b
}

/// Cholesky factorization with a `1e-10 * trace` ridge fallback.
pub fn cholesky_with_ridge<F: Scalar>(a: &DMatrix<F>) -> Result<Cholesky<F, Dyn>> {
    debug_assert_eq!(a.nrows(), a.ncols());
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(chol);
    }
    Cholesky::new(ridged(a)).ok_or(Error::SingularInformation)
}

/// Solves the symmetric positive-definite system `a x = b`.
pub fn solve_spd<F: Scalar>(a: &DMatrix<F>, b: &DVector<F>) -> Result<DVector<F>> {
    Ok(cholesky_with_ridge(a)?.solve(b))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn invert_spd<F: Scalar>(a: &DMatrix<F>) -> Result<DMatrix<F>> {
    Ok(cholesky_with_ridge(a)?.inverse())
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues<F: Scalar>(a: &DMatrix<F>) -> Vec<F> {
    let sym = (a + a.transpose()) * F::cast(0.5);
    let mut ev: Vec<F> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.partial_cmp(y).expect("eigenvalues are finite"));
    ev
}

/// Forces exact symmetry on a matrix assembled from symmetric terms.
pub fn symmetrize<F: Scalar>(a: &DMatrix<F>) -> DMatrix<F> {
    (a + a.transpose()) * F::cast(0.5)
}

/// Solves the least-squares problem `min ||d x - y||` through the normal equations.
///
/// Errors with the caller-supplied block label when the Gram matrix is
/// (numerically) rank deficient. Cholesky alone is not a reliable detector —
/// rounding can turn an exactly zero pivot into a tiny positive one — so rank
/// is judged from the eigenvalue spread first.
pub fn least_squares<F: Scalar>(
    d: &DMatrix<F>,
    y: &DVector<F>,
    block: &str,
) -> Result<DVector<F>> {
    let gram = d.transpose() * d;
    let rhs = d.transpose() * y;
    let ev = symmetric_eigenvalues(&gram);
    let max_ev = ev[ev.len() - 1];
    let deficient = ev[0] <= F::cast(1e-12) * max_ev.max(F::cast(f64::MIN_POSITIVE));
    let chol = if deficient {
        None
    } else {
        Cholesky::new(gram)
    };
    let chol = chol.ok_or_else(|| Error::RankDeficientInit {
        block: block.to_string(),
    })?;
    Ok(chol.solve(&rhs))
}

/// Rows and columns of a square matrix at the given indices, in order.
pub(crate) fn restrict_matrix<F: Scalar>(a: &DMatrix<F>, idx: &[usize]) -> DMatrix<F> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])])
}

/// Entries of a vector at the given indices, in order.
pub(crate) fn restrict_vector<F: Scalar>(v: &DVector<F>, idx: &[usize]) -> DVector<F> {
    DVector::from_fn(idx.len(), |r, _| v[idx[r]])
}

/// Embeds a restricted vector back into dimension `d`, zero elsewhere.
pub(crate) fn scatter_vector<F: Scalar>(v: &DVector<F>, idx: &[usize], d: usize) -> DVector<F> {
    let mut out = DVector::zeros(d);
    for (k, &j) in idx.iter().enumerate() {
        out[j] = v[k];
    }
    out
}

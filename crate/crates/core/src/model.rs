//! Data containers and the delete-one-component index parameterization.
//!
//! The model for subject `i`, observation `j` is
//! `Y_ij = g(X_ij' beta) + Z_ij' theta + e_ij` with `||beta|| = 1`. Identifiability
//! is handled by deleting one coordinate of `beta` (the *anchor*, constrained
//! positive) and reconstructing it as `sqrt(1 - ||reduced||^2)`, so the free
//! parameter is `xi = (reduced beta, theta)` of dimension `p - 1 + q`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

/// One subject's block of repeated measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject<F: Scalar> {
    /// Stable identifier, used in error messages and reports.
    pub id: String,
    /// Responses, length `m_i`.
    pub y: DVector<F>,
    /// Index covariates, `m_i x p`; rows align with `y`.
    pub x: DMatrix<F>,
    /// Linear covariates, `m_i x q`.
    pub z: DMatrix<F>,
}

impl<F: Scalar> Subject<F> {
    /// Number of observations in this cluster.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    /// True when the subject carries no rows.
    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }
}

/// A validated longitudinal sample: at least two subjects, consistent row
/// dimensions, and every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset<F: Scalar> {
    subjects: Vec<Subject<F>>,
    p: usize,
    q: usize,
    total_obs: usize,
}

impl<F: Scalar> LongitudinalDataset<F> {
    /// Validates and wraps a set of subjects.
    pub fn new(subjects: Vec<Subject<F>>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 subjects, got {}",
                subjects.len()
            )));
        }
        let p = subjects[0].x.ncols();
        let q = subjects[0].z.ncols();
        let mut total_obs = 0;
        for s in &subjects {
            if s.is_empty() {
                return Err(Error::InvalidData(format!("subject {} has no rows", s.id)));
            }
            if s.x.nrows() != s.len() || s.z.nrows() != s.len() {
                return Err(Error::InvalidData(format!(
                    "subject {}: covariate rows do not match the {} responses",
                    s.id,
                    s.len()
                )));
            }
            if s.x.ncols() != p || s.z.ncols() != q {
                return Err(Error::InvalidData(format!(
                    "subject {}: expected {} index and {} linear covariates, got {} and {}",
                    s.id,
                    p,
                    q,
                    s.x.ncols(),
                    s.z.ncols()
                )));
            }
            let finite = s.y.iter().all(|v| v.is_finite())
                && s.x.iter().all(|v| v.is_finite())
                && s.z.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidData(format!(
                    "subject {} contains a non-finite entry",
                    s.id
                )));
            }
            total_obs += s.len();
        }
        Ok(Self {
            subjects,
            p,
            q,
            total_obs,
        })
    }

    /// Subjects in insertion order.
    pub fn subjects(&self) -> &[Subject<F>] {
        &self.subjects
    }

    /// Number of subjects `n`.
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    /// Total observation count `N = sum m_i`.
    pub fn total_obs(&self) -> usize {
        self.total_obs
    }

    /// Index covariate dimension `p`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Linear covariate dimension `q`.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Smallest cluster size.
    pub fn min_cluster(&self) -> usize {
        self.subjects.iter().map(Subject::len).min().unwrap_or(0)
    }

    /// Largest cluster size.
    pub fn max_cluster(&self) -> usize {
        self.subjects.iter().map(Subject::len).max().unwrap_or(0)
    }
}

/// Unit-norm index coefficient with its anchor coordinate.
///
/// `beta[anchor] = sqrt(1 - ||reduced||^2) > 0` by construction; `reduced` is
/// `beta` with the anchor coordinate deleted.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexParam<F: Scalar> {
    beta: DVector<F>,
    reduced: DVector<F>,
    anchor: usize,
}

impl<F: Scalar> IndexParam<F> {
    /// Builds the parameter from its reduced form.
    pub fn from_reduced(reduced: DVector<F>, anchor: usize) -> Result<Self> {
        let beta = embed_beta(&reduced, anchor)?;
        Ok(Self {
            beta,
            reduced,
            anchor,
        })
    }

    /// Builds the parameter from a full coefficient vector already satisfying the
    /// constraints (`||beta|| = 1` within `1e-12`, positive anchor coordinate).
    pub fn from_full(beta: DVector<F>, anchor: usize) -> Result<Self> {
        if anchor >= beta.len() {
            return Err(Error::InvalidConfig(format!(
                "anchor {} out of range for {} coefficients",
                anchor,
                beta.len()
            )));
        }
        let norm = beta.norm();
        if (norm - F::one()).abs() > F::cast(1e-12) {
            return Err(Error::InvalidConfig(format!(
                "index coefficient norm {} is not 1",
                norm.as_f64()
            )));
        }
        if beta[anchor] <= F::zero() {
            return Err(Error::InvalidConfig(
                "anchor coordinate must be positive".into(),
            ));
        }
        let reduced = delete_coordinate(&beta, anchor);
        Ok(Self {
            beta,
            reduced,
            anchor,
        })
    }

    /// Full `p`-dimensional unit coefficient.
    pub fn beta(&self) -> &DVector<F> {
        &self.beta
    }

    /// Reduced `(p-1)`-dimensional free coefficient.
    pub fn reduced(&self) -> &DVector<F> {
        &self.reduced
    }

    /// Anchor coordinate index (0-based).
    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Full dimension `p`.
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    /// Jacobian of the full coefficient with respect to the reduced one.
    ///
    /// Infallible: construction guarantees the reduced norm is below 1.
    pub fn jacobian(&self) -> DMatrix<F> {
        jacobian(&self.reduced, self.anchor).expect("reduced norm is below 1 by construction")
    }
}

/// Linear coefficient `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParam<F: Scalar>(pub DVector<F>);

impl<F: Scalar> ThetaParam<F> {
    /// Dimension `q`.
    pub fn q(&self) -> usize {
        self.0.len()
    }
}

/// One point of the fitted link evaluated on the observed index range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint<F: Scalar> {
    /// Index value the curve was evaluated at.
    pub t: F,
    /// Fitted `g(t)`.
    pub g: F,
    /// Fitted derivative `g'(t)`.
    pub g_prime: F,
}

/// One row of a solver's convergence trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord<F: Scalar> {
    /// Outer iteration number, starting at 1.
    pub iteration: usize,
    /// Norm of the accepted parameter update.
    pub step_norm: F,
    /// Norm of the estimating equation after the update.
    pub score_norm: F,
    /// Bandwidth in force during the iteration.
    pub bandwidth: F,
    /// Working correlation parameter in force during the iteration.
    pub rho: F,
}

/// A fitted model: estimates, fitted curve, covariance, and how we got there.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<F: Scalar> {
    /// Estimated index coefficient.
    pub beta: IndexParam<F>,
    /// Estimated linear coefficient.
    pub theta: ThetaParam<F>,
    /// Fitted curve at the sorted observed index values.
    pub g_grid: Vec<GridPoint<F>>,
    /// Covariance of the reduced parameter `(reduced beta, theta)`, `(p-1+q)^2`.
    pub sandwich_cov: DMatrix<F>,
    /// Outer iterations consumed.
    pub iterations: usize,
    /// Whether the stopping rule was met before the iteration budget ran out.
    pub converged: bool,
    /// Final estimating-equation norm (gradient norm for the QIF).
    pub score_norm: F,
    /// Per-iteration diagnostics.
    pub trace: Vec<IterationRecord<F>>,
    /// Bandwidth used for the final smoothing pass.
    pub bandwidth: F,
    /// Final working correlation parameter (0 under independence).
    pub rho: F,
}

impl<F: Scalar> FitResult<F> {
    /// Convergence trace as aligned text, one line per iteration.
    pub fn trace_text(&self) -> String {
        let mut out = String::from("iteration  step_norm      score_norm     bandwidth  rho\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{:>9}  {:<13.6e}  {:<13.6e}  {:<9.4}  {:.4}\n",
                r.iteration,
                r.step_norm.as_f64(),
                r.score_norm.as_f64(),
                r.bandwidth.as_f64(),
                r.rho.as_f64()
            ));
        }
        out
    }
}

fn delete_coordinate<F: Scalar>(v: &DVector<F>, at: usize) -> DVector<F> {
    let mut out = DVector::zeros(v.len() - 1);
    let mut k = 0;
    for s in 0..v.len() {
        if s != at {
            out[k] = v[s];
            k += 1;
        }
    }
    out
}

/// Reconstructs the full unit coefficient from its reduced form.
///
/// The anchor coordinate is `sqrt(1 - ||reduced||^2)`; the rest are copied in
/// order. Errors when `||reduced|| >= 1`.
pub fn embed_beta<F: Scalar>(reduced: &DVector<F>, anchor: usize) -> Result<DVector<F>> {
    let p = reduced.len() + 1;
    if anchor >= p {
        return Err(Error::InvalidConfig(format!(
            "anchor {} out of range for {} coefficients",
            anchor, p
        )));
    }
    let sq = reduced.norm_squared();
    if sq >= F::one() {
        return Err(Error::ReducedNormTooLarge {
            norm: sq.sqrt().as_f64(),
        });
    }
    let mut beta = DVector::zeros(p);
    beta[anchor] = (F::one() - sq).sqrt();
    let mut k = 0;
    for s in 0..p {
        if s != anchor {
            beta[s] = reduced[k];
            k += 1;
        }
    }
    Ok(beta)
}

/// Jacobian `d beta / d reduced`, a `p x (p-1)` matrix.
///
/// Rows for retained coordinates are unit rows; the anchor row is
/// `-(1 - ||reduced||^2)^{-1/2} reduced'`.
pub fn jacobian<F: Scalar>(reduced: &DVector<F>, anchor: usize) -> Result<DMatrix<F>> {
    let p = reduced.len() + 1;
    if anchor >= p {
        return Err(Error::InvalidConfig(format!(
            "anchor {} out of range for {} coefficients",
            anchor, p
        )));
    }
    let sq = reduced.norm_squared();
    if sq >= F::one() {
        return Err(Error::ReducedNormTooLarge {
            norm: sq.sqrt().as_f64(),
        });
    }
    let scale = -(F::one() - sq).sqrt().recip();
    let mut j = DMatrix::zeros(p, p - 1);
    let mut k = 0;
    for s in 0..p {
        if s == anchor {
            for c in 0..p - 1 {
                j[(s, c)] = scale * reduced[c];
            }
        } else {
            j[(s, k)] = F::one();
            k += 1;
        }
    }
    Ok(j)
}

/// Picks the anchor coordinate from an initial coefficient estimate.
///
/// Returns the index of the largest |coefficient| (ties break to the smallest
/// index) together with the normalized, sign-fixed coefficient whose anchor
/// coordinate is positive. Errors on a zero vector.
pub fn choose_anchor<F: Scalar>(beta_init: &DVector<F>) -> Result<(usize, DVector<F>)> {
    let mut anchor = 0;
    let mut best = F::zero();
    for (s, v) in beta_init.iter().enumerate() {
        if v.abs() > best {
            best = v.abs();
            anchor = s;
        }
    }
    let norm = beta_init.norm();
    if best == F::zero() || norm == F::zero() {
        return Err(Error::ZeroAnchor);
    }
    let sign = if beta_init[anchor] < F::zero() {
        -F::one()
    } else {
        F::one()
    };
    Ok((anchor, beta_init * (sign / norm)))
}

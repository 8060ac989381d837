//! Working covariance structures for clustered residuals.
//!
//! The working covariance of subject `i` is `V_i = A_i^{1/2} R_i(rho) A_i^{1/2}`
//! with `A_i` the diagonal of marginal variances and `R_i` a patterned
//! correlation matrix. Marginal variances and the correlation parameter are
//! estimated by moments from residuals; the basis expansion of `R^{-1}` used by
//! the quadratic inference function lives here too.

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::LongitudinalDataset;
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

/// Margin kept between an estimated correlation and the positive-definite
/// boundary of its structure.
const RHO_MARGIN: f64 = 1e-6;

/// Floor applied to estimated marginal variances so standardization is defined
/// even for a subject with (numerically) zero residuals.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Patterned working correlation structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationKind {
    /// `R = I`; the working covariance is the identity.
    Independence,
    /// Constant off-diagonal correlation (compound symmetry).
    Exchangeable,
    /// First-order autoregressive decay in the row distance.
    Ar1,
}

impl CorrelationKind {
    /// Name used in error messages and reports.
    pub fn label(self) -> &'static str {
        match self {
            CorrelationKind::Independence => "independence",
            CorrelationKind::Exchangeable => "exchangeable",
            CorrelationKind::Ar1 => "ar1",
        }
    }
}

impl std::fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// How marginal variances are pooled across subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariancePooling {
    /// One variance shared by all subjects.
    Pooled,
    /// One variance per subject.
    PerSubject,
}

impl VariancePooling {
    /// Default rule: pooled.  Per-subject variances estimated from small
    /// clusters make the weights noisy enough to cost more efficiency than
    /// the heteroscedasticity they capture, so they stay opt-in.
    pub fn default_for<F: Scalar>(_data: &LongitudinalDataset<F>) -> Self {
        VariancePooling::Pooled
    }
}

/// Builds the `m x m` working correlation matrix.
///
/// `rho` is ignored under independence; otherwise it must lie strictly inside
/// the positive-definite range (`-1/(m-1) < rho < 1` exchangeable, `|rho| < 1`
/// AR-1).
pub fn build_correlation<F: Scalar>(kind: CorrelationKind, rho: F, m: usize) -> Result<DMatrix<F>> {
    if m == 0 {
        return Err(Error::InvalidConfig("cluster size must be positive".into()));
    }
    let domain_err = || Error::CorrelationDomain {
        rho: rho.as_f64(),
        structure: kind.label().to_string(),
        m,
    };
    match kind {
        CorrelationKind::Independence => Ok(DMatrix::identity(m, m)),
        CorrelationKind::Exchangeable => {
            if m >= 2 {
                let lower = -(F::from_count(m - 1)).recip();
                if !rho.is_finite() || rho <= lower || rho >= F::one() {
                    return Err(domain_err());
                }
            }
            let mut r = DMatrix::from_element(m, m, rho);
            r.fill_diagonal(F::one());
            Ok(r)
        }
        CorrelationKind::Ar1 => {
            if m >= 2 && (!rho.is_finite() || rho.abs() >= F::one()) {
                return Err(domain_err());
            }
            Ok(DMatrix::from_fn(m, m, |a, b| {
                rho.powi(a.abs_diff(b) as i32)
            }))
        }
    }
}

/// Moment estimate of the marginal variance, per subject.
///
/// Each subject's entry is `sum r_ij^2 / m_i` under per-subject pooling, or the
/// grand mean square under pooled. Estimates are floored away from zero so
/// standardization stays defined.
pub fn estimate_marginal_variance<F: Scalar>(
    residuals: &[DVector<F>],
    pooling: VariancePooling,
) -> Vec<F> {
    let floor = F::cast(VARIANCE_FLOOR);
    match pooling {
        VariancePooling::Pooled => {
            let mut ss = F::zero();
            let mut count = 0usize;
            for r in residuals {
                ss += r.norm_squared();
                count += r.len();
            }
            let v = (ss / F::from_count(count.max(1))).max(floor);
            vec![v; residuals.len()]
        }
        VariancePooling::PerSubject => residuals
            .iter()
            .map(|r| (r.norm_squared() / F::from_count(r.len().max(1))).max(floor))
            .collect(),
    }
}

/// Moment estimate of the correlation parameter from standardized residuals.
///
/// Exchangeable averages all within-subject pairwise products; AR-1 averages
/// lag-1 products. The estimate is clamped `1e-6` inside the positive-definite
/// range for the largest cluster. Errors when no subject has two observations.
pub fn estimate_rho<F: Scalar>(standardized: &[DVector<F>], kind: CorrelationKind) -> Result<F> {
    if kind == CorrelationKind::Independence {
        return Ok(F::zero());
    }
    let m_max = standardized.iter().map(DVector::len).max().unwrap_or(0);
    if m_max < 2 {
        return Err(Error::NoCorrelationPairs);
    }
    let mut num = F::zero();
    let mut den = 0usize;
    match kind {
        CorrelationKind::Exchangeable => {
            for r in standardized {
                let m = r.len();
                if m < 2 {
                    continue;
                }
                let sum: F = r.iter().copied().sum();
                num += (sum * sum - r.norm_squared()) * F::cast(0.5);
                den += m * (m - 1) / 2;
            }
        }
        CorrelationKind::Ar1 => {
            for r in standardized {
                for j in 1..r.len() {
                    num += r[j - 1] * r[j];
                }
                den += r.len().saturating_sub(1);
            }
        }
        CorrelationKind::Independence => unreachable!(),
    }
    if den == 0 {
        return Err(Error::NoCorrelationPairs);
    }
    let raw = num / F::from_count(den);
    let margin = F::cast(RHO_MARGIN);
    let (lower, upper) = match kind {
        CorrelationKind::Exchangeable => {
            (-(F::from_count(m_max - 1)).recip() + margin, F::one() - margin)
        }
        CorrelationKind::Ar1 => (-F::one() + margin, F::one() - margin),
        CorrelationKind::Independence => unreachable!(),
    };
    Ok(raw.max(lower).min(upper))
}

/// Basis matrices `M_1, ..., M_k` whose span contains `R^{-1}` for the structure.
///
/// Independence: `{I}`. Exchangeable: `{I, 11' - I}`. AR-1: `{I, lag-1
/// indicator, corner indicator}`. Errors for clusters too small to carry the
/// expansion (`m < 2` with more than one basis).
pub fn basis_matrices<F: Scalar>(kind: CorrelationKind, m: usize) -> Result<Vec<DMatrix<F>>> {
    if m == 0 {
        return Err(Error::BasisUndefined {
            structure: kind.label().to_string(),
            m,
        });
    }
    match kind {
        CorrelationKind::Independence => Ok(vec![DMatrix::identity(m, m)]),
        CorrelationKind::Exchangeable | CorrelationKind::Ar1 if m < 2 => Err(Error::BasisUndefined {
            structure: kind.label().to_string(),
            m,
        }),
        CorrelationKind::Exchangeable => {
            let ones = DMatrix::from_element(m, m, F::one()) - DMatrix::identity(m, m);
            Ok(vec![DMatrix::identity(m, m), ones])
        }
        CorrelationKind::Ar1 => {
            let lag1 = DMatrix::from_fn(m, m, |a, b| {
                if a.abs_diff(b) == 1 {
                    F::one()
                } else {
                    F::zero()
                }
            });
            let mut corner = DMatrix::zeros(m, m);
            corner[(0, 0)] = F::one();
            corner[(m - 1, m - 1)] = F::one();
            Ok(vec![DMatrix::identity(m, m), lag1, corner])
        }
    }
}

/// Estimated working covariance: structure, correlation parameter, and one
/// marginal variance per subject.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingCovariance<F: Scalar> {
    /// Correlation structure.
    pub kind: CorrelationKind,
    /// Correlation parameter (0 under independence).
    pub rho: F,
    /// Marginal variance per subject (all 1 under independence, where `V = I`).
    pub variances: Vec<F>,
}

impl<F: Scalar> WorkingCovariance<F> {
    /// Estimates the working covariance from raw residuals.
    ///
    /// Under independence the working covariance is exactly the identity; no
    /// moments are estimated.
    pub fn estimate(
        residuals: &[DVector<F>],
        kind: CorrelationKind,
        pooling: VariancePooling,
    ) -> Result<Self> {
        if kind == CorrelationKind::Independence {
            return Ok(Self {
                kind,
                rho: F::zero(),
                variances: vec![F::one(); residuals.len()],
            });
        }
        let variances = estimate_marginal_variance(residuals, pooling);
        let standardized: Vec<DVector<F>> = residuals
            .iter()
            .zip(&variances)
            .map(|(r, &v)| r / v.sqrt())
            .collect();
        let rho = estimate_rho(&standardized, kind)?;
        Ok(Self {
            kind,
            rho,
            variances,
        })
    }

    /// The working covariance matrix `V_i` for subject `i` with `m` rows.
    pub fn v_matrix(&self, subject_index: usize, m: usize) -> Result<DMatrix<F>> {
        let r = build_correlation(self.kind, self.rho, m)?;
        Ok(r * self.variances[subject_index])
    }

    /// Inverses `V_i^{-1}` for every subject in the dataset.
    pub fn v_inverses(&self, data: &LongitudinalDataset<F>) -> Result<Vec<DMatrix<F>>> {
        data.subjects()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let v = self.v_matrix(i, s.len())?;
                linalg::invert_spd(&v).map_err(|_| Error::SingularCovariance {
                    subject: s.id.clone(),
                })
            })
            .collect()
    }

    /// `1/sigma_i`, the diagonal value of `A_i^{-1/2}` for subject `i`.
    pub fn a_inv_sqrt(&self, subject_index: usize) -> F {
        self.variances[subject_index].sqrt().recip()
    }
}

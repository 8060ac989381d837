//! Sparse estimation: SCAD penalty, penalized solver drivers, and the
//! two-dimensional tuning-parameter search scored by BIC.
//!
//! Both solvers share their iteration loops with the unpenalized fits; the
//! penalty enters through a local quadratic approximation refreshed at every
//! step, and coefficients that shrink below a threshold are set to exactly
//! zero and kept there for the rest of that solve.  The index coefficient is
//! penalized through its reduced form, so the anchor coordinate is never
//! shrunk.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::gee::{self, GeeConfig};
use crate::model::{FitResult, IndexParam, LongitudinalDataset, ThetaParam};
use crate::qif::{self, QifConfig};
use crate::scalar::Scalar;
use crate::smooth::{log_spaced, BandwidthPolicy, SmootherPass};

/// Default shape constant of the SCAD penalty.
pub const SCAD_SHAPE: f64 = 3.7;

/// Guard added to |coefficient| in the local quadratic approximation
/// denominator so coefficients near zero stay finite.
const LQA_GUARD: f64 = 1e-8;

/// Points in the automatic grid for the index block.  Denser than the
/// linear block's grid: support changes crowd into a narrow band of rates
/// there, and the ceiling (which zeroes every coordinate) leaves the top
/// decade sparsely informative.
const AUTO_GRID_LEN_INDEX: usize = 12;

/// Points in the automatic grid for the linear block.
const AUTO_GRID_LEN_LINEAR: usize = 8;

/// Ratio of the smallest to the largest automatic grid point.
const AUTO_GRID_FLOOR: f64 = 0.01;

/// Derivative of the SCAD penalty at `|x|`: flat at `lambda` up to `lambda`,
/// decaying linearly to zero at `c * lambda`, zero beyond.  `c` must exceed 2.
pub fn scad_derivative<F: Scalar>(x: F, lambda: F, c: F) -> F {
    let x = x.abs();
    if x <= lambda {
        lambda
    } else {
        (c * lambda - x).max(F::zero()) / (c - F::one())
    }
}

/// SCAD penalty value at `|x|`: linear near the origin, quadratic blending on
/// `(lambda, c * lambda]`, constant `lambda^2 (c + 1) / 2` beyond.
pub fn scad_penalty<F: Scalar>(x: F, lambda: F, c: F) -> F {
    let x = x.abs();
    let two = F::cast(2.0);
    if x <= lambda {
        lambda * x
    } else if x <= c * lambda {
        (two * c * lambda * x - x * x - lambda * lambda) / (two * (c - F::one()))
    } else {
        lambda * lambda * (c + F::one()) / two
    }
}

/// Per-coordinate penalty bookkeeping shared by the two solver engines.
///
/// `lambda` holds one rate per stacked coordinate `(reduced beta, theta)`.
/// A coordinate becomes `frozen` when the solver zeroes it; frozen
/// coordinates leave the active set permanently for that solve.
pub(crate) struct PenaltyState<F: Scalar> {
    lambda: DVector<F>,
    c: F,
    zero_threshold: F,
    frozen: Vec<bool>,
}

impl<F: Scalar> PenaltyState<F> {
    pub(crate) fn new(lambda: DVector<F>, c: F, zero_threshold: F) -> Self {
        let frozen = vec![false; lambda.len()];
        Self {
            lambda,
            c,
            zero_threshold,
            frozen,
        }
    }

    /// Coordinates still being updated.
    pub(crate) fn active_indices(&self) -> Vec<usize> {
        (0..self.frozen.len()).filter(|&j| !self.frozen[j]).collect()
    }

    /// Diagonal of the local quadratic approximation,
    /// `q_lambda(|xi_j|) / (|xi_j| + guard)`; zero at frozen coordinates.
    pub(crate) fn e_diag(&self, xi: &DVector<F>) -> DVector<F> {
        DVector::from_fn(self.lambda.len(), |j, _| {
            if self.frozen[j] {
                F::zero()
            } else {
                scad_derivative(xi[j], self.lambda[j], self.c) / (xi[j].abs() + F::cast(LQA_GUARD))
            }
        })
    }

    /// Gradient of the quadratic approximation at `xi`, `e_diag .* xi`.
    pub(crate) fn pseudo_gradient(&self, xi: &DVector<F>) -> DVector<F> {
        self.e_diag(xi).component_mul(xi)
    }

    /// Total penalty `sum_j p_{lambda_j}(|xi_j|)`.
    pub(crate) fn penalty_total(&self, xi: &DVector<F>) -> F {
        (0..self.lambda.len())
            .map(|j| scad_penalty(xi[j], self.lambda[j], self.c))
            .sum()
    }

    /// Zeroes every active penalized coordinate whose magnitude is at or
    /// below the threshold and freezes it.  Returns the rebuilt parameters,
    /// or `None` when nothing crossed.
    pub(crate) fn freeze_small(
        &mut self,
        beta: &IndexParam<F>,
        theta: &ThetaParam<F>,
    ) -> Result<Option<(IndexParam<F>, ThetaParam<F>)>> {
        let r = beta.reduced().len();
        let mut reduced = beta.reduced().clone_owned();
        let mut linear = theta.0.clone();
        let mut any = false;
        for j in 0..self.lambda.len() {
            if self.frozen[j] || !(self.lambda[j] > F::zero()) {
                continue;
            }
            let value = if j < r { reduced[j] } else { linear[j - r] };
            if value.abs() <= self.zero_threshold {
                if j < r {
                    reduced[j] = F::zero();
                } else {
                    linear[j - r] = F::zero();
                }
                self.frozen[j] = true;
                any = true;
            }
        }
        if !any {
            return Ok(None);
        }
        let beta = IndexParam::from_reduced(reduced, beta.anchor())?;
        Ok(Some((beta, ThetaParam(linear))))
    }
}

/// Penalization settings shared by both solvers.
#[derive(Debug, Clone)]
pub struct PenaltyConfig<F: Scalar> {
    /// SCAD shape constant; must exceed 2.
    pub c: F,
    /// Candidate rates for the index block; empty means automatic.
    pub lambda1_grid: Vec<F>,
    /// Candidate rates for the linear block; empty means automatic.
    pub lambda2_grid: Vec<F>,
    /// Magnitude at or below which a penalized coordinate is set to zero.
    pub zero_threshold: F,
    /// Iteration cap for each penalized solve; `None` keeps the engine's own.
    pub max_inner_iterations: Option<usize>,
    /// Warm-start each grid point from its neighbor instead of the pilot.
    pub chained_warm_starts: bool,
}

impl<F: Scalar> Default for PenaltyConfig<F> {
    fn default() -> Self {
        Self {
            c: F::cast(SCAD_SHAPE),
            lambda1_grid: Vec::new(),
            lambda2_grid: Vec::new(),
            zero_threshold: F::cast(1e-4),
            max_inner_iterations: None,
            chained_warm_starts: true,
        }
    }
}

impl<F: Scalar> PenaltyConfig<F> {
    fn validate(&self) -> Result<()> {
        if !self.c.is_finite() || !(self.c > F::cast(2.0)) {
            return Err(Error::InvalidConfig(format!(
                "SCAD shape must be a finite value above 2, got {}",
                self.c.as_f64()
            )));
        }
        for (name, grid) in [
            ("lambda1", &self.lambda1_grid),
            ("lambda2", &self.lambda2_grid),
        ] {
            if grid.iter().any(|v| !v.is_finite() || *v < F::zero()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} grid entries must be finite and nonnegative"
                )));
            }
        }
        if !self.zero_threshold.is_finite() || self.zero_threshold < F::zero() {
            return Err(Error::InvalidConfig(
                "zero threshold must be finite and nonnegative".to_string(),
            ));
        }
        Ok(())
    }
}

/// Which estimating-equation engine a selection run drives.
#[derive(Debug, Clone)]
pub enum EngineConfig<F: Scalar> {
    Gee(GeeConfig<F>),
    Qif(QifConfig<F>),
}

impl<F: Scalar> EngineConfig<F> {
    fn kernel_ridge(&self) -> F {
        match self {
            EngineConfig::Gee(cfg) => cfg.kernel_ridge,
            EngineConfig::Qif(cfg) => cfg.kernel_ridge,
        }
    }

    /// Copy of the engine with the bandwidth pinned, so that every grid
    /// point smooths with the pilot's bandwidth.
    fn with_fixed_bandwidth(&self, h: F) -> Self {
        let mut out = self.clone();
        match &mut out {
            EngineConfig::Gee(cfg) => cfg.bandwidth = BandwidthPolicy::Fixed(h),
            EngineConfig::Qif(cfg) => cfg.bandwidth = BandwidthPolicy::Fixed(h),
        }
        out
    }

    fn pilot(&self, data: &LongitudinalDataset<F>) -> Result<FitResult<F>> {
        match self {
            EngineConfig::Gee(cfg) => gee::solve_gee(data, cfg),
            EngineConfig::Qif(cfg) => qif::solve_qif(data, cfg),
        }
    }

    fn penalized(
        &self,
        data: &LongitudinalDataset<F>,
        pen: &PenaltyConfig<F>,
        lambda1: F,
        lambda2: F,
        start: (IndexParam<F>, ThetaParam<F>),
    ) -> Result<FitResult<F>> {
        match self {
            EngineConfig::Gee(cfg) => penalized_gee_solve(data, cfg, pen, lambda1, lambda2, start),
            EngineConfig::Qif(cfg) => penalized_qif_solve(data, cfg, pen, lambda1, lambda2, start),
        }
    }
}

fn check_rate<F: Scalar>(name: &str, value: F) -> Result<()> {
    if !value.is_finite() || value < F::zero() {
        return Err(Error::InvalidConfig(format!(
            "{name} must be finite and nonnegative, got {}",
            value.as_f64()
        )));
    }
    Ok(())
}

fn check_start<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
) -> Result<()> {
    if data.p() < 2 {
        return Err(Error::InvalidConfig(
            "the single-index part needs at least two x columns".to_string(),
        ));
    }
    if beta.p() != data.p() || theta.q() != data.q() {
        return Err(Error::InvalidConfig(format!(
            "starting point has dimensions ({}, {}) but the data has ({}, {})",
            beta.p(),
            theta.q(),
            data.p(),
            data.q()
        )));
    }
    Ok(())
}

/// One rate per stacked coordinate: `lambda1` over the reduced index block,
/// `lambda2` over the linear block.
fn lambda_vector<F: Scalar>(reduced_len: usize, q: usize, lambda1: F, lambda2: F) -> DVector<F> {
    DVector::from_fn(reduced_len + q, |j, _| {
        if j < reduced_len {
            lambda1
        } else {
            lambda2
        }
    })
}

/// SCAD-penalized fit of the marginal estimating equations, starting from
/// `start` (usually the unpenalized fit or a neighboring grid point's
/// solution).  `lambda1` penalizes the reduced index coefficients, `lambda2`
/// the linear coefficients; either may be zero, which reproduces the
/// unpenalized solver exactly.
pub fn penalized_gee_solve<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &GeeConfig<F>,
    pen: &PenaltyConfig<F>,
    lambda1: F,
    lambda2: F,
    start: (IndexParam<F>, ThetaParam<F>),
) -> Result<FitResult<F>> {
    pen.validate()?;
    check_rate("lambda1", lambda1)?;
    check_rate("lambda2", lambda2)?;
    let (beta0, theta0) = start;
    check_start(data, &beta0, &theta0)?;
    let lambda = lambda_vector(beta0.reduced().len(), theta0.q(), lambda1, lambda2);
    let mut state = PenaltyState::new(lambda, pen.c, pen.zero_threshold);
    let mut solver_cfg = cfg.clone();
    if let Some(cap) = pen.max_inner_iterations {
        solver_cfg.max_iterations = cap;
    }
    gee::gee_engine(data, &solver_cfg, beta0, theta0, Some(&mut state))
}

/// SCAD-penalized minimization of the quadratic inference function; see
/// [`penalized_gee_solve`] for the shared conventions.
pub fn penalized_qif_solve<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &QifConfig<F>,
    pen: &PenaltyConfig<F>,
    lambda1: F,
    lambda2: F,
    start: (IndexParam<F>, ThetaParam<F>),
) -> Result<FitResult<F>> {
    pen.validate()?;
    check_rate("lambda1", lambda1)?;
    check_rate("lambda2", lambda2)?;
    let (beta0, theta0) = start;
    check_start(data, &beta0, &theta0)?;
    let lambda = lambda_vector(beta0.reduced().len(), theta0.q(), lambda1, lambda2);
    let mut state = PenaltyState::new(lambda, pen.c, pen.zero_threshold);
    let mut solver_cfg = cfg.clone();
    if let Some(cap) = pen.max_inner_iterations {
        solver_cfg.max_iterations = cap;
    }
    qif::qif_engine(data, &solver_cfg, beta0, theta0, Some(&mut state))
}

/// BIC of a fitted model: `ln(RSS / n) + df ln(n) c / n` with `n` the
/// number of subjects, `df` the count of exactly nonzero coefficients
/// (full index vector plus linear block), and `c` the iterated-logarithm
/// dimension factor `max(1, ln ln (p + q + 1))`.  Residuals come from a
/// fresh smoother pass at the estimate.  With `scales`, each subject's
/// squared residuals are divided by its entry, so subjects with very
/// different noise levels contribute comparably.  A zero residual sum
/// yields negative infinity.
pub fn bic_score<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    bandwidth: F,
    kernel_ridge: F,
    scales: Option<&DVector<F>>,
) -> Result<(F, usize)> {
    if let Some(s) = scales {
        if s.len() != data.n_subjects() {
            return Err(Error::InvalidConfig(format!(
                "scale vector has {} entries for {} subjects",
                s.len(),
                data.n_subjects()
            )));
        }
        if s.iter().any(|v| !v.is_finite() || !(*v > F::zero())) {
            return Err(Error::InvalidConfig(
                "subject scales must be finite and positive".to_string(),
            ));
        }
    }
    let mut kernel = crate::smooth::KernelConfig::for_solver(bandwidth);
    kernel.ridge = kernel_ridge;
    let pass = SmootherPass::build(data, beta.beta(), &theta.0, &kernel)?;
    let resid = gee::residuals(data, theta, &pass);
    let rss: F = match scales {
        None => resid.iter().map(|r| r.norm_squared()).sum(),
        Some(s) => resid
            .iter()
            .enumerate()
            .map(|(i, r)| r.norm_squared() / s[i])
            .sum(),
    };
    let df = beta.beta().iter().filter(|v| **v != F::zero()).count()
        + theta.0.iter().filter(|v| **v != F::zero()).count();
    let n_f = F::from_count(data.n_subjects());
    if !(rss > F::zero()) {
        log::warn!("zero residual sum of squares; BIC pinned at negative infinity");
        return Ok((F::cast(f64::NEG_INFINITY), df));
    }
    // ln(n) alone under-charges dimension when the candidate pool grows
    // with the sample; the iterated-logarithm factor restores consistency
    // there and collapses to one for small coefficient counts.
    let dim_factor = F::cast(
        ((data.p() + data.q() + 1) as f64).ln().ln().max(1.0),
    );
    let bic = (rss / n_f).ln() + F::from_count(df) * n_f.ln() * dim_factor / n_f;
    Ok((bic, df))
}

/// Per-subject variance scales at a reference fit: the subject's residual
/// sum of squares plus one pooled pseudo-observation, divided by the cluster
/// size plus one.  The pooled term keeps every scale positive and tames the
/// noise of variance estimates from very small clusters.  Returns `None`
/// when the reference residuals vanish entirely, in which case scoring
/// should fall back to the unstandardized residual sum.
pub fn subject_scales<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    bandwidth: F,
    kernel_ridge: F,
) -> Result<Option<DVector<F>>> {
    let mut kernel = crate::smooth::KernelConfig::for_solver(bandwidth);
    kernel.ridge = kernel_ridge;
    let pass = SmootherPass::build(data, beta.beta(), &theta.0, &kernel)?;
    let resid = gee::residuals(data, theta, &pass);
    let total: F = resid.iter().map(|r| r.norm_squared()).sum();
    let pooled = total / F::from_count(data.total_obs());
    if !(pooled > F::zero()) {
        return Ok(None);
    }
    Ok(Some(DVector::from_fn(data.n_subjects(), |i, _| {
        (resid[i].norm_squared() + pooled) / F::from_count(data.subjects()[i].len() + 1)
    })))
}

/// Rate used when the data give no usable scale for the automatic grid.
fn fallback_rate<F: Scalar>(p: usize, q: usize, n: usize) -> F {
    // Dimension floor of 2 keeps the logarithm positive.
    let dim = p.max(q).max(2) as f64;
    F::cast((dim.ln() / n as f64).sqrt())
}

/// Largest useful rate for one block: the coordinate-wise product of the
/// pilot magnitude and per-subject curvature, maximized over the block.
fn block_rate_ceiling<F: Scalar>(
    xi: &DVector<F>,
    curvature_diag: &DVector<F>,
    lo: usize,
    len: usize,
    n_f: F,
) -> F {
    let mut hi = F::zero();
    for j in lo..lo + len {
        hi = hi.max(xi[j].abs() * curvature_diag[j] / n_f);
    }
    hi
}

/// Log-spaced grid of `len` points below `ceiling`, replaced by
/// [`fallback_rate`] when the ceiling is degenerate.
fn auto_grid<F: Scalar>(ceiling: F, p: usize, q: usize, n: usize, len: usize) -> Vec<F> {
    let hi = if ceiling.is_finite() && ceiling > F::zero() {
        ceiling
    } else {
        fallback_rate(p, q, n)
    };
    log_spaced(hi * F::cast(AUTO_GRID_FLOOR), hi, len)
}

/// Diagonal curvature of the estimating equations at the pilot, used to
/// scale the automatic grids.
fn curvature_diagonal<F: Scalar>(
    data: &LongitudinalDataset<F>,
    engine: &EngineConfig<F>,
    pilot: &FitResult<F>,
) -> Result<DVector<F>> {
    match engine {
        EngineConfig::Gee(cfg) => {
            let state = gee::assemble_state(data, &pilot.beta, &pilot.theta, cfg, pilot.bandwidth)?;
            Ok(gee::gee_information(&state.lambda, &state.v_inv).diagonal())
        }
        EngineConfig::Qif(cfg) => Ok(qif::curvature_at(
            data,
            cfg,
            &pilot.beta,
            &pilot.theta,
            pilot.bandwidth,
        )?
        .diagonal()),
    }
}

/// Strictly better, or tied on BIC with a heavier total penalty.
fn improves<F: Scalar>(bic: F, rate_sum: F, best_bic: F, best_rate_sum: F) -> bool {
    bic < best_bic || (bic == best_bic && rate_sum > best_rate_sum)
}

fn sorted_grid<F: Scalar>(grid: &[F]) -> Vec<F> {
    let mut out = grid.to_vec();
    out.sort_by(|a, b| a.partial_cmp(b).expect("grid entries are validated finite"));
    out.dedup();
    out
}

/// One evaluated grid point.
#[derive(Debug, Clone)]
pub struct SelectionCandidate<F: Scalar> {
    pub lambda1: F,
    pub lambda2: F,
    pub bic: F,
    /// Count of exactly nonzero coefficients at this point.
    pub df: usize,
}

/// Outcome of the two-dimensional tuning search.
#[derive(Debug, Clone)]
pub struct SelectionResult<F: Scalar> {
    /// Penalized fit at the selected rates.
    pub fit: FitResult<F>,
    pub lambda1: F,
    pub lambda2: F,
    pub bic: F,
    pub df: usize,
    /// Every successfully evaluated grid point, in evaluation order.
    pub bic_path: Vec<SelectionCandidate<F>>,
    /// Which full index coefficients survived (anchor included).
    pub support_beta: Vec<bool>,
    /// Which linear coefficients survived.
    pub support_theta: Vec<bool>,
}

/// Sweeps a grid of `(lambda1, lambda2)` pairs and keeps the fit with the
/// smallest BIC, breaking exact ties toward the heavier penalty.
///
/// The sweep first runs an unpenalized pilot fit, whose bandwidth is then
/// pinned for every grid point.  BIC residuals are standardized by
/// per-subject scales taken from the pilot ([`subject_scales`]); without
/// that, datasets whose subjects have strongly unequal noise levels let the
/// noisiest subjects drown the selection signal carried by the quiet ones.
/// Empty grids in the penalty settings are replaced by automatic log-spaced
/// grids scaled from the pilot coefficients and the curvature diagonal.
/// Rates iterate in ascending order, `lambda1` outer and `lambda2` inner;
/// with chained warm starts each point starts from its left neighbor's
/// solution and each row from the first solution of the row above, otherwise
/// every point starts from the pilot.  Grid points whose solve or score
/// fails are logged and skipped; if every point fails the first failure is
/// reported.
pub fn tune_lambdas<F: Scalar>(
    data: &LongitudinalDataset<F>,
    engine: &EngineConfig<F>,
    pen: &PenaltyConfig<F>,
) -> Result<SelectionResult<F>> {
    pen.validate()?;
    let pilot = engine.pilot(data)?;
    let n = data.n_subjects();
    let n_f = F::from_count(n);
    let xi = gee::stack_params(&pilot.beta, &pilot.theta);
    let r = pilot.beta.reduced().len();
    let q = pilot.theta.q();

    let (grid1, grid2) = if pen.lambda1_grid.is_empty() || pen.lambda2_grid.is_empty() {
        let curvature = curvature_diagonal(data, engine, &pilot)?;
        let auto1 = || {
            auto_grid(
                block_rate_ceiling(&xi, &curvature, 0, r, n_f),
                data.p(),
                data.q(),
                n,
                AUTO_GRID_LEN_INDEX,
            )
        };
        let auto2 = || {
            auto_grid(
                block_rate_ceiling(&xi, &curvature, r, q, n_f),
                data.p(),
                data.q(),
                n,
                AUTO_GRID_LEN_LINEAR,
            )
        };
        (
            if pen.lambda1_grid.is_empty() {
                auto1()
            } else {
                sorted_grid(&pen.lambda1_grid)
            },
            if pen.lambda2_grid.is_empty() {
                auto2()
            } else {
                sorted_grid(&pen.lambda2_grid)
            },
        )
    } else {
        (sorted_grid(&pen.lambda1_grid), sorted_grid(&pen.lambda2_grid))
    };

    let fixed = engine.with_fixed_bandwidth(pilot.bandwidth);
    let scales = subject_scales(
        data,
        &pilot.beta,
        &pilot.theta,
        pilot.bandwidth,
        fixed.kernel_ridge(),
    )?;
    let pilot_start = (pilot.beta.clone(), pilot.theta.clone());
    let mut row_start = pilot_start.clone();
    let mut path = Vec::with_capacity(grid1.len() * grid2.len());
    let mut best: Option<(FitResult<F>, SelectionCandidate<F>)> = None;
    let mut first_failure: Option<String> = None;

    for &l1 in &grid1 {
        let mut warm = row_start.clone();
        let mut row_first: Option<(IndexParam<F>, ThetaParam<F>)> = None;
        for &l2 in &grid2 {
            let attempt = fixed
                .penalized(data, pen, l1, l2, warm.clone())
                .and_then(|fit| {
                    let (bic, df) = bic_score(
                        data,
                        &fit.beta,
                        &fit.theta,
                        fit.bandwidth,
                        fixed.kernel_ridge(),
                        scales.as_ref(),
                    )?;
                    if bic.as_f64().is_nan() {
                        return Err(Error::InvalidConfig(
                            "BIC evaluated to NaN at this grid point".to_string(),
                        ));
                    }
                    Ok((fit, bic, df))
                });
            match attempt {
                Ok((fit, bic, df)) => {
                    if row_first.is_none() {
                        row_first = Some((fit.beta.clone(), fit.theta.clone()));
                    }
                    if pen.chained_warm_starts {
                        warm = (fit.beta.clone(), fit.theta.clone());
                    }
                    let candidate = SelectionCandidate {
                        lambda1: l1,
                        lambda2: l2,
                        bic,
                        df,
                    };
                    let better = match &best {
                        None => true,
                        Some((_, held)) => {
                            improves(bic, l1 + l2, held.bic, held.lambda1 + held.lambda2)
                        }
                    };
                    if better {
                        best = Some((fit, candidate.clone()));
                    }
                    path.push(candidate);
                }
                Err(err) => {
                    log::warn!(
                        "grid point (lambda1 = {}, lambda2 = {}) failed: {err}",
                        l1.as_f64(),
                        l2.as_f64()
                    );
                    if first_failure.is_none() {
                        first_failure = Some(err.to_string());
                    }
                }
            }
        }
        if pen.chained_warm_starts {
            if let Some(first) = row_first {
                row_start = first;
            }
        }
    }

    let Some((fit, chosen)) = best else {
        return Err(Error::AllGridPointsFailed {
            first_failure: first_failure.unwrap_or_else(|| "empty grid".to_string()),
        });
    };
    let support_beta = fit.beta.beta().iter().map(|v| *v != F::zero()).collect();
    let support_theta = fit.theta.0.iter().map(|v| *v != F::zero()).collect();
    Ok(SelectionResult {
        fit,
        lambda1: chosen.lambda1,
        lambda2: chosen.lambda2,
        bic: chosen.bic,
        df: chosen.df,
        bic_path: path,
        support_beta,
        support_theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corr::CorrelationKind;
    use crate::model::Subject;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    const C: f64 = 3.7;

    #[test]
    fn scad_derivative_is_continuous_and_piecewise_correct() {
        for lambda in [0.4, 1.0] {
            // Flat segment.
            assert_eq!(scad_derivative(0.0, lambda, C), lambda);
            assert_eq!(scad_derivative(lambda * 0.5, lambda, C), lambda);
            assert_eq!(scad_derivative(lambda, lambda, C), lambda);
            // Linear decay.
            let mid = 2.0 * lambda;
            assert_abs_diff_eq!(
                scad_derivative(mid, lambda, C),
                (C * lambda - mid) / (C - 1.0),
                epsilon = 1e-14
            );
            // Zero past the clip point.
            assert_eq!(scad_derivative(C * lambda + 1e-9, lambda, C), 0.0);
            assert_eq!(scad_derivative(10.0 * lambda, lambda, C), 0.0);
            // Continuity at both knots.
            assert_abs_diff_eq!(
                scad_derivative(lambda + 1e-12, lambda, C),
                lambda,
                epsilon = 1e-9
            );
            assert_abs_diff_eq!(
                scad_derivative(C * lambda - 1e-12, lambda, C),
                0.0,
                epsilon = 1e-9
            );
            // Symmetry in the sign of x.
            assert_eq!(
                scad_derivative(-mid, lambda, C),
                scad_derivative(mid, lambda, C)
            );
        }
    }

    #[test]
    fn scad_penalty_derivative_matches_finite_differences() {
        let lambda = 0.7;
        let h = 1e-6;
        let mut x = 0.005;
        while x < C * lambda + 1.0 {
            let fd = (scad_penalty(x + h, lambda, C) - scad_penalty(x - h, lambda, C)) / (2.0 * h);
            assert_abs_diff_eq!(fd, scad_derivative(x, lambda, C), epsilon = 1e-5);
            x += 0.01;
        }
        // Knot values.
        assert_abs_diff_eq!(scad_penalty(lambda, lambda, C), lambda * lambda);
        assert_abs_diff_eq!(
            scad_penalty(C * lambda, lambda, C),
            lambda * lambda * (C + 1.0) / 2.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(
            scad_penalty(100.0, lambda, C),
            lambda * lambda * (C + 1.0) / 2.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn zero_rate_removes_the_penalty() {
        for x in [0.0, 0.3, 1.7, -2.4] {
            assert_eq!(scad_derivative(x, 0.0, C), 0.0);
            assert_eq!(scad_penalty(x, 0.0, C), 0.0);
        }
    }

    /// Univariate penalized least squares `min 0.5 (z - x)^2 + p(x)` has a
    /// known closed form; a brute-force grid minimization must agree.
    #[test]
    fn univariate_shrinkage_matches_closed_form() {
        let lambda = 1.0;
        let closed_form = |z: f64| -> f64 {
            let a = z.abs();
            if a <= 2.0 * lambda {
                z.signum() * (a - lambda).max(0.0)
            } else if a <= C * lambda {
                ((C - 1.0) * z - z.signum() * C * lambda) / (C - 2.0)
            } else {
                z
            }
        };
        for z in [0.3, -0.8, 1.2, 2.5, -3.0, 5.0] {
            let mut best_x = -6.0;
            let mut best_val = f64::INFINITY;
            let mut x = -6.0;
            while x <= 6.0 {
                let val = 0.5 * (z - x) * (z - x) + scad_penalty(x, lambda, C);
                if val < best_val {
                    best_val = val;
                    best_x = x;
                }
                x += 5e-4;
            }
            assert_abs_diff_eq!(best_x, closed_form(z), epsilon = 2e-3);
        }
    }

    #[test]
    fn penalty_state_freezes_small_penalized_coordinates() {
        // Stacked layout: two reduced index coordinates then two linear ones.
        let lambda = DVector::from_vec(vec![0.5, 0.0, 0.5, 0.5]);
        let mut state = PenaltyState::new(lambda, C, 1e-4);
        let beta = IndexParam::from_reduced(DVector::from_vec(vec![5e-5, 2e-5]), 2).unwrap();
        let theta = ThetaParam(DVector::from_vec(vec![0.8, -3e-5]));

        let xi = gee::stack_params(&beta, &theta);
        let e = state.e_diag(&xi);
        // Unfrozen coordinates use q(|x|) / (|x| + guard); the rate-zero
        // coordinate contributes nothing.
        assert!(e[0] > 0.0);
        assert_eq!(e[1], 0.0);
        let expected = scad_derivative(0.8, 0.5, C) / (0.8 + 1e-8);
        assert_abs_diff_eq!(e[2], expected, epsilon = 1e-12);
        let g = state.pseudo_gradient(&xi);
        assert_abs_diff_eq!(g[2], expected * 0.8, epsilon = 1e-12);

        let (new_beta, new_theta) = state.freeze_small(&beta, &theta).unwrap().unwrap();
        // Coordinate 0 (small, penalized) and 3 (small, penalized) freeze;
        // 1 is small but unpenalized, 2 is large.
        assert_eq!(new_beta.reduced()[0], 0.0);
        assert_eq!(new_beta.reduced()[1], 2e-5);
        assert_eq!(new_theta.0[0], 0.8);
        assert_eq!(new_theta.0[1], 0.0);
        assert_eq!(state.active_indices(), vec![1, 2]);
        // Frozen coordinates drop out of the approximation.
        let xi2 = gee::stack_params(&new_beta, &new_theta);
        let e2 = state.e_diag(&xi2);
        assert_eq!(e2[0], 0.0);
        assert_eq!(e2[3], 0.0);
        // Nothing further to freeze.
        assert!(state.freeze_small(&new_beta, &new_theta).unwrap().is_none());
    }

    #[test]
    fn tie_break_prefers_heavier_penalty() {
        assert!(improves(1.0, 0.1, 2.0, 0.5));
        assert!(!improves(3.0, 0.9, 2.0, 0.5));
        assert!(improves(2.0, 0.9, 2.0, 0.5));
        assert!(!improves(2.0, 0.1, 2.0, 0.5));
        let neg = f64::NEG_INFINITY;
        assert!(improves(neg, 0.9, neg, 0.5));
    }

    #[test]
    fn automatic_grid_spans_the_ceiling_and_falls_back() {
        let grid = auto_grid(2.0, 5, 3, 100, 8);
        assert_eq!(grid.len(), 8);
        assert_abs_diff_eq!(grid[0], 0.02, epsilon = 1e-12);
        assert_abs_diff_eq!(grid[7], 2.0, epsilon = 1e-12);
        assert!(grid.windows(2).all(|w| w[0] < w[1]));

        // Degenerate ceiling: replaced by sqrt(ln(max(p, q)) / n).
        let fallback = auto_grid(0.0, 20, 30, 100, 8);
        let expected = (30.0f64.ln() / 100.0).sqrt();
        assert_abs_diff_eq!(fallback[7], expected, epsilon = 1e-12);
        assert!(fallback[0] > 0.0);
    }

    fn clustered_dataset(
        n: usize,
        beta: &[f64],
        theta: &[f64],
        sigma: f64,
        seed: u64,
    ) -> LongitudinalDataset<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 3;
        let p = beta.len();
        let q = theta.len();
        let subjects = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, p, |_, _| {
                    let (a, b): (f64, f64) = (rng.random(), rng.random());
                    // Box-Muller keeps the index spread wide enough for the
                    // smoother window.
                    (-2.0 * a.max(1e-12).ln()).sqrt() * (std::f64::consts::TAU * b).cos()
                });
                let z = DMatrix::from_fn(m, q, |_, _| rng.random::<f64>());
                let y = DVector::from_fn(m, |j, _| {
                    let index: f64 = (0..p).map(|k| x[(j, k)] * beta[k]).sum();
                    let linear: f64 = (0..q).map(|k| z[(j, k)] * theta[k]).sum();
                    index + linear + sigma * (rng.random::<f64>() - 0.5)
                });
                Subject {
                    id: format!("s{i}"),
                    y,
                    x,
                    z,
                }
            })
            .collect();
        LongitudinalDataset::new(subjects).unwrap()
    }

    fn fixed_gee() -> GeeConfig<f64> {
        GeeConfig {
            bandwidth: BandwidthPolicy::Fixed(0.6),
            ..GeeConfig::default()
        }
    }

    #[test]
    fn zero_rates_reproduce_the_unpenalized_gee_exactly() {
        let data = clustered_dataset(25, &[0.8, 0.6, 0.0], &[1.0], 0.3, 41);
        let cfg = fixed_gee();
        let plain = gee::solve_gee(&data, &cfg).unwrap();
        let start = gee::initial_estimate(&data).unwrap();
        let penalized =
            penalized_gee_solve(&data, &cfg, &PenaltyConfig::default(), 0.0, 0.0, start).unwrap();
        assert_eq!(plain.iterations, penalized.iterations);
        assert_eq!(plain.converged, penalized.converged);
        for k in 0..3 {
            assert_eq!(plain.beta.beta()[k], penalized.beta.beta()[k]);
        }
        assert_eq!(plain.theta.0[0], penalized.theta.0[0]);
        assert_eq!(plain.score_norm, penalized.score_norm);
    }

    #[test]
    fn zero_rates_reproduce_the_unpenalized_qif_exactly() {
        let data = clustered_dataset(20, &[0.8, 0.6, 0.0], &[1.0], 0.3, 43);
        let cfg = QifConfig {
            bandwidth: BandwidthPolicy::Fixed(0.6),
            ..QifConfig::default()
        }
        .with_working(CorrelationKind::Exchangeable);
        let plain = qif::solve_qif(&data, &cfg).unwrap();
        let start = gee::initial_estimate(&data).unwrap();
        let penalized =
            penalized_qif_solve(&data, &cfg, &PenaltyConfig::default(), 0.0, 0.0, start).unwrap();
        assert_eq!(plain.iterations, penalized.iterations);
        assert_eq!(plain.converged, penalized.converged);
        for k in 0..3 {
            assert_eq!(plain.beta.beta()[k], penalized.beta.beta()[k]);
        }
        assert_eq!(plain.theta.0[0], penalized.theta.0[0]);
        assert_eq!(plain.score_norm, penalized.score_norm);
    }

    #[test]
    fn bic_counts_exact_zeros_and_matches_a_direct_computation() {
        let data = clustered_dataset(15, &[0.6, 0.8, 0.0], &[1.0, 0.0], 0.3, 47);
        let beta = IndexParam::from_full(DVector::from_vec(vec![0.6, 0.8, 0.0]), 1).unwrap();
        let theta = ThetaParam(DVector::from_vec(vec![1.0, 0.0]));
        let (bic, df) = bic_score(&data, &beta, &theta, 0.6, 0.0, None).unwrap();
        assert_eq!(df, 3);
        let kernel = crate::smooth::KernelConfig::for_solver(0.6);
        let pass = SmootherPass::build(&data, beta.beta(), &theta.0, &kernel).unwrap();
        let rss: f64 = gee::residuals(&data, &theta, &pass)
            .iter()
            .map(|r| r.norm_squared())
            .sum();
        let n = data.n_subjects() as f64;
        assert_abs_diff_eq!(bic, (rss / n).ln() + 3.0 * n.ln() / n, epsilon = 1e-12);
    }

    #[test]
    fn subject_scales_mix_in_one_pooled_pseudo_observation() {
        let data = clustered_dataset(12, &[0.6, 0.8], &[1.0], 0.4, 49);
        let beta = IndexParam::from_full(DVector::from_vec(vec![0.6, 0.8]), 1).unwrap();
        let theta = ThetaParam(DVector::from_vec(vec![1.0]));
        let scales = subject_scales(&data, &beta, &theta, 0.6, 0.0)
            .unwrap()
            .unwrap();

        let kernel = crate::smooth::KernelConfig::for_solver(0.6);
        let pass = SmootherPass::build(&data, beta.beta(), &theta.0, &kernel).unwrap();
        let resid = gee::residuals(&data, &theta, &pass);
        let total: f64 = resid.iter().map(|r| r.norm_squared()).sum();
        let pooled = total / data.total_obs() as f64;
        for (i, subject) in data.subjects().iter().enumerate() {
            let expected = (resid[i].norm_squared() + pooled) / (subject.len() + 1) as f64;
            assert_abs_diff_eq!(scales[i], expected, epsilon = 1e-14);
            assert!(scales[i] > 0.0);
        }

        // Unit scales reproduce the unstandardized score; the actual scales
        // divide each subject's contribution through.
        let ones = DVector::from_element(data.n_subjects(), 1.0);
        let (plain, _) = bic_score(&data, &beta, &theta, 0.6, 0.0, None).unwrap();
        let (unit, _) = bic_score(&data, &beta, &theta, 0.6, 0.0, Some(&ones)).unwrap();
        assert_abs_diff_eq!(plain, unit, epsilon = 1e-14);
        let (weighted, df) = bic_score(&data, &beta, &theta, 0.6, 0.0, Some(&scales)).unwrap();
        let rss_w: f64 = resid
            .iter()
            .enumerate()
            .map(|(i, r)| r.norm_squared() / scales[i])
            .sum();
        let n = data.n_subjects() as f64;
        assert_abs_diff_eq!(weighted, (rss_w / n).ln() + df as f64 * n.ln() / n, epsilon = 1e-12);

        // Malformed scale vectors are rejected.
        let short = DVector::from_element(3, 1.0);
        assert!(bic_score(&data, &beta, &theta, 0.6, 0.0, Some(&short)).is_err());
        let negative = DVector::from_element(data.n_subjects(), -1.0);
        assert!(bic_score(&data, &beta, &theta, 0.6, 0.0, Some(&negative)).is_err());
    }

    #[test]
    fn selection_zeroes_the_noise_coordinates() {
        let data = clustered_dataset(60, &[0.7, 0.5, 0.0, 0.0], &[1.0, 0.0, 0.0], 0.25, 53);
        let engine = EngineConfig::Gee(fixed_gee());
        let pen = PenaltyConfig::default();
        let result = tune_lambdas(&data, &engine, &pen).unwrap();

        assert_eq!(result.support_beta, vec![true, true, false, false]);
        assert_eq!(result.support_theta, vec![true, false, false]);
        // Dropped coordinates are exact zeros, not just small.
        assert_eq!(result.fit.beta.beta()[2], 0.0);
        assert_eq!(result.fit.beta.beta()[3], 0.0);
        assert_eq!(result.fit.theta.0[1], 0.0);
        assert_eq!(result.fit.theta.0[2], 0.0);
        assert!(result.lambda1 > 0.0);
        assert!(result.lambda2 > 0.0);
        // Both automatic grids were swept in full.
        assert_eq!(
            result.bic_path.len(),
            AUTO_GRID_LEN_INDEX * AUTO_GRID_LEN_LINEAR
        );
        assert!(result
            .bic_path
            .iter()
            .all(|candidate| result.bic <= candidate.bic));
        let kept = result.support_beta.iter().filter(|s| **s).count()
            + result.support_theta.iter().filter(|s| **s).count();
        assert_eq!(result.df, kept);
        // Surviving coordinates stay close to the generating values.
        let scale = (0.7f64 * 0.7 + 0.5 * 0.5).sqrt();
        assert_abs_diff_eq!(result.fit.beta.beta()[0], 0.7 / scale, epsilon = 0.1);
        assert_abs_diff_eq!(result.fit.beta.beta()[1], 0.5 / scale, epsilon = 0.1);
        assert_abs_diff_eq!(result.fit.theta.0[0], 1.0, epsilon = 0.15);
    }
}

//! Quadratic inference function solver.
//!
//! Instead of inverting an estimated working correlation, the inverse is
//! expanded over a small fixed basis `M_1, ..., M_k` determined by the
//! assumed structure. Stacking the per-basis score contributions gives an
//! extended score whose optimal GMM combination—the quadratic form
//! `Q_n = Ubar' C_n^{-1} Ubar`—is minimized by Gauss-Newton. Misspecifying
//! the correlation costs efficiency, never consistency.

use nalgebra::{DMatrix, DVector};

use crate::corr::{basis_matrices, CorrelationKind, VariancePooling, WorkingCovariance};
use crate::error::{Error, Result};
use crate::gee::{self, build_lambda_hat, residuals};
use crate::linalg;
use crate::model::{
    FitResult, IndexParam, IterationRecord, LongitudinalDataset, ThetaParam,
};
use crate::scalar::Scalar;
use crate::select::PenaltyState;
use crate::smooth::{self, BandwidthPolicy, SmootherPass};

/// Condition-number threshold beyond which `C_n` is ridged before inversion.
const CONDITION_LIMIT: f64 = 1e12;
/// Ridge added to `C_n` as a multiple of its average diagonal.
const C_RIDGE: f64 = 1e-8;
/// Relative step for central finite differences of the mean extended score.
const FD_STEP: f64 = 1e-6;

/// Configuration for [`solve_qif`].
#[derive(Debug, Clone)]
pub struct QifConfig<F: Scalar> {
    /// Correlation structure determining the inverse-correlation basis.
    pub working: CorrelationKind,
    /// Marginal variance pooling; `None` uses the pooled default.
    pub pooling: Option<VariancePooling>,
    /// How the smoothing bandwidth is chosen.
    pub bandwidth: BandwidthPolicy<F>,
    /// Cross-validation grid; `None` uses the rule-of-thumb grid.
    pub cv_grid: Option<Vec<F>>,
    /// Ridge added to the local-linear denominator (0 disables).
    pub kernel_ridge: F,
    /// Maximum Gauss-Newton iterations.
    pub max_iterations: usize,
    /// Convergence threshold on the step norm (and, squared, on the
    /// objective decrease).
    pub tolerance: F,
    /// Initial step length multiplier in (0, 1].
    pub damping: F,
    /// Maximum number of step halvings per iteration.
    pub max_halvings: usize,
}

impl<F: Scalar> Default for QifConfig<F> {
    fn default() -> Self {
        Self {
            working: CorrelationKind::Independence,
            pooling: None,
            bandwidth: BandwidthPolicy::CvAtInit,
            cv_grid: None,
            kernel_ridge: F::zero(),
            max_iterations: 100,
            tolerance: F::cast(1e-6),
            damping: F::one(),
            max_halvings: 20,
        }
    }
}

impl<F: Scalar> QifConfig<F> {
    /// Same solver settings with a different correlation structure.
    pub fn with_working(mut self, working: CorrelationKind) -> Self {
        self.working = working;
        self
    }

    fn as_gee(&self) -> gee::GeeConfig<F> {
        gee::GeeConfig {
            working: self.working,
            pooling: self.pooling,
            bandwidth: self.bandwidth.clone(),
            cv_grid: self.cv_grid.clone(),
            kernel_ridge: self.kernel_ridge,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            damping: self.damping,
            max_halvings: self.max_halvings,
        }
    }
}

/// Per-subject extended scores `U_i`, one stacked block per basis matrix:
/// `U_i = [Lambda_i D_i M_s D_i r_i]_s` with `D_i = diag(1/sigma_i)`.
///
/// `a_inv_sqrt` supplies `1/sigma_i` per subject; the marginal variance scale
/// is held fixed while parameters vary.
pub fn extended_scores<F: Scalar>(
    data: &LongitudinalDataset<F>,
    lambda: &[DMatrix<F>],
    resid: &[DVector<F>],
    a_inv_sqrt: &[F],
    kind: CorrelationKind,
) -> Result<Vec<DVector<F>>> {
    let d = lambda.first().map_or(0, |l| l.nrows());
    data.subjects()
        .iter()
        .enumerate()
        .map(|(i, subject)| {
            let m = subject.len();
            let basis = basis_matrices(kind, m)?;
            let scaled = &resid[i] * a_inv_sqrt[i];
            let mut u = DVector::<F>::zeros(d * basis.len());
            for (s, ms) in basis.iter().enumerate() {
                // Lambda_i * D (M_s (D r_i)): D scales columns of Lambda.
                let inner = ms * &scaled;
                let mut block = DVector::<F>::zeros(d);
                for j in 0..m {
                    block += lambda[i].column(j) * (inner[j] * a_inv_sqrt[i]);
                }
                u.rows_mut(s * d, d).copy_from(&block);
            }
            Ok(u)
        })
        .collect()
}

/// Mean extended score, its empirical second moment, and the quadratic form.
#[derive(Debug, Clone)]
pub struct QifValue<F: Scalar> {
    /// `Ubar = n^{-1} sum_i U_i`.
    pub u_bar: DVector<F>,
    /// `C_n = n^{-1} sum_i U_i U_i'` (possibly ridged for inversion).
    pub c_n: DMatrix<F>,
    /// `C_n^{-1} Ubar`, reused by callers.
    pub c_inv_u: DVector<F>,
    /// `Q_n = Ubar' C_n^{-1} Ubar`.
    pub q_n: F,
}

/// Assembles the quadratic inference function from per-subject scores.
///
/// When `C_n` is ill-conditioned (condition number above 1e12) a small ridge
/// proportional to its average diagonal is added; if it remains singular the
/// minimum eigenvalue is reported in the error.
pub fn qif_objective<F: Scalar>(scores: &[DVector<F>]) -> Result<QifValue<F>> {
    let n = scores.len();
    let l = scores.first().map_or(0, |u| u.len());
    let inv_n = F::from_count(n).recip();
    let mut u_bar = DVector::<F>::zeros(l);
    let mut c_n = DMatrix::<F>::zeros(l, l);
    for u in scores {
        u_bar += u;
        c_n.ger(F::one(), u, u, F::one());
    }
    u_bar *= inv_n;
    c_n *= inv_n;
    let c_n = linalg::symmetrize(&c_n);
    let eigen = linalg::symmetric_eigenvalues(&c_n);
    let (min_ev, max_ev) = (eigen[0], eigen[l - 1]);
    let needs_ridge =
        min_ev <= F::zero() || max_ev > F::cast(CONDITION_LIMIT) * min_ev;
    let c_solve = if needs_ridge {
        let ridge = F::cast(C_RIDGE) * c_n.trace() / F::from_count(l);
        let mut ridged = c_n.clone();
        for j in 0..l {
            ridged[(j, j)] += ridge;
        }
        ridged
    } else {
        c_n.clone()
    };
    let chol = c_solve.clone().cholesky().ok_or(Error::SingularWeighting {
        min_eigenvalue: min_ev.as_f64(),
    })?;
    let c_inv_u = chol.solve(&u_bar);
    let q_n = u_bar.dot(&c_inv_u);
    Ok(QifValue {
        u_bar,
        c_n,
        c_inv_u,
        q_n,
    })
}

/// One full evaluation of the extended score system at `(beta, theta)`.
struct QifState<F: Scalar> {
    pass: SmootherPass<F>,
    lambda: Vec<DMatrix<F>>,
    resid: Vec<DVector<F>>,
    value: QifValue<F>,
}

/// The marginal variance scale, frozen across an outer iteration so that the
/// objective surface Gauss-Newton sees does not shift underneath it.
struct VarianceScale<F: Scalar> {
    a_inv_sqrt: Vec<F>,
    rho_hint: F,
}

fn estimate_scale<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &QifConfig<F>,
    resid: &[DVector<F>],
) -> Result<VarianceScale<F>> {
    let cov = WorkingCovariance::estimate(resid, cfg.working, cfg.as_gee().pooling_for(data))?;
    let a_inv_sqrt = (0..data.n_subjects()).map(|i| cov.a_inv_sqrt(i)).collect();
    Ok(VarianceScale {
        a_inv_sqrt,
        rho_hint: cov.rho,
    })
}

fn assemble_qif_state<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    cfg: &QifConfig<F>,
    bandwidth: F,
    scale: &VarianceScale<F>,
) -> Result<QifState<F>> {
    let pass = SmootherPass::build(data, beta.beta(), &theta.0, &cfg.as_gee().kernel(bandwidth))?;
    let resid = residuals(data, theta, &pass);
    let lambda = build_lambda_hat(data, beta, &pass);
    let value = value_from_parts(data, &lambda, &resid, scale, cfg.working)?;
    Ok(QifState {
        pass,
        lambda,
        resid,
        value,
    })
}

fn value_from_parts<F: Scalar>(
    data: &LongitudinalDataset<F>,
    lambda: &[DMatrix<F>],
    resid: &[DVector<F>],
    scale: &VarianceScale<F>,
    kind: CorrelationKind,
) -> Result<QifValue<F>> {
    let scores = extended_scores(data, lambda, resid, &scale.a_inv_sqrt, kind)?;
    qif_objective(&scores)
}

/// Mean extended score alone (no second moment), for finite differencing.
fn mean_score_at<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    cfg: &QifConfig<F>,
    bandwidth: F,
    scale: &VarianceScale<F>,
) -> Result<DVector<F>> {
    let pass = SmootherPass::build(data, beta.beta(), &theta.0, &cfg.as_gee().kernel(bandwidth))?;
    let resid = residuals(data, theta, &pass);
    let lambda = build_lambda_hat(data, beta, &pass);
    let scores = extended_scores(data, &lambda, &resid, &scale.a_inv_sqrt, cfg.working)?;
    let n = F::from_count(scores.len());
    let l = scores.first().map_or(0, |u| u.len());
    let mut u_bar = DVector::<F>::zeros(l);
    for u in &scores {
        u_bar += u;
    }
    Ok(u_bar / n)
}

/// Central-difference Jacobian of `Ubar` with respect to the listed
/// coordinates of `(beta_reduced, theta)`, each evaluation running a full
/// smoother pass at the shifted parameters so the curve estimate moves with
/// them.
fn mean_score_jacobian<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    cfg: &QifConfig<F>,
    bandwidth: F,
    scale: &VarianceScale<F>,
    l: usize,
    coords: &[usize],
) -> Result<DMatrix<F>> {
    let r = beta.reduced().len();
    let q = theta.q();
    let xi = gee::stack_params(beta, theta);
    let mut jac = DMatrix::<F>::zeros(l, coords.len());
    for (k, &j) in coords.iter().enumerate() {
        let step = F::cast(FD_STEP) * F::one().max(xi[j].abs());
        let eval = |sign: F| -> Result<DVector<F>> {
            let mut shifted = xi.clone();
            shifted[j] += sign * step;
            let b = IndexParam::from_reduced(shifted.rows(0, r).into_owned(), beta.anchor())?;
            let t = ThetaParam(shifted.rows(r, q).into_owned());
            mean_score_at(data, &b, &t, cfg, bandwidth, scale)
        };
        let hi = eval(F::one())?;
        let lo = eval(-F::one())?;
        jac.column_mut(k)
            .copy_from(&((hi - lo) / (F::cast(2.0) * step)));
    }
    Ok(jac)
}

/// Gauss-Newton curvature `2 J' C^{-1} J` at `(beta, theta)`, with the
/// variance scale estimated at the same point.  Its diagonal anchors the
/// automatic penalty grid.
pub(crate) fn curvature_at<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &QifConfig<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    bandwidth: F,
) -> Result<DMatrix<F>> {
    let pass = SmootherPass::build(data, beta.beta(), &theta.0, &cfg.as_gee().kernel(bandwidth))?;
    let resid = residuals(data, theta, &pass);
    let scale = estimate_scale(data, cfg, &resid)?;
    let state = assemble_qif_state(data, beta, theta, cfg, bandwidth, &scale)?;
    let d = beta.reduced().len() + theta.q();
    let coords: Vec<usize> = (0..d).collect();
    let l = state.value.u_bar.len();
    let jac = mean_score_jacobian(data, beta, theta, cfg, bandwidth, &scale, l, &coords)?;
    let c_inv_j = solve_against_c(&state.value, &jac)?;
    Ok(linalg::symmetrize(&(jac.transpose() * &c_inv_j)) * F::cast(2.0))
}

/// Fits the model by minimizing the quadratic inference function.
///
/// Gauss-Newton steps use a finite-difference Jacobian of the mean extended
/// score; a halving line search accepts the first trial that does not
/// increase `Q_n` (recomputed in full, second moment included, at the trial
/// point). The marginal variance scale is re-estimated once per outer
/// iteration and held fixed inside it.
pub fn solve_qif<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &QifConfig<F>,
) -> Result<FitResult<F>> {
    cfg.as_gee().validate()?;
    if data.p() < 2 {
        return Err(Error::InvalidConfig(
            "the single-index part needs at least two x columns".to_string(),
        ));
    }
    let (beta0, theta0) = gee::initial_estimate(data)?;
    solve_qif_from(data, cfg, beta0, theta0)
}

/// [`solve_qif`] starting from the given parameter values.
pub fn solve_qif_from<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &QifConfig<F>,
    beta0: IndexParam<F>,
    theta0: ThetaParam<F>,
) -> Result<FitResult<F>> {
    qif_engine(data, cfg, beta0, theta0, None)
}

/// Penalized objective at `xi`: the quadratic form plus the penalty total
/// (zero without a penalty). Minimized by the line search.
fn penalized_objective<F: Scalar>(
    q_n: F,
    xi: &DVector<F>,
    penalty: Option<&PenaltyState<F>>,
) -> F {
    match penalty {
        None => q_n,
        Some(pen) => q_n + pen.penalty_total(xi),
    }
}

/// The Gauss-Newton loop behind both the unpenalized and penalized fit.
///
/// With a penalty the normal equations gain its quadratic local
/// approximation, the line search targets the penalized objective, and
/// coordinates falling below the hard-zero threshold freeze at zero.
pub(crate) fn qif_engine<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &QifConfig<F>,
    beta0: IndexParam<F>,
    theta0: ThetaParam<F>,
    mut penalty: Option<&mut PenaltyState<F>>,
) -> Result<FitResult<F>> {
    cfg.as_gee().validate()?;
    let mut beta = beta0;
    let mut theta = theta0;
    let reduced_len = beta.reduced().len();
    let d = reduced_len + theta.q();
    let mut bandwidth = smooth::resolve_bandwidth(
        data,
        beta.beta(),
        &theta.0,
        &cfg.bandwidth,
        cfg.cv_grid.as_deref(),
    )?;
    // Pilot residuals from the initial smoother pass seed the variance scale.
    let pilot_pass =
        SmootherPass::build(data, beta.beta(), &theta.0, &cfg.as_gee().kernel(bandwidth))?;
    let pilot_resid = residuals(data, &theta, &pilot_pass);
    let mut scale = estimate_scale(data, cfg, &pilot_resid)?;
    let mut state = assemble_qif_state(data, &beta, &theta, cfg, bandwidth, &scale)?;
    let mut trace: Vec<IterationRecord<F>> = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.max_iterations {
        if iteration > 1 {
            // Refresh the frozen variance scale at the accepted iterate; the
            // smoother pass only needs rebuilding if the bandwidth moved.
            scale = estimate_scale(data, cfg, &state.resid)?;
            let mut rebuilt = false;
            if matches!(cfg.bandwidth, BandwidthPolicy::CvEachIteration) {
                let fresh = smooth::resolve_bandwidth(
                    data,
                    beta.beta(),
                    &theta.0,
                    &cfg.bandwidth,
                    cfg.cv_grid.as_deref(),
                )?;
                if fresh != bandwidth {
                    bandwidth = fresh;
                    state = assemble_qif_state(data, &beta, &theta, cfg, bandwidth, &scale)?;
                    rebuilt = true;
                }
            }
            if !rebuilt {
                state.value =
                    value_from_parts(data, &state.lambda, &state.resid, &scale, cfg.working)?;
            }
        }
        let l = state.value.u_bar.len();
        let xi = gee::stack_params(&beta, &theta);
        let active = gee::active_indices(penalty.as_deref(), d);
        let jac =
            mean_score_jacobian(data, &beta, &theta, cfg, bandwidth, &scale, l, &active)?;
        // (2 J' C^{-1} J + E) delta = -(2 J' C^{-1} Ubar + E xi), the normal
        // equations of the penalized quadratic form; both solves share the
        // ridged Cholesky policy on C.
        let c_inv_j = solve_against_c(&state.value, &jac)?;
        let mut sys = linalg::symmetrize(&(jac.transpose() * &c_inv_j)) * F::cast(2.0);
        let mut rhs = (jac.transpose() * &state.value.c_inv_u) * F::cast(2.0);
        if let Some(pen) = penalty.as_deref() {
            let e = pen.e_diag(&xi);
            let pg = pen.pseudo_gradient(&xi);
            for (k, &j) in active.iter().enumerate() {
                sys[(k, k)] += e[j];
                rhs[k] += pg[j];
            }
        }
        let delta_active = -linalg::solve_spd(&sys, &rhs)?;
        let delta = linalg::scatter_vector(&delta_active, &active, d);
        let f_cur = penalized_objective(state.value.q_n, &xi, penalty.as_deref());

        let mut gamma = cfg.damping;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let step = &delta * gamma;
            let cand_reduced = beta.reduced() + step.rows(0, reduced_len);
            if cand_reduced.norm_squared() >= F::one() {
                gamma *= F::cast(0.5);
                continue;
            }
            let cand_beta = IndexParam::from_reduced(cand_reduced, beta.anchor())?;
            let cand_theta = ThetaParam(&theta.0 + step.rows(reduced_len, theta.q()));
            let cand_state =
                assemble_qif_state(data, &cand_beta, &cand_theta, cfg, bandwidth, &scale)?;
            let cand_xi = gee::stack_params(&cand_beta, &cand_theta);
            let f_cand = penalized_objective(cand_state.value.q_n, &cand_xi, penalty.as_deref());
            if f_cand > f_cur {
                gamma *= F::cast(0.5);
                continue;
            }
            accepted = Some((cand_beta, cand_theta, cand_state, step.norm(), f_cand));
            break;
        }
        let Some((cand_beta, cand_theta, cand_state, step_norm, f_accepted)) = accepted else {
            log::warn!(
                "line search exhausted at iteration {iteration}; reporting non-convergence"
            );
            return finish_qif(data, beta, theta, state, scale, trace, false, bandwidth, cfg);
        };
        let f_drop = f_cur - f_accepted;
        beta = cand_beta;
        theta = cand_theta;
        state = cand_state;
        trace.push(IterationRecord {
            iteration,
            step_norm,
            score_norm: state.value.u_bar.norm(),
            bandwidth,
            rho: scale.rho_hint,
        });
        let mut froze = false;
        if let Some(pen) = penalty.as_deref_mut() {
            if let Some((next_beta, next_theta)) = pen.freeze_small(&beta, &theta)? {
                beta = next_beta;
                theta = next_theta;
                state = assemble_qif_state(data, &beta, &theta, cfg, bandwidth, &scale)?;
                froze = true;
            }
        }
        if !froze && (step_norm < cfg.tolerance || f_drop.abs() < cfg.tolerance * cfg.tolerance)
        {
            converged = true;
            break;
        }
    }
    finish_qif(data, beta, theta, state, scale, trace, converged, bandwidth, cfg)
}

/// Solves `C X = B` with the same ridged Cholesky policy as the objective.
fn solve_against_c<F: Scalar>(value: &QifValue<F>, b: &DMatrix<F>) -> Result<DMatrix<F>> {
    let l = value.c_n.nrows();
    let eigen = linalg::symmetric_eigenvalues(&value.c_n);
    let (min_ev, max_ev) = (eigen[0], eigen[l - 1]);
    let needs_ridge = min_ev <= F::zero() || max_ev > F::cast(CONDITION_LIMIT) * min_ev;
    let c_solve = if needs_ridge {
        let ridge = F::cast(C_RIDGE) * value.c_n.trace() / F::from_count(l);
        let mut ridged = value.c_n.clone();
        for j in 0..l {
            ridged[(j, j)] += ridge;
        }
        ridged
    } else {
        value.c_n.clone()
    };
    let chol = c_solve.cholesky().ok_or(Error::SingularWeighting {
        min_eigenvalue: min_ev.as_f64(),
    })?;
    Ok(chol.solve(b))
}

/// Model-based covariance `(Gamma' Sigma^{-1} Gamma)^{-1} / n` of the reduced
/// estimate, with `Gamma = n^{-1} sum_i [Lambda_i D M_s D Lambda_i']_s` and
/// `Sigma = C_n`; also returns its full-parameter image.
///
/// Fails when `Gamma` has column rank below the parameter dimension.
pub fn covariance_qif<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    lambda: &[DMatrix<F>],
    a_inv_sqrt: &[F],
    kind: CorrelationKind,
    value: &QifValue<F>,
) -> Result<(DMatrix<F>, DMatrix<F>)> {
    let d = lambda.first().map_or(0, |l| l.nrows());
    let l = value.u_bar.len();
    let n = data.n_subjects();
    let mut gamma = DMatrix::<F>::zeros(l, d);
    for (i, subject) in data.subjects().iter().enumerate() {
        let m = subject.len();
        let basis = basis_matrices(kind, m)?;
        // Columns of Lambda_i scaled by D on the observation axis.
        for (s, ms) in basis.iter().enumerate() {
            // block = Lambda D M_s D Lambda'.
            let mut scaled = lambda[i].clone();
            scaled *= a_inv_sqrt[i];
            let block = &scaled * ms * scaled.transpose();
            let mut view = gamma.view_mut((s * d, 0), (d, d));
            view += block;
        }
    }
    gamma /= F::from_count(n);
    // Rank check via singular values against a scale-relative cutoff.
    let svd = gamma.clone().svd(false, false);
    let smax = svd
        .singular_values
        .iter()
        .fold(F::zero(), |acc, s| acc.max(*s));
    let cutoff = F::cast(1e-10) * smax.max(F::one());
    let rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
    if rank < d {
        return Err(Error::QifRankDeficient { rank, needed: d });
    }
    let sigma_inv_gamma = solve_against_c(value, &gamma)?;
    let info = linalg::symmetrize(&(gamma.transpose() * sigma_inv_gamma));
    let reduced = linalg::invert_spd(&info)? / F::from_count(n);
    let reduced = linalg::symmetrize(&reduced);
    let jac = beta.jacobian();
    let p = jac.nrows();
    let q = d - (p - 1);
    let mut embed = DMatrix::<F>::zeros(p + q, d);
    embed.view_mut((0, 0), (p, p - 1)).copy_from(&jac);
    embed.view_mut((p, p - 1), (q, q)).fill_with_identity();
    let full = linalg::symmetrize(&(&embed * &reduced * embed.transpose()));
    Ok((reduced, full))
}

#[allow(clippy::too_many_arguments)]
fn finish_qif<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: IndexParam<F>,
    theta: ThetaParam<F>,
    state: QifState<F>,
    scale: VarianceScale<F>,
    trace: Vec<IterationRecord<F>>,
    converged: bool,
    bandwidth: F,
    cfg: &QifConfig<F>,
) -> Result<FitResult<F>> {
    let (reduced_cov, _) = covariance_qif(
        data,
        &beta,
        &state.lambda,
        &scale.a_inv_sqrt,
        cfg.working,
        &state.value,
    )?;
    Ok(FitResult {
        g_grid: gee::g_grid_from_pass(&state.pass),
        iterations: trace.len(),
        score_norm: state.value.u_bar.norm(),
        rho: scale.rho_hint,
        sandwich_cov: reduced_cov,
        beta,
        theta,
        trace,
        converged,
        bandwidth,
    })
}

//! Bias-corrected estimating-equation solver with a working correlation.
//!
//! The mean is `g(x'beta) + z'theta` with `g` unknown; each outer iteration
//! re-fits `g` and its slope by local linear smoothing at the current
//! parameters, re-estimates the working covariance from residuals, and takes
//! a damped Fisher-scoring step on the reduced parameter
//! `xi = (beta^(r), theta)`.

use nalgebra::{DMatrix, DVector};

use crate::corr::{CorrelationKind, VariancePooling, WorkingCovariance};
use crate::error::{Error, Result};
use crate::model::{
    FitResult, GridPoint, IndexParam, IterationRecord, LongitudinalDataset, ThetaParam,
};
use crate::scalar::Scalar;
use crate::select::PenaltyState;
use crate::smooth::{BandwidthPolicy, BoundaryPolicy, KernelConfig, SmootherPass};
use crate::{linalg, smooth};

/// Candidate steps whose score norm exceeds this multiple of the current
/// score norm are rejected and the step is halved.  The margin above 1
/// allows for the score being re-evaluated with a refreshed curve and
/// covariance at the candidate; anything larger lets full Newton steps
/// ping-pong between two states indefinitely.
const SCORE_GROWTH_LIMIT: f64 = 1.2;

/// Configuration for [`solve_gee`].
#[derive(Debug, Clone)]
pub struct GeeConfig<F: Scalar> {
    /// Working correlation structure for the cluster covariance.
    pub working: CorrelationKind,
    /// Marginal variance pooling; `None` uses the pooled default.
    pub pooling: Option<VariancePooling>,
    /// How the smoothing bandwidth is chosen.
    pub bandwidth: BandwidthPolicy<F>,
    /// Cross-validation grid; `None` uses the rule-of-thumb grid.
    pub cv_grid: Option<Vec<F>>,
    /// Ridge added to the local-linear denominator (0 disables).
    pub kernel_ridge: F,
    /// Maximum outer Fisher-scoring iterations.
    pub max_iterations: usize,
    /// Convergence threshold on the step norm.
    pub tolerance: F,
    /// Initial step length multiplier in (0, 1].
    pub damping: F,
    /// Maximum number of step halvings before giving up on an iteration.
    pub max_halvings: usize,
}

impl<F: Scalar> Default for GeeConfig<F> {
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

impl<F: Scalar> GeeConfig<F> {
    /// Same solver settings with a different working correlation.
    pub fn with_working(mut self, working: CorrelationKind) -> Self {
        self.working = working;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tolerance > F::zero()) {
            return Err(Error::InvalidConfig(
                "tolerance must be positive".to_string(),
            ));
        }
        if !(self.damping > F::zero() && self.damping <= F::one()) {
            return Err(Error::InvalidConfig(
                "damping must lie in (0, 1]".to_string(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".to_string(),
            ));
        }
        if self.kernel_ridge < F::zero() {
            return Err(Error::InvalidConfig(
                "kernel_ridge must be nonnegative".to_string(),
            ));
        }
        Ok(())
    }

    pub(crate) fn kernel(&self, bandwidth: F) -> KernelConfig<F> {
        KernelConfig {
            bandwidth,
            ridge: self.kernel_ridge,
            boundary: BoundaryPolicy::LocalConstant,
        }
    }

    pub(crate) fn pooling_for(&self, data: &LongitudinalDataset<F>) -> VariancePooling {
        self.pooling
            .unwrap_or_else(|| VariancePooling::default_for(data))
    }
}

/// Initial values from a pooled least-squares fit of `y` on `(1, x, z)`.
///
/// The index part is normalized to unit length with a positive anchor
/// coordinate; the intercept is discarded. Fails if the coefficients on `x`
/// are all zero (no anchor can be chosen) or the design is rank deficient.
pub fn initial_estimate<F: Scalar>(
    data: &LongitudinalDataset<F>,
) -> Result<(IndexParam<F>, ThetaParam<F>)> {
    let p = data.p();
    let q = data.q();
    let total = data.total_obs();
    let mut design = DMatrix::<F>::zeros(total, 1 + p + q);
    let mut response = DVector::<F>::zeros(total);
    let mut row = 0;
    for subject in data.subjects() {
        for j in 0..subject.len() {
            design[(row, 0)] = F::one();
            for k in 0..p {
                design[(row, 1 + k)] = subject.x[(j, k)];
            }
            for k in 0..q {
                design[(row, 1 + p + k)] = subject.z[(j, k)];
            }
            response[row] = subject.y[j];
            row += 1;
        }
    }
    let coef = match linalg::least_squares(&design, &response, "pooled x and z design") {
        Ok(c) => c,
        Err(_) => {
            // Name the offending block when one of them is singular on its own.
            let x_cols = design.columns(0, 1 + p).into_owned();
            if linalg::least_squares(&x_cols, &response, "x").is_err() {
                return Err(Error::RankDeficientInit {
                    block: "x columns (with intercept)".to_string(),
                });
            }
            let mut z_cols = DMatrix::<F>::zeros(total, 1 + q);
            z_cols.column_mut(0).fill(F::one());
            z_cols
                .columns_mut(1, q)
                .copy_from(&design.columns(1 + p, q));
            if linalg::least_squares(&z_cols, &response, "z").is_err() {
                return Err(Error::RankDeficientInit {
                    block: "z columns (with intercept)".to_string(),
                });
            }
            return Err(Error::RankDeficientInit {
                block: "combined x and z design".to_string(),
            });
        }
    };
    let beta_raw = coef.rows(1, p).into_owned();
    // Coefficients that are pure rounding residue (e.g. a constant response)
    // carry no direction to normalize; treat them as exactly zero.
    if beta_raw.norm() <= F::cast(1e-10) * coef.norm().max(F::one()) {
        return Err(Error::ZeroAnchor);
    }
    let (anchor, unit) = crate::model::choose_anchor(&beta_raw)?;
    let beta = IndexParam::from_full(unit, anchor)?;
    let theta = ThetaParam(coef.rows(1 + p, q).into_owned());
    Ok((beta, theta))
}

/// Residuals `y_ij - ghat(u_ij) - z_ij' theta` per subject.
pub(crate) fn residuals<F: Scalar>(
    data: &LongitudinalDataset<F>,
    theta: &ThetaParam<F>,
    pass: &SmootherPass<F>,
) -> Vec<DVector<F>> {
    data.subjects()
        .iter()
        .enumerate()
        .map(|(i, subject)| {
            DVector::from_fn(subject.len(), |j, _| {
                subject.y[j] - pass.eval(i, j).g_hat - subject.z.row(j).transpose().dot(&theta.0)
            })
        })
        .collect()
}

/// Per-subject bias-corrected derivative matrices.
///
/// Column `j` of the result for subject `i` is
/// `[J' (x_ij - ghat1(u_ij)) * ghat'(u_ij) ; z_ij - ghat2(u_ij)]`
/// where `J` is the embedding Jacobian at `beta`. Centering by the smoothed
/// conditional means removes the bias the plug-in curve estimate would
/// otherwise leak into the parametric score.
pub fn build_lambda_hat<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    pass: &SmootherPass<F>,
) -> Vec<DMatrix<F>> {
    let jac = beta.jacobian();
    let p = data.p();
    let q = data.q();
    let d = p - 1 + q;
    data.subjects()
        .iter()
        .enumerate()
        .map(|(i, subject)| {
            let mut lambda = DMatrix::<F>::zeros(d, subject.len());
            for j in 0..subject.len() {
                let eval = pass.eval(i, j);
                let x_centered = subject.x.row(j).transpose() - &eval.g1_hat;
                let top = jac.transpose() * x_centered * eval.g_prime_hat;
                let bottom = subject.z.row(j).transpose() - &eval.g2_hat;
                lambda
                    .view_mut((0, 0), (p - 1, subject.len()))
                    .column_mut(j)
                    .copy_from(&top);
                lambda
                    .view_mut((p - 1, 0), (q, subject.len()))
                    .column_mut(j)
                    .copy_from(&bottom);
            }
            lambda
        })
        .collect()
}

/// Estimating-function value `sum_i Lambda_i V_i^{-1} r_i`.
pub fn gee_score<F: Scalar>(
    lambda: &[DMatrix<F>],
    v_inv: &[DMatrix<F>],
    resid: &[DVector<F>],
) -> DVector<F> {
    let d = lambda.first().map_or(0, |l| l.nrows());
    let mut score = DVector::<F>::zeros(d);
    for ((l, vi), r) in lambda.iter().zip(v_inv).zip(resid) {
        score += l * (vi * r);
    }
    score
}

/// Fisher information proxy `sum_i Lambda_i V_i^{-1} Lambda_i'`.
pub fn gee_information<F: Scalar>(lambda: &[DMatrix<F>], v_inv: &[DMatrix<F>]) -> DMatrix<F> {
    let d = lambda.first().map_or(0, |l| l.nrows());
    let mut info = DMatrix::<F>::zeros(d, d);
    for (l, vi) in lambda.iter().zip(v_inv) {
        info += l * vi * l.transpose();
    }
    linalg::symmetrize(&info)
}

/// Everything the solver needs at one parameter value: the smoother pass,
/// residuals, working covariance, and the score assembled from them.
pub(crate) struct GeeState<F: Scalar> {
    pub pass: SmootherPass<F>,
    pub resid: Vec<DVector<F>>,
    pub cov: WorkingCovariance<F>,
    pub v_inv: Vec<DMatrix<F>>,
    pub lambda: Vec<DMatrix<F>>,
    pub score: DVector<F>,
}

pub(crate) fn assemble_state<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    cfg: &GeeConfig<F>,
    bandwidth: F,
) -> Result<GeeState<F>> {
    let pass = SmootherPass::build(data, beta.beta(), &theta.0, &cfg.kernel(bandwidth))?;
    let resid = residuals(data, theta, &pass);
    let cov = WorkingCovariance::estimate(&resid, cfg.working, cfg.pooling_for(data))?;
    let v_inv = cov.v_inverses(data)?;
    let lambda = build_lambda_hat(data, beta, &pass);
    let score = gee_score(&lambda, &v_inv, &resid);
    Ok(GeeState {
        pass,
        resid,
        cov,
        v_inv,
        lambda,
        score,
    })
}

/// Curve estimates at every observed index value, sorted and deduplicated.
pub(crate) fn g_grid_from_pass<F: Scalar>(pass: &SmootherPass<F>) -> Vec<GridPoint<F>> {
    let mut points: Vec<GridPoint<F>> = pass
        .evals()
        .iter()
        .map(|e| GridPoint {
            t: e.t,
            g: e.g_hat,
            g_prime: e.g_prime_hat,
        })
        .collect();
    points.sort_by(|a, b| a.t.partial_cmp(&b.t).expect("index values are finite"));
    points.dedup_by(|a, b| a.t == b.t);
    points
}

/// Sandwich covariance of the reduced estimate and its full-parameter image.
///
/// Returns `(reduced, full)` where `reduced` has side `p - 1 + q` and `full`
/// has side `p + q` (obtained by mapping through the embedding Jacobian, so
/// the anchor row reflects the norm constraint rather than free variation).
pub fn sandwich_covariance_gee<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: &IndexParam<F>,
    theta: &ThetaParam<F>,
    pass: &SmootherPass<F>,
    cov: &WorkingCovariance<F>,
) -> Result<(DMatrix<F>, DMatrix<F>)> {
    let resid = residuals(data, theta, pass);
    let v_inv = cov.v_inverses(data)?;
    let lambda = build_lambda_hat(data, beta, pass);
    sandwich_from_parts(beta, data.q(), &lambda, &v_inv, &resid)
}

pub(crate) fn sandwich_from_parts<F: Scalar>(
    beta: &IndexParam<F>,
    q: usize,
    lambda: &[DMatrix<F>],
    v_inv: &[DMatrix<F>],
    resid: &[DVector<F>],
) -> Result<(DMatrix<F>, DMatrix<F>)> {
    let d = lambda.first().map_or(0, |l| l.nrows());
    let mut bread = DMatrix::<F>::zeros(d, d);
    let mut meat = DMatrix::<F>::zeros(d, d);
    for ((l, vi), r) in lambda.iter().zip(v_inv).zip(resid) {
        bread += l * vi * l.transpose();
        let u = l * (vi * r);
        meat += &u * u.transpose();
    }
    let bread_inv = linalg::invert_spd(&linalg::symmetrize(&bread))?;
    let reduced = linalg::symmetrize(&(&bread_inv * meat * &bread_inv));
    let jac = beta.jacobian();
    let p = jac.nrows();
    let mut embed = DMatrix::<F>::zeros(p + q, d);
    embed.view_mut((0, 0), (p, p - 1)).copy_from(&jac);
    embed
        .view_mut((p, p - 1), (q, q))
        .fill_with_identity();
    let full = linalg::symmetrize(&(&embed * &reduced * embed.transpose()));
    Ok((reduced, full))
}

/// Fits the model by damped Fisher scoring on the bias-corrected score.
///
/// Each candidate step is evaluated with a fresh smoother pass and working
/// covariance at the candidate parameters; steps that leave the unit ball in
/// the reduced index or blow up the score norm are halved. Exhausting the
/// halvings returns the current estimate with `converged: false` rather than
/// an error.
pub fn solve_gee<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &GeeConfig<F>,
) -> Result<FitResult<F>> {
    cfg.validate()?;
    if data.p() < 2 {
        return Err(Error::InvalidConfig(
            "the single-index part needs at least two x columns".to_string(),
        ));
    }
    let (beta0, theta0) = initial_estimate(data)?;
    solve_gee_from(data, cfg, beta0, theta0)
}

/// [`solve_gee`] starting from the given parameter values.
pub fn solve_gee_from<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &GeeConfig<F>,
    beta0: IndexParam<F>,
    theta0: ThetaParam<F>,
) -> Result<FitResult<F>> {
    gee_engine(data, cfg, beta0, theta0, None)
}

/// `(beta_reduced, theta)` stacked into one vector.
pub(crate) fn stack_params<F: Scalar>(beta: &IndexParam<F>, theta: &ThetaParam<F>) -> DVector<F> {
    let r = beta.reduced().len();
    let mut xi = DVector::zeros(r + theta.q());
    xi.rows_mut(0, r).copy_from(beta.reduced());
    xi.rows_mut(r, theta.q()).copy_from(&theta.0);
    xi
}

/// Coordinates still free to move: all of them without a penalty, the
/// unfrozen ones with.
pub(crate) fn active_indices<F: Scalar>(
    penalty: Option<&PenaltyState<F>>,
    d: usize,
) -> Vec<usize> {
    match penalty {
        None => (0..d).collect(),
        Some(pen) => pen.active_indices(),
    }
}

/// Fisher system with the quadratic penalty approximation folded in and
/// frozen coordinates eliminated: `(Pi + n E) delta = score - n E xi`
/// restricted to the active set. Without a penalty this is the plain system.
fn build_penalized_system<F: Scalar>(
    info: &DMatrix<F>,
    score: &DVector<F>,
    xi: &DVector<F>,
    n_f: F,
    penalty: Option<&PenaltyState<F>>,
    active: &[usize],
) -> (DMatrix<F>, DVector<F>) {
    match penalty {
        None => (info.clone(), score.clone()),
        Some(pen) => {
            let e = pen.e_diag(xi);
            let mut sys = info.clone();
            for j in 0..xi.len() {
                sys[(j, j)] += n_f * e[j];
            }
            let rhs = score - e.component_mul(xi) * n_f;
            (
                linalg::restrict_matrix(&sys, active),
                linalg::restrict_vector(&rhs, active),
            )
        }
    }
}

/// Norm of the estimating function net of the penalty gradient over the
/// active coordinates; the plain score norm without a penalty.
fn penalized_score_norm<F: Scalar>(
    score: &DVector<F>,
    xi: &DVector<F>,
    n_f: F,
    penalty: Option<&PenaltyState<F>>,
    active: &[usize],
) -> F {
    match penalty {
        None => score.norm(),
        Some(pen) => {
            let g = score - pen.pseudo_gradient(xi) * n_f;
            active
                .iter()
                .map(|&j| g[j] * g[j])
                .sum::<F>()
                .sqrt()
        }
    }
}

/// The Fisher-scoring loop behind both the unpenalized and the penalized
/// fit. With a penalty the update gains a quadratic local approximation of
/// the penalty, coordinates whose estimate falls below the hard-zero
/// threshold are frozen at zero for the rest of the solve, and the damping
/// criterion uses the penalized score.
pub(crate) fn gee_engine<F: Scalar>(
    data: &LongitudinalDataset<F>,
    cfg: &GeeConfig<F>,
    beta0: IndexParam<F>,
    theta0: ThetaParam<F>,
    mut penalty: Option<&mut PenaltyState<F>>,
) -> Result<FitResult<F>> {
    cfg.validate()?;
    let n_f = F::from_count(data.n_subjects());
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
    let mut state = assemble_state(data, &beta, &theta, cfg, bandwidth)?;
    let mut trace: Vec<IterationRecord<F>> = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.max_iterations {
        if iteration > 1 && matches!(cfg.bandwidth, BandwidthPolicy::CvEachIteration) {
            let fresh = smooth::resolve_bandwidth(
                data,
                beta.beta(),
                &theta.0,
                &cfg.bandwidth,
                cfg.cv_grid.as_deref(),
            )?;
            if fresh != bandwidth {
                bandwidth = fresh;
                state = assemble_state(data, &beta, &theta, cfg, bandwidth)?;
            }
        }
        let info = gee_information(&state.lambda, &state.v_inv);
        let xi = stack_params(&beta, &theta);
        let active = active_indices(penalty.as_deref(), d);
        let (sys, rhs) =
            build_penalized_system(&info, &state.score, &xi, n_f, penalty.as_deref(), &active);
        let delta_active = linalg::solve_spd(&sys, &rhs)?;
        let delta = linalg::scatter_vector(&delta_active, &active, d);
        let g_cur = penalized_score_norm(&state.score, &xi, n_f, penalty.as_deref(), &active);

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
            let cand_state = assemble_state(data, &cand_beta, &cand_theta, cfg, bandwidth)?;
            let cand_xi = stack_params(&cand_beta, &cand_theta);
            let g_cand =
                penalized_score_norm(&cand_state.score, &cand_xi, n_f, penalty.as_deref(), &active);
            if g_cand > F::cast(SCORE_GROWTH_LIMIT) * g_cur {
                gamma *= F::cast(0.5);
                continue;
            }
            accepted = Some((cand_beta, cand_theta, cand_state, step.norm(), g_cand));
            break;
        }
        let Some((cand_beta, cand_theta, cand_state, step_norm, g_norm)) = accepted else {
            log::warn!(
                "step halvings exhausted at iteration {iteration}; reporting non-convergence"
            );
            return finish(data, beta, theta, state, trace, false, bandwidth, penalty.as_deref());
        };
        beta = cand_beta;
        theta = cand_theta;
        state = cand_state;
        trace.push(IterationRecord {
            iteration,
            step_norm,
            score_norm: g_norm,
            bandwidth,
            rho: state.cov.rho,
        });
        let mut froze = false;
        if let Some(pen) = penalty.as_deref_mut() {
            if let Some((next_beta, next_theta)) = pen.freeze_small(&beta, &theta)? {
                beta = next_beta;
                theta = next_theta;
                state = assemble_state(data, &beta, &theta, cfg, bandwidth)?;
                froze = true;
            }
        }
        if !froze && step_norm < cfg.tolerance {
            converged = true;
            break;
        }
    }
    finish(data, beta, theta, state, trace, converged, bandwidth, penalty.as_deref())
}

#[allow(clippy::too_many_arguments)]
fn finish<F: Scalar>(
    data: &LongitudinalDataset<F>,
    beta: IndexParam<F>,
    theta: ThetaParam<F>,
    state: GeeState<F>,
    trace: Vec<IterationRecord<F>>,
    converged: bool,
    bandwidth: F,
    penalty: Option<&PenaltyState<F>>,
) -> Result<FitResult<F>> {
    let (sandwich_cov, _) =
        sandwich_from_parts(&beta, data.q(), &state.lambda, &state.v_inv, &state.resid)?;
    let xi = stack_params(&beta, &theta);
    let active = active_indices(penalty, xi.len());
    let n_f = F::from_count(data.n_subjects());
    let score_norm = penalized_score_norm(&state.score, &xi, n_f, penalty, &active);
    Ok(FitResult {
        g_grid: g_grid_from_pass(&state.pass),
        iterations: trace.len(),
        score_norm,
        rho: state.cov.rho,
        sandwich_cov,
        beta,
        theta,
        trace,
        converged,
        bandwidth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Subject;
    use crate::smooth::SmootherEval;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        p: usize,
        q: usize,
        noise: f64,
        mean: impl Fn(&DVector<f64>, &DVector<f64>) -> f64,
    ) -> LongitudinalDataset<f64> {
        let subjects = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, p, |_, _| rng.random::<f64>() * 2.0 - 1.0);
                let z = DMatrix::from_fn(m, q, |_, _| rng.random::<f64>());
                let y = DVector::from_fn(m, |j, _| {
                    mean(&x.row(j).transpose(), &z.row(j).transpose())
                        + noise * (rng.random::<f64>() - 0.5)
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

    #[test]
    fn initial_estimate_recovers_noiseless_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta_true = DVector::from_vec(vec![3.0, 2.0, 1.0]).normalize();
        let theta_true = DVector::from_vec(vec![0.5, -0.25]);
        let data = random_dataset(&mut rng, 25, 3, 3, 2, 0.0, |x, z| {
            2.0 * beta_true.dot(x) + theta_true.dot(z) + 0.7
        });
        let (beta, theta) = initial_estimate(&data).unwrap();
        // The index direction is identified only up to scale; normalization
        // recovers the unit vector exactly.
        for k in 0..3 {
            assert_abs_diff_eq!(beta.beta()[k], beta_true[k], epsilon = 1e-8);
        }
        assert_abs_diff_eq!(theta.0[0], 0.5, epsilon = 1e-8);
        assert_abs_diff_eq!(theta.0[1], -0.25, epsilon = 1e-8);
    }

    #[test]
    fn initial_estimate_flips_sign_for_negative_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data = random_dataset(&mut rng, 20, 3, 2, 1, 0.0, |x, z| {
            -3.0 * x[0] - 1.0 * x[1] + z[0]
        });
        let (beta, _) = initial_estimate(&data).unwrap();
        assert_eq!(beta.anchor(), 0);
        assert!(beta.beta()[0] > 0.0);
    }

    #[test]
    fn initial_estimate_rejects_constant_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = random_dataset(&mut rng, 10, 3, 2, 1, 0.0, |_, _| 4.0);
        match initial_estimate(&data) {
            Err(Error::ZeroAnchor) => {}
            other => panic!("expected ZeroAnchor, got {other:?}"),
        }
    }

    #[test]
    fn initial_estimate_names_rank_deficient_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        // Second x column duplicates the first: the x block is singular.
        let subjects: Vec<Subject<f64>> = (0..10)
            .map(|i| {
                let col = DVector::from_fn(3, |_, _| rng.random::<f64>());
                let x = DMatrix::from_columns(&[col.clone(), col]);
                let z = DMatrix::from_fn(3, 1, |_, _| rng.random::<f64>());
                let y = DVector::from_fn(3, |j, _| x[(j, 0)] + z[(j, 0)]);
                Subject {
                    id: format!("s{i}"),
                    y,
                    x,
                    z,
                }
            })
            .collect();
        let data = LongitudinalDataset::new(subjects).unwrap();
        match initial_estimate(&data) {
            Err(Error::RankDeficientInit { block }) => {
                assert!(block.contains('x'), "block was {block:?}")
            }
            other => panic!("expected RankDeficientInit, got {other:?}"),
        }
    }

    /// Builds a pass whose evaluations are supplied directly, bypassing the
    /// smoother, so that downstream algebra can be checked by hand.
    fn synthetic_pass(data: &LongitudinalDataset<f64>, evals: Vec<SmootherEval<f64>>) -> SmootherPass<f64> {
        SmootherPass::from_evals(data, evals)
    }

    #[test]
    fn lambda_hat_matches_hand_computation() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let z = DMatrix::from_row_slice(2, 1, &[0.5, -0.5]);
        let y = DVector::from_vec(vec![0.0, 0.0]);
        let data = LongitudinalDataset::new(vec![
            Subject {
                id: "a".to_string(),
                y: y.clone(),
                x: x.clone(),
                z: z.clone(),
            },
            Subject {
                id: "b".to_string(),
                y,
                x,
                z,
            },
        ])
        .unwrap();
        // beta = (0.8, 0.6) with anchor 0 => reduced = (0.6) at slot from_full.
        let beta = IndexParam::from_full(DVector::from_vec(vec![0.8, 0.6]), 0).unwrap();
        let jac = beta.jacobian();
        // Fabricated smoother output with distinct, easy numbers.
        let evals: Vec<SmootherEval<f64>> = (0..4)
            .map(|k| SmootherEval {
                t: k as f64,
                g_hat: 0.0,
                g_prime_hat: 2.0,
                g1_hat: DVector::from_vec(vec![1.0, 1.0]),
                g2_hat: DVector::from_vec(vec![0.25]),
                effective_mass: 1.0,
            })
            .collect();
        let pass = synthetic_pass(&data, evals);
        let lambda = build_lambda_hat(&data, &beta, &pass);
        assert_eq!(lambda.len(), 2);
        assert_eq!(lambda[0].shape(), (2, 2));
        // Row 0 (index part), obs 0: J' * ((1,2) - (1,1)) * 2.
        let expected0 = jac.transpose() * DVector::from_vec(vec![0.0, 1.0]) * 2.0;
        assert_abs_diff_eq!(lambda[0][(0, 0)], expected0[0], epsilon = 1e-12);
        // Row 1 (z part), obs 0: 0.5 - 0.25.
        assert_abs_diff_eq!(lambda[0][(1, 0)], 0.25, epsilon = 1e-12);
        // Obs 1: J' * ((3,4) - (1,1)) * 2 and -0.5 - 0.25.
        let expected1 = jac.transpose() * DVector::from_vec(vec![2.0, 3.0]) * 2.0;
        assert_abs_diff_eq!(lambda[0][(0, 1)], expected1[0], epsilon = 1e-12);
        assert_abs_diff_eq!(lambda[0][(1, 1)], -0.75, epsilon = 1e-12);
    }

    #[test]
    fn lambda_hat_vanishes_when_covariates_equal_their_smoothed_means() {
        let x = DMatrix::from_row_slice(2, 2, &[1.5, -0.5, 1.5, -0.5]);
        let z = DMatrix::from_row_slice(2, 1, &[0.25, 0.25]);
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let data = LongitudinalDataset::new(vec![
            Subject {
                id: "a".into(),
                y: y.clone(),
                x: x.clone(),
                z: z.clone(),
            },
            Subject {
                id: "b".into(),
                y,
                x,
                z,
            },
        ])
        .unwrap();
        let beta = IndexParam::from_full(DVector::from_vec(vec![1.0, 0.0]), 0).unwrap();
        let evals: Vec<SmootherEval<f64>> = (0..4)
            .map(|k| SmootherEval {
                t: k as f64,
                g_hat: 0.0,
                g_prime_hat: 3.0,
                g1_hat: DVector::from_vec(vec![1.5, -0.5]),
                g2_hat: DVector::from_vec(vec![0.25]),
                effective_mass: 1.0,
            })
            .collect();
        let pass = synthetic_pass(&data, evals);
        for l in build_lambda_hat(&data, &beta, &pass) {
            assert_abs_diff_eq!(l.norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_slope_zeroes_only_the_index_block() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let z = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let y = DVector::from_vec(vec![0.0, 0.0]);
        let data = LongitudinalDataset::new(vec![
            Subject {
                id: "a".into(),
                y: y.clone(),
                x: x.clone(),
                z: z.clone(),
            },
            Subject {
                id: "b".into(),
                y,
                x,
                z,
            },
        ])
        .unwrap();
        let beta = IndexParam::from_full(DVector::from_vec(vec![0.6, 0.8]), 1).unwrap();
        let evals: Vec<SmootherEval<f64>> = (0..4)
            .map(|k| SmootherEval {
                t: k as f64,
                g_hat: 0.0,
                g_prime_hat: 0.0,
                g1_hat: DVector::zeros(2),
                g2_hat: DVector::zeros(1),
                effective_mass: 1.0,
            })
            .collect();
        let pass = synthetic_pass(&data, evals);
        let lambda = build_lambda_hat(&data, &beta, &pass);
        for l in &lambda {
            // Index row is identically zero, z row keeps the raw covariate.
            assert_abs_diff_eq!(l.row(0).norm(), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-14);
            assert_abs_diff_eq!(l[(1, 1)], 2.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn score_is_zero_at_exact_residual_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = random_dataset(&mut rng, 6, 3, 2, 1, 0.0, |x, z| x[0] + z[0]);
        let theta = ThetaParam(DVector::from_vec(vec![1.0]));
        // Fabricate a pass with ghat equal to y - z'theta so residuals vanish.
        let mut evals = Vec::new();
        for subject in data.subjects() {
            for j in 0..subject.len() {
                evals.push(SmootherEval {
                    t: 0.0,
                    g_hat: subject.y[j] - subject.z[(j, 0)],
                    g_prime_hat: 1.0,
                    g1_hat: DVector::zeros(2),
                    g2_hat: DVector::zeros(1),
                    effective_mass: 1.0,
                });
            }
        }
        let pass = synthetic_pass(&data, evals);
        let beta = IndexParam::from_full(DVector::from_vec(vec![1.0, 0.0]), 0).unwrap();
        let lambda = build_lambda_hat(&data, &beta, &pass);
        let v_inv: Vec<DMatrix<f64>> = data
            .subjects()
            .iter()
            .map(|s| DMatrix::identity(s.len(), s.len()))
            .collect();
        let resid = residuals(&data, &theta, &pass);
        let score = gee_score(&lambda, &v_inv, &resid);
        assert_abs_diff_eq!(score.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_covariance_score_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data = random_dataset(&mut rng, 5, 3, 3, 2, 0.5, |x, z| x[0] + z[0]);
        let beta =
            IndexParam::from_full(DVector::from_vec(vec![2.0, 1.0, -1.0]).normalize(), 0).unwrap();
        let theta = ThetaParam(DVector::from_vec(vec![0.3, -0.1]));
        let cfg = KernelConfig::for_solver(0.8);
        let pass = SmootherPass::build(&data, beta.beta(), &theta.0, &cfg).unwrap();
        let lambda = build_lambda_hat(&data, &beta, &pass);
        let resid = residuals(&data, &theta, &pass);
        let v_inv: Vec<DMatrix<f64>> = data
            .subjects()
            .iter()
            .map(|s| DMatrix::identity(s.len(), s.len()))
            .collect();
        let score = gee_score(&lambda, &v_inv, &resid);
        // Direct per-observation summation: sum_ij lambda_ij * r_ij.
        let mut direct = DVector::<f64>::zeros(4);
        for (i, _) in data.subjects().iter().enumerate() {
            for j in 0..data.subjects()[i].len() {
                direct += lambda[i].column(j) * resid[i][j];
            }
        }
        assert_relative_eq!(score, direct, epsilon = 1e-12);
        let info = gee_information(&lambda, &v_inv);
        let mut info_direct = DMatrix::<f64>::zeros(4, 4);
        for (i, _) in data.subjects().iter().enumerate() {
            for j in 0..data.subjects()[i].len() {
                let c = lambda[i].column(j).into_owned();
                info_direct += &c * c.transpose();
            }
        }
        assert_relative_eq!(info, info_direct, epsilon = 1e-12);
    }

    #[test]
    fn solver_recovers_linear_link_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let beta_true = DVector::from_vec(vec![2.0, 1.0]).normalize();
        let theta_true = DVector::from_vec(vec![0.4]);
        let data = random_dataset(&mut rng, 30, 4, 2, 1, 0.0, |x, z| {
            1.5 * beta_true.dot(x) + theta_true.dot(z)
        });
        let cfg = GeeConfig {
            bandwidth: BandwidthPolicy::Fixed(0.6),
            ..GeeConfig::default()
        };
        let fit = solve_gee(&data, &cfg).unwrap();
        assert!(fit.converged, "trace: {}", fit.trace_text());
        for k in 0..2 {
            assert_abs_diff_eq!(fit.beta.beta()[k], beta_true[k], epsilon = 5e-3);
        }
        assert_abs_diff_eq!(fit.theta.0[0], 0.4, epsilon = 2e-2);
        // Verified score at the reported estimate is small per observation.
        assert!(fit.score_norm / data.total_obs() as f64 <= 1e-3);
    }

    #[test]
    fn sandwich_covariance_is_symmetric_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let data = random_dataset(&mut rng, 20, 3, 2, 1, 0.4, |x, z| {
            (x[0] * 0.8 + x[1] * 0.6).sin() + 0.3 * z[0]
        });
        let cfg = GeeConfig {
            working: CorrelationKind::Exchangeable,
            bandwidth: BandwidthPolicy::Fixed(0.5),
            ..GeeConfig::default()
        };
        let fit = solve_gee(&data, &cfg).unwrap();
        let reduced = &fit.sandwich_cov;
        assert_eq!(reduced.nrows(), 2);
        assert_relative_eq!(reduced, &reduced.transpose(), epsilon = 1e-12);
        for ev in linalg::symmetric_eigenvalues(reduced) {
            assert!(ev >= -1e-10, "eigenvalue {ev}");
        }
        // Full-parameter covariance via the public entry point.
        let pass = SmootherPass::build(
            &data,
            fit.beta.beta(),
            &fit.theta.0,
            &cfg.kernel(fit.bandwidth),
        )
        .unwrap();
        let resid = residuals(&data, &fit.theta, &pass);
        let cov =
            WorkingCovariance::estimate(&resid, cfg.working, cfg.pooling_for(&data)).unwrap();
        let (_, full) = sandwich_covariance_gee(&data, &fit.beta, &fit.theta, &pass, &cov).unwrap();
        assert_eq!(full.nrows(), 3);
        // The anchor direction carries no free variation beyond the norm
        // constraint: beta' Cov(beta) beta is (near) zero.
        let b = fit.beta.beta();
        let quad = (b.transpose() * full.view((0, 0), (2, 2)) * b)[(0, 0)];
        assert_abs_diff_eq!(quad, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn fixed_bandwidth_is_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let data = random_dataset(&mut rng, 6, 3, 2, 1, 0.1, |x, z| x[0] + z[0]);
        let cfg = GeeConfig {
            bandwidth: BandwidthPolicy::Fixed(-1.0),
            ..GeeConfig::default()
        };
        assert!(matches!(
            solve_gee(&data, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn single_index_column_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let data = random_dataset(&mut rng, 6, 3, 1, 1, 0.1, |x, z| x[0] + z[0]);
        match solve_gee(&data, &GeeConfig::default()) {
            Err(Error::InvalidConfig(message)) => assert!(message.contains("two x columns")),
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }
}

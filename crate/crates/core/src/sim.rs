//! Synthetic longitudinal designs, replicated estimation studies, and the
//! summary metrics their tables report.
//!
//! A design fixes the generating model `y = g(x' beta) + z' theta + e` with
//! clustered Gaussian errors; datasets are drawn from counter-derived RNG
//! substreams so every replicate is reproducible in isolation and results do
//! not depend on how the replication loop is scheduled.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::corr::{build_correlation, CorrelationKind};
use crate::error::{Error, Result};
use crate::gee::{self, GeeConfig};
use crate::model::{FitResult, IndexParam, LongitudinalDataset, Subject, ThetaParam};
use crate::qif::{self, QifConfig};
use crate::scalar::Scalar;
use crate::select::{tune_lambdas, EngineConfig, PenaltyConfig};
use crate::smooth::{KernelConfig, SmootherPass};

/// Replication failure budget: beyond this percentage the study aborts.
const FAILURE_LIMIT_PERCENT: u8 = 20;

/// Index link `g` in the generating model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Link {
    /// `g(t) = exp(t)`.
    #[default]
    Exp,
    /// `g(t) = t`.
    Identity,
}

impl Link {
    pub fn eval<F: Scalar>(self, t: F) -> F {
        match self {
            Link::Exp => t.exp(),
            Link::Identity => t,
        }
    }
}

/// Cluster-size schedule over subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterRule {
    /// Every subject observed the same number of times.
    Balanced(usize),
    /// Sizes assigned by thirds of the subject index (unbalanced design).
    Thirds([usize; 3]),
}

/// Error scale schedule over subjects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaRule<F: Scalar> {
    Constant(F),
    /// First half of the subjects uses the first scale.
    Halves(F, F),
    /// Thirds of the subject index, in order.
    Thirds(F, F, F),
}

/// Which third of `0..n` a subject index falls in.
fn third_band(subject: usize, n: usize) -> usize {
    if subject < n / 3 {
        0
    } else if subject < 2 * n / 3 {
        1
    } else {
        2
    }
}

/// A complete generating model for one simulation study.
#[derive(Debug, Clone)]
pub struct SimDesign<F: Scalar> {
    pub name: String,
    pub n_subjects: usize,
    pub clusters: ClusterRule,
    /// True index coefficient, unit norm.
    pub beta: DVector<F>,
    /// True linear coefficient.
    pub theta: DVector<F>,
    pub link: Link,
    /// Correlation structure of the generated errors.
    pub error_kind: CorrelationKind,
    pub rho: F,
    pub sigma: SigmaRule<F>,
    /// Master seed; replicate `r` draws from substream `r`.
    pub seed: u64,
}

impl<F: Scalar> SimDesign<F> {
    /// Balanced design: `p = 3`, `q = 1`, `m = 3`,
    /// `beta = (3, 2, 1) / sqrt(14)`, `theta = 0.3`, `g = exp`, error scale 1
    /// for the first half of the subjects and 2 for the rest, `rho = 0.6`.
    pub fn example1(n: usize, error_kind: CorrelationKind) -> Self {
        Self {
            name: "example1".to_string(),
            n_subjects: n,
            clusters: ClusterRule::Balanced(3),
            beta: DVector::from_vec(vec![F::cast(3.0), F::cast(2.0), F::cast(1.0)]).normalize(),
            theta: DVector::from_vec(vec![F::cast(0.3)]),
            link: Link::Exp,
            error_kind,
            rho: F::cast(0.6),
            sigma: SigmaRule::Halves(F::one(), F::cast(2.0)),
            seed: 101,
        }
    }

    /// Unbalanced variant of [`SimDesign::example1`]: cluster sizes 3/4/5 and
    /// error scales 1/2/3 over thirds of the subjects.
    pub fn example2(n: usize, error_kind: CorrelationKind) -> Self {
        Self {
            name: "example2".to_string(),
            clusters: ClusterRule::Thirds([3, 4, 5]),
            sigma: SigmaRule::Thirds(F::one(), F::cast(2.0), F::cast(3.0)),
            seed: 102,
            ..Self::example1(n, error_kind)
        }
    }

    /// Sparse high-dimensional design: `p = 20`, `q = 30`, `m = 3`,
    /// `beta = (3, 2, 1, 0, ...) / sqrt(14)`, `theta = (3, 1.5, 0, ...)`,
    /// exchangeable errors with scales 0.5/1/2 over thirds of the subjects.
    pub fn example3(n: usize) -> Self {
        let mut beta = DVector::<F>::zeros(20);
        beta[0] = F::cast(3.0);
        beta[1] = F::cast(2.0);
        beta[2] = F::one();
        let mut theta = DVector::<F>::zeros(30);
        theta[0] = F::cast(3.0);
        theta[1] = F::cast(1.5);
        Self {
            name: "example3".to_string(),
            n_subjects: n,
            clusters: ClusterRule::Balanced(3),
            beta: beta.normalize(),
            theta,
            link: Link::Exp,
            error_kind: CorrelationKind::Exchangeable,
            rho: F::cast(0.6),
            sigma: SigmaRule::Thirds(F::cast(0.5), F::one(), F::cast(2.0)),
            seed: 103,
        }
    }

    pub fn cluster_size(&self, subject: usize) -> usize {
        match self.clusters {
            ClusterRule::Balanced(m) => m,
            ClusterRule::Thirds(sizes) => sizes[third_band(subject, self.n_subjects)],
        }
    }

    pub fn sigma_for(&self, subject: usize) -> F {
        match self.sigma {
            SigmaRule::Constant(s) => s,
            SigmaRule::Halves(a, b) => {
                if subject < self.n_subjects / 2 {
                    a
                } else {
                    b
                }
            }
            SigmaRule::Thirds(a, b, c) => {
                [a, b, c][third_band(subject, self.n_subjects)]
            }
        }
    }

    fn sigma_values(&self) -> Vec<F> {
        match self.sigma {
            SigmaRule::Constant(s) => vec![s],
            SigmaRule::Halves(a, b) => vec![a, b],
            SigmaRule::Thirds(a, b, c) => vec![a, b, c],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::InvalidConfig(
                "a design needs at least two subjects".to_string(),
            ));
        }
        if self.beta.len() < 2 {
            return Err(Error::InvalidConfig(
                "the single-index part needs at least two x columns".to_string(),
            ));
        }
        if (self.beta.norm() - F::one()).abs() > F::cast(1e-8) {
            return Err(Error::InvalidConfig(format!(
                "the true index coefficient must have unit norm, got {}",
                self.beta.norm().as_f64()
            )));
        }
        // Zero scales are admitted deliberately: noiseless draws pin exact
        // reproduction tests.
        if self
            .sigma_values()
            .iter()
            .any(|s| !s.is_finite() || *s < F::zero())
        {
            return Err(Error::InvalidConfig(
                "error scales must be finite and nonnegative".to_string(),
            ));
        }
        for i in 0..self.n_subjects {
            if self.cluster_size(i) == 0 {
                return Err(Error::InvalidConfig(
                    "cluster sizes must be positive".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// `true` where the generating index coefficient is nonzero.
    pub fn beta_support(&self) -> Vec<bool> {
        self.beta.iter().map(|v| *v != F::zero()).collect()
    }

    /// `true` where the generating linear coefficient is nonzero.
    pub fn theta_support(&self) -> Vec<bool> {
        self.theta.iter().map(|v| *v != F::zero()).collect()
    }
}

/// Lower Cholesky factors of the error correlation, one per distinct cluster
/// size.
fn correlation_factors<F: Scalar>(design: &SimDesign<F>) -> Result<BTreeMap<usize, DMatrix<F>>> {
    let mut factors = BTreeMap::new();
    for i in 0..design.n_subjects {
        let m = design.cluster_size(i);
        if factors.contains_key(&m) {
            continue;
        }
        let r = build_correlation(design.error_kind, design.rho, m)?;
        let chol = Cholesky::new(r).ok_or(Error::CorrelationDomain {
            rho: design.rho.as_f64(),
            structure: design.error_kind.label().to_string(),
            m,
        })?;
        factors.insert(m, chol.l());
    }
    Ok(factors)
}

/// Draws one dataset from the design's substream `replicate`.
///
/// Per subject, in a fixed documented order: the index covariates row by row
/// (standard normal), the linear covariates row by row (uniform on `[0, 1)`),
/// then one standard normal vector that is correlated through the Cholesky
/// factor of the error correlation and scaled by the subject's sigma.
/// Identical `(seed, replicate)` pairs therefore yield identical datasets.
pub fn generate_dataset<F: Scalar>(
    design: &SimDesign<F>,
    replicate: u64,
) -> Result<LongitudinalDataset<F>> {
    design.validate()?;
    let factors = correlation_factors(design)?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(replicate);
    let p = design.beta.len();
    let q = design.theta.len();
    let subjects = (0..design.n_subjects)
        .map(|i| {
            let m = design.cluster_size(i);
            let sigma = design.sigma_for(i);
            let mut x = DMatrix::<F>::zeros(m, p);
            for k in 0..m {
                for j in 0..p {
                    x[(k, j)] = F::cast(rng.sample::<f64, _>(StandardNormal));
                }
            }
            let mut z = DMatrix::<F>::zeros(m, q);
            for k in 0..m {
                for j in 0..q {
                    z[(k, j)] = F::cast(rng.random::<f64>());
                }
            }
            let white = DVector::<F>::from_fn(m, |_, _| F::cast(rng.sample::<f64, _>(StandardNormal)));
            let errors = (&factors[&m] * white) * sigma;
            let y = DVector::from_fn(m, |k, _| {
                let index = x.row(k).transpose().dot(&design.beta);
                let linear = z.row(k).transpose().dot(&design.theta);
                design.link.eval(index) + linear + errors[k]
            });
            Subject {
                id: format!("subject{i}"),
                y,
                x,
                z,
            }
        })
        .collect();
    LongitudinalDataset::new(subjects)
}

/// Estimator run on every replicated dataset.
#[derive(Debug, Clone)]
pub enum Method<F: Scalar> {
    /// Unpenalized marginal fit (working independence gives the baseline).
    Gee(GeeConfig<F>),
    /// Unpenalized quadratic-inference fit.
    Qif(QifConfig<F>),
    /// SCAD-penalized fit at BIC-selected rates.
    PenalizedGee(GeeConfig<F>, PenaltyConfig<F>),
    PenalizedQif(QifConfig<F>, PenaltyConfig<F>),
    /// Unpenalized fit on the true-support columns, re-embedded with zeros.
    OracleGee(GeeConfig<F>),
    OracleQif(QifConfig<F>),
}

impl<F: Scalar> Method<F> {
    pub fn label(&self) -> String {
        match self {
            Method::Gee(cfg) => format!("gee-{}", cfg.working.label()),
            Method::Qif(cfg) => format!("qif-{}", cfg.working.label()),
            Method::PenalizedGee(cfg, _) => format!("penalized-gee-{}", cfg.working.label()),
            Method::PenalizedQif(cfg, _) => format!("penalized-qif-{}", cfg.working.label()),
            Method::OracleGee(cfg) => format!("oracle-gee-{}", cfg.working.label()),
            Method::OracleQif(cfg) => format!("oracle-qif-{}", cfg.working.label()),
        }
    }
}

/// Copy of a dataset keeping only the listed x and z columns.
fn restrict_columns<F: Scalar>(
    data: &LongitudinalDataset<F>,
    x_cols: &[usize],
    z_cols: &[usize],
) -> Result<LongitudinalDataset<F>> {
    let subjects = data
        .subjects()
        .iter()
        .map(|s| Subject {
            id: s.id.clone(),
            y: s.y.clone(),
            x: s.x.select_columns(x_cols),
            z: s.z.select_columns(z_cols),
        })
        .collect();
    LongitudinalDataset::new(subjects)
}

/// Fits with the zero coefficients known in advance: the solver sees only
/// the true-support columns and the estimate is re-embedded into the full
/// dimension with exact zeros elsewhere.
pub fn oracle_fit<F: Scalar>(
    data: &LongitudinalDataset<F>,
    design: &SimDesign<F>,
    engine: &EngineConfig<F>,
) -> Result<FitResult<F>> {
    let x_cols: Vec<usize> = design
        .beta
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != F::zero())
        .map(|(j, _)| j)
        .collect();
    let z_cols: Vec<usize> = design
        .theta
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != F::zero())
        .map(|(j, _)| j)
        .collect();
    if x_cols.len() < 2 {
        return Err(Error::InvalidConfig(
            "the oracle needs at least two nonzero index coefficients".to_string(),
        ));
    }
    let restricted = restrict_columns(data, &x_cols, &z_cols)?;
    let fit = match engine {
        EngineConfig::Gee(cfg) => gee::solve_gee(&restricted, cfg)?,
        EngineConfig::Qif(cfg) => qif::solve_qif(&restricted, cfg)?,
    };
    let mut beta_full = DVector::<F>::zeros(design.beta.len());
    for (k, &j) in x_cols.iter().enumerate() {
        beta_full[j] = fit.beta.beta()[k];
    }
    let beta = IndexParam::from_full(beta_full, x_cols[fit.beta.anchor()])?;
    let mut theta_full = DVector::<F>::zeros(design.theta.len());
    for (k, &j) in z_cols.iter().enumerate() {
        theta_full[j] = fit.theta.0[k];
    }
    // The curve, trace, and covariance stay those of the restricted solve;
    // only the coefficients are re-embedded.
    Ok(FitResult {
        beta,
        theta: ThetaParam(theta_full),
        g_grid: fit.g_grid,
        sandwich_cov: fit.sandwich_cov,
        iterations: fit.iterations,
        converged: fit.converged,
        score_norm: fit.score_norm,
        trace: fit.trace,
        bandwidth: fit.bandwidth,
        rho: fit.rho,
    })
}

/// Per-replication summary the metric aggregator consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord<F: Scalar> {
    /// Substream the dataset was drawn from.
    pub replicate: u64,
    /// Full-dimension index estimate.
    pub beta: DVector<F>,
    /// Full-dimension linear estimate.
    pub theta: DVector<F>,
    /// Bandwidth the fit smoothed with, reused for the curve metric.
    pub bandwidth: F,
}

impl<F: Scalar> FitRecord<F> {
    pub fn from_fit(replicate: u64, fit: &FitResult<F>) -> Self {
        Self {
            replicate,
            beta: fit.beta.beta().clone_owned(),
            theta: fit.theta.0.clone(),
            bandwidth: fit.bandwidth,
        }
    }
}

/// Aggregate quality measures over the successful replications of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport<F: Scalar> {
    pub method: String,
    /// Successful replications aggregated here.
    pub replications: usize,
    /// Replications dropped because the fit failed.
    pub failures: usize,
    /// Mean estimate minus truth, per index coefficient.
    pub bias_beta: DVector<F>,
    /// Sample standard deviation per index coefficient.
    pub se_beta: DVector<F>,
    pub bias_theta: DVector<F>,
    pub se_theta: DVector<F>,
    /// Mean over replications of the coefficient-averaged squared error.
    pub mse_beta: F,
    pub mse_theta: F,
    /// Curve error: fitted curve at estimated index points against the true
    /// link at true index points, averaged within subject, over subjects,
    /// then over replications.
    pub mse_g: F,
    /// Mean and spread of `(beta_hat' beta_0)^2` (unit truth makes the
    /// denominator 1).
    pub r2_beta: F,
    pub r2_beta_se: F,
    /// Mean and spread of `(theta_hat' theta_0)^2 / (theta_0' theta_0)^2`.
    pub r2_theta: F,
    pub r2_theta_se: F,
    /// Average count of true zeros estimated as exactly zero.
    pub tn_beta: F,
    /// Average count of true nonzeros kept nonzero.
    pub tp_beta: F,
    pub tn_theta: F,
    pub tp_theta: F,
}

fn format_six(v: f64) -> String {
    format!("{v:.6e}")
}

impl<F: Scalar> MetricsReport<F> {
    /// Column names for [`MetricsReport::row`], matching the given
    /// coefficient counts.
    pub fn header(p: usize, q: usize) -> String {
        let mut cols = vec![
            "method".to_string(),
            "replications".to_string(),
            "failures".to_string(),
        ];
        for k in 1..=p {
            cols.push(format!("bias_beta{k}"));
            cols.push(format!("se_beta{k}"));
        }
        for k in 1..=q {
            cols.push(format!("bias_theta{k}"));
            cols.push(format!("se_theta{k}"));
        }
        cols.extend(
            [
                "mse_beta",
                "mse_theta",
                "mse_g",
                "r2_beta",
                "r2_beta_se",
                "r2_theta",
                "r2_theta_se",
                "tn_beta",
                "tp_beta",
                "tn_theta",
                "tp_theta",
            ]
            .map(str::to_string),
        );
        cols.join(",")
    }

    /// One comma-separated row in the [`MetricsReport::header`] layout.
    pub fn row(&self) -> String {
        let mut cols = vec![
            self.method.clone(),
            self.replications.to_string(),
            self.failures.to_string(),
        ];
        for k in 0..self.bias_beta.len() {
            cols.push(format_six(self.bias_beta[k].as_f64()));
            cols.push(format_six(self.se_beta[k].as_f64()));
        }
        for k in 0..self.bias_theta.len() {
            cols.push(format_six(self.bias_theta[k].as_f64()));
            cols.push(format_six(self.se_theta[k].as_f64()));
        }
        for v in [
            self.mse_beta,
            self.mse_theta,
            self.mse_g,
            self.r2_beta,
            self.r2_beta_se,
            self.r2_theta,
            self.r2_theta_se,
            self.tn_beta,
            self.tp_beta,
            self.tn_theta,
            self.tp_theta,
        ] {
            cols.push(format_six(v.as_f64()));
        }
        cols.join(",")
    }
}

/// Sample standard deviation (denominator `len - 1`); zero for fewer than
/// two values.
fn sample_sd<F: Scalar>(values: &[F], mean: F) -> F {
    if values.len() < 2 {
        return F::zero();
    }
    let ss: F = values.iter().map(|v| (*v - mean) * (*v - mean)).sum();
    (ss / F::from_count(values.len() - 1)).sqrt()
}

/// Squared-error curve metric for one fitted replication: the fitted curve is
/// rebuilt by a smoother pass at the recorded estimate and compared with the
/// true link at the true index, averaged within each subject and then over
/// subjects.
fn curve_error<F: Scalar>(
    design: &SimDesign<F>,
    data: &LongitudinalDataset<F>,
    record: &FitRecord<F>,
) -> Result<F> {
    let pass = SmootherPass::build(
        data,
        &record.beta,
        &record.theta,
        &KernelConfig::for_solver(record.bandwidth),
    )?;
    let mut total = F::zero();
    for (i, s) in data.subjects().iter().enumerate() {
        let mut subject_sum = F::zero();
        for k in 0..s.len() {
            let truth = design
                .link
                .eval(s.x.row(k).transpose().dot(&design.beta));
            let diff = pass.eval(i, k).g_hat - truth;
            subject_sum += diff * diff;
        }
        total += subject_sum / F::from_count(s.len());
    }
    Ok(total / F::from_count(data.n_subjects()))
}

/// Aggregates per-replication fits into one [`MetricsReport`].
///
/// Each record's dataset is regenerated from its substream for the curve
/// metric, so records must come from this design's generator.
pub fn compute_metrics<F: Scalar>(
    design: &SimDesign<F>,
    method: &str,
    records: &[FitRecord<F>],
    failures: usize,
) -> Result<MetricsReport<F>> {
    if records.is_empty() {
        return Err(Error::InvalidConfig(
            "metrics need at least one successful replication".to_string(),
        ));
    }
    let p = design.beta.len();
    let q = design.theta.len();
    for r in records {
        if r.beta.len() != p || r.theta.len() != q {
            return Err(Error::InvalidData(format!(
                "fit dimensions ({}, {}) do not match the design ({p}, {q})",
                r.beta.len(),
                r.theta.len()
            )));
        }
    }
    let l = records.len();
    let l_f = F::from_count(l);
    let theta_norm_sq = design.theta.norm_squared();

    let mut mse_beta = F::zero();
    let mut mse_theta = F::zero();
    let mut mse_g = F::zero();
    let mut r2_beta = Vec::with_capacity(l);
    let mut r2_theta = Vec::with_capacity(l);
    let mut tn_beta = 0usize;
    let mut tp_beta = 0usize;
    let mut tn_theta = 0usize;
    let mut tp_theta = 0usize;
    let mut beta_draws: Vec<Vec<F>> = vec![Vec::with_capacity(l); p];
    let mut theta_draws: Vec<Vec<F>> = vec![Vec::with_capacity(l); q];

    for rec in records {
        let mut sq = F::zero();
        for k in 0..p {
            let d = rec.beta[k] - design.beta[k];
            sq += d * d;
            beta_draws[k].push(rec.beta[k]);
            if design.beta[k] == F::zero() {
                tn_beta += usize::from(rec.beta[k] == F::zero());
            } else {
                tp_beta += usize::from(rec.beta[k] != F::zero());
            }
        }
        mse_beta += sq / F::from_count(p);
        let mut sq = F::zero();
        for k in 0..q {
            let d = rec.theta[k] - design.theta[k];
            sq += d * d;
            theta_draws[k].push(rec.theta[k]);
            if design.theta[k] == F::zero() {
                tn_theta += usize::from(rec.theta[k] == F::zero());
            } else {
                tp_theta += usize::from(rec.theta[k] != F::zero());
            }
        }
        if q > 0 {
            mse_theta += sq / F::from_count(q);
        }
        let ip = rec.beta.dot(&design.beta);
        r2_beta.push(ip * ip);
        if theta_norm_sq > F::zero() {
            let ip = rec.theta.dot(&design.theta);
            r2_theta.push(ip * ip / (theta_norm_sq * theta_norm_sq));
        } else {
            r2_theta.push(F::zero());
        }
        let data = generate_dataset(design, rec.replicate)?;
        mse_g += curve_error(design, &data, rec)?;
    }

    let mean_of = |draws: &[F]| -> F { draws.iter().copied().sum::<F>() / l_f };
    let bias_beta = DVector::from_fn(p, |k, _| mean_of(&beta_draws[k]) - design.beta[k]);
    let se_beta = DVector::from_fn(p, |k, _| sample_sd(&beta_draws[k], mean_of(&beta_draws[k])));
    let bias_theta = DVector::from_fn(q, |k, _| mean_of(&theta_draws[k]) - design.theta[k]);
    let se_theta = DVector::from_fn(q, |k, _| {
        sample_sd(&theta_draws[k], mean_of(&theta_draws[k]))
    });
    let r2_beta_mean = mean_of(&r2_beta);
    let r2_theta_mean = mean_of(&r2_theta);

    Ok(MetricsReport {
        method: method.to_string(),
        replications: l,
        failures,
        bias_beta,
        se_beta,
        bias_theta,
        se_theta,
        mse_beta: mse_beta / l_f,
        mse_theta: mse_theta / l_f,
        mse_g: mse_g / l_f,
        r2_beta: r2_beta_mean,
        r2_beta_se: sample_sd(&r2_beta, r2_beta_mean),
        r2_theta: r2_theta_mean,
        r2_theta_se: sample_sd(&r2_theta, r2_theta_mean),
        tn_beta: F::from_count(tn_beta) / l_f,
        tp_beta: F::from_count(tp_beta) / l_f,
        tn_theta: F::from_count(tn_theta) / l_f,
        tp_theta: F::from_count(tp_theta) / l_f,
    })
}

fn fit_method<F: Scalar>(
    data: &LongitudinalDataset<F>,
    design: &SimDesign<F>,
    method: &Method<F>,
) -> Result<FitResult<F>> {
    match method {
        Method::Gee(cfg) => gee::solve_gee(data, cfg),
        Method::Qif(cfg) => qif::solve_qif(data, cfg),
        Method::PenalizedGee(cfg, pen) => {
            Ok(tune_lambdas(data, &EngineConfig::Gee(cfg.clone()), pen)?.fit)
        }
        Method::PenalizedQif(cfg, pen) => {
            Ok(tune_lambdas(data, &EngineConfig::Qif(cfg.clone()), pen)?.fit)
        }
        Method::OracleGee(cfg) => oracle_fit(data, design, &EngineConfig::Gee(cfg.clone())),
        Method::OracleQif(cfg) => oracle_fit(data, design, &EngineConfig::Qif(cfg.clone())),
    }
}

/// Runs `replications` independent datasets through every method and
/// aggregates per-method metrics.
///
/// Every method sees the same dataset within a replicate, so cross-method
/// comparisons are paired.  Replicates are scheduled in parallel when asked,
/// but outcomes are reduced in replicate order, making the report bitwise
/// independent of the schedule.  A method whose failures exceed the budget
/// aborts the whole study; below the budget, failed replicates are dropped
/// from that method's aggregate and counted.
pub fn run_replications<F: Scalar>(
    design: &SimDesign<F>,
    methods: &[Method<F>],
    replications: usize,
    parallel: bool,
) -> Result<Vec<MetricsReport<F>>> {
    if replications == 0 {
        return Err(Error::InvalidConfig(
            "need at least one replication".to_string(),
        ));
    }
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods to run".to_string()));
    }
    design.validate()?;

    let run_one = |rep: usize| -> Vec<Result<FitRecord<F>>> {
        let rep_u = rep as u64;
        match generate_dataset(design, rep_u) {
            Ok(data) => methods
                .iter()
                .map(|m| fit_method(&data, design, m).map(|fit| FitRecord::from_fit(rep_u, &fit)))
                .collect(),
            Err(e) => {
                let message = format!("dataset generation failed: {e}");
                methods
                    .iter()
                    .map(|_| Err(Error::InvalidConfig(message.clone())))
                    .collect()
            }
        }
    };
    let outcomes: Vec<Vec<Result<FitRecord<F>>>> = if parallel {
        (0..replications).into_par_iter().map(run_one).collect()
    } else {
        (0..replications).map(run_one).collect()
    };

    let mut reports = Vec::with_capacity(methods.len());
    for (mi, method) in methods.iter().enumerate() {
        let mut records = Vec::with_capacity(replications);
        let mut failures = 0usize;
        let mut first_failure: Option<String> = None;
        for row in &outcomes {
            match &row[mi] {
                Ok(rec) => records.push(rec.clone()),
                Err(e) => {
                    failures += 1;
                    if first_failure.is_none() {
                        first_failure = Some(e.to_string());
                    }
                }
            }
        }
        if failures * 100 > usize::from(FAILURE_LIMIT_PERCENT) * replications {
            return Err(Error::TooManyFailures {
                failed: failures,
                total: replications,
                limit_percent: FAILURE_LIMIT_PERCENT,
                first_failure: first_failure.unwrap_or_default(),
            });
        }
        reports.push(compute_metrics(design, &method.label(), &records, failures)?);
    }
    Ok(reports)
}

//! Artifact writers: delimited tables at six significant digits, a
//! full-precision JSON companion, and the solver trace.  Every file lands
//! via a temp-file-plus-rename so a crash never leaves a partial artifact
//! under a declared name.

use std::path::Path;

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use serde_json::json;

use plsim::sim::{MetricsReport, SimDesign};
use plsim::{Dataset, Fit, Selection};

/// Two-sided 95% normal quantile used for the confidence intervals.
const NORMAL_975: f64 = 1.959964;

/// Six significant digits for the human-readable tables.
fn sig6(v: f64) -> String {
    format!("{v:.5e}")
}

fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let tmp = dir.join(format!("{name}.tmp"));
    let path = dir.join(name);
    std::fs::write(&tmp, contents)
        .with_context(|| format!("cannot write {}", tmp.display()))?;
    std::fs::rename(&tmp, &path)
        .with_context(|| format!("cannot move {} into place", path.display()))?;
    Ok(())
}

/// Standard errors of the full coefficient vector: the index block comes
/// from pushing the reduced covariance through the anchor-elimination
/// jacobian, the linear block straight from its diagonal.
fn standard_errors(fit: &Fit) -> (Vec<f64>, Vec<f64>) {
    let r = fit.beta.reduced().len();
    let q = fit.theta.q();
    let jac = fit.beta.jacobian();
    let cov_beta_reduced = fit.sandwich_cov.view((0, 0), (r, r));
    let cov_beta_full: DMatrix<f64> = &jac * cov_beta_reduced * jac.transpose();
    let beta_se = (0..fit.beta.p())
        .map(|k| cov_beta_full[(k, k)].max(0.0).sqrt())
        .collect();
    let theta_se = (0..q)
        .map(|k| fit.sandwich_cov[(r + k, r + k)].max(0.0).sqrt())
        .collect();
    (beta_se, theta_se)
}

fn coefficients_csv(fit: &Fit, beta_se: &[f64], theta_se: &[f64]) -> String {
    let mut out = String::from("block,name,estimate,std_error,ci_lower,ci_upper\n");
    let mut push = |block: &str, name: String, est: f64, se: f64| {
        let half = NORMAL_975 * se;
        out.push_str(&format!(
            "{block},{name},{},{},{},{}\n",
            sig6(est),
            sig6(se),
            sig6(est - half),
            sig6(est + half)
        ));
    };
    for (k, v) in fit.beta.beta().iter().enumerate() {
        push("index", format!("x{}", k + 1), *v, beta_se[k]);
    }
    for (k, v) in fit.theta.0.iter().enumerate() {
        push("linear", format!("z{}", k + 1), *v, theta_se[k]);
    }
    out
}

fn gcurve_csv(fit: &Fit) -> String {
    let mut out = String::from("t,g_hat,g_prime\n");
    for point in &fit.g_grid {
        out.push_str(&format!(
            "{},{},{}\n",
            sig6(point.t),
            sig6(point.g),
            sig6(point.g_prime)
        ));
    }
    out
}

fn selection_csv(selection: &Selection) -> String {
    let fit = &selection.fit;
    let mut out = String::from("block,name,kept,estimate\n");
    for (k, v) in fit.beta.beta().iter().enumerate() {
        out.push_str(&format!(
            "index,x{},{},{}\n",
            k + 1,
            u8::from(selection.support_beta[k]),
            sig6(*v)
        ));
    }
    for (k, v) in fit.theta.0.iter().enumerate() {
        out.push_str(&format!(
            "linear,z{},{},{}\n",
            k + 1,
            u8::from(selection.support_theta[k]),
            sig6(*v)
        ));
    }
    out
}

fn bic_path_csv(selection: &Selection) -> String {
    let mut out = String::from("lambda1,lambda2,bic,df\n");
    for c in &selection.bic_path {
        out.push_str(&format!(
            "{},{},{},{}\n",
            sig6(c.lambda1),
            sig6(c.lambda2),
            sig6(c.bic),
            c.df
        ));
    }
    out
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn fit_json(
    data: &Dataset,
    fit: &Fit,
    method: &str,
    beta_se: &[f64],
    theta_se: &[f64],
    selection: Option<&Selection>,
) -> serde_json::Value {
    let mut value = json!({
        "command": if selection.is_some() { "select" } else { "fit" },
        "method": method,
        "data": { "subjects": data.n_subjects(), "observations": data.total_obs(),
                  "p": data.p(), "q": data.q() },
        "fit": {
            "beta": fit.beta.beta().iter().copied().collect::<Vec<f64>>(),
            "anchor": fit.beta.anchor(),
            "theta": fit.theta.0.iter().copied().collect::<Vec<f64>>(),
            "beta_std_error": beta_se,
            "theta_std_error": theta_se,
            "covariance_reduced": matrix_rows(&fit.sandwich_cov),
            "bandwidth": fit.bandwidth,
            "rho": fit.rho,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "score_norm": fit.score_norm,
        },
    });
    if let Some(sel) = selection {
        value["selection"] = json!({
            "lambda1": sel.lambda1,
            "lambda2": sel.lambda2,
            "bic": sel.bic,
            "df": sel.df,
            "support_beta": sel.support_beta,
            "support_theta": sel.support_theta,
            "grid_points": sel.bic_path.len(),
        });
    }
    value
}

/// Writes the artifacts of a single fitted model: `coefficients.csv`,
/// `gcurve.csv`, `trace.log`, `results.json`, and for a selection run also
/// `selection.csv` and `bic_path.csv`.
pub fn write_fit_artifacts(
    dir: &Path,
    data: &Dataset,
    fit: &Fit,
    method: &str,
    selection: Option<&Selection>,
) -> Result<()> {
    let (beta_se, theta_se) = standard_errors(fit);
    write_atomic(dir, "coefficients.csv", &coefficients_csv(fit, &beta_se, &theta_se))?;
    write_atomic(dir, "gcurve.csv", &gcurve_csv(fit))?;
    write_atomic(dir, "trace.log", &fit.trace_text())?;
    if let Some(sel) = selection {
        write_atomic(dir, "selection.csv", &selection_csv(sel))?;
        write_atomic(dir, "bic_path.csv", &bic_path_csv(sel))?;
    }
    let value = fit_json(data, fit, method, &beta_se, &theta_se, selection);
    write_atomic(
        dir,
        "results.json",
        &format!("{}\n", serde_json::to_string_pretty(&value)?),
    )?;
    Ok(())
}

/// Writes one `metrics_<method>.csv` per report plus a JSON companion
/// carrying every metric at full precision.
pub fn write_simulate_artifacts(
    dir: &Path,
    design: &SimDesign<f64>,
    reports: &[MetricsReport<f64>],
) -> Result<()> {
    let p = design.beta.len();
    let q = design.theta.len();
    for report in reports {
        let table = format!("{}\n{}\n", MetricsReport::<f64>::header(p, q), report.row());
        write_atomic(dir, &format!("metrics_{}.csv", report.method), &table)?;
    }
    let value = json!({
        "command": "simulate",
        "design": {
            "name": design.name,
            "subjects": design.n_subjects,
            "p": p,
            "q": q,
            "seed": design.seed,
        },
        "reports": reports.iter().map(|r| json!({
            "method": r.method,
            "replications": r.replications,
            "failures": r.failures,
            "bias_beta": r.bias_beta.iter().copied().collect::<Vec<f64>>(),
            "se_beta": r.se_beta.iter().copied().collect::<Vec<f64>>(),
            "bias_theta": r.bias_theta.iter().copied().collect::<Vec<f64>>(),
            "se_theta": r.se_theta.iter().copied().collect::<Vec<f64>>(),
            "mse_beta": r.mse_beta,
            "mse_theta": r.mse_theta,
            "mse_g": r.mse_g,
            "r2_beta": r.r2_beta,
            "r2_beta_se": r.r2_beta_se,
            "r2_theta": r.r2_theta,
            "r2_theta_se": r.r2_theta_se,
            "tn_beta": r.tn_beta,
            "tp_beta": r.tp_beta,
            "tn_theta": r.tn_theta,
            "tp_theta": r.tp_theta,
        })).collect::<Vec<_>>(),
    });
    write_atomic(
        dir,
        "results.json",
        &format!("{}\n", serde_json::to_string_pretty(&value)?),
    )?;
    Ok(())
}

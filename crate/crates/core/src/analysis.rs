//! Convergence-theory oracles (rate, fixed points, heterogeneity constants,
//! noise envelope) and summary statistics over metric traces.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{step_dgd, AlgoState, Algorithm, MetricsTrace};
use crate::error::{Error, Result};
use crate::objectives::{ConvexityConstants, Objective, ParamBlock};
use crate::topology::MixingMatrix;

/// Gradient-norm tolerance of the oracle optimizers.
pub const ORACLE_TOLERANCE: f64 = 1e-10;
/// Relative step tolerance of the DGD fixed-point iteration.
pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;
const ORACLE_BUDGET: usize = 5_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    pub zeta: f64,
    pub alpha: f64,
    pub mu: f64,
    pub big_l: f64,
    pub lambda_min_w: f64,
    pub contractive: bool,
}

/// `zeta = max(|1 - alpha mu|, |1 - alpha L|, |lambda_min(W) - alpha L|)`.
pub fn convergence_rate(alpha: f64, constants: ConvexityConstants, lambda_min_w: f64) -> RateCertificate {
    let ConvexityConstants { mu, big_l } = constants;
    let zeta = (1.0 - alpha * mu)
        .abs()
        .max((1.0 - alpha * big_l).abs())
        .max((lambda_min_w - alpha * big_l).abs());
    RateCertificate {
        zeta,
        alpha,
        mu,
        big_l,
        lambda_min_w,
        contractive: zeta < 1.0,
    }
}

fn sum_gradient<O: Objective>(objectives: &[O], x: &ParamBlock) -> Result<ParamBlock> {
    let mut total = ParamBlock::zeros(x.shape().0, x.shape().1);
    for o in objectives {
        total.axpy(1.0, &o.gradient(x)?);
    }
    Ok(total)
}

/// Gradient descent on `sum_i f_i` with step `1 / (n L)` until the gradient
/// norm drops below [`ORACLE_TOLERANCE`].
fn minimize_sum<O: Objective>(objectives: &[O], big_l: f64) -> Result<(ParamBlock, f64)> {
    let (rows, cols) = objectives
        .first()
        .ok_or_else(|| Error::Config("no objectives to minimize".into()))?
        .param_shape();
    let step = 1.0 / (objectives.len() as f64 * big_l);
    let mut x = ParamBlock::zeros(rows, cols);
    for _ in 0..ORACLE_BUDGET {
        let g = sum_gradient(objectives, &x)?;
        let norm = g.norm();
        if !norm.is_finite() {
            return Err(Error::OracleFailure("gradient became non-finite".into()));
        }
        if norm <= ORACLE_TOLERANCE {
            return Ok((x, norm));
        }
        x.axpy(-step, &g);
    }
    Err(Error::OracleFailure(format!(
        "gradient descent did not reach tolerance {ORACLE_TOLERANCE} in {ORACLE_BUDGET} iterations"
    )))
}

/// `x* = argmin sum_i f_i`; `constants` must hold for every `f_i`.
pub fn centralized_optimum<O: Objective>(objectives: &[O], constants: ConvexityConstants) -> Result<ParamBlock> {
    Ok(minimize_sum(objectives, constants.big_l)?.0)
}

/// Per-agent minimizers `x_i* = argmin f_i`, each with its own constants.
pub fn local_optima<O: Objective>(objectives: &[O], constants: &[ConvexityConstants]) -> Result<Vec<ParamBlock>> {
    if constants.len() != objectives.len() {
        return Err(Error::shape(format!("{} constants", objectives.len()), constants.len()));
    }
    objectives
        .par_iter()
        .zip(constants)
        .map(|(o, c)| Ok(minimize_sum(std::slice::from_ref(o), c.big_l)?.0))
        .collect()
}

fn stack_norm(stack: &[ParamBlock]) -> f64 {
    stack.iter().map(ParamBlock::norm_sq).sum::<f64>().sqrt()
}

/// Iterates DGD from zero until `||x_{k+1} - x_k|| <= 1e-12 (1 + ||x_k||)`.
/// Refuses step sizes whose certificate is not contractive.
pub fn dgd_fixed_point<O: Objective>(
    w: &MixingMatrix,
    alpha: f64,
    objectives: &[O],
    certificate: &RateCertificate,
) -> Result<Vec<ParamBlock>> {
    if !certificate.contractive {
        return Err(Error::NonContractive { zeta: certificate.zeta });
    }
    let x0 = objectives
        .iter()
        .map(|o| {
            let (r, c) = o.param_shape();
            ParamBlock::zeros(r, c)
        })
        .collect();
    let mut state = AlgoState::new(Algorithm::Dgd, x0);
    for _ in 0..ORACLE_BUDGET {
        let next = step_dgd(&state, w, alpha, objectives)?;
        let step = AlgoState::distance_sq(&next.x, &state.x).sqrt();
        let done = step <= FIXED_POINT_TOLERANCE * (1.0 + stack_norm(&state.x));
        state = next;
        if done {
            return Ok(state.x);
        }
    }
    Err(Error::OracleFailure("DGD fixed-point iteration exhausted its budget".into()))
}

/// `lambda_i x_i* + (1 - lambda_i) xbar_i` per agent.
pub fn fj_fixed_point(lambdas: &[f64], x_star_local: &[ParamBlock], x_bar: &[ParamBlock]) -> Result<Vec<ParamBlock>> {
    if lambdas.len() != x_star_local.len() || x_bar.len() != x_star_local.len() {
        return Err(Error::shape(
            format!("{} agents", lambdas.len()),
            format!("{} local optima, {} DGD blocks", x_star_local.len(), x_bar.len()),
        ));
    }
    Ok(lambdas
        .iter()
        .zip(x_star_local.iter().zip(x_bar))
        .map(|(&l, (a, b))| ParamBlock::convex(l, a, b))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointResiduals {
    /// `||sum_i grad f_i(x*)||`.
    pub centralized_gradient: f64,
    /// `max_i ||grad f_i(x_i*)||`.
    pub local_gradient: f64,
    /// `||W xbar - alpha grad f(xbar) - xbar||`.
    pub dgd_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub x_star: ParamBlock,
    pub x_star_local: Vec<ParamBlock>,
    pub x_bar: Vec<ParamBlock>,
    pub x_hat: Vec<ParamBlock>,
    pub residuals: FixedPointResiduals,
}

/// Computes every fixed point of the theory for one problem instance.
/// `constants` holds per-agent moduli; the certificate is built from their
/// envelope.
pub fn fixed_point_report<O: Objective>(
    w: &MixingMatrix,
    alpha: f64,
    lambdas: &[f64],
    objectives: &[O],
    constants: &[ConvexityConstants],
) -> Result<FixedPointReport> {
    let envelope = ConvexityConstants::envelope(constants)?;
    let lambda_min = crate::topology::min_eigenvalue(w.as_dense())?;
    let certificate = convergence_rate(alpha, envelope, lambda_min);
    let (x_star, centralized_gradient) = minimize_sum(objectives, envelope.big_l)?;
    let x_star_local = local_optima(objectives, constants)?;
    let x_bar = dgd_fixed_point(w, alpha, objectives, &certificate)?;
    let x_hat = fj_fixed_point(lambdas, &x_star_local, &x_bar)?;
    let local_gradient = objectives
        .iter()
        .zip(&x_star_local)
        .map(|(o, x)| o.gradient(x).map(|g| g.norm()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let state = AlgoState::new(Algorithm::Dgd, x_bar.clone());
    let mapped = step_dgd(&state, w, alpha, objectives)?;
    let dgd_map = AlgoState::distance_sq(&mapped.x, &x_bar).sqrt();
    Ok(FixedPointReport {
        x_star,
        x_star_local,
        x_bar,
        x_hat,
        residuals: FixedPointResiduals {
            centralized_gradient,
            local_gradient,
            dgd_map,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    /// `sqrt(2 L sum_i (f_i(x*) - f_i(x_i*)))`.
    pub big_d: f64,
    /// `sqrt(2 L sum_i (f_i(0) - f_i(x*)))`.
    pub c_const: f64,
    /// `||xbar - 1 (x) x*||`.
    pub distance: f64,
}

/// `D = sqrt(2 L sum_i (f_i(x*) - f_i(x_i*)))`; zero when all agents share
/// a minimizer. Summands negative only through rounding are clamped.
pub fn heterogeneity_constant<O: Objective>(
    objectives: &[O],
    x_star: &ParamBlock,
    x_star_local: &[ParamBlock],
    big_l: f64,
) -> Result<f64> {
    if objectives.len() != x_star_local.len() {
        return Err(Error::shape(format!("{} local optima", objectives.len()), x_star_local.len()));
    }
    let mut gap = 0.0;
    for (o, local) in objectives.iter().zip(x_star_local) {
        gap += (o.loss(x_star)? - o.loss(local)?).max(0.0);
    }
    Ok((2.0 * big_l * gap).sqrt())
}

/// The measurable ingredients of the DGD suboptimality bound.
pub fn dgd_suboptimality_bound<O: Objective>(
    report: &FixedPointReport,
    constants: ConvexityConstants,
    objectives: &[O],
) -> Result<HeterogeneityReport> {
    let (rows, cols) = report.x_star.shape();
    let zero = ParamBlock::zeros(rows, cols);
    let mut gap_zero = 0.0;
    for o in objectives {
        gap_zero += o.loss(&zero)? - o.loss(&report.x_star)?;
    }
    let distance = report
        .x_bar
        .iter()
        .map(|b| b.dist_sq(&report.x_star))
        .sum::<f64>()
        .sqrt();
    Ok(HeterogeneityReport {
        big_d: heterogeneity_constant(objectives, &report.x_star, &report.x_star_local, constants.big_l)?,
        c_const: (2.0 * constants.big_l * gap_zero.max(0.0)).sqrt(),
        distance,
    })
}

/// `zeta^k d0 + (1 - min lambda) tau sum_{h<k} zeta^(k-h-1)`.
pub fn noise_envelope(k: u64, zeta: f64, tau: f64, min_lambda: f64, initial_distance: f64) -> f64 {
    let decay = zeta.powf(k as f64);
    let series = if zeta == 1.0 {
        k as f64
    } else {
        (1.0 - decay) / (1.0 - zeta)
    };
    decay * initial_distance + (1.0 - min_lambda) * tau * series
}

/// Envelope built from the separately contracting tracks:
/// `zeta^k (max lambda ||y0 - y*|| + (1 - min lambda) ||z0 - xbar||) + (1 - min lambda) tau sum_{h<k} zeta^(k-h-1)`.
/// Unlike [`noise_envelope`] with `d0 = ||x0 - xhat||`, this holds for every
/// instance: `x` is a fixed mix of `y` and `z`, and only those contract per step.
pub fn stacked_noise_envelope(
    k: u64,
    zeta: f64,
    tau: f64,
    lambda_range: (f64, f64),
    y_distance: f64,
    z_distance: f64,
) -> f64 {
    let (min_lambda, max_lambda) = lambda_range;
    let d0 = max_lambda * y_distance + (1.0 - min_lambda) * z_distance;
    noise_envelope(k, zeta, tau, min_lambda, 0.0) + zeta.powf(k as f64) * d0
}

/// Limit radius `(1 - min lambda) tau / (1 - zeta)`; infinite unless `zeta < 1`.
pub fn noise_asymptote(zeta: f64, tau: f64, min_lambda: f64) -> f64 {
    if zeta < 1.0 {
        (1.0 - min_lambda) * tau / (1.0 - zeta)
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub min: f64,
    pub mean: f64,
    /// Population standard deviation across agents.
    pub std: f64,
    pub max: f64,
    /// Lower end of the central 75% interval (12.5th percentile).
    pub p12_5: f64,
    /// Upper end of the central 75% interval (87.5th percentile).
    pub p87_5: f64,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            min: sorted[0],
            mean,
            std: var.sqrt(),
            max: sorted[sorted.len() - 1],
            p12_5: percentile(&sorted, 12.5),
            p87_5: percentile(&sorted, 87.5),
        })
    }
}

/// Linear-interpolation percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cross-agent statistics of every metric at the final recorded iteration,
/// honest agents only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iteration: usize,
    pub agents: usize,
    pub stopped_agents: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub const METRIC_NAMES: [&str; 5] = [
    "local_train_loss",
    "global_train_loss",
    "local_train_acc",
    "local_test_acc",
    "global_test_acc",
];

pub fn summarize_trace(trace: &MetricsTrace) -> Result<TraceSummary> {
    let iteration = trace
        .last_iteration()
        .ok_or_else(|| Error::Format("empty trace".into()))?;
    let honest: Vec<bool> = (0..trace.n_agents)
        .map(|i| !trace.malicious.get(i).copied().unwrap_or(false))
        .collect();
    let rows: Vec<_> = trace
        .rows_at(iteration)
        .filter(|r| honest.get(r.agent).copied().unwrap_or(true))
        .collect();
    let mut metrics = BTreeMap::new();
    for (k, name) in METRIC_NAMES.iter().enumerate() {
        let values: Vec<f64> = rows
            .iter()
            .map(|r| {
                let m = &r.metrics;
                [m.local_train_loss, m.global_train_loss, m.local_train_acc, m.local_test_acc, m.global_test_acc][k]
            })
            .collect();
        if let Some(s) = MetricSummary::from_values(&values) {
            metrics.insert(name.to_string(), s);
        }
    }
    Ok(TraceSummary {
        iteration,
        agents: rows.len(),
        stopped_agents: rows.iter().filter(|r| r.stopped).count(),
        metrics,
    })
}

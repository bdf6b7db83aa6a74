//! Independent verification machinery: finite-difference functional
//! derivatives along contamination paths, the raw-versus-corrected bias
//! order experiment, and a deterministic Monte Carlo harness.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{contaminate, ContaminationPath, DiscreteDistribution, EmpiricalSample};
use crate::error::{Error, Result};
use crate::estimands::EstimandFunctional;
use crate::ident::{nuisance_field, row_values, DirectIdentification};
use crate::influence::lr_corrected_rows;
use crate::influence::InfluenceTable;
use crate::matrix::Mat;

/// Descending contamination magnitudes for difference quotients.
#[derive(Debug, Clone, Serialize)]
pub struct EpsGrid {
    pub values: Vec<f64>,
    pub richardson: bool,
}

impl Default for EpsGrid {
    /// Nine log-spaced points from 1e-1 down to 1e-5.
    fn default() -> Self {
        let values = (0..9).map(|k| 10f64.powf(-1.0 - 0.5 * k as f64)).collect();
        EpsGrid { values, richardson: true }
    }
}

impl EpsGrid {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("empty eps grid"));
        }
        if self.values.iter().any(|&e| !(0.0 < e && e < 1.0)) {
            return Err(Error::invalid("eps values must lie in (0, 1)"));
        }
        if self.values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("eps grid must be strictly decreasing"));
        }
        Ok(())
    }
}

/// Derivative estimate with a grid-consistency error bound.
#[derive(Debug, Clone)]
pub struct GateauxResult {
    pub derivative: Vec<f64>,
    pub error_estimate: f64,
    /// Whether two-sided quotients were available along the path.
    pub two_sided: bool,
}

/// Signed mixture `P + eps (Q - P)` for the two-sided quotient; valid only
/// while every mass stays nonnegative.
fn signed_mixture(
    base: &DiscreteDistribution,
    dir: &DiscreteDistribution,
    eps: f64,
) -> Option<DiscreteDistribution> {
    let mut support = base.support.clone();
    let mut mass: Vec<f64> = base.mass.iter().map(|m| m * (1.0 - eps)).collect();
    let mut idx: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, z) in support.iter().enumerate() {
        idx.insert(crate::dist::float_key(z), i);
    }
    for (z, &m) in dir.support.iter().zip(&dir.mass) {
        match idx.get(&crate::dist::float_key(z)) {
            Some(&i) => mass[i] += eps * m,
            None => {
                support.push(z.clone());
                mass.push(eps * m);
            }
        }
    }
    if mass.iter().any(|&m| m < 0.0) {
        return None;
    }
    DiscreteDistribution::new(support, mass, base.blocks.clone()).ok()
}

/// Finite-difference functional derivative of the estimand at the base of
/// `path` along its direction, evaluated at `eps -> 0` over the grid.
/// Two-sided quotients are used whenever the backward mixture stays a
/// probability law; Richardson extrapolation removes the leading error
/// term when enabled.
pub fn gateaux_fd(
    functional: &dyn EstimandFunctional,
    path: &ContaminationPath,
    grid: &EpsGrid,
) -> Result<GateauxResult> {
    grid.validate()?;
    let dim = functional.dim();
    let base_value = functional
        .eval(&path.base, None)
        .map_err(|e| Error::Oracle(format!("base solve failed: {e}")))?;

    // two-sided only for joint perturbations with a valid backward mixture
    let backward_ok = path.which_block.is_none()
        && grid
            .values
            .iter()
            .all(|&e| signed_mixture(&path.base, &path.direction, -e).is_some());

    let mut quotients: Vec<Vec<f64>> = Vec::with_capacity(grid.values.len());
    let mut warm_fwd = base_value.clone();
    let mut warm_bwd = base_value.clone();
    for &eps in grid.values.iter().rev() {
        // ascend from the smallest eps so warm starts stay near the base
        let fwd_law = contaminate(path, eps)?;
        let fwd = functional
            .eval(&fwd_law, Some(&warm_fwd))
            .map_err(|e| Error::Oracle(format!("solve failed at eps {eps}: {e}")))?;
        warm_fwd = fwd.clone();
        let q: Vec<f64> = if backward_ok {
            let bwd_law = signed_mixture(&path.base, &path.direction, -eps)
                .expect("validity checked above");
            let bwd = functional
                .eval(&bwd_law, Some(&warm_bwd))
                .map_err(|e| Error::Oracle(format!("solve failed at eps -{eps}: {e}")))?;
            warm_bwd = bwd.clone();
            fwd.iter().zip(bwd).map(|(f, b)| (f - b) / (2.0 * eps)).collect()
        } else {
            fwd.iter()
                .zip(&base_value)
                .map(|(f, b)| (f - b) / eps)
                .collect()
        };
        quotients.push(q);
    }
    quotients.reverse(); // restore descending-eps order
    let eps_order = grid.values.clone();
    let order = if backward_ok { 2.0 } else { 1.0 };

    // a linear functional gives eps-free quotients; take the best
    // conditioned one (largest eps) instead of amplifying rounding noise
    let scale = quotients
        .iter()
        .flatten()
        .fold(1.0_f64, |a, x| a.max(x.abs()));
    let spread = (0..dim)
        .map(|k| {
            let col: Vec<f64> = quotients.iter().map(|q| q[k]).collect();
            col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - col.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0_f64, f64::max);
    if spread <= 1e-9 * scale {
        return Ok(GateauxResult {
            derivative: quotients[0].clone(),
            error_estimate: spread,
            two_sided: backward_ok,
        });
    }

    // Richardson on adjacent pairs eliminates the leading eps^order term
    let refine = |i: usize, j: usize| -> Vec<f64> {
        let (ei, ej) = (eps_order[i].powf(order), eps_order[j].powf(order));
        quotients[i]
            .iter()
            .zip(&quotients[j])
            .map(|(di, dj)| (ei * dj - ej * di) / (ei - ej))
            .collect()
    };
    let n = eps_order.len();
    let (derivative, error_estimate) = if grid.richardson && n >= 3 {
        let last = refine(n - 2, n - 1);
        let prev = refine(n - 3, n - 2);
        let err = last
            .iter()
            .zip(&prev)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        (last, err)
    } else {
        let last = quotients[n - 1].clone();
        let err = if n >= 2 {
            last.iter()
                .zip(&quotients[n - 2])
                .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
        } else {
            f64::INFINITY
        };
        (last, err)
    };
    if derivative.len() != dim {
        return Err(Error::Oracle("functional changed output dimension".into()));
    }
    Ok(GateauxResult { derivative, error_estimate, two_sided: backward_ok })
}

/// Comparison of an analytic influence table against the definitional
/// derivative along every point-mass direction.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    /// Worst deviation across the support, relative to the table scale.
    pub max_rel_error: f64,
    pub per_point: Vec<f64>,
    /// Scale used in the denominator: sup-norm of the analytic table,
    /// floored at one.
    pub scale: f64,
}

/// Sweeps every support point, compares the finite-difference derivative
/// along the point mass there with the analytic value, and reports the
/// worst relative deviation.
pub fn verify_if(
    functional: &dyn EstimandFunctional,
    dist: &DiscreteDistribution,
    analytic: &InfluenceTable,
    grid: &EpsGrid,
) -> Result<VerifyReport> {
    if analytic.len() != dist.len() || analytic.dim != functional.dim() {
        return Err(Error::DimensionMismatch(
            "analytic table must cover the support with the functional's dimension".into(),
        ));
    }
    let scale = analytic.max_abs().max(1.0);
    let per_point: Result<Vec<f64>> = (0..dist.len())
        .into_par_iter()
        .map(|i| {
            let path = ContaminationPath::point_mass(dist, i)?;
            let g = gateaux_fd(functional, &path, grid)?;
            Ok(g.derivative
                .iter()
                .zip(&analytic.values[i])
                .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
                / scale)
        })
        .collect();
    let per_point = per_point?;
    let max_rel_error = per_point.iter().cloned().fold(0.0_f64, f64::max);
    Ok(VerifyReport { max_rel_error, per_point, scale })
}

/// Fitted decay order of a perturbation response.
#[derive(Debug, Clone, Serialize)]
pub struct BiasOrderResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// (eps, |response|) pairs over the grid.
    pub per_eps: Vec<(f64, f64)>,
    /// The fit used enough points and is trustworthy.
    pub reliable: bool,
    /// The direction did not move the first step; no order can be read.
    pub inconclusive: bool,
}

/// Numerical floor below which responses are treated as zero.
const RESPONSE_FLOOR: f64 = 1e-13;

fn fit_log_slope(pairs: &[(f64, f64)]) -> BiasOrderResult {
    let usable: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(_, d)| *d > RESPONSE_FLOOR)
        .cloned()
        .collect();
    // the five smallest usable magnitudes carry the asymptotic order
    let tail: Vec<(f64, f64)> = usable.iter().rev().take(5).cloned().collect();
    if tail.len() < 2 {
        return BiasOrderResult {
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: 0.0,
            per_eps: pairs.to_vec(),
            reliable: false,
            inconclusive: true,
        };
    }
    let xs: Vec<f64> = tail.iter().map(|(e, _)| e.ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|(_, d)| d.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    BiasOrderResult {
        slope,
        intercept,
        r_squared,
        per_eps: pairs.to_vec(),
        reliable: r_squared >= 0.98,
        inconclusive: false,
    }
}

/// Drift of the raw and robust-corrected identifications when only the
/// first-step nuisances are evaluated under a contaminated law: the raw
/// response decays at first order in `eps`, the corrected one at second.
pub fn bias_order(
    ident: &DirectIdentification,
    dist: &DiscreteDistribution,
    first_step_direction: &ContaminationPath,
    grid: &EpsGrid,
) -> Result<(BiasOrderResult, BiasOrderResult)> {
    grid.validate()?;
    let base_field = nuisance_field(&ident.nuisances, dist)?;
    let base_rows = row_values(ident, dist, &base_field)?;
    let mus: Vec<f64> = base_rows
        .iter()
        .map(|v| v.iter().zip(&dist.mass).map(|(x, m)| x * m).sum())
        .collect();
    let beta0 = ident.combine.apply(&mus);

    // does the direction move the nuisance values at all?
    let probe_field =
        nuisance_field(&ident.nuisances, &contaminate(first_step_direction, grid.values[0])?)?;
    let moved = base_field.iter().zip(&probe_field).any(|(a, b)| {
        a.iter().any(|(k, v)| {
            b.get(k)
                .map(|w| (v - w).abs() > 1e-12 * (1.0 + v.abs()))
                .unwrap_or(false)
        })
    });
    if !moved {
        let flat = BiasOrderResult {
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: 0.0,
            per_eps: grid.values.iter().map(|&e| (e, 0.0)).collect(),
            reliable: false,
            inconclusive: true,
        };
        return Ok((flat.clone(), flat));
    }

    let mut raw_pairs = Vec::with_capacity(grid.values.len());
    let mut lr_pairs = Vec::with_capacity(grid.values.len());
    for &eps in &grid.values {
        let perturbed = contaminate(first_step_direction, eps)?;
        // only the nuisances see the contaminated law; the outer
        // expectations stay under the base law
        let mut field = nuisance_field(&ident.nuisances, &perturbed)?;
        // drop values at arguments outside the base factorization
        for (g, map) in field.iter_mut().enumerate() {
            map.retain(|k, _| base_field[g].contains_key(k));
        }
        let raw_rows = row_values(ident, dist, &field)?;
        let raw_mus: Vec<f64> = raw_rows
            .iter()
            .map(|v| v.iter().zip(&dist.mass).map(|(x, m)| x * m).sum())
            .collect();
        let raw_beta = ident.combine.apply(&raw_mus);
        let raw_drift = raw_beta
            .iter()
            .zip(&beta0)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        raw_pairs.push((eps, raw_drift));

        let lr_rows = lr_corrected_rows(ident, dist, &field)?;
        let lr_mus: Vec<f64> = lr_rows
            .iter()
            .map(|v| v.iter().zip(&dist.mass).map(|(x, m)| x * m).sum())
            .collect();
        let lr_beta = ident.combine.apply(&lr_mus);
        let lr_drift = lr_beta
            .iter()
            .zip(&beta0)
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        lr_pairs.push((eps, lr_drift));
    }
    Ok((fit_log_slope(&raw_pairs), fit_log_slope(&lr_pairs)))
}

/// Monte Carlo configuration; replication seeds are derived as independent
/// streams `(master_seed, rep_index)` of one keyed generator.
#[derive(Debug, Clone, Serialize)]
pub struct McConfig {
    pub replications: usize,
    pub sample_size: usize,
    pub master_seed: u64,
    pub parallel: bool,
}

/// One estimator entered into the Monte Carlo comparison.
pub struct McScenario {
    pub name: String,
    pub dgp: DiscreteDistribution,
    pub truth: Vec<f64>,
    /// Estimator applied to each simulated sample.
    pub estimator: Arc<dyn Fn(&EmpiricalSample) -> Result<Vec<f64>> + Send + Sync>,
    /// Enumerated covariance of the analytic influence table under the
    /// process, the target for `n x variance`.
    pub if_variance: Mat,
}

#[derive(Debug, Clone, Serialize)]
pub struct McScenarioResult {
    pub name: String,
    pub replications_used: usize,
    pub failures: usize,
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    /// Sample-size-scaled variance per coordinate.
    pub n_variance: Vec<f64>,
    /// Monte Carlo standard error of each `n_variance` entry.
    pub n_variance_se: Vec<f64>,
    /// Diagonal of the enumerated influence covariance.
    pub if_variance_diag: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub config: McConfig,
    pub scenarios: Vec<McScenarioResult>,
}

/// Runs the comparison. Replications execute in any order but are
/// accumulated by replication index, so the report bytes depend only on
/// the configuration.
pub fn mc_compare(scenarios: &[McScenario], cfg: &McConfig) -> Result<McReport> {
    if cfg.replications == 0 || cfg.sample_size == 0 {
        return Err(Error::invalid("replications and sample size must be positive"));
    }
    let mut results = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let run_rep = |rep: usize| -> Option<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed);
            rng.set_stream(rep as u64);
            let sample = sc.dgp.sample(cfg.sample_size, &mut rng);
            (sc.estimator)(&sample).ok()
        };
        let draws: Vec<Option<Vec<f64>>> = if cfg.parallel {
            (0..cfg.replications).into_par_iter().map(run_rep).collect()
        } else {
            (0..cfg.replications).map(run_rep).collect()
        };
        // ordered accumulation over replication index
        let dim = sc.truth.len();
        let mut kept: Vec<&Vec<f64>> = Vec::new();
        let mut failures = 0usize;
        for d in &draws {
            match d {
                Some(v) if v.len() == dim => kept.push(v),
                _ => failures += 1,
            }
        }
        if kept.is_empty() {
            return Err(Error::Oracle(format!(
                "every replication failed for scenario {}",
                sc.name
            )));
        }
        let r = kept.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in &kept {
            for (m, x) in mean.iter_mut().zip(v.iter()) {
                *m += x / r;
            }
        }
        let mut m2 = vec![0.0; dim];
        let mut m4 = vec![0.0; dim];
        for v in &kept {
            for k in 0..dim {
                let d = v[k] - mean[k];
                m2[k] += d * d / r;
                m4[k] += d * d * d * d / r;
            }
        }
        let n = cfg.sample_size as f64;
        let n_variance: Vec<f64> = m2.iter().map(|v| v * n).collect();
        let n_variance_se: Vec<f64> = m2
            .iter()
            .zip(&m4)
            .map(|(v2, v4)| {
                let var_of_var = (v4 - v2 * v2 * (r - 3.0) / (r - 1.0)) / r;
                n * var_of_var.max(0.0).sqrt()
            })
            .collect();
        let bias: Vec<f64> = mean.iter().zip(&sc.truth).map(|(m, t)| m - t).collect();
        results.push(McScenarioResult {
            name: sc.name.clone(),
            replications_used: kept.len(),
            failures,
            mean,
            bias,
            n_variance,
            n_variance_se,
            if_variance_diag: (0..dim.min(sc.if_variance.nrows()))
                .map(|k| sc.if_variance[(k, k)])
                .collect(),
        });
    }
    Ok(McReport { config: cfg.clone(), scenarios: results })
}

/// Long-format rows (eps, response, series) for plotting a bias-order run.
pub fn bias_order_csv(raw: &BiasOrderResult, lr: &BiasOrderResult) -> String {
    let mut out = String::from("eps,abs_delta,series\n");
    for (e, d) in &raw.per_eps {
        out.push_str(&format!("{e},{d},raw\n"));
    }
    for (e, d) in &lr.per_eps {
        out.push_str(&format!("{e},{d},robust\n"));
    }
    out
}

//! Built-in worked estimands with reference data-generating processes:
//! the treatment-effect quartet (weighting, normalized weighting,
//! regression adjustment, augmented weighting), quantiles on grid laws,
//! the average density, and a linear instrumental-variable model with
//! plain and variance-weighted first stages.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{DiscreteDistribution, VariableBlocks};
use crate::error::{Error, Result};
use crate::ident::{
    eval_direct, ArgMapFn, CombineFn, CombineJacFn, Combiner, DirectIdentification, InnerRow,
    Nuisance, NuisanceRef, PointFn,
};
use crate::influence::{if_joint, if_multistep_direct, InfluenceTable};
use crate::matrix::{self, Mat, PsdMatrix, DEFAULT_RANK_TOL};
use crate::moments::{
    solve_moments, AnalyticJacobians, Differentiability, GammaSpec, MomentModel, ParamPartition,
    ScoreModel,
};

/// A solvable functional of the law, re-evaluated by the derivative oracle
/// under contaminated laws. `warm` carries the previous solution along a
/// contamination path.
pub trait EstimandFunctional: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, dist: &DiscreteDistribution, warm: Option<&[f64]>) -> Result<Vec<f64>>;
}

/// How a scenario identifies its parameter.
pub enum ScenarioKind {
    /// A direct identification over a conditional nuisance graph.
    Direct(DirectIdentification),
    /// A moment model solved by weighted minimum distance with the frozen
    /// weighting attached.
    Moment { model: MomentModel, xi: Mat, score: Option<ScoreModel> },
}

/// A worked estimand: its law, truth, analytic influence table, an optional
/// closed-form reference table, and the re-solvable functional.
pub struct EstimandScenario {
    pub name: String,
    pub dist: DiscreteDistribution,
    /// The full solved parameter (beta for direct scenarios, the stacked
    /// parameter for moment scenarios).
    pub truth: Vec<f64>,
    pub kind: ScenarioKind,
    pub analytic: InfluenceTable,
    pub expected_if: Option<InfluenceTable>,
    pub functional: Arc<dyn EstimandFunctional>,
}

impl EstimandScenario {
    /// Residual of the defining moment or identification at the truth.
    pub fn truth_residual(&self) -> Result<f64> {
        match &self.kind {
            ScenarioKind::Direct(ident) => {
                let ev = eval_direct(ident, &self.dist)?;
                Ok(ev
                    .beta
                    .iter()
                    .zip(&self.truth)
                    .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs())))
            }
            ScenarioKind::Moment { model, .. } => {
                let em = self.dist.expect(|z| model.m_full(z, &self.truth))?;
                Ok(em.iter().fold(0.0_f64, |a, x| a.max(x.abs())))
            }
        }
    }
}

struct DirectFunctional {
    ident: DirectIdentification,
    dim: usize,
}

impl EstimandFunctional for DirectFunctional {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, dist: &DiscreteDistribution, _warm: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(eval_direct(&self.ident, dist)?.beta)
    }
}

struct MomentFunctional {
    model: MomentModel,
    xi: Mat,
    init: Vec<f64>,
}

impl EstimandFunctional for MomentFunctional {
    fn dim(&self) -> usize {
        self.model.partition.d_nu()
    }

    fn eval(&self, dist: &DiscreteDistribution, warm: Option<&[f64]>) -> Result<Vec<f64>> {
        let start = warm.map(|w| w.to_vec()).unwrap_or_else(|| self.init.clone());
        solve_moments(&self.model, dist, Some(&self.xi), &start)
    }
}

/// Grid quantile through the interpolated distribution function: the mass
/// of each grid point is spread uniformly over its cell, making the
/// quantile a smooth functional of the masses with the grid-density
/// convention `f(z) = mass(z) / spacing`.
struct QuantileFunctional {
    q: f64,
}

/// Uniform spacing of a scalar grid law; the support must be a regular
/// grid for the interpolation convention to make sense.
pub fn grid_spacing(dist: &DiscreteDistribution) -> Result<f64> {
    if dist.dim() != 1 {
        return Err(Error::invalid("grid laws must be scalar"));
    }
    let mut pts: Vec<f64> = dist.support.iter().map(|z| z[0]).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if pts.len() < 2 {
        return Err(Error::invalid("grid laws need at least two points"));
    }
    let delta = pts[1] - pts[0];
    for w in pts.windows(2) {
        if ((w[1] - w[0]) - delta).abs() > 1e-9 * delta {
            return Err(Error::invalid("support is not a uniform grid"));
        }
    }
    Ok(delta)
}

fn interpolated_quantile(dist: &DiscreteDistribution, q: f64) -> Result<f64> {
    let delta = grid_spacing(dist)?;
    let mut pts: Vec<(f64, f64)> = dist
        .support
        .iter()
        .zip(&dist.mass)
        .map(|(z, &m)| (z[0], m))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut cum = 0.0;
    for (z, m) in pts {
        if cum + m >= q {
            if m <= 0.0 {
                return Err(Error::Domain(format!(
                    "distribution function is flat at level {q}; quantile degenerate"
                )));
            }
            // within the cell [z - delta/2, z + delta/2]
            return Ok(z - delta / 2.0 + (q - cum) / m * delta);
        }
        cum += m;
    }
    Err(Error::Domain(format!("level {q} not reached; masses sum below it")))
}

impl EstimandFunctional for QuantileFunctional {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, dist: &DiscreteDistribution, _warm: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(vec![interpolated_quantile(dist, self.q)?])
    }
}

/// Grid density at a location, by the cell convention. At a cell boundary
/// the two adjacent cells are averaged.
pub fn grid_density(dist: &DiscreteDistribution, at: f64) -> Result<f64> {
    let delta = grid_spacing(dist)?;
    let mut touching = Vec::new();
    for (z, &m) in dist.support.iter().zip(&dist.mass) {
        if (at - z[0]).abs() <= delta / 2.0 + 1e-12 * delta {
            touching.push(m / delta);
        }
    }
    if touching.is_empty() {
        return Err(Error::Domain(format!("location {at} is outside the grid")));
    }
    Ok(touching.iter().sum::<f64>() / touching.len() as f64)
}

/// Scenario: mean of a scalar law, the simplest direct estimand.
pub fn mean_scenario(dist: DiscreteDistribution) -> Result<EstimandScenario> {
    if dist.dim() != 1 {
        return Err(Error::invalid("mean scenario expects a scalar law"));
    }
    let ident = DirectIdentification {
        nuisances: vec![],
        rows: vec![InnerRow {
            refs: vec![],
            h: Arc::new(|z: &[f64], _i: &[f64]| z[0]),
            partials: Some(vec![]),
        }],
        combine: Combiner::Identity,
    };
    let mean = dist.expect_scalar(|z| z[0])?;
    let breakdown = if_multistep_direct(&ident, &dist, None)?;
    let expected = InfluenceTable::new(
        dist.support.iter().map(|z| vec![z[0] - mean]).collect(),
        &dist.mass,
        1e-10,
    )?;
    Ok(EstimandScenario {
        name: "mean".into(),
        truth: vec![mean],
        functional: Arc::new(DirectFunctional { ident: ident.clone(), dim: 1 }),
        kind: ScenarioKind::Direct(ident),
        analytic: breakdown.total,
        expected_if: Some(expected),
        dist,
    })
}

/// Scenario: the q-th quantile of a scalar grid law, identified through a
/// step-function moment and differentiated by the generalized rule.
pub fn quantile_scenario(q: f64, dist: DiscreteDistribution) -> Result<EstimandScenario> {
    if !(0.0..1.0).contains(&q) || q == 0.0 {
        return Err(Error::invalid("quantile level must lie in (0, 1)"));
    }
    let delta = grid_spacing(&dist)?;
    let beta = interpolated_quantile(&dist, q)?;
    let dens = grid_density(&dist, beta)?;
    if dens <= 0.0 {
        return Err(Error::Domain("zero density at the quantile".into()));
    }
    let model = crate::moments::beta_only_model(
        1,
        1,
        Arc::new(move |z: &[f64], b: &[f64], _g: &[f64]| {
            vec![if z[0] <= b[0] { 1.0 } else { 0.0 } - q]
        }),
        vec![Differentiability::Generalized],
        Some(delta / 2.0),
    );
    let expected_values: Vec<Vec<f64>> = dist
        .support
        .iter()
        .map(|z| vec![(q - if z[0] <= beta { 1.0 } else { 0.0 }) / dens])
        .collect();
    let expected = InfluenceTable::new(expected_values, &dist.mass, 1e-9)?;
    let xi = Mat::identity(1, 1);
    let analytic = if_joint(&model, &dist, &[beta], &PsdMatrix::from_mat(xi.clone())?)?;
    Ok(EstimandScenario {
        name: format!("quantile-{q}"),
        truth: vec![beta],
        functional: Arc::new(QuantileFunctional { q }),
        kind: ScenarioKind::Moment { model, xi, score: None },
        analytic,
        expected_if: Some(expected),
        dist,
    })
}

/// Scenario: average density `E[f(Z)]` of a grid law, with the density
/// itself the (pointwise) nuisance.
pub fn avg_density_scenario(dist: DiscreteDistribution) -> Result<EstimandScenario> {
    let delta = grid_spacing(&dist).unwrap_or(1.0);
    let n = dist.len();
    let support: Arc<Vec<Vec<f64>>> = Arc::new(dist.support.clone());
    let sup = support.clone();
    let index_of = move |z: &[f64]| -> usize {
        sup.iter()
            .position(|s| s[0] == z[0])
            .expect("density estimand evaluated off the base grid")
    };
    let mut nuisances = Vec::with_capacity(n);
    for k in 0..n {
        let target = dist.support[k][0];
        nuisances.push(Nuisance {
            name: format!("density-at-{target}"),
            block: 1,
            refs: vec![],
            integrand: Arc::new(move |z: &[f64], _i: &[f64]| {
                if z[0] == target {
                    1.0 / delta
                } else {
                    0.0
                }
            }),
            partials: Some(vec![]),
        });
    }
    let mut partials: Vec<PointFn> = Vec::with_capacity(n);
    for k in 0..n {
        let sup_k = support.clone();
        partials.push(Arc::new(move |z: &[f64], _i: &[f64]| {
            let idx = sup_k.iter().position(|s| s[0] == z[0]).unwrap();
            if idx == k {
                1.0
            } else {
                0.0
            }
        }));
    }
    let ident = DirectIdentification {
        nuisances,
        rows: vec![InnerRow {
            refs: (0..n).map(NuisanceRef::own).collect(),
            h: Arc::new(move |z: &[f64], inputs: &[f64]| inputs[index_of(z)]),
            partials: Some(partials),
        }],
        combine: Combiner::Identity,
    };
    let ev = eval_direct(&ident, &dist)?;
    let breakdown = if_multistep_direct(&ident, &dist, None)?;
    let mean_f = ev.beta[0];
    let expected = InfluenceTable::new(
        dist.support
            .iter()
            .zip(&dist.mass)
            .map(|(_, &m)| vec![2.0 * (m / delta - mean_f)])
            .collect(),
        &dist.mass,
        1e-10,
    )?;
    Ok(EstimandScenario {
        name: "avg-density".into(),
        truth: vec![mean_f],
        functional: Arc::new(DirectFunctional { ident: ident.clone(), dim: 1 }),
        kind: ScenarioKind::Direct(ident),
        analytic: breakdown.total,
        expected_if: Some(expected),
        dist,
    })
}

/// Treatment-effect data-generating process on a finite covariate support:
/// `X ~ (x_support, x_mass)`, `T | X ~ Bernoulli(propensity(x))`,
/// `Y = tau_t(x) + scale_t(x) * noise`.
#[derive(Debug, Clone)]
pub struct AteDgp {
    pub x_support: Vec<f64>,
    pub x_mass: Vec<f64>,
    pub propensity: Vec<f64>,
    pub tau1: Vec<f64>,
    pub tau0: Vec<f64>,
    /// Mean-zero residual values and masses shared across cells.
    pub noise: Vec<(f64, f64)>,
    /// Residual scale per x-index and treatment arm; defaults to 1.
    pub noise_scale: Option<Vec<[f64; 2]>>,
}

impl AteDgp {
    pub fn validate(&self) -> Result<()> {
        let k = self.x_support.len();
        if k == 0
            || self.x_mass.len() != k
            || self.propensity.len() != k
            || self.tau1.len() != k
            || self.tau0.len() != k
        {
            return Err(Error::Construction("misaligned treatment-effect tables".into()));
        }
        for &p in &self.propensity {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Construction(format!("propensity {p} violates overlap")));
            }
        }
        let mean: f64 = self.noise.iter().map(|(v, m)| v * m).sum();
        let total: f64 = self.noise.iter().map(|(_, m)| m).sum();
        if (total - 1.0).abs() > 1e-12 || mean.abs() > 1e-12 {
            return Err(Error::Construction("noise must be a mean-zero law".into()));
        }
        Ok(())
    }

    /// Average effect `E[tau1(X) - tau0(X)]`.
    pub fn truth(&self) -> f64 {
        self.x_mass
            .iter()
            .zip(self.tau1.iter().zip(&self.tau0))
            .map(|(m, (a, b))| m * (a - b))
            .sum()
    }

    fn scale(&self, t: usize, xi: usize) -> f64 {
        match &self.noise_scale {
            Some(s) => s[xi][t],
            None => 1.0,
        }
    }

    /// Joint law of (X, T, Y) with blocks in that order.
    pub fn joint(&self) -> Result<DiscreteDistribution> {
        self.validate()?;
        let blocks =
            VariableBlocks::new(vec![1, 1, 1], vec!["x".into(), "t".into(), "y".into()])?;
        let mut support = Vec::new();
        let mut mass = Vec::new();
        for (xi, &x) in self.x_support.iter().enumerate() {
            for t in [0usize, 1usize] {
                let pt = if t == 1 {
                    self.propensity[xi]
                } else {
                    1.0 - self.propensity[xi]
                };
                let center = if t == 1 { self.tau1[xi] } else { self.tau0[xi] };
                for &(e, pe) in &self.noise {
                    support.push(vec![x, t as f64, center + self.scale(t, xi) * e]);
                    mass.push(self.x_mass[xi] * pt * pe);
                }
            }
        }
        DiscreteDistribution::new(support, mass, blocks)
    }

    /// The augmented identification function `h(z)`, whose centered version
    /// is the common influence function of the whole quartet.
    pub fn augmented_h(&self, z: &[f64]) -> f64 {
        let xi = self.x_support.iter().position(|&x| x == z[0]).unwrap();
        let (t, y) = (z[1], z[2]);
        let p = self.propensity[xi];
        let (m1, m0) = (self.tau1[xi], self.tau0[xi]);
        t / p * (y - m1) - (1.0 - t) / (1.0 - p) * (y - m0) + m1 - m0
    }
}

/// Canonical treatment-effect process used by the fixtures.
pub fn canonical_ate() -> AteDgp {
    AteDgp {
        x_support: vec![0.0, 1.0],
        x_mass: vec![0.4, 0.6],
        propensity: vec![0.3, 0.7],
        tau1: vec![1.0, 2.0],
        tau0: vec![0.0, 0.5],
        noise: vec![(-1.0, 0.5), (1.0, 0.5)],
        noise_scale: None,
    }
}

/// Randomized treatment-effect process with an overlap margin.
pub fn random_ate(rng: &mut ChaCha8Rng) -> AteDgp {
    let k = rng.gen_range(2..=3usize);
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let x_mass: Vec<f64> = raw.iter().map(|r| r / total).collect();
    AteDgp {
        x_support: (0..k).map(|i| i as f64).collect(),
        x_mass,
        propensity: (0..k).map(|_| rng.gen_range(0.1..0.9)).collect(),
        tau1: (0..k).map(|_| rng.gen_range(-1.0..2.0)).collect(),
        tau0: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        noise: vec![(-1.0, 0.5), (1.0, 0.5)],
        noise_scale: Some(
            (0..k)
                .map(|_| [rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)])
                .collect(),
        ),
    }
}

fn propensity_nuisance() -> Nuisance {
    Nuisance {
        name: "propensity".into(),
        block: 2,
        refs: vec![],
        integrand: Arc::new(|z: &[f64], _i: &[f64]| z[1]),
        partials: Some(vec![]),
    }
}

fn outcome_mean_nuisance() -> Nuisance {
    Nuisance {
        name: "outcome-mean".into(),
        block: 3,
        refs: vec![],
        integrand: Arc::new(|z: &[f64], _i: &[f64]| z[2]),
        partials: Some(vec![]),
    }
}

/// Which member of the treatment-effect quartet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AteEstimand {
    /// Inverse-propensity weighting.
    Ipw,
    /// Normalized inverse-propensity weighting (ratio form).
    Nipw,
    /// Regression adjustment through cell means.
    Reg,
    /// Augmented weighting; locally robust by construction.
    Aipw,
}

impl AteEstimand {
    pub fn label(&self) -> &'static str {
        match self {
            AteEstimand::Ipw => "ate-ipw",
            AteEstimand::Nipw => "ate-nipw",
            AteEstimand::Reg => "ate-reg",
            AteEstimand::Aipw => "ate-aipw",
        }
    }
}

/// Direct identification of one quartet member over the (X, T, Y) law.
pub fn ate_direct_identification(which: AteEstimand) -> DirectIdentification {
    match which {
        AteEstimand::Ipw => DirectIdentification {
            nuisances: vec![propensity_nuisance()],
            rows: vec![InnerRow {
                refs: vec![NuisanceRef::own(0)],
                h: Arc::new(|z: &[f64], i: &[f64]| {
                    let (t, y, p) = (z[1], z[2], i[0]);
                    t * y / p - (1.0 - t) * y / (1.0 - p)
                }),
                partials: Some(vec![Arc::new(|z: &[f64], i: &[f64]| {
                    let (t, y, p) = (z[1], z[2], i[0]);
                    -t * y / (p * p) - (1.0 - t) * y / ((1.0 - p) * (1.0 - p))
                })]),
            }],
            combine: Combiner::Identity,
        },
        AteEstimand::Nipw => {
            let mk_row = |num_y: bool, treated: bool| -> InnerRow {
                InnerRow {
                    refs: vec![NuisanceRef::own(0)],
                    h: Arc::new(move |z: &[f64], i: &[f64]| {
                        let (t, y, p) = (z[1], z[2], i[0]);
                        let ind = if treated { t } else { 1.0 - t };
                        let den = if treated { p } else { 1.0 - p };
                        let top = if num_y { y } else { 1.0 };
                        ind * top / den
                    }),
                    partials: Some(vec![Arc::new(move |z: &[f64], i: &[f64]| {
                        let (t, y, p) = (z[1], z[2], i[0]);
                        let ind = if treated { t } else { 1.0 - t };
                        let top = if num_y { y } else { 1.0 };
                        if treated {
                            -ind * top / (p * p)
                        } else {
                            ind * top / ((1.0 - p) * (1.0 - p))
                        }
                    })]),
                }
            };
            let f: CombineFn = Arc::new(|mu: &[f64]| vec![mu[0] / mu[1] - mu[2] / mu[3]]);
            let jac: CombineJacFn = Arc::new(|mu: &[f64]| {
                Mat::from_row_slice(
                    1,
                    4,
                    &[
                        1.0 / mu[1],
                        -mu[0] / (mu[1] * mu[1]),
                        -1.0 / mu[3],
                        mu[2] / (mu[3] * mu[3]),
                    ],
                )
            });
            DirectIdentification {
                nuisances: vec![propensity_nuisance()],
                rows: vec![
                    mk_row(true, true),
                    mk_row(false, true),
                    mk_row(true, false),
                    mk_row(false, false),
                ],
                combine: Combiner::Smooth { dim_out: 1, f, jac: Some(jac) },
            }
        }
        AteEstimand::Reg => DirectIdentification {
            nuisances: vec![
                outcome_mean_nuisance(), // 0: E[Y | T, X]
                propensity_nuisance(),   // 1: E[T | X]
                Nuisance {
                    // 2: E[T * outcome-mean | X]
                    name: "treated-mean".into(),
                    block: 2,
                    refs: vec![NuisanceRef::own(0)],
                    integrand: Arc::new(|z: &[f64], i: &[f64]| z[1] * i[0]),
                    partials: Some(vec![Arc::new(|z: &[f64], _i: &[f64]| z[1])]),
                },
                Nuisance {
                    // 3: E[(1 - T) * outcome-mean | X]
                    name: "control-mean".into(),
                    block: 2,
                    refs: vec![NuisanceRef::own(0)],
                    integrand: Arc::new(|z: &[f64], i: &[f64]| (1.0 - z[1]) * i[0]),
                    partials: Some(vec![Arc::new(|z: &[f64], _i: &[f64]| 1.0 - z[1])]),
                },
            ],
            rows: vec![InnerRow {
                refs: vec![
                    NuisanceRef::own(1),
                    NuisanceRef::own(2),
                    NuisanceRef::own(3),
                ],
                h: Arc::new(|_z: &[f64], i: &[f64]| {
                    let (p, g1, g0) = (i[0], i[1], i[2]);
                    g1 / p - g0 / (1.0 - p)
                }),
                partials: Some(vec![
                    Arc::new(|_z: &[f64], i: &[f64]| {
                        let (p, g1, g0) = (i[0], i[1], i[2]);
                        -g1 / (p * p) - g0 / ((1.0 - p) * (1.0 - p))
                    }),
                    Arc::new(|_z: &[f64], i: &[f64]| 1.0 / i[0]),
                    Arc::new(|_z: &[f64], i: &[f64]| -1.0 / (1.0 - i[0])),
                ]),
            }],
            combine: Combiner::Identity,
        },
        AteEstimand::Aipw => {
            let at_treated: ArgMapFn = Arc::new(|z: &[f64]| vec![z[0], 1.0]);
            let at_control: ArgMapFn = Arc::new(|z: &[f64]| vec![z[0], 0.0]);
            DirectIdentification {
                nuisances: vec![outcome_mean_nuisance(), propensity_nuisance()],
                rows: vec![InnerRow {
                    refs: vec![
                        NuisanceRef::own(1),
                        NuisanceRef::at(0, at_treated),
                        NuisanceRef::at(0, at_control),
                    ],
                    h: Arc::new(|z: &[f64], i: &[f64]| {
                        let (t, y) = (z[1], z[2]);
                        let (p, m1, m0) = (i[0], i[1], i[2]);
                        t / p * (y - m1) - (1.0 - t) / (1.0 - p) * (y - m0) + m1 - m0
                    }),
                    partials: Some(vec![
                        Arc::new(|z: &[f64], i: &[f64]| {
                            let (t, y) = (z[1], z[2]);
                            let (p, m1, m0) = (i[0], i[1], i[2]);
                            -t * (y - m1) / (p * p)
                                - (1.0 - t) * (y - m0) / ((1.0 - p) * (1.0 - p))
                        }),
                        Arc::new(|z: &[f64], i: &[f64]| 1.0 - z[1] / i[0]),
                        Arc::new(|z: &[f64], i: &[f64]| (1.0 - z[1]) / (1.0 - i[0]) - 1.0),
                    ]),
                }],
                combine: Combiner::Identity,
            }
        }
    }
}

/// One quartet member evaluated on an arbitrary observed (x, t, y) law:
/// the nuisances are whatever the law implies, the truth is the solved
/// value, and the influence table lives on the observed support.
pub fn ate_scenario_on_law(
    which: AteEstimand,
    dist: DiscreteDistribution,
) -> Result<EstimandScenario> {
    if dist.dim() != 3 || dist.blocks.len() != 3 {
        return Err(Error::invalid("treatment-effect laws carry three scalar blocks"));
    }
    if dist.support.iter().any(|z| z[1] != 0.0 && z[1] != 1.0) {
        return Err(Error::Domain("treatment indicator must be binary".into()));
    }
    let ident = ate_direct_identification(which);
    let ev = eval_direct(&ident, &dist)?;
    let breakdown = if_multistep_direct(&ident, &dist, None)?;
    Ok(EstimandScenario {
        name: which.label().into(),
        truth: ev.beta,
        functional: Arc::new(DirectFunctional { ident: ident.clone(), dim: 1 }),
        kind: ScenarioKind::Direct(ident),
        analytic: breakdown.total,
        expected_if: None,
        dist,
    })
}

/// Builds the quartet of scenarios over one process; all four share the
/// same truth and, by the equivalence results, the same influence table.
pub fn ate_quartet(dgp: &AteDgp) -> Result<Vec<EstimandScenario>> {
    let dist = dgp.joint()?;
    let tau = dgp.truth();
    let expected_values: Vec<Vec<f64>> = dist
        .support
        .iter()
        .map(|z| vec![dgp.augmented_h(z) - tau])
        .collect();
    let expected = InfluenceTable::new(expected_values, &dist.mass, 1e-10)?;
    let mut out = Vec::with_capacity(4);
    for which in [
        AteEstimand::Ipw,
        AteEstimand::Nipw,
        AteEstimand::Reg,
        AteEstimand::Aipw,
    ] {
        let ident = ate_direct_identification(which);
        let breakdown = if_multistep_direct(&ident, &dist, None)?;
        out.push(EstimandScenario {
            name: which.label().into(),
            truth: vec![tau],
            functional: Arc::new(DirectFunctional { ident: ident.clone(), dim: 1 }),
            kind: ScenarioKind::Direct(ident),
            analytic: breakdown.total,
            expected_if: Some(expected.clone()),
            dist: dist.clone(),
        });
    }
    Ok(out)
}

/// Finite-dimensional moment encoding of a quartet member with the
/// propensity table as the only nuisance: each cell probability is
/// identified by its own cell moment. The augmented variant carries the
/// true outcome means inside the beta moment, which is what makes it
/// insensitive to the propensity.
pub fn ate_moment_model(dgp: &AteDgp, which: AteEstimand) -> Result<(MomentModel, Vec<f64>)> {
    if matches!(which, AteEstimand::Nipw | AteEstimand::Reg) {
        return Err(Error::invalid(
            "moment encodings are built for the weighting and augmented forms",
        ));
    }
    dgp.validate()?;
    let xs = Arc::new(dgp.x_support.clone());
    let k = xs.len();
    let aug = matches!(which, AteEstimand::Aipw);
    let tau1 = Arc::new(dgp.tau1.clone());
    let tau0 = Arc::new(dgp.tau0.clone());

    let (xs_b, m1_b, m0_b) = (xs.clone(), tau1.clone(), tau0.clone());
    let m_beta: crate::moments::MomentFn = Arc::new(move |z: &[f64], b: &[f64], g: &[f64]| {
        let xi = xs_b.iter().position(|&x| x == z[0]).expect("off-support x");
        let (t, y) = (z[1], z[2]);
        let p = g[xi];
        let h = if aug {
            let (m1, m0) = (m1_b[xi], m0_b[xi]);
            t / p * (y - m1) - (1.0 - t) / (1.0 - p) * (y - m0) + m1 - m0
        } else {
            t * y / p - (1.0 - t) * y / (1.0 - p)
        };
        vec![h - b[0]]
    });
    let xs_g = xs.clone();
    let m_gamma: crate::moments::MomentFn = Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
        let xi = xs_g.iter().position(|&x| x == z[0]).expect("off-support x");
        let mut rows = vec![0.0; xs_g.len()];
        rows[xi] = z[1] - g[xi];
        rows
    });
    let (xs_j, m1_j, m0_j) = (xs.clone(), tau1.clone(), tau0.clone());
    let analytic = AnalyticJacobians {
        db_dbeta: Arc::new(|_z, _b, _g| Mat::from_element(1, 1, -1.0)),
        db_dgamma: Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
            let xi = xs_j.iter().position(|&x| x == z[0]).expect("off-support x");
            let (t, y) = (z[1], z[2]);
            let p = g[xi];
            let dh = if aug {
                let (m1, m0) = (m1_j[xi], m0_j[xi]);
                -t * (y - m1) / (p * p) - (1.0 - t) * (y - m0) / ((1.0 - p) * (1.0 - p))
            } else {
                -t * y / (p * p) - (1.0 - t) * y / ((1.0 - p) * (1.0 - p))
            };
            Mat::from_fn(1, xs_j.len(), |_, j| if j == xi { dh } else { 0.0 })
        }),
        dg_dbeta: Arc::new(move |_z: &[f64], _b: &[f64], g: &[f64]| Mat::zeros(g.len(), 1)),
        dg_dgamma: {
            let xs_d = xs.clone();
            Arc::new(move |z: &[f64], _b: &[f64], _g: &[f64]| {
                let xi = xs_d.iter().position(|&x| x == z[0]).expect("off-support x");
                Mat::from_fn(xs_d.len(), xs_d.len(), |i, j| {
                    if i == xi && j == xi {
                        -1.0
                    } else {
                        0.0
                    }
                })
            })
        },
    };
    let model = MomentModel {
        partition: ParamPartition {
            d_beta: 1,
            d_gamma: k,
            gamma_layout: vec![GammaSpec { name: "propensity".into(), dim: k, block: 2 }],
        },
        d_m_beta: 1,
        d_m_gamma: k,
        m_beta,
        m_gamma,
        analytic: Some(analytic),
        diff_beta: vec![Differentiability::Classical],
        diff_gamma: vec![Differentiability::Classical; k],
        generalized_step: None,
        gamma_direct: true,
        beta_direct: true,
    };
    let mut nu = vec![dgp.truth()];
    nu.extend(&dgp.propensity);
    Ok((model, nu))
}

/// Just-identified encoding with the full nuisance stack: per-cell
/// propensities and both per-cell outcome means, each with its own cell
/// moment, plus the augmented beta moment reading all of them.
pub fn ate_full_nuisance_model(dgp: &AteDgp) -> Result<(MomentModel, Vec<f64>)> {
    dgp.validate()?;
    let xs = Arc::new(dgp.x_support.clone());
    let k = xs.len();
    let d_gamma = 3 * k;
    let xs_b = xs.clone();
    let m_beta: crate::moments::MomentFn = Arc::new(move |z: &[f64], b: &[f64], g: &[f64]| {
        let k = xs_b.len();
        let xi = xs_b.iter().position(|&x| x == z[0]).expect("off-support x");
        let (t, y) = (z[1], z[2]);
        let (p, m1, m0) = (g[xi], g[k + xi], g[2 * k + xi]);
        vec![t / p * (y - m1) - (1.0 - t) / (1.0 - p) * (y - m0) + m1 - m0 - b[0]]
    });
    let xs_g = xs.clone();
    let m_gamma: crate::moments::MomentFn = Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
        let k = xs_g.len();
        let xi = xs_g.iter().position(|&x| x == z[0]).expect("off-support x");
        let (t, y) = (z[1], z[2]);
        let mut rows = vec![0.0; 3 * k];
        rows[xi] = t - g[xi];
        rows[k + xi] = t * (y - g[k + xi]);
        rows[2 * k + xi] = (1.0 - t) * (y - g[2 * k + xi]);
        rows
    });
    let model = MomentModel {
        partition: ParamPartition {
            d_beta: 1,
            d_gamma,
            gamma_layout: vec![
                GammaSpec { name: "propensity".into(), dim: k, block: 2 },
                GammaSpec { name: "treated-outcome".into(), dim: k, block: 3 },
                GammaSpec { name: "control-outcome".into(), dim: k, block: 3 },
            ],
        },
        d_m_beta: 1,
        d_m_gamma: d_gamma,
        m_beta,
        m_gamma,
        analytic: None,
        diff_beta: vec![Differentiability::Classical],
        diff_gamma: vec![Differentiability::Classical; d_gamma],
        generalized_step: None,
        gamma_direct: false,
        beta_direct: true,
    };
    let mut nu = vec![dgp.truth()];
    nu.extend(&dgp.propensity);
    nu.extend(&dgp.tau1);
    nu.extend(&dgp.tau0);
    Ok((model, nu))
}

/// Instrumental-variable process: instruments `W` with an intercept,
/// first-stage coefficients, a scalar effect, and independent mean-zero
/// shocks with instrument-dependent second-stage variance.
#[derive(Debug, Clone)]
pub struct IvDgp {
    /// Support of the instrument vector (dimension >= 2).
    pub w_support: Vec<Vec<f64>>,
    pub w_mass: Vec<f64>,
    pub gamma_true: Vec<f64>,
    pub beta_true: f64,
    /// Values/masses of the structural shock (mean zero).
    pub u_law: Vec<(f64, f64)>,
    /// Values/masses of the first-stage shock before scaling (mean zero,
    /// independent of the structural shock).
    pub e_law: Vec<(f64, f64)>,
    /// First-stage shock scale per instrument point; squared times the
    /// base variance gives the conditional variance.
    pub e_scale: Vec<f64>,
}

impl IvDgp {
    pub fn d_w(&self) -> usize {
        self.w_support[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_support.is_empty() || self.d_w() < 2 {
            return Err(Error::Construction("instruments need dimension >= 2".into()));
        }
        if self.w_mass.len() != self.w_support.len()
            || self.e_scale.len() != self.w_support.len()
            || self.gamma_true.len() != self.d_w()
        {
            return Err(Error::Construction("misaligned instrument tables".into()));
        }
        for law in [&self.u_law, &self.e_law] {
            let mean: f64 = law.iter().map(|(v, m)| v * m).sum();
            if mean.abs() > 1e-12 {
                return Err(Error::Construction("shock laws must be mean zero".into()));
            }
        }
        // full-rank instrument second moment
        let d = self.d_w();
        let mut eww = Mat::zeros(d, d);
        for (w, &m) in self.w_support.iter().zip(&self.w_mass) {
            for i in 0..d {
                for j in 0..d {
                    eww[(i, j)] += m * w[i] * w[j];
                }
            }
        }
        if matrix::rank(&eww, DEFAULT_RANK_TOL) < d {
            return Err(Error::Identification("E[W W'] is singular".into()));
        }
        Ok(())
    }

    /// Base variance of the first-stage shock.
    pub fn e_var(&self) -> f64 {
        self.e_law.iter().map(|(v, m)| v * v * m).sum()
    }

    /// Conditional second-stage variance at instrument point `i`.
    pub fn v22(&self, i: usize) -> f64 {
        self.e_scale[i] * self.e_scale[i] * self.e_var()
    }

    /// Joint law of (W, Y1, Y2): blocks W then the outcome pair.
    pub fn joint(&self) -> Result<DiscreteDistribution> {
        self.validate()?;
        let d = self.d_w();
        let blocks = VariableBlocks::new(vec![d, 2], vec!["w".into(), "y".into()])?;
        let mut support = Vec::new();
        let mut mass = Vec::new();
        for (i, (w, &mw)) in self.w_support.iter().zip(&self.w_mass).enumerate() {
            let wg: f64 = w.iter().zip(&self.gamma_true).map(|(a, b)| a * b).sum();
            for &(u, mu) in &self.u_law {
                for &(e, me) in &self.e_law {
                    let y2 = wg + self.e_scale[i] * e;
                    let y1 = y2 * self.beta_true + u;
                    let mut z = w.clone();
                    z.push(y1);
                    z.push(y2);
                    support.push(z);
                    mass.push(mw * mu * me);
                }
            }
        }
        DiscreteDistribution::new(support, mass, blocks)
    }
}

/// Canonical instrumental-variable process with a heteroskedastic first
/// stage.
pub fn canonical_iv() -> IvDgp {
    IvDgp {
        w_support: vec![vec![1.0, -1.0], vec![1.0, 0.5], vec![1.0, 2.0]],
        w_mass: vec![0.3, 0.4, 0.3],
        gamma_true: vec![0.5, 1.0],
        beta_true: 0.7,
        u_law: vec![(-1.0, 0.5), (1.0, 0.5)],
        e_law: vec![(-1.0, 0.5), (1.0, 0.5)],
        e_scale: vec![0.6, 1.0, 1.6],
    }
}

/// Same process with a constant first-stage variance.
pub fn homoskedastic_iv() -> IvDgp {
    let mut dgp = canonical_iv();
    dgp.e_scale = vec![1.0; dgp.w_support.len()];
    dgp
}

/// First-step weighting choice for the instrumental-variable model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IvWeighting {
    /// Plain instrument moments for the first stage.
    Unconditional,
    /// First-stage moments weighted by the inverse conditional variance.
    Gls,
}

/// Moment model of the instrumental-variable system; the beta rows use the
/// reduced form so the first stage never depends on beta.
pub fn iv_moment_model(dgp: &IvDgp, weighting: IvWeighting) -> Result<(MomentModel, Vec<f64>)> {
    dgp.validate()?;
    let d = dgp.d_w();
    let w_support = Arc::new(dgp.w_support.clone());
    let v22: Arc<Vec<f64>> = Arc::new((0..w_support.len()).map(|i| dgp.v22(i)).collect());
    let ws = w_support.clone();
    let vv = v22.clone();
    let weight_of = Arc::new(move |w: &[f64]| -> f64 {
        match weighting {
            IvWeighting::Unconditional => 1.0,
            IvWeighting::Gls => {
                let i = ws
                    .iter()
                    .position(|s| s.iter().zip(w).all(|(a, b)| a == b))
                    .expect("off-support instrument point");
                1.0 / vv[i]
            }
        }
    });
    let m_beta: crate::moments::MomentFn = Arc::new(move |z: &[f64], b: &[f64], g: &[f64]| {
        let (w, y) = z.split_at(g.len());
        let wg: f64 = w.iter().zip(g).map(|(a, c)| a * c).sum();
        let e1 = y[0] - wg * b[0];
        w.iter().map(|&wk| wk * e1).collect()
    });
    let wfn = weight_of.clone();
    let m_gamma: crate::moments::MomentFn = Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
        let (w, y) = z.split_at(g.len());
        let wg: f64 = w.iter().zip(g).map(|(a, c)| a * c).sum();
        let e2 = y[1] - wg;
        let weight = wfn(w);
        w.iter().map(|&wk| wk * e2 * weight).collect()
    });
    let d_w = d;
    let wfn2 = weight_of.clone();
    let analytic = AnalyticJacobians {
        db_dbeta: Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
            let (w, _) = z.split_at(g.len());
            let wg: f64 = w.iter().zip(g).map(|(a, c)| a * c).sum();
            Mat::from_fn(w.len(), 1, |i, _| -w[i] * wg)
        }),
        db_dgamma: Arc::new(move |z: &[f64], b: &[f64], g: &[f64]| {
            let (w, _) = z.split_at(g.len());
            Mat::from_fn(w.len(), w.len(), |i, j| -b[0] * w[i] * w[j])
        }),
        dg_dbeta: Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
            let (w, _) = z.split_at(g.len());
            Mat::zeros(w.len(), 1)
        }),
        dg_dgamma: Arc::new(move |z: &[f64], _b: &[f64], g: &[f64]| {
            let (w, _) = z.split_at(g.len());
            let weight = wfn2(w);
            Mat::from_fn(w.len(), w.len(), |i, j| -w[i] * w[j] * weight)
        }),
    };
    let model = MomentModel {
        partition: ParamPartition {
            d_beta: 1,
            d_gamma: d,
            gamma_layout: vec![GammaSpec { name: "first-stage".into(), dim: d, block: 0 }],
        },
        d_m_beta: d_w,
        d_m_gamma: d_w,
        m_beta,
        m_gamma,
        analytic: Some(analytic),
        diff_beta: vec![Differentiability::Classical; d_w],
        diff_gamma: vec![Differentiability::Classical; d_w],
        generalized_step: None,
        gamma_direct: false,
        beta_direct: false,
    };
    let mut nu = vec![dgp.beta_true];
    nu.extend(&dgp.gamma_true);
    Ok((model, nu))
}

/// Instrumental-variable scenario with the stated first-step weighting.
/// The analytic table is the joint influence function under the optimal
/// frozen weighting of the stacked moment.
pub fn iv_scenario(dgp: &IvDgp, weighting: IvWeighting) -> Result<EstimandScenario> {
    let (model, nu) = iv_moment_model(dgp, weighting)?;
    let dist = dgp.joint()?;
    let (v_bb, v_bg, v_gg) = crate::moments::covariance_blocks(&model, &dist, &nu)?;
    let d_m = model.d_m();
    let mut v = Mat::zeros(d_m, d_m);
    let mb = model.d_m_beta;
    v.view_mut((0, 0), (mb, mb)).copy_from(v_bb.mat());
    v.view_mut((0, mb), (mb, d_m - mb)).copy_from(&v_bg);
    v.view_mut((mb, 0), (d_m - mb, mb)).copy_from(&v_bg.transpose());
    v.view_mut((mb, mb), (d_m - mb, d_m - mb)).copy_from(v_gg.mat());
    let xi = matrix::pinv(&v, DEFAULT_RANK_TOL)?;
    let analytic = if_joint(&model, &dist, &nu, &PsdMatrix::new(xi.clone(), 1e-7, 1e-7)?)?;
    let name = match weighting {
        IvWeighting::Unconditional => "iv-unconditional",
        IvWeighting::Gls => "iv-gls",
    };
    Ok(EstimandScenario {
        name: name.into(),
        truth: nu.clone(),
        functional: Arc::new(MomentFunctional { model: model.clone(), xi: xi.clone(), init: nu }),
        kind: ScenarioKind::Moment { model, xi, score: None },
        analytic,
        expected_if: None,
        dist,
    })
}

/// Counterexample with a scalar nuisance identified by two imperfectly
/// correlated moment rows (covariance rank 2 > 1). The beta moment
/// correlates with the nuisance moments yet the one-step condition holds
/// by construction, so the robust and efficient corrections genuinely
/// differ.
pub fn rank_overidentified_fixture() -> Result<(MomentModel, DiscreteDistribution, Vec<f64>)> {
    // z1 = 1 + a, z2 = 1 + 0.5 a + b, z3 = z1 - z2 + e with independent
    // shocks a, b, e chosen so cov(z3, (z1 - 1, z2 - 1)) is orthogonal to
    // V_gg^{-1} 1, which is what the condition needs.
    let mut support = Vec::new();
    let mut mass = Vec::new();
    let root = 1.75f64.sqrt();
    for &a in &[-1.0, 1.0] {
        for &b in &[-root, root] {
            for &e in &[-0.5, 0.5] {
                let z1 = 1.0 + a;
                let z2 = 1.0 + 0.5 * a + b;
                let z3 = z1 - z2 + e;
                support.push(vec![z1, z2, z3]);
                mass.push(0.125);
            }
        }
    }
    let dist = DiscreteDistribution::new(support, mass, VariableBlocks::scalar_blocks(3))?;
    let model = MomentModel {
        partition: ParamPartition::new(1, 1),
        d_m_beta: 1,
        d_m_gamma: 2,
        m_beta: Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![z[2] - b[0]]),
        m_gamma: Arc::new(|z: &[f64], _b: &[f64], g: &[f64]| vec![z[0] - g[0], z[1] - g[0]]),
        analytic: None,
        diff_beta: vec![Differentiability::Classical],
        diff_gamma: vec![Differentiability::Classical; 2],
        generalized_step: None,
        gamma_direct: false,
        beta_direct: true,
    };
    let beta = dist.expect_scalar(|z| z[2])?;
    Ok((model, dist, vec![beta, 1.0]))
}

/// Counterexample violating the one-step condition: the beta moment moves
/// with the nuisance while barely correlating with the nuisance moment.
pub fn one_step_counterexample() -> Result<(MomentModel, DiscreteDistribution, Vec<f64>)> {
    let dist = DiscreteDistribution::new(
        vec![
            vec![0.0, 1.0],
            vec![1.0, 1.0],
            vec![0.0, 3.0],
            vec![2.0, 3.0],
        ],
        vec![0.2, 0.3, 0.1, 0.4],
        VariableBlocks::scalar_blocks(2),
    )?;
    let model = MomentModel {
        partition: ParamPartition::new(1, 1),
        d_m_beta: 1,
        d_m_gamma: 1,
        m_beta: Arc::new(|z: &[f64], b: &[f64], g: &[f64]| vec![z[0] + g[0] * z[1] - b[0]]),
        m_gamma: Arc::new(|z: &[f64], _b: &[f64], g: &[f64]| vec![z[1] - g[0]]),
        analytic: None,
        diff_beta: vec![Differentiability::Classical],
        diff_gamma: vec![Differentiability::Classical],
        generalized_step: None,
        gamma_direct: true,
        beta_direct: false,
    };
    let gamma = dist.expect_scalar(|z| z[1])?;
    let beta = dist.expect_scalar(|z| z[0])? + gamma * gamma;
    Ok((model, dist, vec![beta, gamma]))
}

/// Moment systems with the true score attached, for bound comparisons.
pub fn score_equipped_fixtures(
) -> Result<Vec<(String, MomentModel, DiscreteDistribution, Vec<f64>, ScoreModel)>> {
    let mut out = Vec::new();

    // a single success probability with its likelihood score
    let pi = 0.35;
    let bern = DiscreteDistribution::scalar_with_mass(&[0.0, 1.0], &[1.0 - pi, pi])?;
    let bern_model = crate::moments::beta_only_model(
        1,
        1,
        Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![b[0] - z[0]]),
        vec![Differentiability::Classical],
        None,
    );
    let bern_score = ScoreModel {
        score: Arc::new(|z: &[f64], nu: &[f64]| {
            vec![(z[0] - nu[0]) / (nu[0] * (1.0 - nu[0]))]
        }),
        d_beta: 1,
    };
    out.push(("bernoulli".to_string(), bern_model, bern, vec![pi], bern_score));

    // per-cell success probabilities with indicator scores, still spanned
    let xs = [0.0, 1.0];
    let px = [0.45, 0.55];
    let pis = [0.3, 0.6];
    let mut support = Vec::new();
    let mut mass = Vec::new();
    for (x, (pxm, p)) in xs.iter().zip(px.iter().zip(&pis)) {
        support.push(vec![*x, 0.0]);
        mass.push(pxm * (1.0 - p));
        support.push(vec![*x, 1.0]);
        mass.push(pxm * p);
    }
    let cells = DiscreteDistribution::new(
        support,
        mass,
        VariableBlocks::new(vec![1, 1], vec!["x".into(), "t".into()])?,
    )?;
    let xs_m = xs.to_vec();
    let cell_model = crate::moments::beta_only_model(
        2,
        2,
        Arc::new(move |z: &[f64], b: &[f64], _g: &[f64]| {
            let xi = xs_m.iter().position(|&x| x == z[0]).unwrap();
            let mut rows = vec![0.0; 2];
            rows[xi] = b[xi] - z[1];
            rows
        }),
        vec![Differentiability::Classical; 2],
        None,
    );
    let xs_s = xs.to_vec();
    let cell_score = ScoreModel {
        score: Arc::new(move |z: &[f64], nu: &[f64]| {
            let xi = xs_s.iter().position(|&x| x == z[0]).unwrap();
            let mut s = vec![0.0; 2];
            s[xi] = (z[1] - nu[xi]) / (nu[xi] * (1.0 - nu[xi]));
            s
        }),
        d_beta: 2,
    };
    out.push(("cell-probabilities".to_string(), cell_model, cells, pis.to_vec(), cell_score));

    // mean with a tilted score outside the moment span: a strict gap
    let law = DiscreteDistribution::scalar_with_mass(&[1.0, 2.0, 3.0], &[0.2, 0.3, 0.5])?;
    let mean = law.expect_scalar(|z| z[0])?;
    let var = law.expect_scalar(|z| (z[0] - mean) * (z[0] - mean))?;
    let m3 = law.expect_scalar(|z| (z[0] - mean).powi(3))?;
    let b = 0.8;
    let a = (1.0 - b * m3) / var;
    let mean_model = crate::moments::beta_only_model(
        1,
        1,
        Arc::new(|z: &[f64], bb: &[f64], _g: &[f64]| vec![z[0] - bb[0]]),
        vec![Differentiability::Classical],
        None,
    );
    let tilt_score = ScoreModel {
        score: Arc::new(move |z: &[f64], _nu: &[f64]| {
            let d = z[0] - mean;
            vec![a * d + b * (d * d - var)]
        }),
        d_beta: 1,
    };
    out.push(("tilted-mean".to_string(), mean_model, law, vec![mean], tilt_score));
    Ok(out)
}

/// Kernel-regression scenario at a query point: the smoothed value, its
/// localized influence table, and the bandwidth-rescaled variance whose
/// limit is `var(Y|x) / f(x)` times the squared-kernel integral.
pub struct NwScenario {
    pub estimate: f64,
    pub table: crate::influence::InfluenceTable,
    pub rescaled_variance: f64,
}

pub fn nw_scenario(
    sample: &crate::dist::EmpiricalSample,
    spec: &crate::dist::KernelSpec,
    point: &[f64],
) -> Result<NwScenario> {
    let out = crate::influence::if_nonparametric(
        spec,
        sample,
        crate::influence::NonparametricTarget::Regression,
        point,
    )?;
    Ok(NwScenario {
        estimate: out.estimate,
        table: out.table,
        rescaled_variance: out.rescaled_variance,
    })
}

/// Uniform grid of `n` cell midpoints tiling [lo, hi].
pub fn uniform_grid_law(lo: f64, hi: f64, n: usize) -> Result<DiscreteDistribution> {
    let delta = (hi - lo) / n as f64;
    let pts: Vec<f64> = (0..n).map(|k| lo + (k as f64 + 0.5) * delta).collect();
    DiscreteDistribution::uniform_scalar(&pts)
}

/// Symmetric discretization of the standard normal on cell midpoints.
pub fn discretized_normal_law(half_cells: usize, delta: f64) -> Result<DiscreteDistribution> {
    let mut pts = Vec::new();
    let mut mass = Vec::new();
    for k in 0..half_cells {
        let z = (k as f64 + 0.5) * delta;
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        pts.push(z);
        mass.push(phi);
        pts.push(-z);
        mass.push(phi);
    }
    let total: f64 = mass.iter().sum();
    for m in mass.iter_mut() {
        *m /= total;
    }
    DiscreteDistribution::scalar_with_mass(&pts, &mass)
}

/// Names of the built-in scenarios addressable from configuration.
pub const SCENARIO_NAMES: &[&str] = &[
    "mean",
    "quantile-25",
    "quantile-50",
    "quantile-90",
    "quantile-normal-50",
    "avg-density",
    "ate-ipw",
    "ate-nipw",
    "ate-reg",
    "ate-aipw",
    "iv-unconditional",
    "iv-gls",
];

/// Builds a named scenario on its canonical process.
pub fn build_scenario(name: &str) -> Result<EstimandScenario> {
    match name {
        "mean" => mean_scenario(DiscreteDistribution::scalar_with_mass(
            &[0.0, 1.0, 2.0, 4.0],
            &[0.2, 0.3, 0.3, 0.2],
        )?),
        "quantile-25" => quantile_scenario(0.25, uniform_grid_law(0.0, 1.0, 20)?),
        "quantile-50" => quantile_scenario(0.5, uniform_grid_law(0.0, 1.0, 20)?),
        "quantile-90" => quantile_scenario(0.9, uniform_grid_law(0.0, 1.0, 20)?),
        "quantile-normal-50" => quantile_scenario(0.5, discretized_normal_law(12, 0.25)?),
        "avg-density" => avg_density_scenario(DiscreteDistribution::scalar_with_mass(
            &[0.0, 1.0, 2.0],
            &[0.5, 0.3, 0.2],
        )?),
        "ate-ipw" | "ate-nipw" | "ate-reg" | "ate-aipw" => {
            let quartet = ate_quartet(&canonical_ate())?;
            quartet
                .into_iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::invalid("quartet member missing"))
        }
        "iv-unconditional" => iv_scenario(&canonical_iv(), IvWeighting::Unconditional),
        "iv-gls" => iv_scenario(&canonical_iv(), IvWeighting::Gls),
        other => Err(Error::invalid(format!(
            "unknown scenario '{other}'; known: {SCENARIO_NAMES:?}"
        ))),
    }
}

//! Closed-form influence functions: the joint (one-step) form, the
//! sequential two-step form, the multi-step direct and moment-based forms
//! over conditional-measure nuisance graphs, the locally robust and
//! efficient corrected moments, and kernel-localized nonparametric
//! influence functions.

use std::sync::Arc;

use serde::Serialize;

use crate::dist::{DiscreteDistribution, EmpiricalSample, KernelSpec};
use crate::error::{Error, Result};
use crate::ident::{
    eval_direct, gamma_dots, mean_sensitivities, nuisance_field, row_values, CondMomentModel,
    DirectIdentification, GraphContext,
};
use crate::matrix::{self, BlockSystem, Mat, PsdMatrix, Vector, DEFAULT_RANK_TOL};
use crate::moments::{jacobian_blocks, MomentFn, MomentModel};

/// Default bound on the weighted mean of an influence table.
pub const MEAN_TOL: f64 = 1e-10;

/// Per-support-point influence values with a zero-mean certificate.
#[derive(Debug, Clone, Serialize)]
pub struct InfluenceTable {
    pub values: Vec<Vec<f64>>,
    pub dim: usize,
    /// Largest absolute coordinate of the weighted mean.
    pub mean_certificate: f64,
}

impl InfluenceTable {
    pub fn new(values: Vec<Vec<f64>>, weights: &[f64], tol: f64) -> Result<Self> {
        if values.is_empty() || values.len() != weights.len() {
            return Err(Error::invalid("influence values misaligned with weights"));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("influence rows have uneven width"));
        }
        if values.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("influence values must be finite"));
        }
        let mut mean = vec![0.0; dim];
        for (v, &w) in values.iter().zip(weights) {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += w * x;
            }
        }
        let cert = mean.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        if cert > tol {
            return Err(Error::Construction(format!(
                "influence table mean {cert:.3e} exceeds tolerance {tol:.3e}"
            )));
        }
        Ok(InfluenceTable { values, dim, mean_certificate: cert })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0_f64, |a, x| a.max(x.abs()))
    }

    /// Largest absolute pointwise difference against another table.
    pub fn max_diff(&self, other: &InfluenceTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()))
    }

    /// Weighted covariance matrix of the table values.
    pub fn covariance(&self, weights: &[f64]) -> Mat {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for (v, &w) in self.values.iter().zip(weights) {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += w * x;
            }
        }
        let mut cov = Mat::zeros(d, d);
        for (v, &w) in self.values.iter().zip(weights) {
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += w * (v[i] - mean[i]) * (v[j] - mean[j]);
                }
            }
        }
        cov
    }
}

/// CSV rendering of a table over the support of a law: block coordinates,
/// mass, then influence coordinates.
pub fn influence_csv(dist: &DiscreteDistribution, table: &InfluenceTable) -> String {
    let mut header: Vec<String> = Vec::new();
    for (dim, name) in dist.blocks.dims.iter().zip(&dist.blocks.names) {
        if *dim == 1 {
            header.push(name.clone());
        } else {
            for k in 0..*dim {
                header.push(format!("{name}_{k}"));
            }
        }
    }
    header.push("mass".into());
    for k in 0..table.dim {
        header.push(format!("if_{k}"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for ((z, m), v) in dist.support.iter().zip(&dist.mass).zip(&table.values) {
        let mut row: Vec<String> = z.iter().map(|x| format!("{x}")).collect();
        row.push(format!("{m}"));
        row.extend(v.iter().map(|x| format!("{x}")));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Corrected moment functions built from a base model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectedKind {
    LocallyRobust,
    Efficient,
}

#[derive(Clone)]
pub struct CorrectedMoment {
    pub kind: CorrectedKind,
    /// `(z, beta, gamma) -> corrected beta-moment`.
    pub values_fn: MomentFn,
    /// The linear coefficient applied to `m_gamma`.
    pub coefficient: Mat,
    pub description: String,
}

fn weighted_values(
    dist: &DiscreteDistribution,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    dist.support.iter().map(|z| f(z)).collect()
}

/// Joint influence function of the stacked parameter:
/// `nu_dot(z) = -(J' Xi J)^{-1} J' Xi m(z)` with `J = E[dm/dnu]`.
pub fn if_joint(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    xi: &PsdMatrix,
) -> Result<InfluenceTable> {
    if xi.dim() != model.d_m() {
        return Err(Error::DimensionMismatch("xi must match the stacked moment".into()));
    }
    let (a, b, c, d) = jacobian_blocks(model, dist, nu_hat)?;
    let p = &model.partition;
    let mut jac = Mat::zeros(model.d_m(), p.d_nu());
    jac.view_mut((0, 0), a.shape()).copy_from(&a);
    jac.view_mut((0, p.d_beta), b.shape()).copy_from(&b);
    jac.view_mut((model.d_m_beta, 0), c.shape()).copy_from(&c);
    jac.view_mut((model.d_m_beta, p.d_beta), d.shape()).copy_from(&d);

    let h = jac.transpose() * xi.mat() * &jac;
    if matrix::rank(&h, DEFAULT_RANK_TOL) < p.d_nu() {
        return Err(Error::Precondition(
            "J' Xi J is singular; the joint influence function is undefined".into(),
        ));
    }
    let normalizer = -matrix::pinv(&h, DEFAULT_RANK_TOL)? * jac.transpose() * xi.mat();
    // P[d nu_dot / d nu] = -I holds by construction; certify numerically
    let check = &normalizer * &jac + Mat::identity(p.d_nu(), p.d_nu());
    if matrix::max_abs(&check) > 1e-6 {
        return Err(Error::Construction(format!(
            "P[d nu_dot/d nu] deviates from -I by {:.3e}",
            matrix::max_abs(&check)
        )));
    }
    let values = weighted_values(dist, |z| {
        let m = Vector::from_vec(model.m_full(z, nu_hat));
        (&normalizer * m).iter().cloned().collect()
    });
    InfluenceTable::new(values, &dist.mass, MEAN_TOL)
}

/// Tolerance on the cross-Jacobian for the sequential split.
pub const TWO_STEP_STRUCTURE_TOL: f64 = 1e-8;

/// Sequential influence functions: the nuisance step from `m_gamma` alone,
/// then the beta step from the robust-corrected beta moment.
pub fn if_two_step(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    xi_bb: &PsdMatrix,
    xi_gg: &PsdMatrix,
) -> Result<(InfluenceTable, InfluenceTable)> {
    let (b_bb, b_bg, g_gb, g_gg) = jacobian_blocks(model, dist, nu_hat)?;
    let cross = matrix::max_abs(&g_gb);
    if cross > TWO_STEP_STRUCTURE_TOL {
        return Err(Error::Structure(format!(
            "E[dm_gamma/dbeta] has magnitude {cross:.3e}; a sequential split needs 0"
        )));
    }
    let hg = g_gg.transpose() * xi_gg.mat() * &g_gg;
    if matrix::rank(&hg, DEFAULT_RANK_TOL) < model.partition.d_gamma {
        return Err(Error::Precondition("gamma normalizer is singular".into()));
    }
    let gamma_norm = -matrix::pinv(&hg, DEFAULT_RANK_TOL)? * g_gg.transpose() * xi_gg.mat();
    let hb = b_bb.transpose() * xi_bb.mat() * &b_bb;
    if matrix::rank(&hb, DEFAULT_RANK_TOL) < model.partition.d_beta {
        return Err(Error::Precondition("beta normalizer is singular".into()));
    }
    let beta_norm = -matrix::pinv(&hb, DEFAULT_RANK_TOL)? * b_bb.transpose() * xi_bb.mat();

    let (beta, gamma) = model.partition.split(nu_hat);
    let gamma_values = weighted_values(dist, |z| {
        let mg = Vector::from_vec((model.m_gamma)(z, beta, gamma));
        (&gamma_norm * mg).iter().cloned().collect()
    });
    let gamma_table = InfluenceTable::new(gamma_values, &dist.mass, MEAN_TOL)?;
    let beta_values: Vec<Vec<f64>> = dist
        .support
        .iter()
        .zip(&gamma_table.values)
        .map(|(z, gdot)| {
            let mb = Vector::from_vec((model.m_beta)(z, beta, gamma));
            let corrected = mb + &b_bg * Vector::from_column_slice(gdot);
            (&beta_norm * corrected).iter().cloned().collect()
        })
        .collect();
    let beta_table = InfluenceTable::new(beta_values, &dist.mass, MEAN_TOL)?;
    Ok((gamma_table, beta_table))
}

/// Locally robust corrected beta moment
/// `m_lr(z) = m_beta(z) + E[dm_beta/dgamma] gamma_dot(z)`, with the
/// correction realized as a frozen linear map applied to `m_gamma`.
pub fn make_lr_moment(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    xi_gg: &PsdMatrix,
) -> Result<CorrectedMoment> {
    let (_, b_bg, _, g_gg) = jacobian_blocks(model, dist, nu_hat)?;
    let hg = g_gg.transpose() * xi_gg.mat() * &g_gg;
    if matrix::rank(&hg, DEFAULT_RANK_TOL) < model.partition.d_gamma {
        return Err(Error::Precondition("gamma normalizer is singular".into()));
    }
    let gamma_norm = -matrix::pinv(&hg, DEFAULT_RANK_TOL)? * g_gg.transpose() * xi_gg.mat();
    let coef = &b_bg * gamma_norm;
    let m_beta = model.m_beta.clone();
    let m_gamma = model.m_gamma.clone();
    let coef_arc = coef.clone();
    let values_fn: MomentFn = Arc::new(move |z, beta, gamma| {
        let mb = Vector::from_vec(m_beta(z, beta, gamma));
        let mg = Vector::from_vec(m_gamma(z, beta, gamma));
        (mb + &coef_arc * mg).iter().cloned().collect()
    });
    let corrected = CorrectedMoment {
        kind: CorrectedKind::LocallyRobust,
        values_fn,
        coefficient: coef,
        description: "beta moment plus nuisance influence adjustment".into(),
    };
    // certify E[d m_lr / d gamma] = 0 by finite differences in gamma
    let (beta, gamma) = model.partition.split(nu_hat);
    let mut worst = 0.0_f64;
    for k in 0..model.partition.d_gamma {
        let h = f64::EPSILON.cbrt() * gamma[k].abs().max(1.0);
        let xp = gamma[k] + h;
        let xm = gamma[k] - h;
        let mut gp = gamma.to_vec();
        gp[k] = xp;
        let mut gm = gamma.to_vec();
        gm[k] = xm;
        let col = dist.expect(|z| {
            let a = (corrected.values_fn)(z, beta, &gp);
            let b = (corrected.values_fn)(z, beta, &gm);
            a.iter().zip(b).map(|(x, y)| (x - y) / (xp - xm)).collect()
        })?;
        worst = worst.max(col.iter().fold(0.0_f64, |a, x| a.max(x.abs())));
    }
    if worst > 1e-6 {
        return Err(Error::Construction(format!(
            "corrected moment still moves with gamma: derivative norm {worst:.3e}"
        )));
    }
    Ok(corrected)
}

/// Efficient beta moment `m_eff = m_beta - V_bg V_gg^+ m_gamma`, the
/// residual of the projection of `m_beta` on the span of `m_gamma`.
pub fn make_eff_moment(
    sys: &BlockSystem,
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
) -> Result<CorrectedMoment> {
    sys.validate()?;
    let coef = if sys.d_mg() == 0 {
        Mat::zeros(sys.d_mb(), 0)
    } else {
        &sys.v_bg * matrix::pinv(sys.v_gg.mat(), DEFAULT_RANK_TOL)?
    };
    let m_beta = model.m_beta.clone();
    let m_gamma = model.m_gamma.clone();
    let coef_arc = coef.clone();
    let values_fn: MomentFn = Arc::new(move |z, beta, gamma| {
        let mb = Vector::from_vec(m_beta(z, beta, gamma));
        if coef_arc.ncols() == 0 {
            return mb.iter().cloned().collect();
        }
        let mg = Vector::from_vec(m_gamma(z, beta, gamma));
        (mb - &coef_arc * mg).iter().cloned().collect()
    });
    let corrected = CorrectedMoment {
        kind: CorrectedKind::Efficient,
        values_fn,
        coefficient: coef,
        description: "beta moment minus its projection on the gamma moment".into(),
    };
    // certify orthogonality to m_gamma and the second-moment identity
    let (beta, gamma) = model.partition.split(nu_hat);
    if sys.d_mg() > 0 {
        let d_mb = sys.d_mb();
        let d_mg = sys.d_mg();
        let mean_eff = dist.expect(|z| (corrected.values_fn)(z, beta, gamma))?;
        let mean_g = dist.expect(|z| (model.m_gamma)(z, beta, gamma))?;
        let cross = dist.expect(|z| {
            let e = (corrected.values_fn)(z, beta, gamma);
            let g = (model.m_gamma)(z, beta, gamma);
            let mut out = Vec::with_capacity(d_mb * d_mg);
            for i in 0..d_mb {
                for j in 0..d_mg {
                    out.push((e[i] - mean_eff[i]) * (g[j] - mean_g[j]));
                }
            }
            out
        })?;
        let worst = cross.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        if worst > 1e-8 {
            return Err(Error::Construction(format!(
                "efficient moment correlates with m_gamma: {worst:.3e}"
            )));
        }
        let second = dist.expect(|z| {
            let e = (corrected.values_fn)(z, beta, gamma);
            let mut out = Vec::with_capacity(d_mb * d_mb);
            for i in 0..d_mb {
                for j in 0..d_mb {
                    out.push((e[i] - mean_eff[i]) * (e[j] - mean_eff[j]));
                }
            }
            out
        })?;
        let schur = matrix::schur_complement(sys)?;
        let diff = Mat::from_row_slice(d_mb, d_mb, &second) - schur.mat();
        if matrix::max_abs(&diff) > 1e-8 {
            return Err(Error::Construction(format!(
                "second moment of the efficient moment misses the complement by {:.3e}",
                matrix::max_abs(&diff)
            )));
        }
    }
    Ok(corrected)
}

/// Influence function of a multi-step direct estimand with the per-measure
/// and per-nuisance decomposition that the telescoping identity yields.
pub struct DirectIfBreakdown {
    pub total: InfluenceTable,
    /// Per identifying measure `j = 1..=l`: the direct difference term plus
    /// the channels of nuisances identified under that measure.
    pub per_measure: Vec<Vec<Vec<f64>>>,
    /// Per nuisance channel, combined through the outer map.
    pub per_nuisance: Vec<Vec<Vec<f64>>>,
    /// Worst deviation of the summed per-measure direct terms from
    /// `h(z) - E[h]`.
    pub telescope_residual: f64,
    /// Conditional influence values of each nuisance.
    pub gamma_dot: Vec<Vec<f64>>,
    pub beta: Vec<f64>,
    pub mus: Vec<f64>,
}

/// Evaluates the multi-step direct influence function by enumerating all
/// conditional expectations on the finite support. Supplied tables under
/// `overrides` replace the internally derived conditional influence values
/// of the matching nuisances.
pub fn if_multistep_direct(
    ident: &DirectIdentification,
    dist: &DiscreteDistribution,
    overrides: Option<&[Option<Vec<f64>>]>,
) -> Result<DirectIfBreakdown> {
    let ctx = GraphContext::new(ident, dist)?;
    let ev = eval_direct(ident, dist)?;
    let rows = row_values(ident, dist, &ev.field)?;
    let n_rows = ident.rows.len();
    let n_pts = dist.len();
    let l = dist.blocks.len();

    let mut gdots = gamma_dots(&ctx, &ev.field)?;
    if let Some(ovr) = overrides {
        if ovr.len() != ident.nuisances.len() {
            return Err(Error::Dependency(
                "override list must align with the nuisances".into(),
            ));
        }
        for (g, tab) in ovr.iter().enumerate() {
            if let Some(t) = tab {
                if t.len() != n_pts {
                    return Err(Error::Dependency(format!(
                        "override for nuisance {g} has {} values, support has {n_pts}",
                        t.len()
                    )));
                }
                gdots[g] = t.clone();
            }
        }
    }
    let sens = mean_sensitivities(&ctx, &ev.field)?;

    // per-row conditional expectations E[h_i | first j blocks]
    let mut cond: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_rows); // [row][j][point]
    for vals in rows.iter() {
        let mut per_j = Vec::with_capacity(l + 1);
        per_j.push(vec![
            vals.iter().zip(&dist.mass).map(|(v, m)| v * m).sum::<f64>();
            n_pts
        ]);
        for j in 1..=l {
            let p = dist.blocks.prefix_dim(j);
            per_j.push(dist.conditional_expect_indexed(p, |i| vals[i])?);
        }
        cond.push(per_j);
    }

    // channel values per (row, nuisance, point)
    let mut channel = vec![vec![vec![0.0; n_pts]; ident.nuisances.len()]; n_rows];
    for (g, _n) in ident.nuisances.iter().enumerate() {
        for i in 0..n_pts {
            let a = ctx.own_group[g][i];
            let mass = ctx.group_mass[g][a];
            for ri in 0..n_rows {
                channel[ri][g][i] = sens[g][a][ri] / mass * gdots[g][i];
            }
        }
    }

    // assemble stacked row influence values and the telescoping residual
    let mut telescope = 0.0_f64;
    let mut stacked = vec![vec![0.0; n_rows]; n_pts];
    for ri in 0..n_rows {
        for i in 0..n_pts {
            let mut direct_sum = 0.0;
            for j in 1..=l {
                direct_sum += cond[ri][j][i] - cond[ri][j - 1][i];
            }
            let plain = rows[ri][i] - ev.mus[ri];
            telescope = telescope.max((direct_sum - plain).abs());
            let mut v = plain;
            for g in 0..ident.nuisances.len() {
                v += channel[ri][g][i];
            }
            stacked[i][ri] = v;
        }
    }

    let jac = ident.combine.jacobian(&ev.mus);
    let d_beta = ident.d_beta();
    let combine = |per_row: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n_pts)
            .map(|i| {
                (0..d_beta)
                    .map(|o| (0..n_rows).map(|ri| jac[(o, ri)] * per_row(ri, i)).sum())
                    .collect()
            })
            .collect()
    };

    let total_values = combine(&|ri, i| stacked[i][ri]);
    let per_nuisance: Vec<Vec<Vec<f64>>> = (0..ident.nuisances.len())
        .map(|g| combine(&|ri, i| channel[ri][g][i]))
        .collect();
    let per_measure: Vec<Vec<Vec<f64>>> = (1..=l)
        .map(|j| {
            combine(&|ri, i| {
                let mut v = cond[ri][j][i] - cond[ri][j - 1][i];
                for (g, n) in ident.nuisances.iter().enumerate() {
                    if n.block == j {
                        v += channel[ri][g][i];
                    }
                }
                v
            })
        })
        .collect();

    let total = InfluenceTable::new(total_values, &dist.mass, MEAN_TOL)?;
    Ok(DirectIfBreakdown {
        total,
        per_measure,
        per_nuisance,
        telescope_residual: telescope,
        gamma_dot: gdots,
        beta: ev.beta,
        mus: ev.mus,
    })
}

/// Influence function of a moment-identified beta over a conditional
/// nuisance graph:
/// `beta_dot = -(B' Xi B)^{-1} B' Xi (m_beta + sum_g D_g gamma_dot_g)`.
pub fn if_multistep_moment(
    cmm: &CondMomentModel,
    dist: &DiscreteDistribution,
    beta_hat: &[f64],
    xi_bb: Option<&PsdMatrix>,
    overrides: Option<&[Option<Vec<f64>>]>,
) -> Result<InfluenceTable> {
    let ident = cmm.at_beta(beta_hat);
    let ctx = GraphContext::new(&ident, dist)?;
    let field = nuisance_field(&cmm.nuisances, dist)?;
    let rows = row_values(&ident, dist, &field)?;
    let n_rows = cmm.rows.len();
    let n_pts = dist.len();

    let mut gdots = gamma_dots(&ctx, &field)?;
    if let Some(ovr) = overrides {
        for (g, tab) in ovr.iter().enumerate() {
            if let Some(t) = tab {
                if t.len() != n_pts {
                    return Err(Error::Dependency(format!(
                        "override for nuisance {g} has wrong length"
                    )));
                }
                gdots[g] = t.clone();
            }
        }
    }
    let sens = mean_sensitivities(&ctx, &field)?;

    // expected Jacobian in beta via means of rows at shifted beta
    let mut b = Mat::zeros(n_rows, cmm.d_beta);
    for c in 0..cmm.d_beta {
        let h = f64::EPSILON.cbrt() * beta_hat[c].abs().max(1.0);
        let xp = beta_hat[c] + h;
        let xm = beta_hat[c] - h;
        let mut bp = beta_hat.to_vec();
        bp[c] = xp;
        let mut bm = beta_hat.to_vec();
        bm[c] = xm;
        let rp = row_values(&cmm.at_beta(&bp), dist, &field)?;
        let rm = row_values(&cmm.at_beta(&bm), dist, &field)?;
        for r in 0..n_rows {
            let mp: f64 = rp[r].iter().zip(&dist.mass).map(|(v, m)| v * m).sum();
            let mm: f64 = rm[r].iter().zip(&dist.mass).map(|(v, m)| v * m).sum();
            b[(r, c)] = (mp - mm) / (xp - xm);
        }
    }
    let xi_owned;
    let xi: &Mat = match xi_bb {
        Some(x) => {
            if x.dim() != n_rows {
                return Err(Error::DimensionMismatch("xi_bb must match the beta moment".into()));
            }
            x.mat()
        }
        None => {
            xi_owned = Mat::identity(n_rows, n_rows);
            &xi_owned
        }
    };
    let hb = b.transpose() * xi * &b;
    if matrix::rank(&hb, DEFAULT_RANK_TOL) < cmm.d_beta {
        return Err(Error::Precondition("beta normalizer is singular".into()));
    }
    let norm = -matrix::pinv(&hb, DEFAULT_RANK_TOL)? * b.transpose() * xi;

    let values: Vec<Vec<f64>> = (0..n_pts)
        .map(|i| {
            let mut corrected = Vector::zeros(n_rows);
            for ri in 0..n_rows {
                let mut v = rows[ri][i];
                for g in 0..cmm.nuisances.len() {
                    let a = ctx.own_group[g][i];
                    v += sens[g][a][ri] / ctx.group_mass[g][a] * gdots[g][i];
                }
                corrected[ri] = v;
            }
            (&norm * corrected).iter().cloned().collect()
        })
        .collect();
    InfluenceTable::new(values, &dist.mass, MEAN_TOL)
}

/// Locally robust corrected rows of a direct identification, evaluated at
/// arbitrary nuisance values but with all expectations under the base law.
/// Used for the bias-order experiment and the fixed-point property.
pub fn lr_corrected_rows(
    ident: &DirectIdentification,
    dist: &DiscreteDistribution,
    field: &crate::ident::NuisanceField,
) -> Result<Vec<Vec<f64>>> {
    let ctx = GraphContext::new(ident, dist)?;
    let rows = row_values(ident, dist, field)?;
    let sens = mean_sensitivities(&ctx, field)?;
    // conditional influence values at the supplied nuisance values
    let gdots = {
        let mut out = Vec::with_capacity(ident.nuisances.len());
        for (g, n) in ident.nuisances.iter().enumerate() {
            let mut vals = Vec::with_capacity(dist.len());
            for (i, z) in dist.support.iter().enumerate() {
                let inputs: Result<Vec<f64>> = n
                    .refs
                    .iter()
                    .map(|r| {
                        let arg = match &r.arg_map {
                            Some(f) => f(z),
                            None => {
                                let p =
                                    dist.blocks.prefix_dim(ident.nuisances[r.target].block - 1);
                                z[..p].to_vec()
                            }
                        };
                        field[r.target]
                            .get(&crate::dist::float_key(&arg))
                            .copied()
                            .ok_or_else(|| Error::Domain(format!("missing value at {arg:?}")))
                    })
                    .collect();
                let key = &ctx.group_key[g][ctx.own_group[g][i]];
                vals.push((n.integrand)(z, &inputs?) - field[g][key]);
            }
            out.push(vals);
        }
        out
    };
    let mut corrected = rows.clone();
    for ri in 0..ident.rows.len() {
        for i in 0..dist.len() {
            for g in 0..ident.nuisances.len() {
                let a = ctx.own_group[g][i];
                corrected[ri][i] += sens[g][a][ri] / ctx.group_mass[g][a] * gdots[g][i];
            }
        }
    }
    Ok(corrected)
}

/// What a nonparametric influence table localizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NonparametricTarget {
    Density,
    Regression,
}

#[derive(Debug)]
pub struct NonparametricIf {
    pub table: InfluenceTable,
    /// The kernel-smoothed estimate at the query point.
    pub estimate: f64,
    /// `b^d` times the variance of the table, the quantity with a
    /// nondegenerate limit.
    pub rescaled_variance: f64,
}

/// Kernel-localized influence function of a density or regression value at
/// a query point. For regression the last block is the scalar outcome and
/// the kernel runs over the remaining coordinates.
pub fn if_nonparametric(
    spec: &KernelSpec,
    sample: &EmpiricalSample,
    target: NonparametricTarget,
    point: &[f64],
) -> Result<NonparametricIf> {
    let d = sample.blocks.total_dim();
    let n = sample.n();
    let covar_dim = match target {
        NonparametricTarget::Density => d,
        NonparametricTarget::Regression => {
            let last = *sample.blocks.dims.last().unwrap();
            if last != 1 {
                return Err(Error::invalid("regression target needs a scalar last block"));
            }
            d - 1
        }
    };
    if spec.dimension != covar_dim {
        return Err(Error::DimensionMismatch(format!(
            "kernel dimension {} but covariates have dimension {covar_dim}",
            spec.dimension
        )));
    }
    if point.len() != covar_dim {
        return Err(Error::DimensionMismatch("query point has wrong dimension".into()));
    }
    let mut kvals = Vec::with_capacity(n);
    for row in &sample.data {
        kvals.push(crate::dist::kernel_weight(spec, point, &row[..covar_dim])?);
    }
    let mean_k: f64 = kvals
        .iter()
        .enumerate()
        .map(|(i, k)| sample.weight(i) * k)
        .sum();
    if mean_k <= 0.0 {
        return Err(Error::Domain(format!(
            "no kernel mass at query point {point:?}; enlarge the bandwidth"
        )));
    }
    let (estimate, values): (f64, Vec<Vec<f64>>) = match target {
        NonparametricTarget::Density => {
            let vals = kvals.iter().map(|&k| vec![k - mean_k]).collect();
            (mean_k, vals)
        }
        NonparametricTarget::Regression => {
            let mean_ky: f64 = kvals
                .iter()
                .enumerate()
                .map(|(i, k)| sample.weight(i) * k * sample.data[i][d - 1])
                .sum();
            let ghat = mean_ky / mean_k;
            let vals = kvals
                .iter()
                .enumerate()
                .map(|(i, &k)| vec![k / mean_k * (sample.data[i][d - 1] - ghat)])
                .collect();
            (ghat, vals)
        }
    };
    let weights: Vec<f64> = (0..n).map(|i| sample.weight(i)).collect();
    let table = InfluenceTable::new(values, &weights, 1e-8)?;
    let var = table.covariance(&weights)[(0, 0)];
    let rescaled = spec.bandwidth.powi(covar_dim as i32) * var;
    if !rescaled.is_finite() {
        return Err(Error::Evaluation("rescaled variance is not finite".into()));
    }
    Ok(NonparametricIf { table, estimate, rescaled_variance: rescaled })
}

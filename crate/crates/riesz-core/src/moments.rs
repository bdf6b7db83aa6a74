//! Moment-condition models `E[m(Z, nu)] = 0` with the parameter split
//! `nu = (beta, gamma)`, numeric or analytic Jacobian blocks, covariance
//! blocks, and a damped-Newton / bisection solver for the first-order
//! condition of the minimum-distance problem.

use std::sync::Arc;

use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::matrix::{self, BlockSystem, Mat, PsdMatrix, Vector, DEFAULT_RANK_TOL};

/// Pointwise moment evaluator: arguments are (z, beta, gamma).
pub type MomentFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync>;
/// Pointwise score evaluator: arguments are (z, nu); returns the score row.
pub type ScoreFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;

/// One named piece of the nuisance vector and the block of Z identifying it.
#[derive(Debug, Clone)]
pub struct GammaSpec {
    pub name: String,
    pub dim: usize,
    /// 1-based index of the conditional measure the piece is identified
    /// under; 0 stands for the unconditional law.
    pub block: usize,
}

/// Dimension split of `nu = (beta, gamma)`.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    pub d_beta: usize,
    pub d_gamma: usize,
    pub gamma_layout: Vec<GammaSpec>,
}

impl ParamPartition {
    pub fn new(d_beta: usize, d_gamma: usize) -> Self {
        ParamPartition { d_beta, d_gamma, gamma_layout: Vec::new() }
    }

    pub fn with_layout(d_beta: usize, layout: Vec<GammaSpec>) -> Result<Self> {
        let d_gamma = layout.iter().map(|g| g.dim).sum();
        if layout.iter().any(|g| g.dim == 0) {
            return Err(Error::invalid("nuisance pieces must have positive dimension"));
        }
        Ok(ParamPartition { d_beta, d_gamma, gamma_layout: layout })
    }

    pub fn d_nu(&self) -> usize {
        self.d_beta + self.d_gamma
    }

    pub fn split<'a>(&self, nu: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        nu.split_at(self.d_beta)
    }
}

/// How a moment row is differentiated with respect to the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Differentiability {
    /// Pointwise derivative exists; differentiate under the expectation.
    Classical,
    /// Indicator-type row: differentiate the map `nu -> E[m(., nu)]` by a
    /// difference quotient instead of differentiating `m` pointwise.
    Generalized,
}

/// Declarative moment model. The evaluators must be reentrant.
#[derive(Clone)]
pub struct MomentModel {
    pub partition: ParamPartition,
    pub d_m_beta: usize,
    pub d_m_gamma: usize,
    pub m_beta: MomentFn,
    pub m_gamma: MomentFn,
    /// Analytic pointwise Jacobians, if available: each maps (z, beta, gamma)
    /// to the matrix of partials of the corresponding moment block.
    pub analytic: Option<AnalyticJacobians>,
    /// Per beta-block moment row.
    pub diff_beta: Vec<Differentiability>,
    /// Per gamma-block moment row.
    pub diff_gamma: Vec<Differentiability>,
    /// Step for generalized difference quotients (grid-dependent).
    pub generalized_step: Option<f64>,
    /// Structural flag: `m_gamma = h_gamma - gamma` exactly.
    pub gamma_direct: bool,
    /// Structural flag: `m_beta = h_beta - beta` exactly.
    pub beta_direct: bool,
}

pub type JacFn = Arc<dyn Fn(&[f64], &[f64], &[f64]) -> Mat + Send + Sync>;

#[derive(Clone)]
pub struct AnalyticJacobians {
    pub db_dbeta: JacFn,
    pub db_dgamma: JacFn,
    pub dg_dbeta: JacFn,
    pub dg_dgamma: JacFn,
}

impl MomentModel {
    /// Stacked moment value at a point.
    pub fn m_full(&self, z: &[f64], nu: &[f64]) -> Vec<f64> {
        let (beta, gamma) = self.partition.split(nu);
        let mut v = (self.m_beta)(z, beta, gamma);
        v.extend((self.m_gamma)(z, beta, gamma));
        v
    }

    pub fn d_m(&self) -> usize {
        self.d_m_beta + self.d_m_gamma
    }

    fn has_generalized(&self) -> bool {
        self.diff_beta.iter().chain(&self.diff_gamma).any(|d| *d == Differentiability::Generalized)
    }
}

/// True score model of the law at the solution, for bound comparisons.
#[derive(Clone)]
pub struct ScoreModel {
    pub score: ScoreFn,
    pub d_beta: usize,
}

/// Central-difference abscissae around `x` with an exactly representable
/// spread, so the difference quotient loses no precision to the step.
pub(crate) fn fd_points(x: f64) -> (f64, f64, f64) {
    let h = f64::EPSILON.cbrt() * x.abs().max(1.0);
    let plus = x + h;
    let minus = x - h;
    (plus, minus, plus - minus)
}

/// Expected Jacobian of the stacked moment vector at `nu`, by block.
///
/// Classical rows use central differences of `m` pointwise under the
/// expectation; generalized rows use difference quotients of the map
/// `nu -> E[m(., nu)]` with the model's declared step.
pub fn jacobian_blocks(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
) -> Result<(Mat, Mat, Mat, Mat)> {
    let p = &model.partition;
    if nu_hat.len() != p.d_nu() {
        return Err(Error::DimensionMismatch(format!(
            "nu has length {}, model wants {}",
            nu_hat.len(),
            p.d_nu()
        )));
    }
    let d_m = model.d_m();
    let mut jac = Mat::zeros(d_m, p.d_nu());

    if let Some(an) = &model.analytic {
        let (beta, gamma) = p.split(nu_hat);
        let top = dist.expect(|z| {
            let a = (an.db_dbeta)(z, beta, gamma);
            let b = (an.db_dgamma)(z, beta, gamma);
            let mut row = Vec::with_capacity(model.d_m_beta * p.d_nu());
            for i in 0..model.d_m_beta {
                for k in 0..p.d_beta {
                    row.push(a[(i, k)]);
                }
                for k in 0..p.d_gamma {
                    row.push(b[(i, k)]);
                }
            }
            row
        })?;
        let bot = dist.expect(|z| {
            let a = (an.dg_dbeta)(z, beta, gamma);
            let b = (an.dg_dgamma)(z, beta, gamma);
            let mut row = Vec::with_capacity(model.d_m_gamma * p.d_nu());
            for i in 0..model.d_m_gamma {
                for k in 0..p.d_beta {
                    row.push(a[(i, k)]);
                }
                for k in 0..p.d_gamma {
                    row.push(b[(i, k)]);
                }
            }
            row
        })?;
        for i in 0..model.d_m_beta {
            for k in 0..p.d_nu() {
                jac[(i, k)] = top[i * p.d_nu() + k];
            }
        }
        for i in 0..model.d_m_gamma {
            for k in 0..p.d_nu() {
                jac[(model.d_m_beta + i, k)] = bot[i * p.d_nu() + k];
            }
        }
    } else {
        let gen_rows: Vec<bool> = model
            .diff_beta
            .iter()
            .chain(&model.diff_gamma)
            .map(|d| *d == Differentiability::Generalized)
            .collect();
        let gen_step = model.generalized_step;
        if gen_rows.iter().any(|&g| g) && gen_step.is_none() {
            return Err(Error::invalid(
                "model has generalized rows but no generalized_step declared",
            ));
        }
        for k in 0..p.d_nu() {
            // classical rows: E[ (m(z, nu+h e_k) - m(z, nu-h e_k)) / 2h ]
            let (xp, xm, denom) = fd_points(nu_hat[k]);
            let mut plus = nu_hat.to_vec();
            plus[k] = xp;
            let mut minus = nu_hat.to_vec();
            minus[k] = xm;
            let col = dist.expect(|z| {
                let a = model.m_full(z, &plus);
                let b = model.m_full(z, &minus);
                a.iter().zip(b).map(|(x, y)| (x - y) / denom).collect()
            })?;
            for i in 0..d_m {
                if !gen_rows[i] {
                    jac[(i, k)] = col[i];
                }
            }
            if gen_rows.iter().any(|&g| g) {
                // generalized rows: difference quotient of the expectation
                let hg = gen_step.unwrap();
                let gxp = nu_hat[k] + hg;
                let gxm = nu_hat[k] - hg;
                let gdenom = gxp - gxm;
                let mut gp = nu_hat.to_vec();
                gp[k] = gxp;
                let mut gm = nu_hat.to_vec();
                gm[k] = gxm;
                let ep = dist.expect(|z| model.m_full(z, &gp))?;
                let em = dist.expect(|z| model.m_full(z, &gm))?;
                for i in 0..d_m {
                    if gen_rows[i] {
                        jac[(i, k)] = (ep[i] - em[i]) / gdenom;
                    }
                }
            }
        }
    }

    let db_db = jac.view((0, 0), (model.d_m_beta, p.d_beta)).into_owned();
    let db_dg = jac.view((0, p.d_beta), (model.d_m_beta, p.d_gamma)).into_owned();
    let dg_db = jac.view((model.d_m_beta, 0), (model.d_m_gamma, p.d_beta)).into_owned();
    let dg_dg = jac
        .view((model.d_m_beta, p.d_beta), (model.d_m_gamma, p.d_gamma))
        .into_owned();

    if p.d_beta > 0 && matrix::rank(&db_db, DEFAULT_RANK_TOL) < p.d_beta {
        return Err(Error::Identification(format!(
            "E[dm_beta/dbeta] has rank {} < d_beta {}",
            matrix::rank(&db_db, DEFAULT_RANK_TOL),
            p.d_beta
        )));
    }
    Ok((db_db, db_dg, dg_db, dg_dg))
}

/// Covariance blocks `V_bb, V_bg, V_gg` of the stacked moment at `nu_hat`.
pub fn covariance_blocks(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
) -> Result<(PsdMatrix, Mat, PsdMatrix)> {
    let d_m = model.d_m();
    let mean = dist.expect(|z| model.m_full(z, nu_hat))?;
    let flat = dist.expect(|z| {
        let m = model.m_full(z, nu_hat);
        let mut outer = Vec::with_capacity(d_m * d_m);
        for i in 0..d_m {
            for j in 0..d_m {
                outer.push((m[i] - mean[i]) * (m[j] - mean[j]));
            }
        }
        outer
    })?;
    let v = Mat::from_row_slice(d_m, d_m, &flat);
    let r = matrix::rank(&v, DEFAULT_RANK_TOL);
    if r < model.partition.d_nu() {
        return Err(Error::Identification(format!(
            "rank of the moment covariance is {r}, below d_nu {}",
            model.partition.d_nu()
        )));
    }
    let mb = model.d_m_beta;
    let mg = model.d_m_gamma;
    let v_bb = PsdMatrix::new(v.view((0, 0), (mb, mb)).into_owned(), 1e-8, 1e-10)?;
    let v_bg = v.view((0, mb), (mb, mg)).into_owned();
    let v_gg = PsdMatrix::new(v.view((mb, mb), (mg, mg)).into_owned(), 1e-8, 1e-10)?;
    Ok((v_bb, v_bg, v_gg))
}

/// Builds the full block system at `nu_hat` with optional weights attached.
pub fn build_block_system(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    xi_bb: Option<PsdMatrix>,
    xi_gg: Option<PsdMatrix>,
) -> Result<BlockSystem> {
    let (db_db, db_dg, dg_db, dg_dg) = jacobian_blocks(model, dist, nu_hat)?;
    let (v_bb, v_bg, v_gg) = covariance_blocks(model, dist, nu_hat)?;
    let sys = BlockSystem {
        d_beta: model.partition.d_beta,
        d_gamma: model.partition.d_gamma,
        dm_beta_dbeta: db_db,
        dm_beta_dgamma: db_dg,
        dm_gamma_dbeta: dg_db,
        dm_gamma_dgamma: dg_dg,
        v_bb,
        v_gg,
        v_bg,
        xi_bb,
        xi_gg,
    };
    sys.validate()?;
    Ok(sys)
}

/// Norm of the first-order condition `J^T Xi E[m]` required at a solution.
pub const SOLVER_TOL: f64 = 1e-10;
const MAX_NEWTON_ITERS: usize = 100;

fn expected_moment(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu: &[f64],
) -> Result<Vector> {
    Ok(Vector::from_vec(dist.expect(|z| model.m_full(z, nu))?))
}

fn expected_jacobian(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu: &[f64],
) -> Result<Mat> {
    let (a, b, c, d) = jacobian_blocks(model, dist, nu)?;
    let mut j = Mat::zeros(model.d_m(), model.partition.d_nu());
    j.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(&a);
    j.view_mut((0, model.partition.d_beta), (b.nrows(), b.ncols())).copy_from(&b);
    j.view_mut((model.d_m_beta, 0), (c.nrows(), c.ncols())).copy_from(&c);
    j.view_mut((model.d_m_beta, model.partition.d_beta), (d.nrows(), d.ncols()))
        .copy_from(&d);
    Ok(j)
}

/// Solves the moment condition by damped Newton on the first-order
/// condition `E[dm/dnu]^T Xi E[m(nu)] = 0`. A scalar model with a
/// generalized row falls back to derivative-free bisection on `E[m]`.
pub fn solve_moments(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    xi: Option<&Mat>,
    init: &[f64],
) -> Result<Vec<f64>> {
    let p = &model.partition;
    if init.len() != p.d_nu() {
        return Err(Error::DimensionMismatch("init has wrong length".into()));
    }
    if model.has_generalized() && p.d_nu() == 1 && model.d_m() == 1 {
        return solve_scalar_generalized(model, dist, init[0]);
    }
    let xi_owned;
    let xi_mat: &Mat = match xi {
        Some(m) => {
            if m.nrows() != model.d_m() || m.ncols() != model.d_m() {
                return Err(Error::DimensionMismatch("xi has wrong shape".into()));
            }
            m
        }
        None => {
            xi_owned = Mat::identity(model.d_m(), model.d_m());
            &xi_owned
        }
    };

    let mut nu = init.to_vec();
    let mut trace = Vec::new();
    for iter in 0..MAX_NEWTON_ITERS {
        let em = expected_moment(model, dist, &nu)?;
        let jac = expected_jacobian(model, dist, &nu)?;
        let g = jac.transpose() * xi_mat * &em;
        let gnorm = g.norm();
        trace.push((iter, gnorm));
        if gnorm <= SOLVER_TOL {
            return Ok(nu);
        }
        let h = jac.transpose() * xi_mat * &jac;
        let step = matrix::pinv(&h, DEFAULT_RANK_TOL)? * &g;
        // backtrack until the FOC norm decreases
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = nu
                .iter()
                .zip(step.iter())
                .map(|(x, s)| x - alpha * s)
                .collect();
            let em_c = expected_moment(model, dist, &cand)?;
            let jac_c = expected_jacobian(model, dist, &cand).unwrap_or_else(|_| jac.clone());
            let g_c = (jac_c.transpose() * xi_mat * &em_c).norm();
            if g_c < gnorm || g_c <= SOLVER_TOL {
                nu = cand;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::Solver {
                msg: "line search stalled".into(),
                trace,
            });
        }
    }
    Err(Error::Solver { msg: format!("no convergence in {MAX_NEWTON_ITERS} iterations"), trace })
}

/// Bisection for a scalar moment with a generalized (step-function) row.
/// Returns the crossing point of `nu -> E[m(., nu)]`, snapped to the
/// nearest support coordinate when one sits at the crossing.
fn solve_scalar_generalized(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    init: f64,
) -> Result<Vec<f64>> {
    let g = |nu: f64| -> Result<f64> { Ok(expected_moment(model, dist, &[nu])?[0]) };
    // bracket the sign change, expanding around the initial point
    let mut lo = init - 1.0;
    let mut hi = init + 1.0;
    let mut glo = g(lo)?;
    let mut ghi = g(hi)?;
    let mut width = 1.0;
    let mut trace = vec![(0usize, glo.abs().min(ghi.abs()))];
    for iter in 0..60 {
        if glo <= 0.0 && ghi >= 0.0 {
            break;
        }
        width *= 2.0;
        if glo > 0.0 {
            lo -= width;
            glo = g(lo)?;
        }
        if ghi < 0.0 {
            hi += width;
            ghi = g(hi)?;
        }
        trace.push((iter + 1, glo.abs().min(ghi.abs())));
        if iter == 59 {
            return Err(Error::Solver { msg: "could not bracket a root".into(), trace });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo < 1e-13 * (1.0 + mid.abs()) {
            break;
        }
        if g(mid)? >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // snap to a support coordinate at the jump, if one is there
    let mut best = hi;
    let mut best_gap = f64::INFINITY;
    for z in &dist.support {
        let gap = (z[0] - hi).abs();
        if gap < best_gap {
            best_gap = gap;
            best = z[0];
        }
    }
    if best_gap < 1e-9 * (1.0 + best.abs()) && g(best)? >= 0.0 {
        return Ok(vec![best]);
    }
    Ok(vec![hi])
}

/// Residual of the score identity `E[dm/dnu] = -cov(m, score)` under the
/// law, the largest absolute entry of the sum of the two sides.
pub fn score_identity_residual(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    score: &ScoreModel,
) -> Result<f64> {
    let jac = expected_jacobian(model, dist, nu_hat)?;
    let d_m = model.d_m();
    let d_nu = model.partition.d_nu();
    let mean_m = dist.expect(|z| model.m_full(z, nu_hat))?;
    let mean_s = dist.expect(|z| (score.score)(z, nu_hat))?;
    if mean_s.len() != d_nu {
        return Err(Error::DimensionMismatch(format!(
            "score has length {}, model wants {d_nu}",
            mean_s.len()
        )));
    }
    let flat = dist.expect(|z| {
        let m = model.m_full(z, nu_hat);
        let s = (score.score)(z, nu_hat);
        let mut outer = Vec::with_capacity(d_m * d_nu);
        for i in 0..d_m {
            for k in 0..d_nu {
                outer.push((m[i] - mean_m[i]) * (s[k] - mean_s[k]));
            }
        }
        outer
    })?;
    let cov = Mat::from_row_slice(d_m, d_nu, &flat);
    Ok(matrix::max_abs(&(jac + cov)))
}

/// Convenience constructor for a model with beta only (no nuisance).
pub fn beta_only_model(
    d_beta: usize,
    d_m_beta: usize,
    m_beta: MomentFn,
    diff: Vec<Differentiability>,
    generalized_step: Option<f64>,
) -> MomentModel {
    MomentModel {
        partition: ParamPartition::new(d_beta, 0),
        d_m_beta,
        d_m_gamma: 0,
        m_beta,
        m_gamma: Arc::new(|_z, _b, _g| Vec::new()),
        analytic: None,
        diff_beta: diff,
        diff_gamma: Vec::new(),
        generalized_step,
        gamma_direct: false,
        beta_direct: false,
    }
}

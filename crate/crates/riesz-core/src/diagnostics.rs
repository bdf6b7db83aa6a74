//! Decision criteria on a moment system: local robustness of the beta
//! moment, the one-step and two-step equivalence conditions with their
//! scenario classification, adaptivity, efficiency bounds against the
//! score, and the variance ordering of the corrected moments.

use serde::Serialize;

use crate::dist::DiscreteDistribution;
use crate::error::{Error, Result};
use crate::influence::{make_eff_moment, make_lr_moment};
use crate::matrix::{
    self, check_compatibility, schur_complement, BlockSystem, Mat, PsdMatrix,
    DEFAULT_COMPAT_TOL, DEFAULT_RANK_TOL,
};
use crate::moments::{jacobian_blocks, MomentModel, ScoreModel};

/// Default tolerance for structural zero checks on expected matrices.
pub const STRUCTURAL_TOL: f64 = 1e-8;
/// Default tolerance for quantities routed through finite differences.
pub const FD_TOL: f64 = 1e-6;

/// One named check with its measured magnitude, so borderline cases stay
/// auditable instead of collapsing into a boolean.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub name: String,
    pub magnitude: f64,
    pub tol: f64,
    pub pass: bool,
    /// Which family of conditions the check belongs to.
    pub tag: String,
}

impl ConditionCheck {
    fn new(name: &str, tag: &str, magnitude: f64, tol: f64) -> Self {
        ConditionCheck {
            name: name.into(),
            magnitude,
            tol,
            pass: magnitude <= tol,
            tag: tag.into(),
        }
    }
}

/// How the nuisance block is identified, in increasing order of trouble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaScenario {
    /// The nuisance moment has the plain `h - gamma` structure.
    Direct,
    /// More rows than parameters but the covariance has full parameter
    /// rank.
    RowOveridentified,
    /// The covariance rank strictly exceeds the parameter count.
    RankOveridentified,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdicts {
    pub locally_robust: Option<bool>,
    pub eff_is_lr: Option<bool>,
    pub lr_is_eff: Option<bool>,
    pub adaptive_beta: Option<bool>,
    pub adaptive_gamma: Option<bool>,
    pub scenario: Option<GammaScenario>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub checks: Vec<ConditionCheck>,
    pub verdicts: Verdicts,
}

/// Local robustness of the beta moment to the nuisance: the expected
/// cross-derivative must vanish.
pub fn check_local_robustness(
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
) -> Result<ConditionCheck> {
    let (_, b_bg, _, _) = jacobian_blocks(model, dist, nu_hat)?;
    Ok(ConditionCheck::new(
        "cross-derivative of the beta moment in gamma",
        "local-robustness",
        matrix::max_abs(&b_bg),
        STRUCTURAL_TOL,
    ))
}

/// Residual of the one-step condition: the efficient beta moment stops
/// moving with the nuisance,
/// `E[dm_beta/dgamma] - V_bg V_gg^+ E[dm_gamma/dgamma] = 0`.
pub fn one_step_residual(sys: &BlockSystem) -> Result<Mat> {
    let compat = check_compatibility(sys, DEFAULT_COMPAT_TOL)?;
    if !compat.pass() {
        return Err(Error::Precondition(format!(
            "one-step condition needs compatibility: cond1 {:.3e}, cond2 {:.3e}",
            compat.cond1_magnitude, compat.cond2_magnitude
        )));
    }
    let scale = matrix::max_abs(sys.v_gg.mat()).max(matrix::max_abs(&sys.v_bg));
    let vgg_pinv = matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?;
    Ok(&sys.dm_beta_dgamma - &sys.v_bg * vgg_pinv * &sys.dm_gamma_dgamma)
}

pub fn check_one_step(sys: &BlockSystem) -> Result<ConditionCheck> {
    let residual = one_step_residual(sys)?;
    Ok(ConditionCheck::new(
        "efficient beta moment insensitive to gamma",
        "one-step",
        matrix::max_abs(&residual),
        STRUCTURAL_TOL,
    ))
}

/// Two-step condition: the correction mismatch applied to the nuisance
/// moment vanishes everywhere on the support. Evaluated with the supplied
/// second-step weighting, defaulting to the pseudoinverse of the nuisance
/// covariance.
pub fn check_two_step(
    sys: &BlockSystem,
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    xi_gg: Option<&PsdMatrix>,
) -> Result<(ConditionCheck, GammaScenario)> {
    let scenario = classify_gamma(sys, model);
    let xi_owned;
    let xi: &Mat = match xi_gg {
        Some(x) => x.mat(),
        None => {
            let scale = matrix::max_abs(sys.v_gg.mat());
            xi_owned = matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?;
            &xi_owned
        }
    };
    let g = &sys.dm_gamma_dgamma;
    let hg = g.transpose() * xi * g;
    if matrix::rank(&hg, DEFAULT_RANK_TOL) < sys.d_gamma {
        return Err(Error::Precondition("gamma normalizer is singular".into()));
    }
    let scale = matrix::max_abs(sys.v_gg.mat()).max(matrix::max_abs(&sys.v_bg));
    let vgg_pinv = matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?;
    let psi = &sys.v_bg * vgg_pinv
        - &sys.dm_beta_dgamma * matrix::pinv(&hg, DEFAULT_RANK_TOL)? * g.transpose() * xi;
    // sup over the support of the mapped nuisance moment
    let (beta, gamma) = model.partition.split(nu_hat);
    let mut sup = 0.0_f64;
    for z in &dist.support {
        let mg = crate::matrix::Vector::from_vec((model.m_gamma)(z, beta, gamma));
        let mapped = &psi * mg;
        sup = sup.max(mapped.iter().fold(0.0_f64, |a, x| a.max(x.abs())));
    }
    Ok((
        ConditionCheck::new(
            "correction mismatch maps the nuisance moment to zero",
            "two-step",
            sup,
            STRUCTURAL_TOL,
        ),
        scenario,
    ))
}

fn classify_gamma(sys: &BlockSystem, model: &MomentModel) -> GammaScenario {
    if model.gamma_direct {
        return GammaScenario::Direct;
    }
    let r = matrix::rank(sys.v_gg.mat(), DEFAULT_RANK_TOL);
    if r <= sys.d_gamma {
        GammaScenario::RowOveridentified
    } else {
        GammaScenario::RankOveridentified
    }
}

/// Necessary conditions for adaptive estimation of beta in the presence of
/// gamma, and the mirrored pair.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptiveReport {
    pub beta_cross: ConditionCheck,
    pub beta_projected: ConditionCheck,
    pub gamma_cross: ConditionCheck,
    pub gamma_projected: ConditionCheck,
}

impl AdaptiveReport {
    pub fn adaptive_beta(&self) -> bool {
        self.beta_cross.pass && self.beta_projected.pass
    }

    pub fn adaptive_gamma(&self) -> bool {
        self.gamma_cross.pass && self.gamma_projected.pass
    }
}

pub fn check_adaptive(sys: &BlockSystem) -> Result<AdaptiveReport> {
    let scale = matrix::max_abs(sys.v_gg.mat())
        .max(matrix::max_abs(sys.v_bb.mat()))
        .max(matrix::max_abs(&sys.v_bg));
    let vgg_pinv = matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?;
    let vbb_pinv = matrix::pinv_scaled(sys.v_bb.mat(), DEFAULT_RANK_TOL, scale)?;
    let beta_proj = &sys.dm_beta_dgamma - &sys.v_bg * &vgg_pinv * &sys.dm_gamma_dgamma;
    let gamma_proj = &sys.dm_gamma_dbeta - sys.v_bg.transpose() * &vbb_pinv * &sys.dm_beta_dbeta;
    Ok(AdaptiveReport {
        beta_cross: ConditionCheck::new(
            "nuisance moment insensitive to beta",
            "adaptive-beta",
            matrix::max_abs(&sys.dm_gamma_dbeta),
            STRUCTURAL_TOL,
        ),
        beta_projected: ConditionCheck::new(
            "beta cross-derivative matches its projection",
            "adaptive-beta",
            matrix::max_abs(&beta_proj),
            STRUCTURAL_TOL,
        ),
        gamma_cross: ConditionCheck::new(
            "beta moment insensitive to gamma",
            "adaptive-gamma",
            matrix::max_abs(&sys.dm_beta_dgamma),
            STRUCTURAL_TOL,
        ),
        gamma_projected: ConditionCheck::new(
            "gamma cross-derivative matches its projection",
            "adaptive-gamma",
            matrix::max_abs(&gamma_proj),
            STRUCTURAL_TOL,
        ),
    })
}

/// Bound matrices for the full parameter. All matrices are on the variance
/// scale: larger (in the semidefinite order) means less precise.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// Optimal joint variance via the block-factorized route.
    pub sigma_joint_inv: Mat,
    /// Decoupled beta-block variance (attained when the one-step condition
    /// holds).
    pub sigma_bb_inv: Mat,
    /// Decoupled gamma-block variance.
    pub sigma_gg_inv: Mat,
    /// Moment-limited efficiency bound `{J' V^+ J}^{-1}` computed directly.
    pub m_bound: Mat,
    pub cramer_rao: Option<Mat>,
    /// Smallest eigenvalue of `m_bound - cramer_rao` when a score is given.
    pub gap_psd_certificate: Option<f64>,
    /// Sup-norm of the projection residual of the score on the moment
    /// span; zero means the bound is attained.
    pub score_projection_residual: Option<f64>,
    /// Largest off-diagonal (beta x gamma) entry of the joint variance.
    pub off_diagonal_magnitude: f64,
    /// Agreement between the block-factorized and direct routes.
    pub route_consistency: f64,
    /// Smallest eigenvalue of `joint beta-block - decoupled beta-block`:
    /// never negative, and strictly positive when the one-step condition
    /// fails (not knowing the nuisance inflates the beta variance).
    pub beta_inflation_min_eig: f64,
}

/// Serializable view with matrices as row-major nested arrays.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReportView {
    pub sigma_joint_inv: Vec<Vec<f64>>,
    pub sigma_bb_inv: Vec<Vec<f64>>,
    pub sigma_gg_inv: Vec<Vec<f64>>,
    pub m_bound: Vec<Vec<f64>>,
    pub cramer_rao: Option<Vec<Vec<f64>>>,
    pub gap_psd_certificate: Option<f64>,
    pub score_projection_residual: Option<f64>,
    pub off_diagonal_magnitude: f64,
    pub route_consistency: f64,
    pub beta_inflation_min_eig: f64,
}

pub fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl BoundReport {
    pub fn view(&self) -> BoundReportView {
        BoundReportView {
            sigma_joint_inv: mat_rows(&self.sigma_joint_inv),
            sigma_bb_inv: mat_rows(&self.sigma_bb_inv),
            sigma_gg_inv: mat_rows(&self.sigma_gg_inv),
            m_bound: mat_rows(&self.m_bound),
            cramer_rao: self.cramer_rao.as_ref().map(mat_rows),
            gap_psd_certificate: self.gap_psd_certificate,
            score_projection_residual: self.score_projection_residual,
            off_diagonal_magnitude: self.off_diagonal_magnitude,
            route_consistency: self.route_consistency,
            beta_inflation_min_eig: self.beta_inflation_min_eig,
        }
    }
}

/// Information matrix `J' V^+ J` of a stacked system.
pub fn information_matrix(jac: &Mat, v: &Mat) -> Result<Mat> {
    let v_pinv = matrix::pinv(v, DEFAULT_RANK_TOL)?;
    Ok(jac.transpose() * v_pinv * jac)
}

/// Efficiency bounds of the system, with the Cramer-Rao comparison when a
/// score model is supplied.
pub fn efficiency_bound(
    sys: &BlockSystem,
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    score: Option<&ScoreModel>,
) -> Result<BoundReport> {
    sys.validate()?;
    let d_nu = sys.d_beta + sys.d_gamma;
    let jac = sys.jacobian();
    let v = sys.v_full();
    let info = information_matrix(&jac, &v)?;
    if matrix::rank(&info, DEFAULT_RANK_TOL) < d_nu {
        return Err(Error::Identification(
            "the moment system does not identify the full parameter".into(),
        ));
    }
    let m_bound = matrix::pinv(&info, DEFAULT_RANK_TOL)?;

    // block-factorized route through the Schur complement
    let scale = matrix::max_abs(&v);
    let vgg_pinv = matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?;
    let s_bb = schur_complement(sys)?;
    let s_pinv = matrix::pinv_scaled(s_bb.mat(), DEFAULT_RANK_TOL, scale)?;
    let (mb, mg) = (sys.d_mb(), sys.d_mg());
    let mut rot = Mat::identity(mb + mg, mb + mg);
    rot.view_mut((0, mb), (mb, mg)).copy_from(&(-&sys.v_bg * &vgg_pinv));
    let m = rot * &jac;
    let mut mid = Mat::zeros(mb + mg, mb + mg);
    mid.view_mut((0, 0), (mb, mb)).copy_from(&s_pinv);
    mid.view_mut((mb, mb), (mg, mg)).copy_from(&vgg_pinv);
    let sigma_joint = m.transpose() * mid * &m;
    let sigma_joint_inv = matrix::pinv(&sigma_joint, DEFAULT_RANK_TOL)?;
    let route_consistency = matrix::max_abs(&(&sigma_joint_inv - &m_bound));

    // decoupled per-block variances
    let eff_jac_b = &sys.dm_beta_dbeta - &sys.v_bg * &vgg_pinv * &sys.dm_gamma_dbeta;
    let info_bb = eff_jac_b.transpose() * &s_pinv * &eff_jac_b;
    let sigma_bb_inv = matrix::pinv(&info_bb, DEFAULT_RANK_TOL)?;
    let info_gg = sys.dm_gamma_dgamma.transpose() * &vgg_pinv * &sys.dm_gamma_dgamma;
    let sigma_gg_inv = matrix::pinv(&info_gg, DEFAULT_RANK_TOL)?;

    let off = sigma_joint_inv
        .view((0, sys.d_beta), (sys.d_beta, sys.d_gamma))
        .iter()
        .fold(0.0_f64, |a, x| a.max(x.abs()));
    let joint_bb = sigma_joint_inv
        .view((0, 0), (sys.d_beta, sys.d_beta))
        .into_owned();
    let beta_inflation_min_eig = matrix::min_symmetric_eig(&(&joint_bb - &sigma_bb_inv));

    let (cramer_rao, gap, residual) = match score {
        None => (None, None, None),
        Some(sc) => {
            let d_m = model.d_m();
            let mean_m = dist.expect(|z| model.m_full(z, nu_hat))?;
            let mean_s = dist.expect(|z| (sc.score)(z, nu_hat))?;
            if mean_s.len() != d_nu {
                return Err(Error::DimensionMismatch("score dimension mismatch".into()));
            }
            // Fisher information and the cross moment with the moments
            let fisher_flat = dist.expect(|z| {
                let s = (sc.score)(z, nu_hat);
                let mut out = Vec::with_capacity(d_nu * d_nu);
                for i in 0..d_nu {
                    for j in 0..d_nu {
                        out.push((s[i] - mean_s[i]) * (s[j] - mean_s[j]));
                    }
                }
                out
            })?;
            let fisher = Mat::from_row_slice(d_nu, d_nu, &fisher_flat);
            if matrix::rank(&fisher, DEFAULT_RANK_TOL) < d_nu {
                return Err(Error::Identification("singular information matrix".into()));
            }
            let cr = matrix::pinv(&fisher, DEFAULT_RANK_TOL)?;
            let gap = matrix::min_symmetric_eig(&(&m_bound - &cr));
            // projection of the score (as a column vector) on the moments
            let cross_flat = dist.expect(|z| {
                let s = (sc.score)(z, nu_hat);
                let m = model.m_full(z, nu_hat);
                let mut out = Vec::with_capacity(d_nu * d_m);
                for i in 0..d_nu {
                    for j in 0..d_m {
                        out.push((s[i] - mean_s[i]) * (m[j] - mean_m[j]));
                    }
                }
                out
            })?;
            let cross = Mat::from_row_slice(d_nu, d_m, &cross_flat);
            let coef = cross * matrix::pinv(&v, DEFAULT_RANK_TOL)?;
            let mut sup = 0.0_f64;
            for z in &dist.support {
                let m = crate::matrix::Vector::from_vec(model.m_full(z, nu_hat));
                let proj = &coef * m;
                let s = (sc.score)(z, nu_hat);
                for i in 0..d_nu {
                    sup = sup.max((proj[i] - (s[i] - mean_s[i])).abs());
                }
            }
            (Some(cr), Some(gap), Some(sup))
        }
    };

    Ok(BoundReport {
        sigma_joint_inv,
        sigma_bb_inv,
        sigma_gg_inv,
        m_bound,
        cramer_rao,
        gap_psd_certificate: gap,
        score_projection_residual: residual,
        off_diagonal_magnitude: off,
        route_consistency,
        beta_inflation_min_eig,
    })
}

/// Positive-semidefiniteness certificate for the variance ordering of the
/// robust-corrected moment against the efficient one.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceOrdering {
    /// Smallest eigenvalue of `cov(m_lr) - cov(m_eff)`.
    pub min_eigenvalue: f64,
    /// Largest absolute entry of the difference, for equality detection.
    pub max_abs_difference: f64,
}

/// Compares the covariance of the robust-corrected moment (with the
/// pseudoinverse weighting) against the efficient moment. Requires the
/// one-step condition, which is re-checked.
pub fn variance_ordering(
    sys: &BlockSystem,
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
) -> Result<VarianceOrdering> {
    let one_step = check_one_step(sys)?;
    if !one_step.pass {
        return Err(Error::Precondition(format!(
            "variance ordering requires the one-step condition; residual {:.3e}",
            one_step.magnitude
        )));
    }
    let scale = matrix::max_abs(sys.v_gg.mat());
    let xi_gg = PsdMatrix::new(
        matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?,
        1e-6,
        1e-6,
    )?;
    let lr = make_lr_moment(model, dist, nu_hat, &xi_gg)?;
    let eff = make_eff_moment(sys, model, dist, nu_hat)?;
    let (beta, gamma) = model.partition.split(nu_hat);
    let d_mb = sys.d_mb();
    let mean_lr = dist.expect(|z| (lr.values_fn)(z, beta, gamma))?;
    let mean_eff = dist.expect(|z| (eff.values_fn)(z, beta, gamma))?;
    let flat = dist.expect(|z| {
        let a = (lr.values_fn)(z, beta, gamma);
        let b = (eff.values_fn)(z, beta, gamma);
        let mut out = Vec::with_capacity(2 * d_mb * d_mb);
        for i in 0..d_mb {
            for j in 0..d_mb {
                out.push((a[i] - mean_lr[i]) * (a[j] - mean_lr[j]));
            }
        }
        for i in 0..d_mb {
            for j in 0..d_mb {
                out.push((b[i] - mean_eff[i]) * (b[j] - mean_eff[j]));
            }
        }
        out
    })?;
    let cov_lr = Mat::from_row_slice(d_mb, d_mb, &flat[..d_mb * d_mb]);
    let cov_eff = Mat::from_row_slice(d_mb, d_mb, &flat[d_mb * d_mb..]);
    let diff = cov_lr - cov_eff;
    Ok(VarianceOrdering {
        min_eigenvalue: matrix::min_symmetric_eig(&diff),
        max_abs_difference: matrix::max_abs(&diff),
    })
}

/// Assembles the full condition report for a system.
pub fn condition_report(
    sys: &BlockSystem,
    model: &MomentModel,
    dist: &DiscreteDistribution,
    nu_hat: &[f64],
    xi_gg: Option<&PsdMatrix>,
) -> Result<ConditionReport> {
    let lr = check_local_robustness(model, dist, nu_hat)?;
    let one = check_one_step(sys)?;
    let (two, scenario) = check_two_step(sys, model, dist, nu_hat, xi_gg)?;
    let adaptive = check_adaptive(sys)?;
    let verdicts = Verdicts {
        locally_robust: Some(lr.pass),
        eff_is_lr: Some(one.pass),
        lr_is_eff: Some(two.pass),
        adaptive_beta: Some(adaptive.adaptive_beta()),
        adaptive_gamma: Some(adaptive.adaptive_gamma()),
        scenario: Some(scenario),
    };
    Ok(ConditionReport {
        checks: vec![
            lr,
            one,
            two,
            adaptive.beta_cross,
            adaptive.beta_projected,
            adaptive.gamma_cross,
            adaptive.gamma_projected,
        ],
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::VariableBlocks;
    use crate::estimands::{
        ate_moment_model, canonical_ate, canonical_iv, iv_moment_model, AteEstimand, IvWeighting,
    };
    use crate::moments::build_block_system;
    use std::sync::Arc;

    fn ate_fixture(which: AteEstimand) -> (MomentModel, DiscreteDistribution, Vec<f64>) {
        let dgp = canonical_ate();
        let (model, nu) = ate_moment_model(&dgp, which).unwrap();
        let dist = dgp.joint().unwrap();
        (model, dist, nu)
    }

    #[test]
    fn augmented_moment_is_locally_robust() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Aipw);
        let c = check_local_robustness(&model, &dist, &nu).unwrap();
        assert!(c.pass, "magnitude {}", c.magnitude);
    }

    #[test]
    fn raw_weighting_moment_is_not() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Ipw);
        let c = check_local_robustness(&model, &dist, &nu).unwrap();
        assert!(!c.pass);
        assert!(c.magnitude > 10.0 * c.tol, "magnitude {}", c.magnitude);
    }

    #[test]
    fn one_step_passes_on_the_weighting_system() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Ipw);
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let c = check_one_step(&sys).unwrap();
        assert!(c.pass, "residual {}", c.magnitude);
        assert!(c.magnitude <= 1e-10);
    }

    #[test]
    fn two_step_passes_with_direct_nuisance() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Ipw);
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let (c, scenario) = check_two_step(&sys, &model, &dist, &nu, None).unwrap();
        assert_eq!(scenario, GammaScenario::Direct);
        assert!(c.pass, "sup {}", c.magnitude);
    }

    fn rank_overidentified_fixture() -> (MomentModel, DiscreteDistribution, Vec<f64>) {
        crate::estimands::rank_overidentified_fixture().unwrap()
    }

    #[test]
    fn rank_overidentified_fixture_classifies_and_fails_two_step() {
        let (model, dist, nu) = rank_overidentified_fixture();
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        assert_eq!(matrix::rank(sys.v_gg.mat(), DEFAULT_RANK_TOL), 2);
        let one = check_one_step(&sys).unwrap();
        assert!(one.pass, "engineered one-step residual {}", one.magnitude);
        let (two, scenario) = check_two_step(&sys, &model, &dist, &nu, None).unwrap();
        assert_eq!(scenario, GammaScenario::RankOveridentified);
        assert!(!two.pass);
        assert!(two.magnitude > 10.0 * two.tol, "sup {}", two.magnitude);
    }

    #[test]
    fn one_step_counterexample_fails_loudly() {
        let (model, dist, nu) = crate::estimands::one_step_counterexample().unwrap();
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let c = check_one_step(&sys).unwrap();
        assert!(!c.pass);
        assert!(c.magnitude > 0.1, "residual {}", c.magnitude);
    }

    #[test]
    fn adaptive_holds_for_variance_weighted_first_stage() {
        let dgp = canonical_iv();
        let (model, nu) = iv_moment_model(&dgp, IvWeighting::Gls).unwrap();
        let dist = dgp.joint().unwrap();
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let rep = check_adaptive(&sys).unwrap();
        assert!(
            rep.adaptive_beta(),
            "cross {} projected {}",
            rep.beta_cross.magnitude,
            rep.beta_projected.magnitude
        );
    }

    #[test]
    fn raw_weighting_system_fails_the_projected_condition() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Ipw);
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let rep = check_adaptive(&sys).unwrap();
        // beta_cross holds (two-step structure) but gamma_cross fails
        assert!(rep.beta_cross.pass);
        assert!(!rep.gamma_cross.pass);
        assert!(!rep.adaptive_gamma());
    }

    #[test]
    fn block_diagonal_system_is_adaptive_both_ways() {
        let dist = DiscreteDistribution::new(
            vec![
                vec![0.0, 0.0],
                vec![0.0, 2.0],
                vec![3.0, 0.0],
                vec![3.0, 2.0],
            ],
            vec![0.25; 4],
            VariableBlocks::scalar_blocks(2),
        )
        .unwrap();
        let model = MomentModel {
            partition: crate::moments::ParamPartition::new(1, 1),
            d_m_beta: 1,
            d_m_gamma: 1,
            m_beta: Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![z[0] - b[0]]),
            m_gamma: Arc::new(|z: &[f64], _b: &[f64], g: &[f64]| vec![z[1] - g[0]]),
            analytic: None,
            diff_beta: vec![crate::moments::Differentiability::Classical],
            diff_gamma: vec![crate::moments::Differentiability::Classical],
            generalized_step: None,
            gamma_direct: true,
            beta_direct: true,
        };
        let nu = vec![1.5, 1.0];
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let rep = check_adaptive(&sys).unwrap();
        assert!(rep.adaptive_beta() && rep.adaptive_gamma());
    }

    fn bernoulli_fixture() -> (MomentModel, DiscreteDistribution, Vec<f64>, ScoreModel) {
        let pi = 0.35;
        let dist =
            DiscreteDistribution::scalar_with_mass(&[0.0, 1.0], &[1.0 - pi, pi]).unwrap();
        let model = crate::moments::beta_only_model(
            1,
            1,
            Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![b[0] - z[0]]),
            vec![crate::moments::Differentiability::Classical],
            None,
        );
        let score = ScoreModel {
            score: Arc::new(move |z: &[f64], nu: &[f64]| {
                vec![(z[0] - nu[0]) / (nu[0] * (1.0 - nu[0]))]
            }),
            d_beta: 1,
        };
        (model, dist, vec![pi], score)
    }

    #[test]
    fn bernoulli_attains_the_score_bound() {
        let (model, dist, nu, score) = bernoulli_fixture();
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let rep = efficiency_bound(&sys, &model, &dist, &nu, Some(&score)).unwrap();
        let pi = nu[0];
        assert!((rep.m_bound[(0, 0)] - pi * (1.0 - pi)).abs() < 1e-9);
        assert!(rep.gap_psd_certificate.unwrap().abs() < 1e-9);
        assert!(rep.score_projection_residual.unwrap() < 1e-10);
    }

    #[test]
    fn strict_gap_with_a_non_spanning_score() {
        // mean moment with a score that mixes in a quadratic direction
        let dist = DiscreteDistribution::scalar_with_mass(&[1.0, 2.0, 3.0], &[0.2, 0.3, 0.5])
            .unwrap();
        let mean = dist.expect_scalar(|z| z[0]).unwrap();
        let var = dist.expect_scalar(|z| (z[0] - mean) * (z[0] - mean)).unwrap();
        let m3 = dist
            .expect_scalar(|z| (z[0] - mean).powi(3))
            .unwrap();
        // s = a (z - mean) + b ((z - mean)^2 - var) with cov(z, s) = 1
        let b = 0.8;
        let a = (1.0 - b * m3) / var;
        let model = crate::moments::beta_only_model(
            1,
            1,
            Arc::new(|z: &[f64], bb: &[f64], _g: &[f64]| vec![z[0] - bb[0]]),
            vec![crate::moments::Differentiability::Classical],
            None,
        );
        let score = ScoreModel {
            score: Arc::new(move |z: &[f64], _nu: &[f64]| {
                let d = z[0] - mean;
                vec![a * d + b * (d * d - var)]
            }),
            d_beta: 1,
        };
        let res =
            crate::moments::score_identity_residual(&model, &dist, &[mean], &score).unwrap();
        assert!(res < 1e-9, "score identity residual {res}");
        let sys = build_block_system(&model, &dist, &[mean], None, None).unwrap();
        let rep = efficiency_bound(&sys, &model, &dist, &[mean], Some(&score)).unwrap();
        assert!(rep.gap_psd_certificate.unwrap() > 1e-3, "gap {:?}", rep.gap_psd_certificate);
        assert!(rep.score_projection_residual.unwrap() > 1e-3);
    }

    #[test]
    fn duplicated_moments_leave_the_bound_unchanged() {
        let dist = DiscreteDistribution::scalar_with_mass(&[0.0, 1.0, 3.0], &[0.3, 0.4, 0.3])
            .unwrap();
        let mean = dist.expect_scalar(|z| z[0]).unwrap();
        let single = crate::moments::beta_only_model(
            1,
            1,
            Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![z[0] - b[0]]),
            vec![crate::moments::Differentiability::Classical],
            None,
        );
        let double = crate::moments::beta_only_model(
            1,
            2,
            Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| {
                vec![z[0] - b[0], z[0] - b[0]]
            }),
            vec![crate::moments::Differentiability::Classical; 2],
            None,
        );
        let s1 = build_block_system(&single, &dist, &[mean], None, None).unwrap();
        let s2 = build_block_system(&double, &dist, &[mean], None, None).unwrap();
        let b1 = efficiency_bound(&s1, &single, &dist, &[mean], None).unwrap();
        let b2 = efficiency_bound(&s2, &double, &dist, &[mean], None).unwrap();
        assert!((b1.m_bound[(0, 0)] - b2.m_bound[(0, 0)]).abs() < 1e-10);
    }

    #[test]
    fn sub_selection_never_improves_the_bound() {
        // full model: mean + skewness-style second row
        let dist = DiscreteDistribution::scalar_with_mass(&[0.0, 1.0, 3.0], &[0.3, 0.4, 0.3])
            .unwrap();
        let mean = dist.expect_scalar(|z| z[0]).unwrap();
        let e2 = dist.expect_scalar(|z| z[0] * z[0]).unwrap();
        let full = crate::moments::beta_only_model(
            1,
            2,
            Arc::new(move |z: &[f64], b: &[f64], _g: &[f64]| {
                vec![z[0] - b[0], z[0] * z[0] - e2 + 0.7 * (mean - b[0])]
            }),
            vec![crate::moments::Differentiability::Classical; 2],
            None,
        );
        let sub = crate::moments::beta_only_model(
            1,
            1,
            Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![z[0] - b[0]]),
            vec![crate::moments::Differentiability::Classical],
            None,
        );
        let sf = build_block_system(&full, &dist, &[mean], None, None).unwrap();
        let ss = build_block_system(&sub, &dist, &[mean], None, None).unwrap();
        let bf = efficiency_bound(&sf, &full, &dist, &[mean], None).unwrap();
        let bs = efficiency_bound(&ss, &sub, &dist, &[mean], None).unwrap();
        // variance with more rows is no larger
        assert!(bf.m_bound[(0, 0)] <= bs.m_bound[(0, 0)] + 1e-12);
    }

    #[test]
    fn variance_ordering_equality_in_the_direct_scenario() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Ipw);
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let ord = variance_ordering(&sys, &model, &dist, &nu).unwrap();
        assert!(ord.min_eigenvalue >= -1e-10);
        assert!(ord.max_abs_difference <= 1e-8, "difference {}", ord.max_abs_difference);
    }

    #[test]
    fn variance_ordering_strict_gap_when_rank_overidentified() {
        let (model, dist, nu) = rank_overidentified_fixture();
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let ord = variance_ordering(&sys, &model, &dist, &nu).unwrap();
        assert!(ord.min_eigenvalue >= -1e-10);
        assert!(ord.max_abs_difference > 1e-3, "difference {}", ord.max_abs_difference);
    }

    #[test]
    fn variance_ordering_trivial_when_already_orthogonal() {
        let dist = DiscreteDistribution::new(
            vec![
                vec![0.0, 0.0],
                vec![0.0, 2.0],
                vec![3.0, 0.0],
                vec![3.0, 2.0],
            ],
            vec![0.25; 4],
            VariableBlocks::scalar_blocks(2),
        )
        .unwrap();
        let model = MomentModel {
            partition: crate::moments::ParamPartition::new(1, 1),
            d_m_beta: 1,
            d_m_gamma: 1,
            m_beta: Arc::new(|z: &[f64], b: &[f64], _g: &[f64]| vec![z[0] - b[0]]),
            m_gamma: Arc::new(|z: &[f64], _b: &[f64], g: &[f64]| vec![z[1] - g[0]]),
            analytic: None,
            diff_beta: vec![crate::moments::Differentiability::Classical],
            diff_gamma: vec![crate::moments::Differentiability::Classical],
            generalized_step: None,
            gamma_direct: true,
            beta_direct: true,
        };
        let nu = vec![1.5, 1.0];
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let ord = variance_ordering(&sys, &model, &dist, &nu).unwrap();
        assert!(ord.max_abs_difference < 1e-10);
    }

    #[test]
    fn duplicated_first_step_moments_pass_via_row_overidentification() {
        // z2 = 1 + b with b = +-1; z1 = -2 b + w with w = +-2 independent;
        // the duplicated nuisance rows have covariance rank 1 = d_gamma and
        // the one-step condition holds by the choice E[z2] = -cov/var
        let mut support = Vec::new();
        for &b in &[-1.0, 1.0] {
            for &w in &[-2.0, 2.0] {
                support.push(vec![-2.0 * b + w, 1.0 + b]);
            }
        }
        let dist = DiscreteDistribution::new(
            support,
            vec![0.25; 4],
            VariableBlocks::scalar_blocks(2),
        )
        .unwrap();
        let model = MomentModel {
            partition: crate::moments::ParamPartition::new(1, 1),
            d_m_beta: 1,
            d_m_gamma: 2,
            m_beta: Arc::new(|z: &[f64], b: &[f64], g: &[f64]| {
                vec![z[0] + g[0] * z[1] - b[0]]
            }),
            m_gamma: Arc::new(|z: &[f64], _b: &[f64], g: &[f64]| {
                vec![z[1] - g[0], z[1] - g[0]]
            }),
            analytic: None,
            diff_beta: vec![crate::moments::Differentiability::Classical],
            diff_gamma: vec![crate::moments::Differentiability::Classical; 2],
            generalized_step: None,
            gamma_direct: false,
            beta_direct: false,
        };
        let gamma = dist.expect_scalar(|z| z[1]).unwrap();
        let beta = dist.expect_scalar(|z| z[0]).unwrap() + gamma * gamma;
        let nu = vec![beta, gamma];
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        assert_eq!(matrix::rank(sys.v_gg.mat(), DEFAULT_RANK_TOL), 1);
        let one = check_one_step(&sys).unwrap();
        assert!(one.pass, "one-step residual {}", one.magnitude);
        let (two, scenario) = check_two_step(&sys, &model, &dist, &nu, None).unwrap();
        assert_eq!(scenario, GammaScenario::RowOveridentified);
        assert!(two.pass, "sup {}", two.magnitude);
    }

    #[test]
    fn variance_ordering_requires_the_one_step_condition() {
        let dgp = canonical_ate();
        let dist = dgp.joint().unwrap();
        let (model, nu) = crate::estimands::ate_full_nuisance_model(&dgp).unwrap();
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let err = variance_ordering(&sys, &model, &dist, &nu).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn beta_variance_inflation_certificate() {
        let dgp = canonical_ate();
        let dist = dgp.joint().unwrap();
        // condition holds: no inflation
        let (m1, nu1) = crate::estimands::ate_moment_model(&dgp, AteEstimand::Ipw).unwrap();
        let s1 = build_block_system(&m1, &dist, &nu1, None, None).unwrap();
        let b1 = efficiency_bound(&s1, &m1, &dist, &nu1, None).unwrap();
        assert!(b1.beta_inflation_min_eig.abs() < 1e-8);
        // condition fails: not knowing the nuisance strictly inflates beta
        let (m2, nu2) = crate::estimands::ate_full_nuisance_model(&dgp).unwrap();
        let s2 = build_block_system(&m2, &dist, &nu2, None, None).unwrap();
        let b2 = efficiency_bound(&s2, &m2, &dist, &nu2, None).unwrap();
        assert!(b2.beta_inflation_min_eig > 1e-4, "{}", b2.beta_inflation_min_eig);
    }

    #[test]
    fn full_report_on_the_augmented_system() {
        let (model, dist, nu) = ate_fixture(AteEstimand::Aipw);
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let rep = condition_report(&sys, &model, &dist, &nu, None).unwrap();
        assert_eq!(rep.verdicts.locally_robust, Some(true));
        assert_eq!(rep.verdicts.eff_is_lr, Some(true));
        assert_eq!(rep.verdicts.lr_is_eff, Some(true));
        assert_eq!(rep.verdicts.scenario, Some(GammaScenario::Direct));
    }
}

//! Acceptance suite: every numbered criterion runs end to end at its
//! stated tolerance and prints one pass line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use riesz_core::dist::{
    ContaminationPath, DiscreteDistribution, EmpiricalSample, KernelFamily, KernelSpec,
    VariableBlocks,
};
use riesz_core::estimands::{
    ate_direct_identification, ate_moment_model, ate_quartet, build_scenario, canonical_ate,
    canonical_iv, iv_moment_model, one_step_counterexample, random_ate,
    rank_overidentified_fixture, score_equipped_fixtures, AteEstimand, IvWeighting,
    SCENARIO_NAMES,
};
use riesz_core::influence::{
    if_joint, if_multistep_direct, if_nonparametric, if_two_step, make_eff_moment,
    make_lr_moment, InfluenceTable, NonparametricTarget,
};
use riesz_core::matrix::{
    self, check_compatibility, pinv, pinv_block, penrose_residual, BlockSystem, Mat, PsdMatrix,
    DEFAULT_COMPAT_TOL, DEFAULT_RANK_TOL,
};
use riesz_core::moments::{build_block_system, score_identity_residual};
use riesz_core::oracle::{bias_order, mc_compare, verify_if, EpsGrid, McConfig, McScenario};

fn pass(criterion: u32, what: &str) {
    println!("criterion {criterion} ({what}): PASS");
}

/// 1. Pseudoinverse identities on random matrices of mixed rank, and the
/// block-factorized pseudoinverse against the direct one whenever the
/// compatibility conditions hold.
#[test]
fn criterion_1_pseudoinverse_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(20240901);
    for trial in 0..200 {
        let rows = rng.gen_range(1..=12usize);
        let cols = rng.gen_range(1..=12usize);
        // mixed exact ranks with singular values bounded away from zero,
        // so the identities are testable at full precision
        let raw = Mat::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0));
        let (u, mut s, v) = matrix::svd_factors(&raw);
        let keep = rng.gen_range(1..=rows.min(cols));
        for (k, x) in s.iter_mut().enumerate() {
            *x = if k < keep { x.max(0.3) } else { 0.0 };
        }
        let m = u * Mat::from_diagonal(&nalgebra::DVector::from_vec(s)) * v.transpose();
        let p = pinv(&m, DEFAULT_RANK_TOL).unwrap();
        let res = penrose_residual(&m, &p);
        assert!(res <= 1e-10, "trial {trial}: residual {res:.3e}");
    }

    // block systems: exact low rank with separated spectra
    let mut checked = 0usize;
    for trial in 0..200 {
        let n = rng.gen_range(2..=6usize) * 2;
        let k = rng.gen_range(1..=n);
        let raw = Mat::from_fn(n, k, |_, _| rng.gen_range(-1.5..1.5));
        let (u, s, v) = matrix::svd_factors(&raw);
        let s = Mat::from_diagonal(&nalgebra::DVector::from_vec(
            s.iter().map(|x| x.max(0.4)).collect(),
        ));
        let a = u * s * v.transpose();
        let v = &a * a.transpose();
        let half = n / 2;
        let sys = BlockSystem {
            d_beta: half,
            d_gamma: half,
            dm_beta_dbeta: -Mat::identity(half, half),
            dm_beta_dgamma: Mat::zeros(half, half),
            dm_gamma_dbeta: Mat::zeros(half, half),
            dm_gamma_dgamma: -Mat::identity(half, half),
            v_bb: PsdMatrix::new(v.view((0, 0), (half, half)).into_owned(), 1e-7, 1e-7)
                .unwrap(),
            v_gg: PsdMatrix::new(
                v.view((half, half), (half, half)).into_owned(),
                1e-7,
                1e-7,
            )
            .unwrap(),
            v_bg: v.view((0, half), (half, half)).into_owned(),
            xi_bb: None,
            xi_gg: None,
        };
        let rep = check_compatibility(&sys, DEFAULT_COMPAT_TOL).unwrap();
        if rep.pass() {
            checked += 1;
            let block = pinv_block(&sys).unwrap();
            let direct = pinv(&sys.v_full(), DEFAULT_RANK_TOL).unwrap();
            let diff = matrix::max_abs(&(block - direct));
            assert!(diff <= 1e-8, "trial {trial}: block vs direct {diff:.3e}");
        }
    }
    assert!(checked >= 25, "only {checked} compatible systems drawn");
    pass(1, "pseudoinverse identities and block factorization");
}

/// 2. Master check: the analytic influence table of every built-in
/// scenario matches the definitional finite-difference derivative along
/// every point-mass direction.
#[test]
fn criterion_2_oracle_equivalence() {
    let grid = EpsGrid::default();
    for name in SCENARIO_NAMES {
        let s = build_scenario(name).unwrap();
        let rep = verify_if(s.functional.as_ref(), &s.dist, &s.analytic, &grid).unwrap();
        assert!(
            rep.max_rel_error <= 1e-4,
            "{name}: oracle deviation {:.3e}",
            rep.max_rel_error
        );
    }
    pass(2, "oracle equivalence across all built-in scenarios");
}

/// 3. The quartet of treatment-effect identifications shares one influence
/// table, and the regression adjustment terms cancel identically.
#[test]
fn criterion_3_quartet_equality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7_654_321);
    for rep in 0..20 {
        let dgp = random_ate(&mut rng);
        let quartet = ate_quartet(&dgp).unwrap();
        let reference = quartet[0].expected_if.as_ref().unwrap().clone();
        for s in &quartet {
            let diff = s.analytic.max_diff(&reference);
            assert!(diff <= 1e-8, "rep {rep} {}: {diff:.3e}", s.name);
        }
        // the three second-block adjustment channels sum to zero pointwise
        let dist = dgp.joint().unwrap();
        let bd =
            if_multistep_direct(&ate_direct_identification(AteEstimand::Reg), &dist, None)
                .unwrap();
        for i in 0..dist.len() {
            let sum: f64 = (1..4).map(|g| bd.per_nuisance[g][i][0]).sum();
            assert!(sum.abs() <= 1e-12, "rep {rep} point {i}: {sum:.3e}");
        }
    }
    pass(3, "quartet equality and adjustment cancellation on 20 draws");
}

/// 4. The raw weighting estimand drifts at first order under a propensity
/// contamination; its robust correction drifts at second order.
#[test]
fn criterion_4_bias_order() {
    let dgp = canonical_ate();
    let dist = dgp.joint().unwrap();
    let ident = ate_direct_identification(AteEstimand::Ipw);
    let mut dir_mass = dist.mass.clone();
    for (m, z) in dir_mass.iter_mut().zip(&dist.support) {
        *m *= if z[1] == 1.0 { 1.5 } else { 0.6 };
    }
    let total: f64 = dir_mass.iter().sum();
    for m in dir_mass.iter_mut() {
        *m /= total;
    }
    let dir = DiscreteDistribution::new(dist.support.clone(), dir_mass, dist.blocks.clone())
        .unwrap();
    let path = ContaminationPath::joint(dist.clone(), dir).unwrap();
    let (raw, lr) = bias_order(&ident, &dist, &path, &EpsGrid::default()).unwrap();
    assert!(raw.reliable && raw.r_squared >= 0.98, "raw fit {raw:?}");
    assert!(lr.reliable && lr.r_squared >= 0.98, "robust fit {lr:?}");
    assert!(
        (0.85..=1.15).contains(&raw.slope),
        "raw slope {} outside [0.85, 1.15]",
        raw.slope
    );
    assert!(
        (1.75..=2.4).contains(&lr.slope),
        "robust slope {} outside [1.75, 2.4]",
        lr.slope
    );
    pass(4, "first-order raw drift, second-order corrected drift");
}

/// 5. Joint and sequential procedures coincide where the theory says so:
/// just-identified systems exactly, and through the corrected moments
/// whenever the one- and two-step conditions both hold.
#[test]
fn criterion_5_joint_sequential_equivalence() {
    // just identified: the full-nuisance augmented encoding
    let dgp = canonical_ate();
    let dist = dgp.joint().unwrap();
    let (model, nu) = riesz_core::estimands::ate_full_nuisance_model(&dgp).unwrap();
    let d_nu = model.partition.d_nu();
    let xi_full = PsdMatrix::from_mat(Mat::identity(d_nu, d_nu)).unwrap();
    let joint = if_joint(&model, &dist, &nu, &xi_full).unwrap();
    let d_gamma = model.partition.d_gamma;
    let xi_b = PsdMatrix::from_mat(Mat::identity(1, 1)).unwrap();
    let xi_g = PsdMatrix::from_mat(Mat::identity(d_gamma, d_gamma)).unwrap();
    let (gdot, bdot) = if_two_step(&model, &dist, &nu, &xi_b, &xi_g).unwrap();
    for i in 0..dist.len() {
        assert!(
            (joint.values[i][0] - bdot.values[i][0]).abs() <= 1e-10,
            "beta influence differs at point {i}"
        );
        for k in 0..d_gamma {
            assert!(
                (joint.values[i][1 + k] - gdot.values[i][k]).abs() <= 1e-10,
                "gamma influence differs at point {i}, coordinate {k}"
            );
        }
    }

    // corrected-moment equivalence on systems passing both conditions
    let mut fixtures: Vec<(String, _, _, Vec<f64>)> = Vec::new();
    let (m_ipw, nu_ipw) = ate_moment_model(&dgp, AteEstimand::Ipw).unwrap();
    fixtures.push(("ate-weighting".into(), m_ipw, dist.clone(), nu_ipw));
    for weighting in [IvWeighting::Unconditional, IvWeighting::Gls] {
        let ivd = canonical_iv();
        let (m, nu) = iv_moment_model(&ivd, weighting).unwrap();
        fixtures.push((format!("iv-{weighting:?}"), m, ivd.joint().unwrap(), nu));
    }
    for (name, model, dist, nu) in fixtures {
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let one = riesz_core::diagnostics::check_one_step(&sys).unwrap();
        let (two, _) =
            riesz_core::diagnostics::check_two_step(&sys, &model, &dist, &nu, None).unwrap();
        assert!(one.pass && two.pass, "{name}: conditions unexpectedly fail");
        let scale = matrix::max_abs(sys.v_gg.mat());
        let xi_gg = PsdMatrix::new(
            matrix::pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale).unwrap(),
            1e-6,
            1e-6,
        )
        .unwrap();
        let lr = make_lr_moment(&model, &dist, &nu, &xi_gg).unwrap();
        let eff = make_eff_moment(&sys, &model, &dist, &nu).unwrap();
        let (beta, gamma) = model.partition.split(&nu);
        for z in &dist.support {
            let a = (lr.values_fn)(z, beta, gamma);
            let b = (eff.values_fn)(z, beta, gamma);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-8, "{name}: corrected moments differ at {z:?}");
            }
        }
        // beta influence functions coincide: sequential optimal vs joint
        let schur = matrix::schur_complement(&sys).unwrap();
        let xi_bb = PsdMatrix::new(
            matrix::pinv_scaled(schur.mat(), DEFAULT_RANK_TOL, scale).unwrap(),
            1e-6,
            1e-6,
        )
        .unwrap();
        let (_, bdot) = if_two_step(&model, &dist, &nu, &xi_bb, &xi_gg).unwrap();
        let xi_opt = PsdMatrix::new(
            pinv(&sys.v_full(), DEFAULT_RANK_TOL).unwrap(),
            1e-6,
            1e-6,
        )
        .unwrap();
        let joint = if_joint(&model, &dist, &nu, &xi_opt).unwrap();
        for i in 0..dist.len() {
            assert!(
                (joint.values[i][0] - bdot.values[i][0]).abs() <= 1e-8,
                "{name}: joint and sequential beta influence differ at point {i}"
            );
        }
    }
    pass(5, "just-identified collapse and corrected-moment equivalence");
}

/// 6. The covariance of the robust-corrected moment dominates the
/// efficient one, with equality in the direct scenario and a strict gap on
/// the engineered rank-overidentified fixture.
#[test]
fn criterion_6_variance_ordering() {
    let dgp = canonical_ate();
    let dist = dgp.joint().unwrap();
    let (model, nu) = ate_moment_model(&dgp, AteEstimand::Ipw).unwrap();
    let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
    let ord = riesz_core::diagnostics::variance_ordering(&sys, &model, &dist, &nu).unwrap();
    assert!(ord.min_eigenvalue >= -1e-10);
    assert!(ord.max_abs_difference <= 1e-8, "direct case should be equality");

    for weighting in [IvWeighting::Unconditional, IvWeighting::Gls] {
        let ivd = canonical_iv();
        let (m, nu) = iv_moment_model(&ivd, weighting).unwrap();
        let d = ivd.joint().unwrap();
        let sys = build_block_system(&m, &d, &nu, None, None).unwrap();
        let ord = riesz_core::diagnostics::variance_ordering(&sys, &m, &d, &nu).unwrap();
        assert!(ord.min_eigenvalue >= -1e-10, "{weighting:?}");
        assert!(ord.max_abs_difference <= 1e-8, "{weighting:?}: row case is equality");
    }

    let (model, dist, nu) = rank_overidentified_fixture().unwrap();
    let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
    let ord = riesz_core::diagnostics::variance_ordering(&sys, &model, &dist, &nu).unwrap();
    assert!(ord.min_eigenvalue >= -1e-10);
    assert!(
        ord.max_abs_difference > 1e-3,
        "engineered fixture should show a strict gap, got {:.3e}",
        ord.max_abs_difference
    );
    pass(6, "variance ordering with equality and strict-gap cases");
}

/// 7. The moment-limited bound dominates the score bound, attains it when
/// the moments span the score, and the expected-Jacobian identity against
/// the score holds on every score-equipped fixture.
#[test]
fn criterion_7_efficiency_bound() {
    for (name, model, dist, nu, score) in score_equipped_fixtures().unwrap() {
        let res = score_identity_residual(&model, &dist, &nu, &score).unwrap();
        assert!(res <= 1e-6, "{name}: Jacobian-score identity residual {res:.3e}");
        let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
        let rep =
            riesz_core::diagnostics::efficiency_bound(&sys, &model, &dist, &nu, Some(&score))
                .unwrap();
        assert!(
            rep.gap_psd_certificate.unwrap() >= -1e-10,
            "{name}: bound falls below the score bound"
        );
        if name.contains("bernoulli") || name.contains("cell") {
            assert!(
                rep.gap_psd_certificate.unwrap().abs() <= 1e-9,
                "{name}: spanned moments must attain the bound"
            );
            assert!(
                rep.score_projection_residual.unwrap() <= 1e-10,
                "{name}: projection residual {:.3e}",
                rep.score_projection_residual.unwrap()
            );
        }
        if name.contains("tilted") {
            assert!(rep.gap_psd_certificate.unwrap() > 1e-3, "{name}: gap expected");
        }
    }
    pass(7, "score bound domination, attainment, and the Jacobian identity");
}

/// 8. The simulated variance of the augmented estimator matches the
/// enumerated influence variance, and reports are byte-identical across
/// parallelism degrees.
#[test]
fn criterion_8_monte_carlo_consistency() {
    let dgp = canonical_ate();
    let s = build_scenario("ate-aipw").unwrap();
    let functional = s.functional.clone();
    let est = Arc::new(move |sample: &EmpiricalSample| {
        functional.eval(&sample.to_discrete()?, None)
    });
    let weights = s.dist.mass.clone();
    let mk = || McScenario {
        name: "ate-aipw".into(),
        dgp: dgp.joint().unwrap(),
        truth: s.truth.clone(),
        estimator: est.clone(),
        if_variance: s.analytic.covariance(&weights),
    };
    let cfg = McConfig {
        replications: 500,
        sample_size: 2000,
        master_seed: 2024,
        parallel: true,
    };
    let rep = mc_compare(&[mk()], &cfg).unwrap();
    let r = &rep.scenarios[0];
    assert_eq!(r.failures, 0);
    let gap = (r.n_variance[0] - r.if_variance_diag[0]).abs();
    assert!(
        gap <= 3.0 * r.n_variance_se[0],
        "n-variance {} vs enumerated {} (se {})",
        r.n_variance[0],
        r.if_variance_diag[0],
        r.n_variance_se[0]
    );
    let serial_cfg = McConfig { parallel: false, ..cfg.clone() };
    let rep2 = mc_compare(&[mk()], &serial_cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&rep.scenarios).unwrap(),
        serde_json::to_string(&rep2.scenarios).unwrap(),
        "reports must not depend on the parallelism degree"
    );
    pass(8, "simulated variance matches the table; deterministic reports");
}

/// 9. The bandwidth-rescaled variance of the kernel-regression influence
/// table sits within ten percent of its closed-form limit.
#[test]
fn criterion_9_nonparametric_variance() {
    let n = 10_000usize;
    let b = 0.5f64;
    let (sx, sigma) = (3.0f64, 0.5f64);
    let mut rng = ChaCha8Rng::seed_from_u64(99_177);
    let mut gauss = move || {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sx * gauss();
        let y = 1.0 + 0.1 * x + sigma * gauss();
        data.push(vec![x, y]);
    }
    let blocks = VariableBlocks::new(vec![1, 1], vec!["x".into(), "y".into()]).unwrap();
    let sample = EmpiricalSample::new(data, blocks, None).unwrap();
    let spec = KernelSpec::new(KernelFamily::Gaussian, b, 1).unwrap();
    let out = if_nonparametric(&spec, &sample, NonparametricTarget::Regression, &[0.0]).unwrap();
    let density_at_zero = 1.0 / (sx * (2.0 * std::f64::consts::PI).sqrt());
    let kernel_square_integral = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
    let target = sigma * sigma / density_at_zero * kernel_square_integral;
    let ratio = out.rescaled_variance / target;
    assert!(
        (0.9..=1.1).contains(&ratio),
        "rescaled variance {} vs limit {target} (ratio {ratio})",
        out.rescaled_variance
    );
    pass(9, "kernel-regression rescaled variance within ten percent");
}

/// 10. Negative controls fail loudly: a shifted influence table, the raw
/// weighting moment, and the engineered one-step counterexample.
#[test]
fn criterion_10_negative_controls() {
    let grid = EpsGrid::default();
    let s = build_scenario("ate-ipw").unwrap();
    let wrong = InfluenceTable {
        values: s.analytic.values.iter().map(|v| vec![v[0] + 1.0]).collect(),
        dim: 1,
        mean_certificate: 1.0,
    };
    let rep = verify_if(s.functional.as_ref(), &s.dist, &wrong, &grid).unwrap();
    assert!(
        rep.max_rel_error > 10.0 * 1e-4,
        "shifted table must fail the oracle, got {:.3e}",
        rep.max_rel_error
    );

    let dgp = canonical_ate();
    let dist = dgp.joint().unwrap();
    let (model, nu) = ate_moment_model(&dgp, AteEstimand::Ipw).unwrap();
    let lr = riesz_core::diagnostics::check_local_robustness(&model, &dist, &nu).unwrap();
    assert!(!lr.pass);
    assert!(lr.magnitude > 10.0 * lr.tol, "magnitude {:.3e}", lr.magnitude);

    let (model, dist, nu) = one_step_counterexample().unwrap();
    let sys = build_block_system(&model, &dist, &nu, None, None).unwrap();
    let one = riesz_core::diagnostics::check_one_step(&sys).unwrap();
    assert!(!one.pass);
    assert!(one.magnitude > 10.0 * one.tol, "magnitude {:.3e}", one.magnitude);
    pass(10, "negative controls fail with reported magnitudes");
}

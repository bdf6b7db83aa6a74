//! Dense-matrix kernel: tolerance-aware pseudoinverse, block decomposition,
//! Schur complements, compatibility checks and covariance projections.
//!
//! Everything here is exact linear algebra at a declared numerical rank; the
//! singular value decomposition is the single primitive all of it rests on.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::influence::InfluenceTable;

/// Dense real matrix, row-major semantics.
pub type Mat = DMatrix<f64>;
/// Dense real column vector.
pub type Vector = DVector<f64>;

/// Default relative cutoff for numerical rank decisions.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
/// Default tolerance on the compatibility conditions (max absolute entry).
pub const DEFAULT_COMPAT_TOL: f64 = 1e-8;
/// Default allowed asymmetry for a matrix claimed symmetric.
pub const DEFAULT_SYMMETRY_TOL: f64 = 1e-8;
/// Default floor on negative eigenvalues of a matrix claimed PSD.
pub const DEFAULT_EIG_FLOOR: f64 = 1e-8;

/// Largest absolute entry; zero for empty matrices.
pub fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0_f64, |a, &x| a.max(x.abs()))
}

fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Thin singular value decomposition `M = U diag(s) V^T` by one-sided
/// Jacobi rotations. Values are sorted descending. Slower than a
/// bidiagonalization for large matrices but accurate to roundoff on exact
/// rank deficiency, where faster routines can misconverge.
pub fn svd_factors(m: &Mat) -> (Mat, Vec<f64>, Mat) {
    if m.nrows() < m.ncols() {
        let (u, s, v) = svd_factors(&m.transpose());
        return (v, s, u);
    }
    let (rows, cols) = m.shape();
    let mut w = m.clone();
    let mut v = Mat::identity(cols, cols);
    let tol = 1e-15;
    for _sweep in 0..64 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..rows {
                    app += w[(r, p)] * w[(r, p)];
                    aqq += w[(r, q)] * w[(r, q)];
                    apq += w[(r, p)] * w[(r, q)];
                }
                if apq.abs() <= tol * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let wp = w[(r, p)];
                    let wq = w[(r, q)];
                    w[(r, p)] = c * wp - s * wq;
                    w[(r, q)] = s * wp + c * wq;
                }
                for r in 0..cols {
                    let vp = v[(r, p)];
                    let vq = v[(r, q)];
                    v[(r, p)] = c * vp - s * vq;
                    v[(r, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    // column norms are the singular values; sort descending
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols).map(|j| w.column(j).norm()).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());
    let mut u = Mat::zeros(rows, cols);
    let mut vs = Mat::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..rows {
                u[(r, k)] = w[(r, j)] / s;
            }
        }
        for r in 0..cols {
            vs[(r, k)] = v[(r, j)];
        }
    }
    (u, sigma, vs)
}

/// Moore-Penrose pseudoinverse via SVD. Singular values below
/// `rank_tol * sigma_max` are treated as exact zeros.
pub fn pinv(m: &Mat, rank_tol: f64) -> Result<Mat> {
    pinv_scaled(m, rank_tol, 0.0)
}

/// Pseudoinverse whose rank cutoff is taken relative to
/// `max(sigma_max, scale_hint)`. A block extracted from a larger matrix
/// can be pure rounding noise; cutting at the scale of the parent matrix
/// zeroes it instead of inverting the noise.
pub fn pinv_scaled(m: &Mat, rank_tol: f64, scale_hint: f64) -> Result<Mat> {
    ensure_finite(m, "matrix")?;
    if rank_tol <= 0.0 {
        return Err(Error::invalid("rank_tol must be positive"));
    }
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(Mat::zeros(m.ncols(), m.nrows()));
    }
    let (u, sigma, v) = svd_factors(m);
    let smax = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let cut = rank_tol * smax.max(scale_hint);
    let sinv = Mat::from_diagonal(&Vector::from_vec(
        sigma
            .iter()
            .map(|&s| if s > cut && s > 0.0 { 1.0 / s } else { 0.0 })
            .collect(),
    ));
    Ok(v * sinv * u.transpose())
}

/// Numerical rank under the same cutoff rule as [`pinv`].
pub fn rank(m: &Mat, rank_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let (_, sigma, _) = svd_factors(m);
    let smax = sigma.iter().cloned().fold(0.0_f64, f64::max);
    sigma.iter().filter(|&&s| s > rank_tol * smax && s > 0.0).count()
}

/// Worst violation of the four defining identities of the pseudoinverse,
/// relative to the scale of `m`.
pub fn penrose_residual(m: &Mat, p: &Mat) -> f64 {
    let scale = max_abs(m).max(1.0);
    let r1 = max_abs(&(m * p * m - m)) / scale;
    let pscale = max_abs(p).max(1.0);
    let r2 = max_abs(&(p * m * p - p)) / pscale;
    let mp = m * p;
    let r3 = max_abs(&(&mp - mp.transpose()));
    let pm = p * m;
    let r4 = max_abs(&(&pm - pm.transpose()));
    r1.max(r2).max(r3).max(r4)
}

/// Smallest eigenvalue of the symmetrized matrix.
pub fn min_symmetric_eig(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Square matrix validated to be symmetric and positive semi-definite
/// within declared tolerances. Stored symmetrized as `(A + A^T)/2`.
#[derive(Debug, Clone)]
pub struct PsdMatrix {
    base: Mat,
    pub symmetry_tol: f64,
    pub eig_floor: f64,
}

impl PsdMatrix {
    pub fn new(base: Mat, symmetry_tol: f64, eig_floor: f64) -> Result<Self> {
        ensure_finite(&base, "psd matrix")?;
        if base.nrows() != base.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "psd matrix must be square, got {}x{}",
                base.nrows(),
                base.ncols()
            )));
        }
        let asym = max_abs(&(&base - base.transpose()));
        if asym > symmetry_tol {
            return Err(Error::invalid(format!(
                "asymmetry {asym:.3e} exceeds tolerance {symmetry_tol:.3e}"
            )));
        }
        let sym = (&base + base.transpose()) * 0.5;
        let min_eig = min_symmetric_eig(&sym);
        if min_eig < -eig_floor {
            return Err(Error::invalid(format!(
                "minimum eigenvalue {min_eig:.3e} below -{eig_floor:.3e}"
            )));
        }
        Ok(PsdMatrix { base: sym, symmetry_tol, eig_floor })
    }

    pub fn from_mat(base: Mat) -> Result<Self> {
        Self::new(base, DEFAULT_SYMMETRY_TOL, DEFAULT_EIG_FLOOR)
    }

    pub fn mat(&self) -> &Mat {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }
}

/// Partitioned Jacobian and second-moment blocks of a moment system, plus
/// optional weighting matrices for each block of parameters.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub d_beta: usize,
    pub d_gamma: usize,
    /// E[d m_beta / d beta], shape d_mb x d_beta.
    pub dm_beta_dbeta: Mat,
    /// E[d m_beta / d gamma], shape d_mb x d_gamma.
    pub dm_beta_dgamma: Mat,
    /// E[d m_gamma / d beta], shape d_mg x d_beta.
    pub dm_gamma_dbeta: Mat,
    /// E[d m_gamma / d gamma], shape d_mg x d_gamma.
    pub dm_gamma_dgamma: Mat,
    pub v_bb: PsdMatrix,
    pub v_gg: PsdMatrix,
    /// Cross second-moment block, shape d_mb x d_mg.
    pub v_bg: Mat,
    pub xi_bb: Option<PsdMatrix>,
    pub xi_gg: Option<PsdMatrix>,
}

impl BlockSystem {
    pub fn d_mb(&self) -> usize {
        self.v_bb.dim()
    }

    pub fn d_mg(&self) -> usize {
        self.v_gg.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (mb, mg) = (self.d_mb(), self.d_mg());
        let checks = [
            (self.dm_beta_dbeta.shape(), (mb, self.d_beta), "dm_beta_dbeta"),
            (self.dm_beta_dgamma.shape(), (mb, self.d_gamma), "dm_beta_dgamma"),
            (self.dm_gamma_dbeta.shape(), (mg, self.d_beta), "dm_gamma_dbeta"),
            (self.dm_gamma_dgamma.shape(), (mg, self.d_gamma), "dm_gamma_dgamma"),
            (self.v_bg.shape(), (mb, mg), "v_bg"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name}: got {}x{}, want {}x{}",
                    got.0, got.1, want.0, want.1
                )));
            }
        }
        Ok(())
    }

    /// Stacked Jacobian E[dm/dnu], shape (d_mb + d_mg) x (d_beta + d_gamma).
    pub fn jacobian(&self) -> Mat {
        let (mb, mg) = (self.d_mb(), self.d_mg());
        let mut j = Mat::zeros(mb + mg, self.d_beta + self.d_gamma);
        j.view_mut((0, 0), (mb, self.d_beta)).copy_from(&self.dm_beta_dbeta);
        j.view_mut((0, self.d_beta), (mb, self.d_gamma)).copy_from(&self.dm_beta_dgamma);
        j.view_mut((mb, 0), (mg, self.d_beta)).copy_from(&self.dm_gamma_dbeta);
        j.view_mut((mb, self.d_beta), (mg, self.d_gamma)).copy_from(&self.dm_gamma_dgamma);
        j
    }

    /// Assembled second-moment matrix of the stacked moment vector.
    pub fn v_full(&self) -> Mat {
        let (mb, mg) = (self.d_mb(), self.d_mg());
        let mut v = Mat::zeros(mb + mg, mb + mg);
        v.view_mut((0, 0), (mb, mb)).copy_from(self.v_bb.mat());
        v.view_mut((0, mb), (mb, mg)).copy_from(&self.v_bg);
        v.view_mut((mb, 0), (mg, mb)).copy_from(&self.v_bg.transpose());
        v.view_mut((mb, mb), (mg, mg)).copy_from(self.v_gg.mat());
        v
    }
}

/// Natural scale of a block system's covariance entries, used to anchor
/// rank decisions for blocks that are exactly degenerate.
fn v_scale(sys: &BlockSystem) -> f64 {
    max_abs(sys.v_bb.mat())
        .max(max_abs(sys.v_gg.mat()))
        .max(max_abs(&sys.v_bg))
}

/// Schur complement of the gamma block: `S_bb = V_bb - V_bg V_gg^+ V_gb`.
pub fn schur_complement(sys: &BlockSystem) -> Result<PsdMatrix> {
    sys.validate()?;
    if sys.d_mg() == 0 {
        return Ok(sys.v_bb.clone());
    }
    let vgg_pinv = pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, v_scale(sys))?;
    let s = sys.v_bb.mat() - &sys.v_bg * vgg_pinv * sys.v_bg.transpose();
    // The complement of a PSD matrix can pick up small negative eigenvalues
    // from the pseudoinverse cutoff; admit them up to a loose floor.
    PsdMatrix::new(s, 1e-6, 1e-6)
}

/// Magnitudes and verdicts for the two block-pseudoinverse conditions.
#[derive(Debug, Clone, Serialize)]
pub struct CompatibilityReport {
    /// Max abs entry of `V_bg (I - V_gg^+ V_gg)`.
    pub cond1_magnitude: f64,
    /// Max abs entry of `(I - S_bb S_bb^+) V_bg`.
    pub cond2_magnitude: f64,
    pub tol: f64,
    pub cond1_pass: bool,
    pub cond2_pass: bool,
}

impl CompatibilityReport {
    pub fn pass(&self) -> bool {
        self.cond1_pass && self.cond2_pass
    }
}

/// Checks whether the cross block is compatible with the diagonal blocks,
/// i.e. whether the closed-form block pseudoinverse is valid.
///
/// Both conditions are reported with magnitudes; the second one is never
/// assumed from positive semi-definiteness and is always measured.
pub fn check_compatibility(sys: &BlockSystem, tol: f64) -> Result<CompatibilityReport> {
    sys.validate()?;
    if sys.d_mg() == 0 || sys.d_mb() == 0 {
        return Ok(CompatibilityReport {
            cond1_magnitude: 0.0,
            cond2_magnitude: 0.0,
            tol,
            cond1_pass: true,
            cond2_pass: true,
        });
    }
    let scale = v_scale(sys);
    let vgg = sys.v_gg.mat();
    let vgg_pinv = pinv_scaled(vgg, DEFAULT_RANK_TOL, scale)?;
    let eye_g = Mat::identity(sys.d_mg(), sys.d_mg());
    let c1 = &sys.v_bg * (eye_g - &vgg_pinv * vgg);
    let s_bb = schur_complement(sys)?;
    let s_pinv = pinv_scaled(s_bb.mat(), DEFAULT_RANK_TOL, scale)?;
    let eye_b = Mat::identity(sys.d_mb(), sys.d_mb());
    let c2 = (eye_b - s_bb.mat() * s_pinv) * &sys.v_bg;
    let m1 = max_abs(&c1);
    let m2 = max_abs(&c2);
    Ok(CompatibilityReport {
        cond1_magnitude: m1,
        cond2_magnitude: m2,
        tol,
        cond1_pass: m1 <= tol,
        cond2_pass: m2 <= tol,
    })
}

/// Pseudoinverse of the assembled second-moment matrix through its
/// three-factor block form. Valid only under compatibility, which is
/// checked and reported on failure.
pub fn pinv_block(sys: &BlockSystem) -> Result<Mat> {
    let report = check_compatibility(sys, DEFAULT_COMPAT_TOL)?;
    if !report.pass() {
        return Err(Error::Precondition(format!(
            "block pseudoinverse needs compatibility: cond1 {:.3e}, cond2 {:.3e}, tol {:.3e}",
            report.cond1_magnitude, report.cond2_magnitude, report.tol
        )));
    }
    let (mb, mg) = (sys.d_mb(), sys.d_mg());
    if mg == 0 {
        return pinv(sys.v_bb.mat(), DEFAULT_RANK_TOL);
    }
    let scale = v_scale(sys);
    let vgg_pinv = pinv_scaled(sys.v_gg.mat(), DEFAULT_RANK_TOL, scale)?;
    let s_pinv = pinv_scaled(schur_complement(sys)?.mat(), DEFAULT_RANK_TOL, scale)?;
    let n = mb + mg;
    let mut left = Mat::identity(n, n);
    left.view_mut((mb, 0), (mg, mb))
        .copy_from(&(-&vgg_pinv * sys.v_bg.transpose()));
    let mut mid = Mat::zeros(n, n);
    mid.view_mut((0, 0), (mb, mb)).copy_from(&s_pinv);
    mid.view_mut((mb, mb), (mg, mg)).copy_from(&vgg_pinv);
    let mut right = Mat::identity(n, n);
    right
        .view_mut((0, mb), (mb, mg))
        .copy_from(&(-&sys.v_bg * &vgg_pinv));
    Ok(left * mid * right)
}

/// Pointwise L2 projection of `f` on the span of `g`:
/// `Pi(f|g)(z) = <f,g^T> <g,g^T>^+ g(z)`.
///
/// `cov_fg` must be the covariance of f with g (d_f x d_g) and `cov_gg`
/// the covariance of g with itself.
pub fn project(
    cov_fg: &Mat,
    cov_gg: &PsdMatrix,
    g_values: &InfluenceTable,
    weights: &[f64],
) -> Result<InfluenceTable> {
    ensure_finite(cov_fg, "cov_fg")?;
    if cov_fg.ncols() != cov_gg.dim() || cov_gg.dim() != g_values.dim {
        return Err(Error::DimensionMismatch(format!(
            "project: cov_fg is {}x{}, cov_gg is {}x{}, g dimension {}",
            cov_fg.nrows(),
            cov_fg.ncols(),
            cov_gg.dim(),
            cov_gg.dim(),
            g_values.dim
        )));
    }
    let coef = cov_fg * pinv(cov_gg.mat(), DEFAULT_RANK_TOL)?;
    let values: Vec<Vec<f64>> = g_values
        .values
        .iter()
        .map(|g| {
            let gv = Vector::from_column_slice(g);
            (&coef * gv).iter().cloned().collect()
        })
        .collect();
    InfluenceTable::new(values, weights, 1e-8)
}

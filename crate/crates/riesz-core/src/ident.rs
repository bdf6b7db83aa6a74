//! Identification structures for multi-step estimands: nuisance parameters
//! identified under conditional measures, arranged in a dependency graph,
//! with the machinery to evaluate them under arbitrary finite laws and to
//! propagate localized perturbations through the graph.
//!
//! A nuisance here is a scalar-valued function of the conditioning prefix
//! `Z^(j-1:1)` of its identifying block `j`: its value at a realized prefix
//! is the conditional mean of an integrand which may read other, earlier
//! evaluated nuisances (at the point's own prefix or at a transformed
//! argument). The parameter of interest is a smooth combination of
//! unconditional means of row functions over the same graph.

use std::collections::HashMap;
use std::sync::Arc;

use crate::dist::{float_key, DiscreteDistribution};
use crate::error::{Error, Result};
use crate::matrix::Mat;

/// Scalar evaluator on a support point with referenced nuisance values.
pub type PointFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Maps a support point to the argument at which a reference is read.
pub type ArgMapFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Smooth combiner of inner means and its optional analytic Jacobian.
pub type CombineFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type CombineJacFn = Arc<dyn Fn(&[f64]) -> Mat + Send + Sync>;

/// A read of nuisance `target`, either at the point's own conditioning
/// prefix (`arg_map = None`) or at a transformed argument.
#[derive(Clone)]
pub struct NuisanceRef {
    pub target: usize,
    pub arg_map: Option<ArgMapFn>,
}

impl NuisanceRef {
    pub fn own(target: usize) -> Self {
        NuisanceRef { target, arg_map: None }
    }

    pub fn at(target: usize, arg_map: ArgMapFn) -> Self {
        NuisanceRef { target, arg_map: Some(arg_map) }
    }
}

/// A conditional-mean nuisance: `value(prefix) = E[integrand | prefix]`
/// under the conditional measure of block `block` given blocks before it.
#[derive(Clone)]
pub struct Nuisance {
    pub name: String,
    /// 1-based identifying block; the conditioning prefix is blocks
    /// `1..block-1` (empty for `block = 1`, i.e. an unconditional mean).
    pub block: usize,
    pub refs: Vec<NuisanceRef>,
    /// `(z, ref_values) -> value`.
    pub integrand: PointFn,
    /// Analytic partials of the integrand in each referenced value;
    /// finite differences are used when absent.
    pub partials: Option<Vec<PointFn>>,
}

/// One scalar inner mean `mu_i = E[h_i(Z, refs)]`.
#[derive(Clone)]
pub struct InnerRow {
    pub refs: Vec<NuisanceRef>,
    pub h: PointFn,
    pub partials: Option<Vec<PointFn>>,
}

/// Outer map from inner means to the parameter of interest.
#[derive(Clone)]
pub enum Combiner {
    Identity,
    Smooth { dim_out: usize, f: CombineFn, jac: Option<CombineJacFn> },
}

impl Combiner {
    pub fn dim_out(&self, n_rows: usize) -> usize {
        match self {
            Combiner::Identity => n_rows,
            Combiner::Smooth { dim_out, .. } => *dim_out,
        }
    }

    pub fn apply(&self, mus: &[f64]) -> Vec<f64> {
        match self {
            Combiner::Identity => mus.to_vec(),
            Combiner::Smooth { f, .. } => f(mus),
        }
    }

    pub fn jacobian(&self, mus: &[f64]) -> Mat {
        match self {
            Combiner::Identity => Mat::identity(mus.len(), mus.len()),
            Combiner::Smooth { dim_out, f, jac } => match jac {
                Some(j) => j(mus),
                None => {
                    let mut m = Mat::zeros(*dim_out, mus.len());
                    for k in 0..mus.len() {
                        let h = f64::EPSILON.cbrt() * mus[k].abs().max(1.0);
                        let xp = mus[k] + h;
                        let xm = mus[k] - h;
                        let mut plus = mus.to_vec();
                        plus[k] = xp;
                        let mut minus = mus.to_vec();
                        minus[k] = xm;
                        let fp = f(&plus);
                        let fm = f(&minus);
                        for i in 0..*dim_out {
                            m[(i, k)] = (fp[i] - fm[i]) / (xp - xm);
                        }
                    }
                    m
                }
            },
        }
    }
}

/// Direct identification of the parameter: `beta = phi(E[h_1], .., E[h_k])`
/// where the rows read nuisances identified under conditional measures.
#[derive(Clone)]
pub struct DirectIdentification {
    pub nuisances: Vec<Nuisance>,
    pub rows: Vec<InnerRow>,
    pub combine: Combiner,
}

impl DirectIdentification {
    pub fn validate(&self) -> Result<()> {
        for (i, n) in self.nuisances.iter().enumerate() {
            if n.block == 0 {
                return Err(Error::invalid(format!("nuisance {} has block 0", n.name)));
            }
            for r in &n.refs {
                if r.target >= i {
                    return Err(Error::invalid(format!(
                        "nuisance {} reads nuisance {} before it is evaluated",
                        n.name, r.target
                    )));
                }
            }
            if let Some(p) = &n.partials {
                if p.len() != n.refs.len() {
                    return Err(Error::invalid("partials misaligned with refs"));
                }
            }
        }
        for row in &self.rows {
            for r in &row.refs {
                if r.target >= self.nuisances.len() {
                    return Err(Error::invalid("row reads an unknown nuisance"));
                }
            }
        }
        Ok(())
    }

    pub fn d_beta(&self) -> usize {
        self.combine.dim_out(self.rows.len())
    }
}

/// Nuisance values keyed by the canonical bits of their argument.
pub type NuisanceField = Vec<HashMap<Vec<u64>, f64>>;

/// Argument coordinates at which reference `r` of some row or integrand is
/// read, for support point `z`.
fn ref_arg(nuisances: &[Nuisance], dist: &DiscreteDistribution, r: &NuisanceRef, z: &[f64]) -> Vec<f64> {
    match &r.arg_map {
        Some(f) => f(z),
        None => {
            let p = dist.blocks.prefix_dim(nuisances[r.target].block - 1);
            z[..p].to_vec()
        }
    }
}

fn lookup(field: &NuisanceField, target: usize, arg: &[f64]) -> Result<f64> {
    field[target].get(&float_key(arg)).copied().ok_or_else(|| {
        Error::Domain(format!("nuisance {target} has no value at argument {arg:?}"))
    })
}

/// Values of every reference of `refs` at point `z`.
fn ref_values(
    nuisances: &[Nuisance],
    dist: &DiscreteDistribution,
    field: &NuisanceField,
    refs: &[NuisanceRef],
    z: &[f64],
) -> Result<Vec<f64>> {
    refs.iter()
        .map(|r| lookup(field, r.target, &ref_arg(nuisances, dist, r, z)))
        .collect()
}

/// Evaluates all nuisances under `dist` in declaration order.
pub fn nuisance_field(nuisances: &[Nuisance], dist: &DiscreteDistribution) -> Result<NuisanceField> {
    let mut field: NuisanceField = Vec::with_capacity(nuisances.len());
    for n in nuisances {
        let p = dist.blocks.prefix_dim(n.block - 1);
        let groups = dist.prefix_groups(p);
        let mut values = HashMap::new();
        for grp in &groups {
            if grp.mass <= 0.0 {
                return Err(Error::Domain(format!(
                    "nuisance {} conditions on zero-mass prefix {:?}",
                    n.name, grp.prefix
                )));
            }
            let mut acc = 0.0;
            for &i in &grp.members {
                let z = &dist.support[i];
                let inputs = ref_values(nuisances, dist, &field, &n.refs, z)?;
                let v = (n.integrand)(z, &inputs);
                if !v.is_finite() {
                    return Err(Error::Evaluation(format!(
                        "nuisance {} integrand not finite at {z:?}",
                        n.name
                    )));
                }
                acc += dist.mass[i] * v;
            }
            values.insert(float_key(&grp.prefix), acc / grp.mass);
        }
        field.push(values);
    }
    Ok(field)
}

/// Inner-row values per support point given a nuisance field.
pub fn row_values(
    ident: &DirectIdentification,
    dist: &DiscreteDistribution,
    field: &NuisanceField,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ident.rows.len());
    for row in &ident.rows {
        let mut vals = Vec::with_capacity(dist.len());
        for z in &dist.support {
            let inputs = ref_values(&ident.nuisances, dist, field, &row.refs, z)?;
            let v = (row.h)(z, &inputs);
            if !v.is_finite() {
                return Err(Error::Evaluation(format!("row value not finite at {z:?}")));
            }
            vals.push(v);
        }
        out.push(vals);
    }
    Ok(out)
}

/// Result of evaluating the estimand under a law.
pub struct DirectEval {
    pub beta: Vec<f64>,
    pub mus: Vec<f64>,
    pub field: NuisanceField,
}

/// Full evaluation of the estimand under any law with matching blocks.
pub fn eval_direct(ident: &DirectIdentification, dist: &DiscreteDistribution) -> Result<DirectEval> {
    let field = nuisance_field(&ident.nuisances, dist)?;
    let rows = row_values(ident, dist, &field)?;
    let mus: Vec<f64> = rows
        .iter()
        .map(|vals| {
            vals.iter()
                .zip(&dist.mass)
                .map(|(v, m)| v * m)
                .sum::<f64>()
        })
        .collect();
    let beta = ident.combine.apply(&mus);
    Ok(DirectEval { beta, mus, field })
}

fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = f64::EPSILON.cbrt() * x.abs().max(1.0);
    let xp = x + h;
    let xm = x - h;
    (f(xp) - f(xm)) / (xp - xm)
}

/// Partial of a row or integrand in referenced value `k` at point `z`.
fn partial(
    h: &PointFn,
    partials: &Option<Vec<PointFn>>,
    k: usize,
    z: &[f64],
    inputs: &[f64],
) -> f64 {
    match partials {
        Some(p) => (p[k])(z, inputs),
        None => fd(
            |x| {
                let mut v = inputs.to_vec();
                v[k] = x;
                (h)(z, &v)
            },
            inputs[k],
        ),
    }
}

/// Precomputed grouping of a law by every nuisance prefix plus the resolved
/// argument groups of every reference.
pub struct GraphContext<'a> {
    pub ident: &'a DirectIdentification,
    pub dist: &'a DiscreteDistribution,
    /// Per nuisance: group id of each support point under its own prefix.
    pub own_group: Vec<Vec<usize>>,
    /// Per nuisance: group masses and canonical keys.
    pub group_mass: Vec<Vec<f64>>,
    pub group_key: Vec<Vec<Vec<u64>>>,
    pub key_to_group: Vec<HashMap<Vec<u64>, usize>>,
}

impl<'a> GraphContext<'a> {
    pub fn new(ident: &'a DirectIdentification, dist: &'a DiscreteDistribution) -> Result<Self> {
        ident.validate()?;
        let mut own_group = Vec::new();
        let mut group_mass = Vec::new();
        let mut group_key = Vec::new();
        let mut key_to_group = Vec::new();
        for n in &ident.nuisances {
            let p = dist.blocks.prefix_dim(n.block - 1);
            let groups = dist.prefix_groups(p);
            let ids = dist.prefix_group_ids(p);
            let masses: Vec<f64> = groups.iter().map(|g| g.mass).collect();
            let keys: Vec<Vec<u64>> = groups.iter().map(|g| float_key(&g.prefix)).collect();
            let map: HashMap<Vec<u64>, usize> =
                keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
            own_group.push(ids);
            group_mass.push(masses);
            group_key.push(keys);
            key_to_group.push(map);
        }
        Ok(GraphContext { ident, dist, own_group, group_mass, group_key, key_to_group })
    }

    /// Group of nuisance `target` hit by reference `r` at point index `i`.
    fn ref_group(&self, r: &NuisanceRef, i: usize) -> Result<usize> {
        match &r.arg_map {
            None => Ok(self.own_group[r.target][i]),
            Some(f) => {
                let arg = f(&self.dist.support[i]);
                self.key_to_group[r.target]
                    .get(&float_key(&arg))
                    .copied()
                    .ok_or_else(|| {
                        Error::Domain(format!(
                            "reference argument {arg:?} not realized for nuisance {}",
                            self.ident.nuisances[r.target].name
                        ))
                    })
            }
        }
    }
}

/// Adjoint sensitivities of every inner mean to a unit shift of each
/// nuisance value, localized per argument group and propagated through the
/// dependency graph:
/// `out[g][a][i] = d mu_i / d value_of_nuisance_g_at_group_a`.
pub fn mean_sensitivities(
    ctx: &GraphContext<'_>,
    field: &NuisanceField,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let ident = ctx.ident;
    let dist = ctx.dist;
    let n_nuis = ident.nuisances.len();
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_nuis);

    // cache the resolved inputs of every integrand and row at every point
    let mut nuis_inputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_nuis);
    for n in &ident.nuisances {
        let mut per_point = Vec::with_capacity(dist.len());
        for z in &dist.support {
            per_point.push(ref_values(&ident.nuisances, dist, field, &n.refs, z)?);
        }
        nuis_inputs.push(per_point);
    }
    let mut row_inputs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ident.rows.len());
    for row in &ident.rows {
        let mut per_point = Vec::with_capacity(dist.len());
        for z in &dist.support {
            per_point.push(ref_values(&ident.nuisances, dist, field, &row.refs, z)?);
        }
        row_inputs.push(per_point);
    }

    for g in 0..n_nuis {
        let n_groups = ctx.group_mass[g].len();
        let mut per_group: Vec<Vec<f64>> = Vec::with_capacity(n_groups);
        for a0 in 0..n_groups {
            // delta[g'][a'] = shift of nuisance g' at its group a' caused by
            // a unit shift of nuisance g at group a0
            let mut delta: Vec<Vec<f64>> = (0..n_nuis)
                .map(|gp| vec![0.0; ctx.group_mass[gp].len()])
                .collect();
            delta[g][a0] = 1.0;
            for gp in (g + 1)..n_nuis {
                let n = &ident.nuisances[gp];
                if n.refs.is_empty() {
                    continue;
                }
                let mut acc = vec![0.0; ctx.group_mass[gp].len()];
                for i in 0..dist.len() {
                    let mut shift = 0.0;
                    for (k, r) in n.refs.iter().enumerate() {
                        let src = ctx.ref_group(r, i)?;
                        let d = delta[r.target][src];
                        if d != 0.0 {
                            shift += partial(
                                &n.integrand,
                                &n.partials,
                                k,
                                &dist.support[i],
                                &nuis_inputs[gp][i],
                            ) * d;
                        }
                    }
                    if shift != 0.0 {
                        acc[ctx.own_group[gp][i]] += dist.mass[i] * shift;
                    }
                }
                for (a, v) in acc.iter().enumerate() {
                    delta[gp][a] = v / ctx.group_mass[gp][a];
                }
            }
            // collect into the inner means
            let mut s = vec![0.0; ident.rows.len()];
            for (ri, row) in ident.rows.iter().enumerate() {
                for i in 0..dist.len() {
                    let mut shift = 0.0;
                    for (k, r) in row.refs.iter().enumerate() {
                        let src = ctx.ref_group(r, i)?;
                        let d = delta[r.target][src];
                        if d != 0.0 {
                            shift += partial(
                                &row.h,
                                &row.partials,
                                k,
                                &dist.support[i],
                                &row_inputs[ri][i],
                            ) * d;
                        }
                    }
                    s[ri] += dist.mass[i] * shift;
                }
            }
            per_group.push(s);
        }
        out.push(per_group);
    }
    Ok(out)
}

/// Conditional influence values of each directly identified nuisance:
/// `gamma_dot_g(z) = integrand_g(z) - value_g(prefix(z))`, zero-mean within
/// every prefix group.
pub fn gamma_dots(ctx: &GraphContext<'_>, field: &NuisanceField) -> Result<Vec<Vec<f64>>> {
    let ident = ctx.ident;
    let dist = ctx.dist;
    let mut out = Vec::with_capacity(ident.nuisances.len());
    for (g, n) in ident.nuisances.iter().enumerate() {
        let mut vals = Vec::with_capacity(dist.len());
        for (i, z) in dist.support.iter().enumerate() {
            let inputs = ref_values(&ident.nuisances, dist, field, &n.refs, z)?;
            let key = &ctx.group_key[g][ctx.own_group[g][i]];
            let value = field[g][key];
            vals.push((n.integrand)(z, &inputs) - value);
        }
        out.push(vals);
    }
    Ok(out)
}

/// Finite-difference smoothness probe on the rows: the derivative of each
/// row in each referenced nuisance value must be stable across halved
/// steps. Guards the differentiability the multi-step formulas assume.
pub fn smoothness_probe(ident: &DirectIdentification, dist: &DiscreteDistribution) -> Result<()> {
    let field = nuisance_field(&ident.nuisances, dist)?;
    for (ri, row) in ident.rows.iter().enumerate() {
        for (i, z) in dist.support.iter().enumerate() {
            if i % 3 != 0 {
                continue; // a sample of points is enough for a probe
            }
            let inputs = ref_values(&ident.nuisances, dist, &field, &row.refs, z)?;
            for k in 0..row.refs.len() {
                let eval = |x: f64| {
                    let mut v = inputs.clone();
                    v[k] = x;
                    (row.h)(z, &v)
                };
                let x = inputs[k];
                let h = 1e-4 * x.abs().max(1.0);
                let d1 = (eval(x + h) - eval(x - h)) / (2.0 * h);
                let d2 = (eval(x + h / 2.0) - eval(x - h / 2.0)) / h;
                if !d1.is_finite() || !d2.is_finite() {
                    return Err(Error::Construction(format!(
                        "row {ri} is not finite-differentiable in reference {k} at {z:?}"
                    )));
                }
                let scale = d1.abs().max(d2.abs()).max(1.0);
                if (d1 - d2).abs() > 1e-2 * scale {
                    return Err(Error::Construction(format!(
                        "row {ri} derivative unstable in reference {k} at {z:?}: {d1} vs {d2}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Moment-form counterpart: `E[m_beta(Z, beta, refs)] = 0` with the same
/// nuisance graph; each row is one coordinate of the moment.
#[derive(Clone)]
pub struct CondMomentRow {
    pub refs: Vec<NuisanceRef>,
    /// `(z, beta, ref_values) -> value`.
    pub m: Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>,
    /// Analytic partials in the referenced values.
    pub partials: Option<Vec<Arc<dyn Fn(&[f64], &[f64], &[f64]) -> f64 + Send + Sync>>>,
}

#[derive(Clone)]
pub struct CondMomentModel {
    pub nuisances: Vec<Nuisance>,
    pub d_beta: usize,
    pub rows: Vec<CondMomentRow>,
}

impl CondMomentModel {
    /// Frozen-beta view as a direct identification, so the graph machinery
    /// (fields, sensitivities, conditional influence values) can be shared.
    pub fn at_beta(&self, beta: &[f64]) -> DirectIdentification {
        let beta = beta.to_vec();
        DirectIdentification {
            nuisances: self.nuisances.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| {
                    let m = r.m.clone();
                    let b = beta.clone();
                    InnerRow {
                        refs: r.refs.clone(),
                        h: Arc::new(move |z, inputs| (m)(z, &b, inputs)),
                        partials: r.partials.as_ref().map(|ps| {
                            ps.iter()
                                .map(|p| {
                                    let p = p.clone();
                                    let b = beta.clone();
                                    let f: PointFn =
                                        Arc::new(move |z: &[f64], inputs: &[f64]| (p)(z, &b, inputs));
                                    f
                                })
                                .collect()
                        }),
                    }
                })
                .collect(),
            combine: Combiner::Identity,
        }
    }

    /// Solves `E[m_beta] = 0` in beta under `dist` (nuisances re-evaluated
    /// under the same law) by damped Newton.
    pub fn solve_beta(&self, dist: &DiscreteDistribution, init: &[f64]) -> Result<Vec<f64>> {
        let field = nuisance_field(&self.nuisances, dist)?;
        let mean = |beta: &[f64]| -> Result<Vec<f64>> {
            let ident = self.at_beta(beta);
            let rows = row_values(&ident, dist, &field)?;
            Ok(rows
                .iter()
                .map(|vals| vals.iter().zip(&dist.mass).map(|(v, m)| v * m).sum())
                .collect())
        };
        let mut beta = init.to_vec();
        let mut trace = Vec::new();
        for iter in 0..100 {
            let em = mean(&beta)?;
            let norm = em.iter().map(|x| x * x).sum::<f64>().sqrt();
            trace.push((iter, norm));
            if norm <= 1e-12 {
                return Ok(beta);
            }
            // Jacobian in beta by central differences
            let k = self.rows.len();
            let mut jac = Mat::zeros(k, self.d_beta);
            for c in 0..self.d_beta {
                let h = f64::EPSILON.cbrt() * beta[c].abs().max(1.0);
                let xp = beta[c] + h;
                let xm = beta[c] - h;
                let mut plus = beta.clone();
                plus[c] = xp;
                let mut minus = beta.clone();
                minus[c] = xm;
                let ep = mean(&plus)?;
                let em2 = mean(&minus)?;
                for r in 0..k {
                    jac[(r, c)] = (ep[r] - em2[r]) / (xp - xm);
                }
            }
            let g = crate::matrix::pinv(&jac, crate::matrix::DEFAULT_RANK_TOL)?
                * crate::matrix::Vector::from_vec(em.clone());
            let mut alpha = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand: Vec<f64> =
                    beta.iter().zip(g.iter()).map(|(b, s)| b - alpha * s).collect();
                let ec = mean(&cand)?;
                let nc = ec.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc < norm || nc <= 1e-12 {
                    beta = cand;
                    moved = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !moved {
                return Err(Error::Solver { msg: "beta line search stalled".into(), trace });
            }
        }
        Err(Error::Solver { msg: "beta solve did not converge".into(), trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::VariableBlocks;

    /// Two-block law with x in {0,1}, y in {-1,1} and y-mean depending on x.
    fn xy_law() -> DiscreteDistribution {
        DiscreteDistribution::new(
            vec![
                vec![0.0, -1.0],
                vec![0.0, 1.0],
                vec![1.0, -1.0],
                vec![1.0, 1.0],
            ],
            vec![0.4 * 0.8, 0.4 * 0.2, 0.6 * 0.3, 0.6 * 0.7],
            VariableBlocks::new(vec![1, 1], vec!["x".into(), "y".into()]).unwrap(),
        )
        .unwrap()
    }

    fn cond_mean_nuisance() -> Nuisance {
        Nuisance {
            name: "mu".into(),
            block: 2,
            refs: vec![],
            integrand: Arc::new(|z: &[f64], _inputs: &[f64]| z[1]),
            partials: Some(vec![]),
        }
    }

    #[test]
    fn conditional_mean_field() {
        let d = xy_law();
        let ident = DirectIdentification {
            nuisances: vec![cond_mean_nuisance()],
            rows: vec![InnerRow {
                refs: vec![NuisanceRef::own(0)],
                h: Arc::new(|_z, inputs| inputs[0]),
                partials: Some(vec![Arc::new(|_z: &[f64], _i: &[f64]| 1.0)]),
            }],
            combine: Combiner::Identity,
        };
        let ev = eval_direct(&ident, &d).unwrap();
        // E[Y|x=0] = -0.6, E[Y|x=1] = 0.4; beta = E over x
        let mu0 = ev.field[0][&float_key(&[0.0])];
        let mu1 = ev.field[0][&float_key(&[1.0])];
        assert!((mu0 + 0.6).abs() < 1e-12);
        assert!((mu1 - 0.4).abs() < 1e-12);
        assert!((ev.beta[0] - (0.4 * -0.6 + 0.6 * 0.4)).abs() < 1e-12);
    }

    #[test]
    fn gamma_dot_is_conditionally_centered() {
        let d = xy_law();
        let ident = DirectIdentification {
            nuisances: vec![cond_mean_nuisance()],
            rows: vec![],
            combine: Combiner::Identity,
        };
        let ctx = GraphContext::new(&ident, &d).unwrap();
        let field = nuisance_field(&ident.nuisances, &d).unwrap();
        let dots = gamma_dots(&ctx, &field).unwrap();
        // weighted mean within each prefix group is zero
        for grp in d.prefix_groups(1) {
            let s: f64 = grp.members.iter().map(|&i| d.mass[i] * dots[0][i]).sum();
            assert!(s.abs() < 1e-14);
        }
    }

    #[test]
    fn sensitivity_matches_brute_force_bump() {
        // beta = E[ x * mu(x) ] with mu the conditional mean of y given x;
        // bump mu at group x=1 and compare with the adjoint sensitivity.
        let d = xy_law();
        let ident = DirectIdentification {
            nuisances: vec![cond_mean_nuisance()],
            rows: vec![InnerRow {
                refs: vec![NuisanceRef::own(0)],
                h: Arc::new(|z, inputs| z[0] * inputs[0]),
                partials: None,
            }],
            combine: Combiner::Identity,
        };
        let ctx = GraphContext::new(&ident, &d).unwrap();
        let field = nuisance_field(&ident.nuisances, &d).unwrap();
        let sens = mean_sensitivities(&ctx, &field).unwrap();
        // locate group of prefix x=1
        let a1 = ctx.key_to_group[0][&float_key(&[1.0])];
        // brute force: mu(1) -> mu(1) + h
        let h = 1e-7;
        let mut bumped = field.clone();
        *bumped[0].get_mut(&float_key(&[1.0])).unwrap() += h;
        let rows0 = row_values(&ident, &d, &field).unwrap();
        let rows1 = row_values(&ident, &d, &bumped).unwrap();
        let mu0: f64 = rows0[0].iter().zip(&d.mass).map(|(v, m)| v * m).sum();
        let mu1: f64 = rows1[0].iter().zip(&d.mass).map(|(v, m)| v * m).sum();
        let brute = (mu1 - mu0) / h;
        assert!((sens[0][a1][0] - brute).abs() < 1e-6, "{} vs {brute}", sens[0][a1][0]);
    }

    #[test]
    fn chained_nuisance_sensitivity() {
        // nu1 = E[y | x]; nu2 = E[x * nu1 | -] unconditional; row reads nu2
        let d = xy_law();
        let ident = DirectIdentification {
            nuisances: vec![
                cond_mean_nuisance(),
                Nuisance {
                    name: "agg".into(),
                    block: 1,
                    refs: vec![NuisanceRef::own(0)],
                    integrand: Arc::new(|z: &[f64], inputs: &[f64]| z[0] * inputs[0]),
                    partials: Some(vec![Arc::new(|z: &[f64], _i: &[f64]| z[0])]),
                },
            ],
            rows: vec![InnerRow {
                refs: vec![NuisanceRef::own(1)],
                h: Arc::new(|_z, inputs| inputs[0] * inputs[0]),
                partials: None,
            }],
            combine: Combiner::Identity,
        };
        let ctx = GraphContext::new(&ident, &d).unwrap();
        let field = nuisance_field(&ident.nuisances, &d).unwrap();
        let sens = mean_sensitivities(&ctx, &field).unwrap();
        // brute force against a bump of nu1 at x=1
        let h = 1e-7;
        let mut bumped_nuis = ident.nuisances.clone();
        let base_val = field[0][&float_key(&[1.0])];
        bumped_nuis[0] = Nuisance {
            name: "mu".into(),
            block: 2,
            refs: vec![],
            integrand: Arc::new(move |z: &[f64], _i: &[f64]| {
                // shifting the integrand within the x=1 group shifts the
                // conditional mean there by exactly h
                if z[0] == 1.0 {
                    z[1] + h
                } else {
                    z[1]
                }
            }),
            partials: Some(vec![]),
        };
        let _ = base_val;
        let ident_b = DirectIdentification {
            nuisances: bumped_nuis,
            rows: ident.rows.clone(),
            combine: Combiner::Identity,
        };
        let e0 = eval_direct(&ident, &d).unwrap();
        let e1 = eval_direct(&ident_b, &d).unwrap();
        let brute = (e1.mus[0] - e0.mus[0]) / h;
        let a1 = ctx.key_to_group[0][&float_key(&[1.0])];
        assert!(
            (sens[0][a1][0] - brute).abs() < 1e-5,
            "adjoint {} vs brute {brute}",
            sens[0][a1][0]
        );
    }

    #[test]
    fn transformed_reference_resolves() {
        // read the conditional mean at a fixed argument x=0 from every point
        let d = xy_law();
        let ident = DirectIdentification {
            nuisances: vec![cond_mean_nuisance()],
            rows: vec![InnerRow {
                refs: vec![NuisanceRef::at(0, Arc::new(|_z: &[f64]| vec![0.0]))],
                h: Arc::new(|_z, inputs| inputs[0]),
                partials: None,
            }],
            combine: Combiner::Identity,
        };
        let ev = eval_direct(&ident, &d).unwrap();
        assert!((ev.beta[0] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn validation_rejects_forward_reference() {
        let backwards = DirectIdentification {
            nuisances: vec![Nuisance {
                name: "bad".into(),
                block: 1,
                refs: vec![NuisanceRef::own(0)],
                integrand: Arc::new(|_z, i| i[0]),
                partials: None,
            }],
            rows: vec![],
            combine: Combiner::Identity,
        };
        assert!(backwards.validate().is_err());
    }
}

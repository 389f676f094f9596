//! Sharp exit-time asymptotics: critical points of the rate function, the
//! communication gate between wells, lifted saddle geometry on the occupation
//! lattice, and the closed-form capacity / prefactor estimates built from them.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::chain::LatticeChain;
use crate::disorder::TypeTable;
use crate::ldp::{HessianMode, LumpedMeasure, RateModel};
use crate::model::LatticePoint;
use crate::numeric::{logsumexp, normal_cdf, CompensatedSum};
use crate::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Classification of a nondegenerate critical point by its curvature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CritKind {
    Minimum,
    Saddle,
    Other,
}

/// An interior critical point of the rate function in overlap coordinates.
#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub x: Vec<f64>,
    /// Dual location: the tilt whose mean-overlap equals x.
    pub t: Vec<f64>,
    /// Rate-function value, normalized so the deepest well sits at zero.
    pub value: f64,
    /// Curvature eigenvalues in overlap coordinates, ascending.
    pub eigenvalues: Vec<f64>,
    pub kind: CritKind,
}

fn classify(model: &RateModel, x: &[f64]) -> Result<CriticalPoint> {
    let (value, grad, hess) = model.rate_i_grad_hess(x)?;
    if grad.norm() > 1e-9 {
        return Err(Error::NoConvergence(format!(
            "candidate critical point has |grad I| = {:.3e}",
            grad.norm()
        )));
    }
    let leg = model.legendre(x)?;
    let eig = hess.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let scale = ev.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
    let thr = 1e-8 * scale.max(1e-300);
    let neg = ev.iter().filter(|&&e| e < -thr).count();
    let zero = ev.iter().filter(|&&e| e.abs() <= thr).count();
    let kind = if zero > 0 {
        CritKind::Other
    } else if neg == 0 {
        CritKind::Minimum
    } else if neg == 1 {
        CritKind::Saddle
    } else {
        CritKind::Other
    };
    Ok(CriticalPoint {
        x: x.to_vec(),
        t: leg.t_star.as_slice().to_vec(),
        value,
        eigenvalues: ev,
        kind,
    })
}

/// Locate and classify all interior critical points reachable from the
/// built-in multistart grid plus optional extra seeds (overlap coordinates).
/// Sorted by value, then lexicographically.
pub fn find_critical_points(
    model: &RateModel,
    extra_seeds: &[Vec<f64>],
) -> Result<Vec<CriticalPoint>> {
    let mut raw = model.interior_critical_points()?;
    for sx in extra_seeds {
        let Ok(leg) = model.legendre(sx) else { continue };
        let Ok(rc) = model.refine_critical(leg.t_star) else {
            continue;
        };
        if !raw.iter().any(|r| (&r.x - &rc.x).norm() < 1e-6) {
            raw.push(rc);
        }
    }
    let mut out = Vec::with_capacity(raw.len());
    for rc in &raw {
        out.push(classify(model, rc.x.as_slice())?);
    }
    out.sort_by(|a, b| {
        a.value
            .partial_cmp(&b.value)
            .unwrap()
            .then_with(|| a.x.partial_cmp(&b.x).unwrap())
    });
    if !out.iter().any(|c| c.kind == CritKind::Minimum) {
        return Err(Error::Invalid("no local minima found".into()));
    }
    Ok(out)
}

/// Optional restriction of the state space to a half-domain where one type's
/// within-type magnetization is held on one side of zero. Membership is
/// decided in dual coordinates: the sign of <t_star, type a>.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum DomainRestriction {
    Full,
    RhoHalf { type_index: usize, upper: bool },
}

impl DomainRestriction {
    pub fn admits(&self, t: &[f64], types: &[Vec<f64>]) -> bool {
        match self {
            DomainRestriction::Full => true,
            DomainRestriction::RhoHalf { type_index, upper } => {
                let ty = &types[*type_index];
                let s: f64 = t.iter().zip(ty).map(|(a, b)| a * b).sum();
                if *upper {
                    s >= -1e-9
                } else {
                    s <= 1e-9
                }
            }
        }
    }
}

/// Controls for the minimax gate search.
#[derive(Clone, Debug)]
pub struct GateConfig {
    /// Grid resolution per overlap coordinate.
    pub grid_per_dim: usize,
    pub domain: DomainRestriction,
    /// Saddles within this of the polished gate value join the gate set.
    pub value_tol: f64,
    /// Offset along the unstable direction used by the essentiality probe.
    pub essentiality_delta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            grid_per_dim: 65,
            domain: DomainRestriction::Full,
            value_tol: 1e-8,
            essentiality_delta: 1e-2,
        }
    }
}

/// The communication gate between a starting well and the set of wells at
/// least as deep.
#[derive(Clone, Debug, Serialize)]
pub struct GateSet {
    pub m: CriticalPoint,
    /// Target wells: strictly deeper, or tied within 1e-9.
    pub deeper: Vec<CriticalPoint>,
    /// Rate-function value of the polished gate saddles.
    pub gate_value: f64,
    /// Minimax level straight off the grid, before Newton polish.
    pub grid_gate_value: f64,
    /// Essential saddles at the gate level.
    pub saddles: Vec<CriticalPoint>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra] = rb;
        }
    }
}

// Steepest descent until the gradient is small, then Newton polish. Returns
// the refined endpoint in overlap coordinates.
fn descend_and_refine(model: &RateModel, x0: &DVector<f64>) -> Option<DVector<f64>> {
    let mut x = x0.clone();
    for _ in 0..10_000 {
        let Ok((val, g, _)) = model.rate_i_grad_hess(x.as_slice()) else {
            return None;
        };
        let gn = g.norm();
        if gn <= 1e-3 {
            break;
        }
        let gn2 = gn * gn;
        let mut step = 0.1 / (1.0 + gn);
        let mut moved = false;
        for _ in 0..60 {
            let xt = &x - step * &g;
            let vt = model.rate_i(xt.as_slice());
            if vt <= val - 1e-4 * step * gn2 {
                x = xt;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let leg = model.legendre(x.as_slice()).ok()?;
    let rc = model.refine_critical(leg.t_star).ok()?;
    Some(rc.x)
}

// A gate saddle is essential if sliding off it along the unstable direction
// reaches the starting well on one side and a target well on the other.
fn is_essential(
    model: &RateModel,
    s: &CriticalPoint,
    m: &CriticalPoint,
    deeper: &[CriticalPoint],
    delta0: f64,
) -> bool {
    let p = s.x.len();
    let Ok((_, _, hess)) = model.rate_i_grad_hess(&s.x) else {
        return false;
    };
    let eig = hess.symmetric_eigen();
    let mut imin = 0;
    for i in 0..p {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
    }
    let v1 = eig.eigenvectors.column(imin).into_owned();
    let xs = DVector::from_column_slice(&s.x);
    let close = |a: &DVector<f64>, b: &[f64]| -> bool {
        (a - DVector::from_column_slice(b)).norm() <= 1e-4
    };
    for delta in [delta0, 10.0 * delta0] {
        let mut ends = Vec::with_capacity(2);
        for sgn in [1.0_f64, -1.0] {
            let x0 = &xs + sgn * delta * &v1;
            match descend_and_refine(model, &x0) {
                Some(e) => ends.push(e),
                None => return false,
            }
        }
        // Stalled at the saddle itself: retry with a larger offset.
        if close(&ends[0], &s.x) || close(&ends[1], &s.x) {
            continue;
        }
        let hits_m = |e: &DVector<f64>| close(e, &m.x);
        let hits_deeper = |e: &DVector<f64>| deeper.iter().any(|d| close(e, &d.x));
        return (hits_m(&ends[0]) && hits_deeper(&ends[1]))
            || (hits_m(&ends[1]) && hits_deeper(&ends[0]));
    }
    false
}

/// Minimax search for the gate between `points[m_index]` and the wells at
/// least as deep: a grid sweep in ascending rate-function order joins
/// clusters until the wells communicate, then the junction is polished to a
/// true saddle and the essential gate set is collected.
pub fn find_gate(
    model: &RateModel,
    points: &[CriticalPoint],
    m_index: usize,
    cfg: &GateConfig,
) -> Result<GateSet> {
    let p = model.p();
    let types = model.types();
    let m = points
        .get(m_index)
        .ok_or_else(|| Error::Invalid("m_index out of range".into()))?;
    if m.kind != CritKind::Minimum {
        return Err(Error::Invalid("starting point is not a local minimum".into()));
    }
    if !cfg.domain.admits(&m.t, types) {
        return Err(Error::Invalid(
            "starting minimum lies outside the domain restriction".into(),
        ));
    }
    let admitted = |c: &CriticalPoint| cfg.domain.admits(&c.t, types);
    let deeper: Vec<CriticalPoint> = points
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            *i != m_index
                && c.kind == CritKind::Minimum
                && admitted(c)
                && c.value <= m.value + 1e-9
        })
        .map(|(_, c)| c.clone())
        .collect();
    if deeper.is_empty() {
        return Err(Error::Invalid(
            "starting minimum has no deeper or equally deep target".into(),
        ));
    }

    let g = cfg.grid_per_dim.max(3);
    let total = (g as f64).powi(p as i32);
    if total > 2e6 {
        return Err(Error::Invalid("gate grid too large".into()));
    }
    let total = total as usize;
    let radius: Vec<f64> = (0..p)
        .map(|j| {
            types
                .iter()
                .zip(model.type_probs())
                .map(|(ty, q)| q * ty[j].abs())
                .sum()
        })
        .collect();
    let coords = |idx: usize| -> Vec<f64> {
        let mut rem = idx;
        let mut x = vec![0.0; p];
        for j in 0..p {
            let i = rem % g;
            rem /= g;
            x[j] = -radius[j] + 2.0 * radius[j] * (i as f64) / ((g - 1) as f64);
        }
        x
    };

    // Feasible nodes with their rate values and dual locations.
    let beta = model.beta();
    let c_shift = model.c();
    let mut value: Vec<Option<f64>> = vec![None; total];
    let mut t_node: Vec<Option<DVector<f64>>> = vec![None; total];
    for idx in 0..total {
        let x = coords(idx);
        let Ok(leg) = model.legendre(&x) else { continue };
        if !cfg.domain.admits(leg.t_star.as_slice(), types) {
            continue;
        }
        let v = model.potential().eval(&x);
        value[idx] = Some(-beta * v + leg.value + c_shift);
        t_node[idx] = Some(leg.t_star);
    }

    let anchor = |x: &[f64]| -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for idx in 0..total {
            if value[idx].is_none() {
                continue;
            }
            let nx = coords(idx);
            let d2: f64 = nx.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.map_or(true, |(bd, _)| d2 < bd) {
                best = Some((d2, idx));
            }
        }
        best.map(|(_, i)| i)
    };
    let m_node = anchor(&m.x)
        .ok_or_else(|| Error::Infeasible("no feasible grid node near the start".into()))?;
    let mut target_nodes = Vec::with_capacity(deeper.len());
    for d in &deeper {
        let t = anchor(&d.x)
            .ok_or_else(|| Error::Infeasible("no feasible grid node near a target".into()))?;
        if t == m_node {
            return Err(Error::Invalid("gate grid too coarse to separate wells".into()));
        }
        target_nodes.push(t);
    }

    let mut order: Vec<usize> = (0..total).filter(|&i| value[i].is_some()).collect();
    order.sort_by(|&a, &b| value[a].partial_cmp(&value[b]).unwrap().then(a.cmp(&b)));

    let neighbors = |idx: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(2 * p);
        let mut rem = idx;
        let mut multi = vec![0usize; p];
        for j in 0..p {
            multi[j] = rem % g;
            rem /= g;
        }
        let mut stride = 1usize;
        for j in 0..p {
            if multi[j] > 0 {
                out.push(idx - stride);
            }
            if multi[j] + 1 < g {
                out.push(idx + stride);
            }
            stride *= g;
        }
        out
    };

    let mut uf = UnionFind::new(total);
    let mut active = vec![false; total];
    let mut gate_node = None;
    'sweep: for &nd in &order {
        active[nd] = true;
        for nb in neighbors(nd) {
            if active[nb] {
                uf.union(nd, nb);
            }
        }
        if active[m_node] {
            let rm = uf.find(m_node);
            for &t in &target_nodes {
                if active[t] && uf.find(t) == rm {
                    gate_node = Some(nd);
                    break 'sweep;
                }
            }
        }
    }
    let gate_node = gate_node
        .ok_or_else(|| Error::NoConvergence("minimax sweep never joined the wells".into()))?;
    let grid_gate_value = value[gate_node].unwrap();

    // Polish from the junction node (falling back to its neighbors) down to
    // a true index-1 saddle.
    let mut polished: Option<CriticalPoint> = None;
    let mut seeds = vec![gate_node];
    seeds.extend(neighbors(gate_node).into_iter().filter(|&i| value[i].is_some()));
    for sn in seeds {
        let Some(t0) = t_node[sn].clone() else { continue };
        let Ok(rc) = model.refine_critical(t0) else { continue };
        let Ok(cp) = classify(model, rc.x.as_slice()) else {
            continue;
        };
        if cp.kind == CritKind::Saddle && admitted(&cp) {
            polished = Some(cp);
            break;
        }
    }
    let saddle0 = polished.ok_or_else(|| {
        Error::NoConvergence("gate polish did not reach an index-1 saddle".into())
    })?;
    let t_norm: f64 = saddle0.t.iter().map(|a| a * a).sum::<f64>().sqrt();
    if t_norm > 30.0 {
        return Err(Error::Infeasible(
            "gate saddle sits on the boundary of the feasible region".into(),
        ));
    }
    let gate_value = saddle0.value;

    let mut z: Vec<CriticalPoint> = points
        .iter()
        .filter(|c| {
            c.kind == CritKind::Saddle
                && admitted(c)
                && (c.value - gate_value).abs() <= cfg.value_tol
        })
        .cloned()
        .collect();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    if !z.iter().any(|c| dist(&c.x, &saddle0.x) < 1e-6) {
        z.push(saddle0);
    }
    z.retain(|s| is_essential(model, s, m, &deeper, cfg.essentiality_delta));
    if z.is_empty() {
        return Err(Error::Invalid("no essential saddle at the gate level".into()));
    }
    z.sort_by(|a, b| a.x.partial_cmp(&b.x).unwrap());

    Ok(GateSet {
        m: m.clone(),
        deeper,
        gate_value,
        grid_gate_value,
        saddles: z,
    })
}

/// A lifted location on the occupation lattice: the continuum center, its
/// nearest lattice representative, the log-weight used in summation, and the
/// number of lattice points inside the local die.
#[derive(Clone, Debug, Serialize)]
pub struct LiftedPoint {
    /// Full occupation coordinates (plus/minus interleaved), continuum.
    pub center_y: Vec<f64>,
    pub center_lattice: LatticePoint,
    pub log_weight: f64,
    pub dice_count: u64,
}

/// A gate saddle lifted to the occupation lattice. In exact mode there is a
/// single lattice representative; in projected mode the whole fiber over the
/// saddle is covered by dice.
#[derive(Clone, Debug, Serialize)]
pub struct LiftedSaddle {
    pub critical: CriticalPoint,
    pub centers: Vec<LiftedPoint>,
    #[serde(skip)]
    pub dice_points: Vec<LatticePoint>,
    pub fiber_dim: usize,
    /// Length of the covered fiber segment in slice coordinates.
    pub fiber_extent: f64,
}

fn rho_from_t(t: &[f64], types: &[Vec<f64>]) -> Vec<f64> {
    types
        .iter()
        .map(|ty| {
            let s: f64 = t.iter().zip(ty).map(|(a, b)| a * b).sum();
            0.5 * (1.0 + s.tanh())
        })
        .collect()
}

fn center_y_from_rho(rho: &[f64], q: &[f64]) -> Vec<f64> {
    let mut y = Vec::with_capacity(2 * rho.len());
    for (r, qa) in rho.iter().zip(q) {
        y.push(qa * r);
        y.push(qa * (1.0 - r));
    }
    y
}

// Slice coordinate of a full occupation vector: u_a = (y_a^+ - y_a^-)/sqrt2.
fn u_from_y(y: &[f64]) -> Vec<f64> {
    (0..y.len() / 2)
        .map(|a| (y[2 * a] - y[2 * a + 1]) / SQRT2)
        .collect()
}

fn u_from_lattice(pt: &LatticePoint, table: &TypeTable) -> Vec<f64> {
    let n = table.n() as f64;
    let q = table.quenched_probs();
    pt.plus_counts
        .iter()
        .zip(q)
        .map(|(&k, qa)| (2.0 * (k as f64) / n - qa) / SQRT2)
        .collect()
}

fn round_to_lattice(rho: &[f64], table: &TypeTable) -> LatticePoint {
    let counts = table.counts();
    let plus_counts = rho
        .iter()
        .zip(counts)
        .map(|(r, &na)| ((na as f64) * r).round().clamp(0.0, na as f64) as u64)
        .collect();
    LatticePoint { plus_counts }
}

// Continuum extension of the lumped log-weight: binomials through ln-gamma.
fn log_weight_continuum(measure: &LumpedMeasure, y: &[f64]) -> f64 {
    let table = measure.table();
    let n = table.n() as f64;
    let types = table.types_f64();
    let p = table.p();
    let mut x = vec![0.0; p];
    for (a, ty) in types.iter().enumerate() {
        let diff = y[2 * a] - y[2 * a + 1];
        for j in 0..p {
            x[j] += diff * ty[j];
        }
    }
    let mut lw = n * measure.beta() * measure.potential().eval(&x);
    for (a, &na) in table.counts().iter().enumerate() {
        let na = na as f64;
        let k = (n * y[2 * a]).clamp(0.0, na);
        lw += ln_gamma(na + 1.0) - ln_gamma(k + 1.0) - ln_gamma(na - k + 1.0);
    }
    lw - measure.log_z()
}

// Slice Hessian at a full occupation vector: B^T H B with the slice basis
// b_a = (delta_{2a} - delta_{2a+1})/sqrt2.
fn slice_hessian(model: &RateModel, y: &[f64], mode: HessianMode) -> Result<DMatrix<f64>> {
    let d = y.len() / 2;
    let h = model.rate_hat(y, mode)?.hess;
    let mut hs = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            hs[(a, b)] = 0.5
                * (h[(2 * a, 2 * b)] - h[(2 * a, 2 * b + 1)] - h[(2 * a + 1, 2 * b)]
                    + h[(2 * a + 1, 2 * b + 1)]);
        }
    }
    Ok(hs)
}

// Eigen-decomposition sorted ascending; columns follow the order.
fn sorted_eigen(hs: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let d = hs.nrows();
    let eig = hs.clone().symmetric_eigen();
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let gamma: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut v = DMatrix::zeros(d, d);
    for (jnew, &jold) in idx.iter().enumerate() {
        v.set_column(jnew, &eig.eigenvectors.column(jold));
    }
    (gamma, v)
}

// Lattice points inside the die centered at `u_center` (absolute slice
// coordinates), oriented along the eigenvector columns `v`. The die has
// half-edge n^{-1/2} along every eigendirection.
fn dice_scan(
    table: &TypeTable,
    k0: &LatticePoint,
    u_center: &[f64],
    v: &DMatrix<f64>,
) -> (u64, Vec<LatticePoint>) {
    let d = table.num_types();
    let n = table.n() as f64;
    let counts = table.counts();
    let q = table.quenched_probs();
    let half = 1.0 / n.sqrt() + 1e-12;
    let r = ((n * d as f64 / 2.0).sqrt().floor() as i64) + 1;
    let lo: Vec<i64> = (0..d)
        .map(|a| (k0.plus_counts[a] as i64 - r).max(0))
        .collect();
    let hi: Vec<i64> = (0..d)
        .map(|a| (k0.plus_counts[a] as i64 + r).min(counts[a] as i64))
        .collect();
    let mut count = 0u64;
    let mut points = Vec::new();
    let mut k = lo.clone();
    'scan: loop {
        let mut inside = true;
        for i in 0..d {
            let mut dot = CompensatedSum::default();
            for a in 0..d {
                let ua = (2.0 * (k[a] as f64) / n - q[a]) / SQRT2;
                dot.add((ua - u_center[a]) * v[(a, i)]);
            }
            if dot.value().abs() > half {
                inside = false;
                break;
            }
        }
        if inside {
            count += 1;
            points.push(LatticePoint {
                plus_counts: k.iter().map(|&x| x as u64).collect(),
            });
        }
        for a in 0..d {
            k[a] += 1;
            if k[a] <= hi[a] {
                continue 'scan;
            }
            k[a] = lo[a];
        }
        break;
    }
    (count, points)
}

// Kernel of the slice-to-overlap map: directions in slice coordinates along
// which the overlap stays fixed.
fn fiber_basis(types: &[Vec<f64>]) -> Vec<DVector<f64>> {
    let d = types.len();
    let p = types[0].len();
    let mut k = DMatrix::zeros(p, d);
    for (a, ty) in types.iter().enumerate() {
        for j in 0..p {
            k[(j, a)] = SQRT2 * ty[j];
        }
    }
    let ktk = k.transpose() * &k;
    let eig = ktk.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0_f64, |m, &e| m.max(e.abs()));
    let mut basis = Vec::new();
    for i in 0..d {
        if eig.eigenvalues[i].abs() < 1e-12 * scale {
            basis.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    basis
}

// Shared lifting of a critical point: dice cover of its fiber (projected
// mode) or the single rounded lattice representative (exact mode).
fn lift_point(
    crit: &CriticalPoint,
    model: &RateModel,
    measure: &LumpedMeasure,
    mode: HessianMode,
) -> Result<LiftedSaddle> {
    let table = measure.table();
    let types = table.types_f64();
    let q = table.quenched_probs();
    let n = table.n() as f64;
    let d = table.num_types();

    let rho = rho_from_t(&crit.t, types);
    let center_y = center_y_from_rho(&rho, &q);
    let z_lat = round_to_lattice(&rho, table);

    let hs = slice_hessian(model, &center_y, mode)?;
    let (_, v) = sorted_eigen(&hs);

    let kernel = fiber_basis(types);
    let fiber_dim = kernel.len();
    if fiber_dim > 1 {
        return Err(Error::Invalid(
            "fiber dimension above one is not supported".into(),
        ));
    }

    let mut centers = Vec::new();
    let mut dice_points = Vec::new();
    let mut fiber_extent = 0.0;

    match mode {
        HessianMode::Exact => {
            let u_c = u_from_lattice(&z_lat, table);
            let (cnt, pts) = dice_scan(table, &z_lat, &u_c, &v);
            if cnt == 0 {
                return Err(Error::Infeasible("empty die at the lifted center".into()));
            }
            dice_points = pts;
            centers.push(LiftedPoint {
                center_y: center_y.clone(),
                center_lattice: z_lat.clone(),
                log_weight: measure.lumped_log_weight(&z_lat),
                dice_count: cnt,
            });
        }
        HessianMode::Projected => {
            let u0 = DVector::from_column_slice(&u_from_y(&center_y));
            // Cover the fiber segment through the center with dice spaced
            // two half-edges apart along the kernel direction.
            let offsets: Vec<f64> = if fiber_dim == 0 {
                vec![0.0]
            } else {
                let f = &kernel[0];
                let mut delta = f64::INFINITY;
                for i in 0..d {
                    let proj: f64 = (0..d).map(|a| f[a] * v[(a, i)]).sum();
                    if proj.abs() > 1e-12 {
                        delta = delta.min(1.0 / (n.sqrt() * proj.abs()));
                    }
                }
                if !delta.is_finite() {
                    return Err(Error::Invalid(
                        "fiber direction orthogonal to every die axis".into(),
                    ));
                }
                let valid = |s: f64| -> bool {
                    (0..d).all(|a| {
                        let ua = u0[a] + s * f[a];
                        let r = 0.5 + ua / (SQRT2 * q[a]);
                        (0.0..=1.0).contains(&r)
                    })
                };
                let mut offs = vec![0.0];
                for dir in [1.0, -1.0] {
                    let mut mstep = 1usize;
                    while mstep <= 1000 {
                        let s = dir * 2.0 * delta * (mstep as f64);
                        if !valid(s) {
                            break;
                        }
                        offs.push(s);
                        mstep += 1;
                    }
                }
                offs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                fiber_extent = offs.last().unwrap() - offs.first().unwrap();
                offs
            };
            for &s in &offsets {
                let u_c: Vec<f64> = (0..d)
                    .map(|a| u0[a] + if fiber_dim == 1 { s * kernel[0][a] } else { 0.0 })
                    .collect();
                let rho_s: Vec<f64> = (0..d)
                    .map(|a| (0.5 + u_c[a] / (SQRT2 * q[a])).clamp(0.0, 1.0))
                    .collect();
                let y_s = center_y_from_rho(&rho_s, &q);
                let k_s = round_to_lattice(&rho_s, table);
                let (cnt, pts) = dice_scan(table, &k_s, &u_c, &v);
                if cnt == 0 {
                    continue;
                }
                if s == 0.0 {
                    dice_points = pts;
                }
                let log_weight = log_weight_continuum(measure, &y_s);
                centers.push(LiftedPoint {
                    center_y: y_s,
                    center_lattice: k_s,
                    log_weight,
                    dice_count: cnt,
                });
            }
            if centers.is_empty() {
                return Err(Error::Infeasible("empty fiber cover at the gate".into()));
            }
            // Primary center (offset zero) first.
            centers.sort_by(|a, b| {
                let da: f64 = a
                    .center_y
                    .iter()
                    .zip(&center_y)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let db: f64 = b
                    .center_y
                    .iter()
                    .zip(&center_y)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                da.partial_cmp(&db).unwrap()
            });
        }
    }

    Ok(LiftedSaddle {
        critical: crit.clone(),
        centers,
        dice_points,
        fiber_dim,
        fiber_extent,
    })
}

/// Lift every gate saddle onto the occupation lattice.
pub fn lift_gate(
    gate: &GateSet,
    model: &RateModel,
    measure: &LumpedMeasure,
    mode: HessianMode,
) -> Result<Vec<LiftedSaddle>> {
    gate.saddles
        .iter()
        .map(|s| lift_point(s, model, measure, mode))
        .collect()
}

/// Direction used in the rate-weighted step sum of the capacity formula.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum GateDir {
    /// The dynamical crossing direction from the saddle eigenproblem.
    W,
    /// The softest curvature eigendirection of the slice Hessian.
    V1,
}

/// Normalization of the step vectors entering the rate-weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ElNorm {
    /// Physical lattice steps of length sqrt2/n.
    Step,
    /// Unit vectors along the same directions.
    Unit,
}

/// Eigen-structure of a lifted gate saddle: slice curvature, the crossing
/// eigenvalue of the rate-weighted quadratic form, and the crossing
/// direction, plus the rate-weighted sums the capacity formula consumes.
#[derive(Clone, Debug, Serialize)]
pub struct SaddleData {
    pub lifted: LiftedSaddle,
    /// Slice curvature eigenvalues padded with zeros to full length 2|A|.
    pub gamma: Vec<f64>,
    /// Slice curvature eigenvectors (columns, ascending eigenvalue order).
    pub v_slice: Vec<Vec<f64>>,
    /// Jump rates out of the lattice representative, one per direction.
    pub rates: Vec<f64>,
    /// Most negative eigenvalue of the rate-weighted form, unit steps.
    pub lambda_unit: f64,
    /// Same eigenvalue for physical steps: (2/n^2) lambda_unit.
    pub lambda_step: f64,
    /// Its eigenvector in direction space.
    pub w_hat: Vec<f64>,
    /// Crossing direction in slice coordinates, oriented toward the well.
    pub w_slice: Vec<f64>,
    /// gamma_i + 2|lambda_unit| <w, v_i>^2 over slice directions.
    pub gamma_combined: Vec<f64>,
    /// Indices kept by the relative zero threshold.
    pub gamma_set: Vec<usize>,
    /// Log of the gate mass sum_Y weight(Y) exp(-n |lambda| arg(Y)^2): local
    /// lattice sum under exact curvature, die-cover Gaussian estimate under
    /// projected.
    pub log_gate_mass: f64,
    /// Quadratic form <w, H w>; negative at a dynamical saddle.
    pub descent_form: f64,
    pub sum_r_w_step: f64,
    pub sum_r_w_unit: f64,
    pub sum_r_v1_step: f64,
    pub sum_r_v1_unit: f64,
}

/// Solve the rate-weighted eigenproblem at a lifted saddle and assemble the
/// quantities the capacity formula needs. `m_center_y` fixes the crossing
/// orientation toward the starting well.
pub fn saddle_eigendata(
    chain: &LatticeChain,
    model: &RateModel,
    measure: &LumpedMeasure,
    lifted: &LiftedSaddle,
    mode: HessianMode,
    m_center_y: &[f64],
) -> Result<SaddleData> {
    let table = chain.table();
    let d = table.num_types();
    let bign = 2 * d;
    let n = table.n() as f64;
    let primary = &lifted.centers[0];
    let z_lat = &primary.center_lattice;

    let mut rates = Vec::with_capacity(bign);
    for l in 0..bign {
        let r = chain.rate(z_lat, l);
        if r <= 0.0 {
            return Err(Error::Infeasible(
                "transition rate vanishes at the lifted gate".into(),
            ));
        }
        rates.push(r);
    }

    let hs = slice_hessian(model, &primary.center_y, mode)?;
    let (gamma_slice, v) = sorted_eigen(&hs);

    // Rate-weighted quadratic form over jump directions. Direction 2a lowers
    // type a (slice sign -1), direction 2a+1 raises it (+1).
    let sign = |l: usize| if l % 2 == 0 { -1.0 } else { 1.0 };
    let mut m_mat = DMatrix::zeros(bign, bign);
    for l in 0..bign {
        for lp in 0..bign {
            m_mat[(l, lp)] = (rates[l] * rates[lp]).sqrt()
                * sign(l)
                * sign(lp)
                * hs[(l / 2, lp / 2)];
        }
    }
    let eig = m_mat.symmetric_eigen();
    let mut imin = 0;
    for i in 0..bign {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
    }
    let lambda_unit = eig.eigenvalues[imin];
    if lambda_unit >= 0.0 {
        return Err(Error::Invalid(
            "rate-weighted form has no unstable direction".into(),
        ));
    }
    let mut w_hat: Vec<f64> = eig.eigenvectors.column(imin).iter().cloned().collect();

    let mut w_slice: Vec<f64> = (0..d)
        .map(|a| {
            0.5 * (w_hat[2 * a + 1] / rates[2 * a + 1].sqrt()
                - w_hat[2 * a] / rates[2 * a].sqrt())
        })
        .collect();
    // Orient toward the starting well.
    let mut orient = CompensatedSum::default();
    for a in 0..d {
        orient.add(w_slice[a] * SQRT2 * (m_center_y[2 * a] - primary.center_y[2 * a]));
    }
    if orient.value() < 0.0 {
        for x in w_hat.iter_mut() {
            *x = -*x;
        }
        for x in w_slice.iter_mut() {
            *x = -*x;
        }
    }

    let descent_form = {
        let wv = DVector::from_column_slice(&w_slice);
        (wv.transpose() * &hs * &wv)[(0, 0)]
    };

    let dot_slice = |a: &[f64], col: usize| -> f64 {
        (0..d).map(|i| a[i] * v[(i, col)]).sum()
    };
    let gamma_combined: Vec<f64> = (0..d)
        .map(|i| {
            let wv = dot_slice(&w_slice, i);
            gamma_slice[i] + 2.0 * lambda_unit.abs() * wv * wv
        })
        .collect();
    let gmax = gamma_slice.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    let gamma_set: Vec<usize> = (0..d)
        .filter(|&i| gamma_combined[i].abs() > 1e-8 * gmax.max(1e-300))
        .collect();

    let v1: Vec<f64> = (0..d).map(|a| v[(a, 0)]).collect();
    let step_scale = SQRT2 / n;
    let mut sums = [0.0_f64; 4];
    for l in 0..bign {
        let a = l / 2;
        let dir_w = w_slice[a];
        let dir_v = v1[a];
        sums[0] += rates[l] * (step_scale * dir_w) * (step_scale * dir_w);
        sums[1] += rates[l] * dir_w * dir_w;
        sums[2] += rates[l] * (step_scale * dir_v) * (step_scale * dir_v);
        sums[3] += rates[l] * dir_v * dir_v;
    }

    let shape = 0.5 * (gamma_set.len() as f64) * (std::f64::consts::PI / 2.0).ln()
        - 0.5
            * gamma_set
                .iter()
                .map(|&i| gamma_combined[i].abs().ln())
                .sum::<f64>();
    let log_gate_mass = match mode {
        HessianMode::Exact => {
            let lam = lambda_unit.abs();
            local_log_sum(table.counts(), z_lat, |pt| {
                let mut arg = CompensatedSum::default();
                for (a, &w) in w_slice.iter().enumerate() {
                    arg.add(w * SQRT2 * (pt.plus_counts[a] as f64 / n - primary.center_y[2 * a]));
                }
                measure.lumped_log_weight(pt) - n * lam * arg.value() * arg.value()
            })
        }
        HessianMode::Projected => {
            let terms: Vec<f64> = lifted
                .centers
                .iter()
                .map(|c| c.log_weight + (c.dice_count as f64).ln())
                .collect();
            logsumexp(&terms) + shape
        }
    };

    let mut gamma = gamma_slice.clone();
    gamma.resize(bign, 0.0);

    Ok(SaddleData {
        lifted: lifted.clone(),
        gamma,
        v_slice: (0..d)
            .map(|col| (0..d).map(|row| v[(row, col)]).collect())
            .collect(),
        rates,
        lambda_unit,
        lambda_step: 2.0 / (n * n) * lambda_unit,
        w_hat,
        w_slice,
        gamma_combined,
        gamma_set,
        log_gate_mass,
        descent_form,
        sum_r_w_step: sums[0],
        sum_r_w_unit: sums[1],
        sum_r_v1_step: sums[2],
        sum_r_v1_unit: sums[3],
    })
}

// Log of a unimodal lattice sum by local flooding: climb from `start` to the
// discrete mode of `eval`, then flood strictly downhill, keeping states
// within T nats of the mode. Descent cannot cross a ridge, so no other peak
// leaks in, and the cutoff truncates a relative tail of order
// (states visited) * e^-T.
fn local_log_sum(counts: &[u64], start: &LatticePoint, eval: impl Fn(&LatticePoint) -> f64) -> f64 {
    const T: f64 = 30.0;
    const SLACK: f64 = 1e-6;
    let d = counts.len();
    let mut top = start.clone();
    let mut w_top = eval(&top);
    loop {
        let mut improved = false;
        for a in 0..d {
            for step in [-1i64, 1] {
                let k = top.plus_counts[a] as i64 + step;
                if k < 0 || k > counts[a] as i64 {
                    continue;
                }
                let mut cand = top.clone();
                cand.plus_counts[a] = k as u64;
                let w = eval(&cand);
                if w > w_top {
                    top = cand;
                    w_top = w;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let mut seen: std::collections::HashMap<Vec<u64>, f64> = Default::default();
    let mut queue: std::collections::VecDeque<Vec<u64>> = Default::default();
    seen.insert(top.plus_counts.clone(), w_top);
    queue.push_back(top.plus_counts.clone());
    let mut acc = CompensatedSum::default();
    acc.add(1.0);
    while let Some(kv) = queue.pop_front() {
        let w_here = seen[&kv];
        for a in 0..d {
            for step in [-1i64, 1] {
                let k = kv[a] as i64 + step;
                if k < 0 || k > counts[a] as i64 {
                    continue;
                }
                let mut nk = kv.clone();
                nk[a] = k as u64;
                if seen.contains_key(&nk) {
                    continue;
                }
                let w = eval(&LatticePoint { plus_counts: nk.clone() });
                if w > w_here + SLACK || w < w_top - T {
                    continue;
                }
                seen.insert(nk.clone(), w);
                acc.add((w - w_top).exp());
                queue.push_back(nk);
            }
        }
    }
    w_top + acc.value().ln()
}

// Near-saturated wells put the mode a few sites from a face of the count
// box, where the Gaussian die estimate breaks; the sum is scale-exact there.
fn local_well_log_mass(measure: &LumpedMeasure, rep: &LatticePoint) -> f64 {
    local_log_sum(measure.table().counts(), rep, |pt| measure.lumped_log_weight(pt))
}

/// Eigen-structure and asymptotic occupation mass of a well minimum.
#[derive(Clone, Debug, Serialize)]
pub struct MinimumData {
    pub critical: CriticalPoint,
    pub center_y: Vec<f64>,
    pub lattice: LatticePoint,
    /// Slice curvature eigenvalues padded with zeros to full length.
    pub gamma_tilde: Vec<f64>,
    pub gamma_set: Vec<usize>,
    pub dice_count: u64,
    /// Lumped log-weight of the lattice representative.
    pub log_weight: f64,
    /// Log-mass of the well: local lattice sum at the mode under exact
    /// curvature, die-cover Gaussian estimate under projected.
    pub log_mass: f64,
    /// Same with the whole fiber cover summed (projected mode only differs).
    pub log_mass_fiber: f64,
}

/// Assemble the well-mass asymptotics at a minimum.
pub fn minimum_eigendata(
    model: &RateModel,
    measure: &LumpedMeasure,
    m: &CriticalPoint,
    mode: HessianMode,
) -> Result<MinimumData> {
    if m.kind != CritKind::Minimum {
        return Err(Error::Invalid("not a minimum".into()));
    }
    let table = measure.table();
    let d = table.num_types();
    let lifted = lift_point(m, model, measure, mode)?;
    let primary = &lifted.centers[0];

    let hs = slice_hessian(model, &primary.center_y, mode)?;
    let (gamma_slice, _) = sorted_eigen(&hs);
    let gmax = gamma_slice.iter().fold(0.0_f64, |mx, g| mx.max(g.abs()));
    let gamma_set: Vec<usize> = (0..d)
        .filter(|&i| gamma_slice[i].abs() > 1e-8 * gmax.max(1e-300))
        .collect();
    for &i in &gamma_set {
        if gamma_slice[i] <= 0.0 {
            return Err(Error::Invalid(
                "well curvature not positive along a kept direction".into(),
            ));
        }
    }

    let log_weight = measure.lumped_log_weight(&primary.center_lattice);
    let shape = 0.5 * (gamma_set.len() as f64) * (std::f64::consts::PI / 2.0).ln()
        - 0.5 * gamma_set.iter().map(|&i| gamma_slice[i].ln()).sum::<f64>();
    let (log_mass, log_mass_fiber) = match mode {
        HessianMode::Exact => {
            let lm = local_well_log_mass(measure, &primary.center_lattice);
            (lm, lm)
        }
        HessianMode::Projected => {
            let log_mass = log_weight + (primary.dice_count as f64).ln() + shape;
            let terms: Vec<f64> = lifted
                .centers
                .iter()
                .map(|c| c.log_weight + (c.dice_count as f64).ln() + shape)
                .collect();
            (log_mass, logsumexp(&terms))
        }
    };

    let mut gamma_tilde = gamma_slice.clone();
    gamma_tilde.resize(2 * d, 0.0);

    Ok(MinimumData {
        critical: m.clone(),
        center_y: primary.center_y.clone(),
        lattice: primary.center_lattice.clone(),
        gamma_tilde,
        gamma_set,
        dice_count: primary.dice_count,
        log_weight,
        log_mass,
        log_mass_fiber,
    })
}

/// Gaussian committor surrogate: the normal CDF of the rescaled crossing
/// coordinate through the gate center.
pub fn gaussian_committor(
    point: &LatticePoint,
    table: &TypeTable,
    center_y: &[f64],
    lambda_unit: f64,
    w_slice: &[f64],
) -> f64 {
    let n = table.n() as f64;
    let mut arg = CompensatedSum::default();
    for (a, &w) in w_slice.iter().enumerate() {
        let yplus = point.plus_counts[a] as f64 / n;
        arg.add(w * SQRT2 * (yplus - center_y[2 * a]));
    }
    normal_cdf((n * lambda_unit.abs()).sqrt() * arg.value())
}

fn dir_sum(sd: &SaddleData, dir: GateDir, norm: ElNorm) -> f64 {
    match (dir, norm) {
        (GateDir::W, ElNorm::Step) => sd.sum_r_w_step,
        (GateDir::W, ElNorm::Unit) => sd.sum_r_w_unit,
        (GateDir::V1, ElNorm::Step) => sd.sum_r_v1_step,
        (GateDir::V1, ElNorm::Unit) => sd.sum_r_v1_unit,
    }
}

/// Closed-form log-capacity of the gate: the sharp asymptotic estimate
/// assembled from the lifted saddle data.
pub fn asymptotic_capacity(saddles: &[SaddleData], n: u64, dir: GateDir, norm: ElNorm) -> f64 {
    let nf = n as f64;
    let mut terms = Vec::new();
    for sd in saddles {
        let tail = sd.lambda_unit.abs().ln() + dir_sum(sd, dir, norm).ln();
        terms.push(sd.log_gate_mass + tail);
    }
    (nf / (4.0 * std::f64::consts::PI)).ln() + logsumexp(&terms)
}

/// A certified variational upper bound on the log-capacity, next to the
/// closed-form value evaluated through the same code path.
#[derive(Clone, Debug, Serialize)]
pub struct CapacityBound {
    /// Dirichlet form of the explicit committor surrogate; a true upper
    /// bound on the capacity by the variational principle.
    pub log_certified: f64,
    /// The closed-form estimate it converges to.
    pub log_formula: f64,
}

/// Evaluate the committor-surrogate upper bound: the product of per-saddle
/// Gaussian committors, forced to one on A and zero on B, fed through the
/// Dirichlet form.
pub fn capacity_upper_bound(
    chain: &LatticeChain,
    measure: &LumpedMeasure,
    a_set: &[u64],
    b_set: &[u64],
    saddles: &[SaddleData],
    dir: GateDir,
    norm: ElNorm,
) -> Result<CapacityBound> {
    let table = chain.table();
    let n = table.n();
    let num = chain.num_states();
    if num > 50_000_000 {
        return Err(Error::StateBudget {
            actual: num,
            budget: 50_000_000,
        });
    }
    let mut f = vec![1.0_f64; num as usize];
    chain.for_each_state(|idx, pt| {
        let mut val = 1.0;
        for sd in saddles {
            val *= gaussian_committor(
                pt,
                table,
                &sd.lifted.centers[0].center_y,
                sd.lambda_unit,
                &sd.w_slice,
            );
        }
        f[idx as usize] = val;
    });
    for &a in a_set {
        f[a as usize] = 1.0;
    }
    for &b in b_set {
        f[b as usize] = 0.0;
    }
    let log_certified = crate::potential::log_dirichlet_form(chain, measure, &f);
    Ok(CapacityBound {
        log_certified,
        log_formula: asymptotic_capacity(saddles, n, dir, norm),
    })
}

/// Verdict of the flatness check: the sup of |f| over the probed set against
/// the bound eps + c * delta / theta.
#[derive(Clone, Debug, Serialize)]
pub struct FlatnessVerdict {
    pub max_abs: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Max-principle flatness check for a function on a probe set B: every
/// connected component of B must touch the anchor set B0 where |f| <= eps,
/// jump rates inside B must carry weight at least theta, and f may move by
/// at most delta per step with at most c steps of accumulation. Under those
/// preconditions sup_B |f| <= eps + c delta / theta.
pub fn max_principle_check(
    chain: &LatticeChain,
    f: &[f64],
    b_states: &[u64],
    b0_states: &[u64],
    weights: &[f64],
    c_growth: f64,
    delta: f64,
    eps: f64,
    theta: f64,
) -> Result<FlatnessVerdict> {
    if theta <= 0.0 {
        return Err(Error::Invalid("theta must be positive".into()));
    }
    if f.len() != chain.num_states() as usize {
        return Err(Error::Dimension("f length != number of states".into()));
    }
    if weights.len() != f.len() {
        return Err(Error::Dimension("weights length != number of states".into()));
    }
    let mut in_b = std::collections::HashMap::new();
    for (i, &s) in b_states.iter().enumerate() {
        if s >= chain.num_states() {
            return Err(Error::Invalid("b state out of range".into()));
        }
        in_b.insert(s, i);
        if weights[s as usize] < theta - 1e-15 {
            return Err(Error::Invalid(
                "weight below theta inside the probe set".into(),
            ));
        }
    }
    let b0: std::collections::HashSet<u64> = b0_states.iter().cloned().collect();
    for s in &b0 {
        if !in_b.contains_key(s) {
            return Err(Error::Invalid("anchor state outside the probe set".into()));
        }
    }

    // Every component of B (positive-rate adjacency) must meet B0.
    let nb = b_states.len();
    let mut seen = vec![false; nb];
    for start in 0..nb {
        if seen[start] {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        let mut touches = b0.contains(&b_states[start]);
        while let Some(i) = queue.pop_front() {
            let pt = chain.point_of(b_states[i]);
            for l in 0..chain.num_directions() {
                if chain.rate(&pt, l) <= 0.0 {
                    continue;
                }
                let Some(nxt) = chain.step(&pt, l) else { continue };
                let Some(nidx) = chain.index_of(&nxt) else {
                    continue;
                };
                if let Some(&j) = in_b.get(&nidx) {
                    if !seen[j] {
                        seen[j] = true;
                        touches |= b0.contains(&nidx);
                        queue.push_back(j);
                    }
                }
            }
        }
        if !touches {
            return Err(Error::Invalid(
                "a component of the probe set misses the anchor set".into(),
            ));
        }
    }

    let max_abs = b_states
        .iter()
        .map(|&s| f[s as usize].abs())
        .fold(0.0_f64, f64::max);
    let bound = eps + c_growth * delta / theta;
    Ok(FlatnessVerdict {
        max_abs,
        bound,
        holds: max_abs <= bound,
    })
}

/// Prefactor decomposition of the asymptotic mean exit time.
#[derive(Clone, Debug, Serialize)]
pub struct PrefactorReport {
    /// log of the predicted mean exit time: well mass over gate capacity.
    pub log_prediction: f64,
    /// The subexponential prefactor once the weight ratio of the lattice
    /// representatives is split off.
    pub log_cn: f64,
    /// Exact log-weight gap between well and gate representatives.
    pub delta_log_q: f64,
    pub log_mass: f64,
    pub log_mass_fiber: f64,
    pub log_capacity: f64,
    /// Curvature-ratio diagnostics at the representatives.
    pub log_kappa_m: f64,
    pub log_kappa_z: Vec<f64>,
}

/// Split the asymptotic mean exit time into the exponential weight ratio and
/// the subexponential prefactor.
pub fn exit_time_prefactor(
    min_data: &MinimumData,
    saddles: &[SaddleData],
    measure: &LumpedMeasure,
    model: &RateModel,
    dir: GateDir,
    norm: ElNorm,
) -> Result<PrefactorReport> {
    let n = measure.table().n();
    let log_capacity = asymptotic_capacity(saddles, n, dir, norm);
    let log_prediction = min_data.log_mass - log_capacity;
    let z_lat = &saddles[0].lifted.centers[0].center_lattice;
    let delta_log_q =
        measure.lumped_log_weight(&min_data.lattice) - measure.lumped_log_weight(z_lat);
    let log_kappa_m = measure.kappa_hat(&min_data.lattice, model)?.ln();
    let mut log_kappa_z = Vec::with_capacity(saddles.len());
    for sd in saddles {
        log_kappa_z.push(
            measure
                .kappa_hat(&sd.lifted.centers[0].center_lattice, model)?
                .ln(),
        );
    }
    Ok(PrefactorReport {
        log_prediction,
        log_cn: log_prediction - delta_log_q,
        delta_log_q,
        log_mass: min_data.log_mass,
        log_mass_fiber: min_data.log_mass_fiber,
        log_capacity,
        log_kappa_m,
        log_kappa_z,
    })
}

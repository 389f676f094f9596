//! Exact potential theory on the lumped chain.
//!
//! Everything reduces to one SPD linear system. For the committor between
//! state sets A and B, unknowns are u = sqrt(w) phi on interior states,
//! where w is the stationary weight rescaled by its maximum so the largest
//! entries are O(1). The system matrix is assembled from edge conductances
//! c(Y,Y') = w(Y) r(Y,Y'), each computed once from the lower-indexed
//! endpoint, so symmetry holds in bits and the matrix is a diagonally
//! dominant M-matrix.
//!
//! Capacities are reported in log form; the mean hitting time under the
//! potential-theoretic initial distribution nu is the ratio of the
//! phi-weighted mass to the capacity.

use crate::chain::LatticeChain;
use crate::ldp::LumpedMeasure;
use crate::numeric::CompensatedSum;
use crate::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Drop states whose log-weight is this far below the maximum
    /// (committor there is filled from the nearest boundary). None disables.
    pub prune_log_drop: Option<f64>,
    /// Relative tolerance on the preconditioned residual.
    pub cg_tol: f64,
    /// Iteration cap: cg_max_factor * sqrt(interior states).
    pub cg_max_factor: f64,
    /// Skip CG and factor densely (only sensible for small systems).
    pub force_dense: bool,
    /// Largest system the dense fallback will attempt.
    pub dense_limit: usize,
    /// Rate-function level for the valley localization fraction, in units
    /// of the per-state value (max log w - log w)/n.
    pub ua_level: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            prune_log_drop: Some(690.0), // weight ratio 1e-300
            cg_tol: 1e-12,
            cg_max_factor: 50.0,
            force_dense: false,
            dense_limit: 20_000,
            ua_level: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SolveStats {
    pub method: String,
    pub iterations: usize,
    /// Unpreconditioned relative residual, worse of the two solves.
    pub residual: f64,
    pub pruned: usize,
    /// Interior states cut off from both boundaries by pruning; their
    /// committor is filled like pruned states.
    pub islanded: usize,
    /// Interior committor values nudged back into [0,1] by more than 1e-12.
    pub clamped: usize,
}

/// Committor problem between disjoint state sets on one chain.
pub struct BoundaryProblem<'a> {
    pub chain: &'a LatticeChain,
    pub measure: &'a LumpedMeasure,
    pub a_set: Vec<u64>,
    pub b_set: Vec<u64>,
}

impl<'a> BoundaryProblem<'a> {
    pub fn new(
        chain: &'a LatticeChain,
        measure: &'a LumpedMeasure,
        mut a_set: Vec<u64>,
        mut b_set: Vec<u64>,
    ) -> Result<Self> {
        if measure.table().counts() != chain.table().counts()
            || measure.table().types() != chain.table().types()
        {
            return Err(Error::Invalid(
                "chain and measure built from different disorder tables".into(),
            ));
        }
        a_set.sort_unstable();
        a_set.dedup();
        b_set.sort_unstable();
        b_set.dedup();
        if a_set.is_empty() || b_set.is_empty() {
            return Err(Error::Invalid("boundary sets must be non-empty".into()));
        }
        if a_set.iter().chain(&b_set).any(|&s| s >= chain.num_states()) {
            return Err(Error::Invalid("boundary state outside the chain".into()));
        }
        if a_set.iter().any(|s| b_set.binary_search(s).is_ok()) {
            return Err(Error::Invalid("boundary sets must be disjoint".into()));
        }
        Ok(BoundaryProblem {
            chain,
            measure,
            a_set,
            b_set,
        })
    }
}

#[derive(Clone, Debug)]
pub struct HarmonicSolution {
    /// P(hit A before B), per state.
    pub phi: Vec<f64>,
    /// P(hit B before A): solved directly, not as 1 - phi, so tiny escape
    /// probabilities near A keep full relative precision.
    pub phi_swapped: Vec<f64>,
    pub stats: SolveStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct CapacityReport {
    pub log_capacity: f64,
    /// One-sided flux out of A; must agree with log_capacity.
    pub log_capacity_flux: f64,
    pub log_valley_mass: f64,
    pub log_mean_hitting: f64,
    pub mean_hitting: f64,
    /// Initial distribution over a_set (same order).
    pub nu: Vec<f64>,
    /// Fraction of the valley mass inside the sublevel component of A,
    /// when ua_level was configured.
    pub ua_fraction: Option<f64>,
    #[serde(skip)]
    pub harmonic: Vec<f64>,
    #[serde(skip)]
    pub harmonic_swapped: Vec<f64>,
    pub stats: SolveStats,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Role {
    InA,
    InB,
    Pruned,
    Interior(u32),
}

struct System {
    roles: Vec<Role>,
    interior: Vec<u64>,
    sqrt_w: Vec<f64>, // per interior row
    csr_ptr: Vec<usize>,
    csr_col: Vec<u32>,
    csr_val: Vec<f64>,
    diag: Vec<f64>,
    rhs_a: Vec<f64>,
    rhs_b: Vec<f64>,
    /// 1.0 where the A-front reaches first, 0.0 for the B-front.
    fill: Vec<f64>,
    pruned: usize,
    islanded: usize,
}

fn build_system(problem: &BoundaryProblem, opts: &SolveOptions) -> Result<System> {
    let chain = problem.chain;
    let ns = chain.num_states() as usize;
    let nd = chain.num_directions();

    let mut log_w = vec![0.0f64; ns];
    chain.for_each_state(|idx, pt| {
        log_w[idx as usize] = problem.measure.lumped_log_weight(pt);
    });
    let m_shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut roles = vec![Role::Interior(0); ns];
    if let Some(drop) = opts.prune_log_drop {
        for (i, &lw) in log_w.iter().enumerate() {
            if m_shift - lw > drop {
                roles[i] = Role::Pruned;
            }
        }
    }
    for &a in &problem.a_set {
        roles[a as usize] = Role::InA;
    }
    for &b in &problem.b_set {
        roles[b as usize] = Role::InB;
    }
    let mut pruned = roles.iter().filter(|r| **r == Role::Pruned).count();

    // reachability from the boundary over kept positive-rate edges; interior
    // states cut off by pruning would make the system singular
    let mut reached = vec![false; ns];
    let mut queue: std::collections::VecDeque<u64> = Default::default();
    for &s in problem.a_set.iter().chain(&problem.b_set) {
        reached[s as usize] = true;
        queue.push_back(s);
    }
    while let Some(i) = queue.pop_front() {
        let pt = chain.point_of(i);
        for l in 0..nd {
            if chain.rate(&pt, l) > 0.0 {
                let j = chain.index_of(&chain.step(&pt, l).unwrap()).unwrap() as usize;
                if !reached[j] && roles[j] != Role::Pruned {
                    reached[j] = true;
                    queue.push_back(j as u64);
                }
            }
        }
    }
    let mut islanded = 0;
    for i in 0..ns {
        if matches!(roles[i], Role::Interior(_)) && !reached[i] {
            roles[i] = Role::Pruned;
            islanded += 1;
        }
    }
    pruned += islanded;

    let mut interior = Vec::new();
    for (i, r) in roles.iter_mut().enumerate() {
        if let Role::Interior(slot) = r {
            *slot = interior.len() as u32;
            interior.push(i as u64);
        }
    }

    // two-front BFS fill for pruned states: A first so it wins distance ties
    let mut fill = vec![f64::NAN; ns];
    let mut queue: std::collections::VecDeque<u64> = Default::default();
    for &s in &problem.a_set {
        fill[s as usize] = 1.0;
        queue.push_back(s);
    }
    for &s in &problem.b_set {
        fill[s as usize] = 0.0;
        queue.push_back(s);
    }
    while let Some(i) = queue.pop_front() {
        let pt = chain.point_of(i);
        for l in 0..nd {
            if chain.rate(&pt, l) > 0.0 {
                let j = chain.index_of(&chain.step(&pt, l).unwrap()).unwrap() as usize;
                if fill[j].is_nan() {
                    fill[j] = fill[i as usize];
                    queue.push_back(j as u64);
                }
            }
        }
    }

    let n_int = interior.len();
    let mut csr_ptr = Vec::with_capacity(n_int + 1);
    let mut csr_col = Vec::new();
    let mut csr_val = Vec::new();
    let mut diag = vec![0.0f64; n_int];
    let mut rhs_a = vec![0.0f64; n_int];
    let mut rhs_b = vec![0.0f64; n_int];
    let sqrt_w: Vec<f64> = interior
        .iter()
        .map(|&s| (0.5 * (log_w[s as usize] - m_shift)).exp())
        .collect();

    // conductance of the edge behind (state, direction), from the
    // lower-indexed endpoint so both orientations see identical bits
    let edge_cond = |i: u64, pt: &crate::model::LatticePoint, l: usize, j: u64| -> f64 {
        if i < j {
            match chain.log_rate(pt, l) {
                Some(lr) => (log_w[i as usize] - m_shift + lr).exp(),
                None => 0.0,
            }
        } else {
            let pj = chain.point_of(j);
            match chain.log_rate(&pj, l ^ 1) {
                Some(lr) => (log_w[j as usize] - m_shift + lr).exp(),
                None => 0.0,
            }
        }
    };

    csr_ptr.push(0);
    for (row, &si) in interior.iter().enumerate() {
        let pt = chain.point_of(si);
        let wi = (log_w[si as usize] - m_shift).exp();
        let mut dsum = 0.0f64;
        for l in 0..nd {
            let Some(dest) = chain.step(&pt, l) else { continue };
            let j = chain.index_of(&dest).unwrap();
            let c = edge_cond(si, &pt, l, j);
            if c == 0.0 {
                continue;
            }
            match roles[j as usize] {
                Role::Pruned => {} // edge dropped with the state
                Role::InA => {
                    dsum += c;
                    rhs_a[row] += c / sqrt_w[row];
                }
                Role::InB => {
                    dsum += c;
                    rhs_b[row] += c / sqrt_w[row];
                }
                Role::Interior(col) => {
                    dsum += c;
                    csr_col.push(col);
                    csr_val.push(-c / (sqrt_w[row] * sqrt_w[col as usize]));
                }
            }
        }
        diag[row] = dsum / wi;
        csr_ptr.push(csr_col.len());
    }

    Ok(System {
        roles,
        interior,
        sqrt_w,
        csr_ptr,
        csr_col,
        csr_val,
        diag,
        rhs_a,
        rhs_b,
        fill,
        pruned,
        islanded,
    })
}

impl System {
    fn matvec(&self, p: &[f64], out: &mut [f64]) {
        out.par_iter_mut().enumerate().for_each(|(i, o)| {
            let mut acc = self.diag[i] * p[i];
            for k in self.csr_ptr[i]..self.csr_ptr[i + 1] {
                acc += self.csr_val[k] * p[self.csr_col[k] as usize];
            }
            *o = acc;
        });
    }

    fn residual_rel(&self, u: &[f64], b: &[f64]) -> f64 {
        let mut su = vec![0.0; u.len()];
        self.matvec(u, &mut su);
        let mut num = CompensatedSum::default();
        let mut den = CompensatedSum::default();
        for i in 0..u.len() {
            num.add((su[i] - b[i]) * (su[i] - b[i]));
            den.add(b[i] * b[i]);
        }
        if den.value() == 0.0 {
            return num.value().sqrt();
        }
        (num.value() / den.value()).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = CompensatedSum::default();
    for (x, y) in a.iter().zip(b) {
        s.add(x * y);
    }
    s.value()
}

fn cg_solve(sys: &System, b: &[f64], opts: &SolveOptions) -> (Vec<f64>, usize, bool) {
    let n = b.len();
    let mut x = vec![0.0f64; n];
    if n == 0 {
        return (x, 0, true);
    }
    let inv_diag: Vec<f64> = sys.diag.iter().map(|&d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let b_norm = rz.max(0.0).sqrt();
    if b_norm == 0.0 {
        return (x, 0, true);
    }
    let maxit = ((opts.cg_max_factor * (n as f64).sqrt()).ceil() as usize).max(25);
    let mut q = vec![0.0f64; n];
    for it in 0..maxit {
        sys.matvec(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return (x, it, false);
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        if rz_new.max(0.0).sqrt() <= opts.cg_tol * b_norm {
            return (x, it + 1, true);
        }
        let beta = rz_new / rz;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        rz = rz_new;
    }
    (x, maxit, false)
}

// Direct Cholesky in banded storage. Lattice boxes give a bandwidth equal to
// the enumeration stride, so elimination costs n*bw^2 instead of n^3. Direct
// solves keep relative accuracy in the exponentially small committor tails
// where any residual-targeted iteration bottoms out at its noise floor.
// Returns None when the band blows the work or memory budget, or if the
// matrix stops being positive definite; the caller then falls back.
fn banded_solve(sys: &System, rhs: &[&[f64]]) -> Option<Vec<Vec<f64>>> {
    let n = sys.diag.len();
    let mut bw = 0usize;
    for i in 0..n {
        for k in sys.csr_ptr[i]..sys.csr_ptr[i + 1] {
            bw = bw.max(i.abs_diff(sys.csr_col[k] as usize));
        }
    }
    let w = bw + 1;
    if (n as f64) * (bw as f64) * (bw as f64) > 2.5e10 || n * w > 80_000_000 {
        return None;
    }
    let mut band = vec![0.0f64; n * w];
    for i in 0..n {
        band[i * w + bw] = sys.diag[i];
        for k in sys.csr_ptr[i]..sys.csr_ptr[i + 1] {
            let j = sys.csr_col[k] as usize;
            if j < i {
                band[i * w + bw + j - i] = sys.csr_val[k];
            }
        }
    }
    for i in 0..n {
        let lo = i.saturating_sub(bw);
        for j in lo..=i {
            let mut s = band[i * w + bw + j - i];
            for k in lo..j {
                s -= band[i * w + bw + k - i] * band[j * w + bw + k - j];
            }
            if j < i {
                band[i * w + bw + j - i] = s / band[j * w + bw];
            } else {
                if s <= 0.0 {
                    return None;
                }
                band[i * w + bw] = s.sqrt();
            }
        }
    }
    Some(
        rhs.iter()
            .map(|b| {
                let mut y = b.to_vec();
                for i in 0..n {
                    let lo = i.saturating_sub(bw);
                    let mut s = y[i];
                    for k in lo..i {
                        s -= band[i * w + bw + k - i] * y[k];
                    }
                    y[i] = s / band[i * w + bw];
                }
                for i in (0..n).rev() {
                    let hi = (i + bw).min(n - 1);
                    let mut s = y[i];
                    for k in i + 1..=hi {
                        s -= band[k * w + bw + i - k] * y[k];
                    }
                    y[i] = s / band[i * w + bw];
                }
                y
            })
            .collect(),
    )
}

fn dense_solve(sys: &System, rhs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let n = sys.diag.len();
    let mut m = nalgebra::DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = sys.diag[i];
        for k in sys.csr_ptr[i]..sys.csr_ptr[i + 1] {
            m[(i, sys.csr_col[k] as usize)] = sys.csr_val[k];
        }
    }
    let ch = m
        .cholesky()
        .ok_or_else(|| Error::Solve("dense factorization failed: system not SPD".into()))?;
    Ok(rhs
        .iter()
        .map(|b| {
            let mut v = nalgebra::DVector::from_column_slice(b);
            ch.solve_mut(&mut v);
            v.as_slice().to_vec()
        })
        .collect())
}

/// Committor solve. phi is 1 on A, 0 on B, harmonic elsewhere; the swapped
/// committor is solved against the same matrix.
pub fn solve_harmonic(problem: &BoundaryProblem, opts: &SolveOptions) -> Result<HarmonicSolution> {
    let sys = build_system(problem, opts)?;
    let n_int = sys.interior.len();

    let (ua, ub, iterations, method) = if opts.force_dense || n_int == 0 {
        if n_int > opts.dense_limit {
            return Err(Error::StateBudget {
                actual: n_int as u64,
                budget: opts.dense_limit as u64,
            });
        }
        let sols = dense_solve(&sys, &[&sys.rhs_a, &sys.rhs_b])?;
        let mut it = sols.into_iter();
        (it.next().unwrap(), it.next().unwrap(), 0, "dense")
    } else if let Some(sols) = banded_solve(&sys, &[&sys.rhs_a, &sys.rhs_b]) {
        let mut it = sols.into_iter();
        (it.next().unwrap(), it.next().unwrap(), 0, "banded")
    } else {
        let (ua, ita, oka) = cg_solve(&sys, &sys.rhs_a, opts);
        let (ub, itb, okb) = cg_solve(&sys, &sys.rhs_b, opts);
        if oka && okb {
            (ua, ub, ita + itb, "cg")
        } else if n_int <= opts.dense_limit {
            log::warn!("cg stalled after {} iterations, factoring densely", ita + itb);
            let sols = dense_solve(&sys, &[&sys.rhs_a, &sys.rhs_b])?;
            let mut it = sols.into_iter();
            (it.next().unwrap(), it.next().unwrap(), ita + itb, "cg+dense")
        } else {
            return Err(Error::Solve(format!(
                "cg did not reach tolerance {} and the system is too large to factor",
                opts.cg_tol
            )));
        }
    };

    let resid = sys.residual_rel(&ua, &sys.rhs_a).max(sys.residual_rel(&ub, &sys.rhs_b));
    if resid > 1e-10 {
        return Err(Error::Solve(format!(
            "harmonic solve residual {resid:.3e} exceeds 1e-10"
        )));
    }

    let ns = sys.roles.len();
    let mut phi = vec![0.0f64; ns];
    let mut phi_swapped = vec![0.0f64; ns];
    let mut clamped = 0usize;
    for i in 0..ns {
        match sys.roles[i] {
            Role::InA => {
                phi[i] = 1.0;
                phi_swapped[i] = 0.0;
            }
            Role::InB => {
                phi[i] = 0.0;
                phi_swapped[i] = 1.0;
            }
            Role::Pruned => {
                let f = if sys.fill[i].is_nan() { 0.0 } else { sys.fill[i] };
                phi[i] = f;
                phi_swapped[i] = 1.0 - f;
            }
            Role::Interior(row) => {
                let r = row as usize;
                let pa = ua[r] / sys.sqrt_w[r];
                let pb = ub[r] / sys.sqrt_w[r];
                if !(-1e-12..=1.0 + 1e-12).contains(&pa) || !(-1e-12..=1.0 + 1e-12).contains(&pb)
                {
                    clamped += 1;
                }
                phi[i] = pa.clamp(0.0, 1.0);
                phi_swapped[i] = pb.clamp(0.0, 1.0);
            }
        }
    }
    Ok(HarmonicSolution {
        phi,
        phi_swapped,
        stats: SolveStats {
            method: method.into(),
            iterations,
            residual: resid,
            pruned: sys.pruned,
            islanded: sys.islanded,
            clamped,
        },
    })
}

/// log of (1/2) sum_{Y,Y'} Q(Y) r(Y,Y') (f(Y') - f(Y))^2, each unordered
/// edge counted once from its lower-indexed endpoint.
pub fn log_dirichlet_form(chain: &LatticeChain, measure: &LumpedMeasure, f: &[f64]) -> f64 {
    debug_assert_eq!(f.len(), chain.num_states() as usize);
    let mut log_w = vec![0.0f64; chain.num_states() as usize];
    chain.for_each_state(|idx, pt| {
        log_w[idx as usize] = measure.lumped_log_weight(pt);
    });
    let m_shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = CompensatedSum::default();
    chain.for_each_state(|idx, pt| {
        for a in 0..chain.table().num_types() {
            let l = 2 * a + 1; // raising steps move to a strictly larger index
            if let Some(lr) = chain.log_rate(pt, l) {
                let j = chain.index_of(&chain.step(pt, l).unwrap()).unwrap();
                let df = f[j as usize] - f[idx as usize];
                acc.add((log_w[idx as usize] - m_shift + lr).exp() * df * df);
            }
        }
    });
    let s = acc.value();
    if s <= 0.0 {
        f64::NEG_INFINITY
    } else {
        s.ln() + m_shift
    }
}

pub fn dirichlet_form(chain: &LatticeChain, measure: &LumpedMeasure, f: &[f64]) -> f64 {
    log_dirichlet_form(chain, measure, f).exp()
}

// Cross form D(phi, 1 - psi) of the two one-sided committor solves. Every
// edge term is a product of one increment per solve, so edges whose phi
// increment is below f64 resolution contribute noise times a genuinely tiny
// psi increment instead of noise squared times a huge weight; deep-barrier
// capacities keep full relative precision where the plain form saturates.
fn log_dirichlet_cross(
    chain: &LatticeChain,
    measure: &LumpedMeasure,
    phi: &[f64],
    psi: &[f64],
) -> f64 {
    let mut log_w = vec![0.0f64; chain.num_states() as usize];
    chain.for_each_state(|idx, pt| {
        log_w[idx as usize] = measure.lumped_log_weight(pt);
    });
    let m_shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut acc = CompensatedSum::default();
    chain.for_each_state(|idx, pt| {
        for a in 0..chain.table().num_types() {
            let l = 2 * a + 1;
            if let Some(lr) = chain.log_rate(pt, l) {
                let j = chain.index_of(&chain.step(pt, l).unwrap()).unwrap() as usize;
                let i = idx as usize;
                let term = (phi[i] - phi[j]) * (psi[j] - psi[i]);
                acc.add((log_w[i] - m_shift + lr).exp() * term);
            }
        }
    });
    let s = acc.value();
    if s <= 0.0 {
        f64::NEG_INFINITY
    } else {
        s.ln() + m_shift
    }
}

/// Valley mass sum Q phi with an optional localization fraction: the share
/// carried by the connected sublevel component (per-state rate value below
/// `level`) containing A.
pub fn valley_mass(
    problem: &BoundaryProblem,
    phi: &[f64],
    level: Option<f64>,
) -> (f64, Option<f64>) {
    let chain = problem.chain;
    let ns = chain.num_states() as usize;
    let mut log_w = vec![0.0f64; ns];
    chain.for_each_state(|idx, pt| {
        log_w[idx as usize] = problem.measure.lumped_log_weight(pt);
    });
    let m_shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = CompensatedSum::default();
    for i in 0..ns {
        total.add((log_w[i] - m_shift).exp() * phi[i]);
    }
    let log_total = total.value().ln() + m_shift;

    let fraction = level.map(|a| {
        let n = chain.table().n() as f64;
        let below = |i: usize| (m_shift - log_w[i]) / n < a;
        let mut in_comp = vec![false; ns];
        let mut queue: std::collections::VecDeque<u64> = Default::default();
        for &s in &problem.a_set {
            if below(s as usize) && !in_comp[s as usize] {
                in_comp[s as usize] = true;
                queue.push_back(s);
            }
        }
        while let Some(i) = queue.pop_front() {
            let pt = chain.point_of(i);
            for l in 0..chain.num_directions() {
                if chain.rate(&pt, l) > 0.0 {
                    let j = chain.index_of(&chain.step(&pt, l).unwrap()).unwrap() as usize;
                    if !in_comp[j] && below(j) {
                        in_comp[j] = true;
                        queue.push_back(j as u64);
                    }
                }
            }
        }
        let mut comp = CompensatedSum::default();
        for i in 0..ns {
            if in_comp[i] {
                comp.add((log_w[i] - m_shift).exp() * phi[i]);
            }
        }
        comp.value() / total.value()
    });
    (log_total, fraction)
}

/// Full capacity pipeline: both committors, capacity in Dirichlet and flux
/// form, the initial distribution nu on A, and the mean hitting time.
pub fn capacity(problem: &BoundaryProblem, opts: &SolveOptions) -> Result<CapacityReport> {
    let sol = solve_harmonic(problem, opts)?;
    let chain = problem.chain;
    let log_capacity = log_dirichlet_cross(chain, problem.measure, &sol.phi, &sol.phi_swapped);

    // one-sided escape flux out of A, using the positively-solved swapped
    // committor: e(y) = sum_l r(y,l) * P(dest hits B before A)
    let mut log_w_a = Vec::with_capacity(problem.a_set.len());
    let mut escapes = Vec::with_capacity(problem.a_set.len());
    for &s in &problem.a_set {
        let pt = chain.point_of(s);
        log_w_a.push(problem.measure.lumped_log_weight(&pt));
        let mut e = CompensatedSum::default();
        for l in 0..chain.num_directions() {
            let r = chain.rate(&pt, l);
            if r > 0.0 {
                let j = chain.index_of(&chain.step(&pt, l).unwrap()).unwrap() as usize;
                e.add(r * sol.phi_swapped[j]);
            }
        }
        escapes.push(e.value());
    }
    let m_a = log_w_a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut flux = CompensatedSum::default();
    for (lw, e) in log_w_a.iter().zip(&escapes) {
        flux.add((lw - m_a).exp() * e);
    }
    let log_capacity_flux = flux.value().ln() + m_a;

    let nu_total = flux.value();
    let nu: Vec<f64> = log_w_a
        .iter()
        .zip(&escapes)
        .map(|(lw, e)| (lw - m_a).exp() * e / nu_total)
        .collect();

    let (log_valley_mass, ua_fraction) = valley_mass(problem, &sol.phi, opts.ua_level);
    let log_mean_hitting = log_valley_mass - log_capacity;
    Ok(CapacityReport {
        log_capacity,
        log_capacity_flux,
        log_valley_mass,
        log_mean_hitting,
        mean_hitting: log_mean_hitting.exp(),
        nu,
        ua_fraction,
        harmonic: sol.phi,
        harmonic_swapped: sol.phi_swapped,
        stats: sol.stats,
    })
}

/// Direct first-passage oracle: solve (I - P) h = 1 with h = 0 on B,
/// densely, and average h over the given distribution on states. Intended
/// for cross-checking at small sizes only.
pub fn mean_hitting_direct(
    chain: &LatticeChain,
    b_set: &[u64],
    start: &[(u64, f64)],
) -> Result<f64> {
    let ns = chain.num_states() as usize;
    if ns > 5000 {
        return Err(Error::StateBudget {
            actual: ns as u64,
            budget: 5000,
        });
    }
    let in_b = {
        let mut v = vec![false; ns];
        for &b in b_set {
            v[b as usize] = true;
        }
        v
    };
    let mut unknown_of = vec![usize::MAX; ns];
    let mut states = Vec::new();
    for i in 0..ns {
        if !in_b[i] {
            unknown_of[i] = states.len();
            states.push(i as u64);
        }
    }
    let n_u = states.len();
    let mut m = nalgebra::DMatrix::zeros(n_u, n_u);
    for (row, &si) in states.iter().enumerate() {
        let pt = chain.point_of(si);
        let (rates, holding) = chain.rates(&pt);
        m[(row, row)] = 1.0 - holding;
        for (l, r) in rates.iter().enumerate() {
            if *r > 0.0 {
                let j = chain.index_of(&chain.step(&pt, l).unwrap()).unwrap() as usize;
                if !in_b[j] {
                    m[(row, unknown_of[j])] -= r;
                }
            }
        }
    }
    let h = m
        .lu()
        .solve(&nalgebra::DVector::from_element(n_u, 1.0))
        .ok_or_else(|| Error::Solve("first-passage system singular".into()))?;
    let mut e = CompensatedSum::default();
    for &(s, w) in start {
        if !in_b[s as usize] {
            e.add(w * h[unknown_of[s as usize]]);
        }
    }
    Ok(e.value())
}

/// Closed-form log-capacity of a 1D birth-death chain between states a < b:
/// 1/cap = sum_{k=a}^{b-1} 1 / (Q(k) r(k, k+1)).
pub fn bd_log_capacity(log_q: &[f64], log_r_up: &[f64], a: usize, b: usize) -> f64 {
    let neg: Vec<f64> = (a..b).map(|k| -(log_q[k] + log_r_up[k])).collect();
    -crate::numeric::logsumexp(&neg)
}

/// Closed-form committor of a 1D birth-death chain: 1 at and left of a,
/// 0 at and right of b, suffix-resistance ratios between.
pub fn bd_harmonic(log_q: &[f64], log_r_up: &[f64], a: usize, b: usize) -> Vec<f64> {
    let n = log_q.len();
    let rho: Vec<f64> = (a..b).map(|k| -(log_q[k] + log_r_up[k])).collect();
    let total = crate::numeric::logsumexp(&rho);
    let mut phi = vec![0.0; n];
    for k in 0..n {
        if k <= a {
            phi[k] = 1.0;
        } else if k >= b {
            phi[k] = 0.0;
        } else {
            let suffix = crate::numeric::logsumexp(&rho[k - a..]);
            phi[k] = (suffix - total).exp();
        }
    }
    phi
}

//! Rate-function machinery for the overlap and occupation variables.
//!
//! L(t) = sum_a q_a log cosh <t,a> is the quenched log-moment generating
//! function of one pattern column; its Legendre transform L* together with
//! the potential gives the overlap rate function I = -beta v + L* + c.
//! c is fixed so that min I = 0 over the feasible domain (the zonotope
//! sum_a q_a a [-1,1]). Only differences of I enter the exit-time formulas,
//! so this normalization is a convention, not an approximation.
//!
//! The occupation variables Y = (Y_a^+, Y_a^-)_a carry two Hessian models:
//! the chain-rule Hessian of I composed with the linear projection (rank at
//! most p, "paper" mode), and the exact curvature of the lumped measure,
//! which adds the binomial entropy diagonal ("exact" mode, the default for
//! sharp formulas).

use crate::disorder::{PatternDistribution, TypeTable};
use crate::model::{self, LatticePoint, Potential};
use crate::numeric::{log_binomial, logaddexp, logcosh, sech2};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Legendre transform result at a feasible point.
#[derive(Clone, Debug)]
pub struct Legendre {
    pub value: f64,
    /// Maximizer: nabla L(t_star) = x.
    pub t_star: DVector<f64>,
}

/// Curvature model for the occupation variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianMode {
    /// Chain rule through the overlap projection; rank-deficient.
    Projected,
    /// Exact curvature of the lumped measure (entropy diagonal included).
    Exact,
}

/// Value, gradient, and Hessian of the lifted rate function at a full
/// occupation vector (y_1^+, y_1^-, ..., y_{|A|}^+, y_{|A|}^-).
#[derive(Clone, Debug)]
pub struct RateHat {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Interior critical point in the dual (t) parametrization.
#[derive(Clone, Debug)]
pub struct RawCritical {
    pub t: DVector<f64>,
    pub x: DVector<f64>,
    /// -beta v + L* before the c shift.
    pub value_raw: f64,
}

const LEGENDRE_TOL: f64 = 1e-11;
const LEGENDRE_MAX_ITER: usize = 100;
const T_DIVERGED: f64 = 400.0;
const BOUNDARY_MARGIN: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct RateModel {
    beta: f64,
    potential: Potential,
    types: Vec<Vec<f64>>,
    q: Vec<f64>,
    c: f64,
}

impl RateModel {
    /// Quenched probabilities q_a = n_a / n from a fixed disorder table.
    pub fn quenched(potential: Potential, beta: f64, table: &TypeTable) -> Result<Self> {
        RateModel::build(potential, beta, table.types_f64().to_vec(), table.quenched_probs())
    }

    /// Annealed probabilities: product of the configured marginals.
    pub fn annealed(
        potential: Potential,
        beta: f64,
        dists: &[PatternDistribution],
    ) -> Result<Self> {
        if dists.is_empty() {
            return Err(Error::Invalid("need at least one distribution".into()));
        }
        let mut types: Vec<Vec<f64>> = vec![vec![]];
        let mut q: Vec<f64> = vec![1.0];
        for d in dists {
            let mut nt = Vec::new();
            let mut nq = Vec::new();
            for (t, w) in types.iter().zip(&q) {
                for (a, &pa) in d.support().iter().zip(d.probs()) {
                    let mut t2 = t.clone();
                    t2.push(a.to_f64());
                    nt.push(t2);
                    nq.push(w * pa);
                }
            }
            types = nt;
            q = nq;
        }
        let mut order: Vec<usize> = (0..types.len()).collect();
        order.sort_by(|&i, &j| types[i].partial_cmp(&types[j]).unwrap());
        RateModel::build(
            potential,
            beta,
            order.iter().map(|&i| types[i].clone()).collect(),
            order.iter().map(|&i| q[i]).collect(),
        )
    }

    fn build(potential: Potential, beta: f64, types: Vec<Vec<f64>>, q: Vec<f64>) -> Result<Self> {
        if beta < 0.0 || !beta.is_finite() {
            return Err(Error::Invalid(format!("inverse temperature {beta}")));
        }
        let p = potential.p();
        if types.iter().any(|a| a.len() != p) {
            return Err(Error::Dimension(format!(
                "type vectors must have length {p}"
            )));
        }
        let qsum: f64 = q.iter().sum();
        if (qsum - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("type probabilities sum to {qsum}")));
        }
        let mut m = RateModel {
            beta,
            potential,
            types,
            q,
            c: 0.0,
        };
        m.check_convexity()?;
        m.c = -m.min_raw_rate()?;
        Ok(m)
    }

    // L is convex analytically; this guards against corrupted type data.
    fn check_convexity(&self) -> Result<()> {
        let p = self.potential.p();
        let probes = [0.0, 0.7, -1.3];
        for &s in &probes {
            let t = vec![s; p];
            let (_, _, h) = self.log_moment(&t);
            let eig = h.symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| l < -1e-9) {
                return Err(Error::Invalid(
                    "log-moment function is not convex; corrupt type data".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn p(&self) -> usize {
        self.potential.p()
    }

    pub fn types(&self) -> &[Vec<f64>] {
        &self.types
    }

    pub fn type_probs(&self) -> &[f64] {
        &self.q
    }

    /// Additive constant making min I = 0.
    pub fn c(&self) -> f64 {
        self.c
    }

    /// L(t) with gradient and Hessian.
    pub fn log_moment(&self, t: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        debug_assert_eq!(t.len(), p);
        let mut val = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for (a, &qa) in self.types.iter().zip(&self.q) {
            let u: f64 = a.iter().zip(t).map(|(ai, ti)| ai * ti).sum();
            val += qa * logcosh(u);
            let th = u.tanh();
            let s2 = sech2(u);
            for i in 0..p {
                grad[i] += qa * a[i] * th;
                for j in 0..p {
                    hess[(i, j)] += qa * a[i] * a[j] * s2;
                }
            }
        }
        (val, grad, hess)
    }

    /// Fenchel-Legendre transform by damped Newton on t -> L(t) - <t,x>.
    /// Points outside the feasible zonotope, or within 1e-9 of its boundary,
    /// are reported as infeasible.
    pub fn legendre(&self, x: &[f64]) -> Result<Legendre> {
        let p = self.p();
        if x.len() != p {
            return Err(Error::Dimension(format!("x has {} coords, want {p}", x.len())));
        }
        // cheap reject per coordinate axis
        for j in 0..p {
            let reach: f64 = self.types.iter().zip(&self.q).map(|(a, q)| q * a[j].abs()).sum();
            if x[j].abs() > reach + 1e-14 {
                return Err(Error::Infeasible(format!(
                    "coordinate {j} of {x:?} beyond reach {reach}"
                )));
            }
        }
        let xv = DVector::from_column_slice(x);
        let mut t = DVector::zeros(p);
        let mut converged = false;
        for _ in 0..LEGENDRE_MAX_ITER {
            let (lval, g, h) = self.log_moment(t.as_slice());
            let r = &g - &xv;
            if r.norm() <= LEGENDRE_TOL {
                converged = true;
                break;
            }
            let dt = solve_sym(&h, &(-&r))?;
            let f0 = lval - t.dot(&xv);
            let slope = r.dot(&dt); // negative for a Newton direction
            // slack lets full Newton steps through once the decrease falls
            // below f64 resolution of f itself
            let slack = 1e-13 * (1.0 + f0.abs());
            let mut alpha = 1.0;
            loop {
                let t_try = &t + alpha * &dt;
                let (l_try, _, _) = self.log_moment(t_try.as_slice());
                if l_try - t_try.dot(&xv) <= f0 + 1e-4 * alpha * slope + slack {
                    t = t_try;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-14 {
                    return Err(Error::NoConvergence(
                        "Legendre line search stalled".into(),
                    ));
                }
            }
            if t.norm() > T_DIVERGED {
                return Err(Error::Infeasible(format!(
                    "dual variable diverged for x = {x:?}"
                )));
            }
        }
        if !converged {
            let (_, g, _) = self.log_moment(t.as_slice());
            if (&g - &xv).norm() > LEGENDRE_TOL {
                return Err(Error::NoConvergence(format!(
                    "Legendre Newton did not converge for x = {x:?}"
                )));
            }
        }
        let tn = t.norm();
        if tn > 1e-8 {
            let u = &t / tn;
            let mut slack: f64 = -u.dot(&xv);
            for (a, &qa) in self.types.iter().zip(&self.q) {
                slack += qa * u.dot(&DVector::from_column_slice(a)).abs();
            }
            if slack < BOUNDARY_MARGIN {
                return Err(Error::Infeasible(format!(
                    "x = {x:?} within {slack:.2e} of the feasible boundary"
                )));
            }
        }
        let (lval, _, _) = self.log_moment(t.as_slice());
        Ok(Legendre {
            value: t.dot(&xv) - lval,
            t_star: t,
        })
    }

    /// I(x) = -beta v(x) + L*(x) + c; +infinity outside the feasible domain.
    pub fn rate_i(&self, x: &[f64]) -> f64 {
        match self.legendre(x) {
            Ok(l) => -self.beta * self.potential.eval(x) + l.value + self.c,
            Err(_) => f64::INFINITY,
        }
    }

    /// I with gradient and Hessian: grad I = -beta grad v + t*,
    /// H_I = -beta H_v + H_L(t*)^{-1}.
    pub fn rate_i_grad_hess(&self, x: &[f64]) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let leg = self.legendre(x)?;
        let p = self.p();
        let value = -self.beta * self.potential.eval(x) + leg.value + self.c;
        let gv = self.potential.grad(x);
        let grad = &leg.t_star - self.beta * DVector::from_column_slice(&gv);
        let (_, _, h_l) = self.log_moment(leg.t_star.as_slice());
        let h_l_inv = invert_sym(&h_l)?;
        let hv = self.potential.hess(x);
        let mut hess = h_l_inv;
        for i in 0..p {
            for j in 0..p {
                hess[(i, j)] -= self.beta * hv[i][j];
            }
        }
        Ok((value, grad, hess))
    }

    /// All interior critical points of I reachable from a 5^p dual grid,
    /// deduplicated in x. grad I vanishes iff t = beta grad v(nabla L(t)).
    pub fn interior_critical_points(&self) -> Result<Vec<RawCritical>> {
        let p = self.p();
        let grid = [-6.0, -3.0, 0.0, 3.0, 6.0];
        let total = grid.len().checked_pow(p as u32).filter(|&s| s <= 200_000);
        let total = total.ok_or_else(|| {
            Error::Invalid(format!("dual multistart grid too large for p = {p}"))
        })?;
        let mut found: Vec<RawCritical> = Vec::new();
        for idx in 0..total {
            let mut rem = idx;
            let mut t0 = DVector::zeros(p);
            for k in 0..p {
                t0[k] = grid[rem % grid.len()];
                rem /= grid.len();
            }
            if let Some(rc) = self.newton_dual_root(t0) {
                if !found
                    .iter()
                    .any(|f| (&f.x - &rc.x).norm() < 1e-6)
                {
                    found.push(rc);
                }
            }
        }
        Ok(found)
    }

    /// Newton refinement of a critical point from a dual-space seed,
    /// typically t_star of a nearby location.
    pub fn refine_critical(&self, t0: DVector<f64>) -> Result<RawCritical> {
        self.newton_dual_root(t0).ok_or_else(|| {
            Error::NoConvergence("critical-point refinement did not converge".into())
        })
    }

    // Damped Newton for F(t) = t - beta grad v(nabla L(t)) = 0. At such t,
    // x = nabla L(t) is feasible by construction and grad I(x) = F(t).
    fn newton_dual_root(&self, mut t: DVector<f64>) -> Option<RawCritical> {
        let p = self.p();
        let f_at = |t: &DVector<f64>| -> (DVector<f64>, DVector<f64>, DMatrix<f64>) {
            let (_, x, h_l) = self.log_moment(t.as_slice());
            let gv = self.potential.grad(x.as_slice());
            let f = t - self.beta * DVector::from_column_slice(&gv);
            (f, x, h_l)
        };
        for _ in 0..200 {
            let (f, x, h_l) = f_at(&t);
            let m0 = 0.5 * f.norm_squared();
            if f.norm() <= 1e-12 {
                let (lval, _, _) = self.log_moment(t.as_slice());
                let value_raw =
                    -self.beta * self.potential.eval(x.as_slice()) + t.dot(&x) - lval;
                return Some(RawCritical { t, x, value_raw });
            }
            // J_F = I - beta H_v(x) H_L(t)
            let hv = self.potential.hess(x.as_slice());
            let mut jac = DMatrix::identity(p, p);
            let hv_m = DMatrix::from_fn(p, p, |i, j| hv[i][j]);
            jac -= self.beta * hv_m * &h_l;
            let dir = match jac.clone().lu().solve(&(-&f)) {
                Some(d) => d,
                None => return None,
            };
            let mut alpha = 1.0;
            let mut stepped = false;
            for _ in 0..50 {
                let t_try = &t + alpha * &dir;
                let (f_try, _, _) = f_at(&t_try);
                if 0.5 * f_try.norm_squared() <= m0 * (1.0 - 2e-4 * alpha) {
                    t = t_try;
                    stepped = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !stepped || t.norm() > 50.0 {
                return None;
            }
        }
        None
    }

    // min over the feasible domain of -beta v + L*: interior critical values
    // plus the zonotope corners (where L* = log 2 exactly) when cheap.
    fn min_raw_rate(&self) -> Result<f64> {
        let interior = self.interior_critical_points()?;
        let mut best = f64::INFINITY;
        for rc in &interior {
            best = best.min(rc.value_raw);
        }
        if interior.is_empty() {
            return Err(Error::NoConvergence(
                "no interior critical point found while normalizing the rate function".into(),
            ));
        }
        let na = self.types.len();
        if na <= 12 {
            let p = self.p();
            let ln2 = std::f64::consts::LN_2;
            for mask in 0..(1u64 << na) {
                let mut x = vec![0.0; p];
                for (a, (ty, &qa)) in self.types.iter().zip(&self.q).enumerate() {
                    let s = if mask >> a & 1 == 1 { 1.0 } else { -1.0 };
                    for j in 0..p {
                        x[j] += s * qa * ty[j];
                    }
                }
                let corner = -self.beta * self.potential.eval(&x) + ln2;
                if corner < best - 1e-12 {
                    log::warn!(
                        "rate function attains its minimum on the feasible boundary \
                         (corner value {corner} below interior {best}); downstream \
                         asymptotics assume an interior landscape"
                    );
                }
            }
        }
        Ok(best)
    }

    /// Lifted rate function on full occupation vectors, with the curvature
    /// model chosen by `mode`. Exact mode requires all coordinates strictly
    /// positive (the entropy gradient diverges on the boundary).
    pub fn rate_hat(&self, y: &[f64], mode: HessianMode) -> Result<RateHat> {
        let na = self.types.len();
        let p = self.p();
        if y.len() != 2 * na {
            return Err(Error::Dimension(format!(
                "occupation vector has {} coords, want {}",
                y.len(),
                2 * na
            )));
        }
        let mut x = vec![0.0; p];
        for (a, ty) in self.types.iter().enumerate() {
            let d = y[2 * a] - y[2 * a + 1];
            for j in 0..p {
                x[j] += d * ty[j];
            }
        }
        match mode {
            HessianMode::Projected => {
                let (value, gi, hi) = self.rate_i_grad_hess(&x)?;
                let mut grad = DVector::zeros(2 * na);
                let mut hess = DMatrix::zeros(2 * na, 2 * na);
                for (a, ty) in self.types.iter().enumerate() {
                    let ga: f64 = (0..p).map(|j| gi[j] * ty[j]).sum();
                    grad[2 * a] = ga;
                    grad[2 * a + 1] = -ga;
                    for (b, tb) in self.types.iter().enumerate() {
                        let mut hab = 0.0;
                        for i in 0..p {
                            for j in 0..p {
                                hab += ty[i] * hi[(i, j)] * tb[j];
                            }
                        }
                        hess[(2 * a, 2 * b)] = hab;
                        hess[(2 * a, 2 * b + 1)] = -hab;
                        hess[(2 * a + 1, 2 * b)] = -hab;
                        hess[(2 * a + 1, 2 * b + 1)] = hab;
                    }
                }
                Ok(RateHat { value, grad, hess })
            }
            HessianMode::Exact => {
                if y.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Infeasible(
                        "occupation vector touches the boundary; exact curvature diverges"
                            .into(),
                    ));
                }
                let ln2 = std::f64::consts::LN_2;
                let gv = self.potential.grad(&x);
                let hv = self.potential.hess(&x);
                let mut value = -self.beta * self.potential.eval(&x) + self.c;
                let mut grad = DVector::zeros(2 * na);
                let mut hess = DMatrix::zeros(2 * na, 2 * na);
                for (a, (ty, &qa)) in self.types.iter().zip(&self.q).enumerate() {
                    let (yp, ym) = (y[2 * a], y[2 * a + 1]);
                    value += qa * ln2 + yp * (yp / qa).ln() + ym * (ym / qa).ln();
                    let gva: f64 = (0..p).map(|j| gv[j] * ty[j]).sum();
                    grad[2 * a] = -self.beta * gva + (yp / qa).ln() + 1.0;
                    grad[2 * a + 1] = self.beta * gva + (ym / qa).ln() + 1.0;
                    for (b, tb) in self.types.iter().enumerate() {
                        let mut vab = 0.0;
                        for i in 0..p {
                            for j in 0..p {
                                vab += ty[i] * hv[i][j] * tb[j];
                            }
                        }
                        let vab = -self.beta * vab;
                        hess[(2 * a, 2 * b)] += vab;
                        hess[(2 * a, 2 * b + 1)] -= vab;
                        hess[(2 * a + 1, 2 * b)] -= vab;
                        hess[(2 * a + 1, 2 * b + 1)] += vab;
                    }
                    hess[(2 * a, 2 * a)] += 1.0 / yp;
                    hess[(2 * a + 1, 2 * a + 1)] += 1.0 / ym;
                }
                Ok(RateHat { value, grad, hess })
            }
        }
    }

    /// Lifted rate function at a lattice point (exact fractions).
    pub fn rate_hat_lattice(
        &self,
        point: &LatticePoint,
        table: &TypeTable,
        mode: HessianMode,
    ) -> Result<RateHat> {
        self.rate_hat(&point.y_full(table), mode)
    }

    /// Value of the exact lifted rate function, extended to the closed
    /// simplex by continuity (x ln x -> 0). No curvature, so boundary
    /// points are fine; lattice representatives of near-saturated wells
    /// land there.
    pub fn rate_hat_value(&self, y: &[f64]) -> Result<f64> {
        let na = self.types.len();
        if y.len() != 2 * na {
            return Err(Error::Dimension(format!(
                "occupation vector has {} coords, want {}",
                y.len(),
                2 * na
            )));
        }
        if y.iter().any(|&v| v < 0.0) {
            return Err(Error::Infeasible(
                "occupation vector has a negative coordinate".into(),
            ));
        }
        let p = self.p();
        let mut x = vec![0.0; p];
        for (a, ty) in self.types.iter().enumerate() {
            let d = y[2 * a] - y[2 * a + 1];
            for j in 0..p {
                x[j] += d * ty[j];
            }
        }
        let ln2 = std::f64::consts::LN_2;
        let mut value = -self.beta * self.potential.eval(&x) + self.c;
        for (a, &qa) in self.q.iter().enumerate() {
            let ent = |v: f64| if v == 0.0 { 0.0 } else { v * (v / qa).ln() };
            value += qa * ln2 + ent(y[2 * a]) + ent(y[2 * a + 1]);
        }
        Ok(value)
    }
}

fn solve_sym(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    // near-singular: types may not span; regularize, preserving symmetry
    let n = h.nrows();
    let ridge = 1e-12 * h.diagonal().amax().max(1.0);
    let mut hr = h.clone();
    for i in 0..n {
        hr[(i, i)] += ridge;
    }
    if let Some(ch) = hr.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    hr.lu()
        .solve(rhs)
        .ok_or_else(|| Error::Solve("singular curvature matrix".into()))
}

fn invert_sym(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = h.clone().cholesky() {
        return Ok(ch.inverse());
    }
    let n = h.nrows();
    let ridge = 1e-12 * h.diagonal().amax().max(1.0);
    let mut hr = h.clone();
    for i in 0..n {
        hr[(i, i)] += ridge;
    }
    hr.clone()
        .cholesky()
        .map(|ch| ch.inverse())
        .or_else(|| hr.try_inverse())
        .ok_or_else(|| Error::Solve("singular log-moment Hessian".into()))
}

/// Exact stationary measure of the lumped chain on the full lattice:
/// log Q(Y) = n beta v(X(Y)) + sum_a log C(n_a, n Y_a^+) - log Z.
#[derive(Clone, Debug)]
pub struct LumpedMeasure {
    table: TypeTable,
    potential: Potential,
    beta: f64,
    log_z: f64,
    num_states: u64,
    log_binom: Vec<Vec<f64>>, // [type][k]
}

impl LumpedMeasure {
    pub fn new(
        table: &TypeTable,
        potential: &Potential,
        beta: f64,
        state_budget: u64,
    ) -> Result<Self> {
        if potential.p() != table.p() {
            return Err(Error::Dimension(format!(
                "potential dimension {} vs {} pattern coords",
                potential.p(),
                table.p()
            )));
        }
        let num_states = model::lattice_size(table, state_budget)?;
        let log_binom: Vec<Vec<f64>> = table
            .counts()
            .iter()
            .map(|&n_a| (0..=n_a).map(|k| log_binomial(n_a, k)).collect())
            .collect();
        let mut m = LumpedMeasure {
            table: table.clone(),
            potential: potential.clone(),
            beta,
            log_z: 0.0,
            num_states,
            log_binom,
        };
        let mut acc = f64::NEG_INFINITY;
        model::for_each_lattice_point(table, |pt| {
            acc = logaddexp(acc, m.log_weight_unnormalized(pt));
        });
        m.log_z = acc;
        Ok(m)
    }

    pub fn log_weight_unnormalized(&self, point: &LatticePoint) -> f64 {
        let x = model::project(point, &self.table);
        let mut w = self.table.n() as f64 * self.beta * self.potential.eval(&x);
        for (a, &k) in point.plus_counts.iter().enumerate() {
            w += self.log_binom[a][k as usize];
        }
        w
    }

    /// log of the normalized stationary weight.
    pub fn lumped_log_weight(&self, point: &LatticePoint) -> f64 {
        self.log_weight_unnormalized(point) - self.log_z
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn num_states(&self) -> u64 {
        self.num_states
    }

    pub fn table(&self) -> &TypeTable {
        &self.table
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    /// Subexponential correction: Q(Y) = exp(-n Ihat(Y)) kappa(Y) exactly,
    /// with Ihat the exact-mode lifted rate function.
    pub fn kappa_hat(&self, point: &LatticePoint, model: &RateModel) -> Result<f64> {
        let v = model.rate_hat_value(&point.y_full(&self.table))?;
        Ok((self.lumped_log_weight(point) + self.table.n() as f64 * v).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::{fixed_type_table_f64, sample_patterns, type_decomposition};
    use crate::model::{hamiltonian_spins, lift, SpinConfig};
    use approx::assert_abs_diff_eq;

    fn fair_pm1(beta: f64) -> RateModel {
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[50, 50]).unwrap();
        RateModel::quenched(Potential::hopfield(1), beta, &table).unwrap()
    }

    #[test]
    fn log_moment_basics() {
        let m = fair_pm1(1.0);
        let (l0, g0, _) = m.log_moment(&[0.0]);
        assert_eq!(l0, 0.0);
        assert_eq!(g0[0], 0.0);
        let (l1, _, _) = m.log_moment(&[1.0]);
        assert_abs_diff_eq!(l1, 0.4337808304830272, epsilon = 1e-15);
        // Dirac type: L(t) = logcosh(t a)
        let t = fixed_type_table_f64(&[vec![0.5]], &[10]).unwrap();
        let d = RateModel::quenched(Potential::hopfield(1), 0.0, &t).unwrap();
        let (l, _, _) = d.log_moment(&[2.0]);
        assert_abs_diff_eq!(l, logcosh(1.0), epsilon = 1e-15);
    }

    #[test]
    fn legendre_fair_binary_closed_form() {
        let m = fair_pm1(1.0);
        let leg = m.legendre(&[0.5]).unwrap();
        assert_abs_diff_eq!(leg.value, 0.13081203594113697, epsilon = 1e-12);
        let x: f64 = 0.5;
        let closed = (1.0 + x) / 2.0 * (1.0 + x).ln() + (1.0 - x) / 2.0 * (1.0 - x).ln();
        assert_abs_diff_eq!(leg.value, closed, epsilon = 1e-12);
        assert_abs_diff_eq!(leg.t_star[0], x.atanh(), epsilon = 1e-10);

        let at_mean = m.legendre(&[0.0]).unwrap();
        assert_eq!(at_mean.value, 0.0);
        assert_eq!(at_mean.t_star[0], 0.0);
    }

    #[test]
    fn legendre_rejects_outside_and_boundary() {
        let m = fair_pm1(1.0);
        assert!(matches!(m.legendre(&[1.2]), Err(Error::Infeasible(_))));
        assert!(m.legendre(&[1.0 - 1e-12]).is_err());
        assert!(m.legendre(&[0.999]).is_ok());
    }

    #[test]
    fn fenchel_inequality_and_duality() {
        let m = fair_pm1(1.0);
        for &x in &[0.1, -0.4, 0.85] {
            let leg = m.legendre(&[x]).unwrap();
            for &t in &[-2.0, -0.5, 0.3, 1.7] {
                let (l, _, _) = m.log_moment(&[t]);
                assert!(leg.value >= t * x - l - 1e-12);
            }
            let (_, g, _) = m.log_moment(leg.t_star.as_slice());
            assert_abs_diff_eq!(g[0], x, epsilon = 1e-9);
        }
    }

    #[test]
    fn hessian_duality_via_finite_differences() {
        let table = fixed_type_table_f64(&[vec![1.0, 1.0], vec![1.0, -1.0]], &[60, 40]).unwrap();
        let m = RateModel::quenched(Potential::hopfield(2), 0.7, &table).unwrap();
        let x = [0.25, -0.15];
        let leg = m.legendre(&x).unwrap();
        let (_, _, h_l) = m.log_moment(leg.t_star.as_slice());
        let h_lstar = invert_sym(&h_l).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let tp = m.legendre(&xp).unwrap().t_star;
            let tm = m.legendre(&xm).unwrap().t_star;
            for l in 0..2 {
                // dt*/dx = H_{L*}
                let fd = (tp[l] - tm[l]) / (2.0 * h);
                assert!(
                    (h_lstar[(l, k)] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "H_L*[{l}][{k}] = {} vs fd {}",
                    h_lstar[(l, k)],
                    fd
                );
            }
        }
    }

    #[test]
    fn rate_normalization_benchmark() {
        // v = x^2, beta = 1, fair signs: minima at +-m*, m* = tanh(2 m*)
        let m = fair_pm1(1.0);
        assert_abs_diff_eq!(m.c(), 0.32652388742692384, epsilon = 1e-10);
        assert_abs_diff_eq!(m.rate_i(&[0.0]), m.c(), epsilon = 1e-14);
        let mstar = 0.9575040240772688;
        assert!(m.rate_i(&[mstar]).abs() < 1e-12);
        let (_, g, _) = m.rate_i_grad_hess(&[mstar]).unwrap();
        assert!(g.norm() < 1e-9);
        // same c for any count split: L does not depend on q for sign types
        let t = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[23, 27]).unwrap();
        let m2 = RateModel::quenched(Potential::hopfield(1), 1.0, &t).unwrap();
        assert_abs_diff_eq!(m2.c(), 0.32652388742692384, epsilon = 1e-10);
    }

    #[test]
    fn beta_zero_rate_is_entropy_like() {
        let m = fair_pm1(0.0);
        assert!(m.c().abs() < 1e-12);
        assert_abs_diff_eq!(m.rate_i(&[0.5]), 0.13081203594113697, epsilon = 1e-10);
        assert!(m.rate_i(&[0.0]).abs() < 1e-14);
    }

    #[test]
    fn interior_critical_points_of_benchmark() {
        let m = fair_pm1(1.0);
        let crits = m.interior_critical_points().unwrap();
        // 0 and +-m*
        assert_eq!(crits.len(), 3);
        let mut xs: Vec<f64> = crits.iter().map(|c| c.x[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(xs[0], -0.9575040240772688, epsilon = 1e-9);
        assert_abs_diff_eq!(xs[1], 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(xs[2], 0.9575040240772688, epsilon = 1e-9);
    }

    #[test]
    fn rate_hat_paper_rank_and_values() {
        // single Dirac type, v = 0: Hhat = I''(X) [[1,-1],[-1,1]]
        let table = fixed_type_table_f64(&[vec![1.0]], &[10]).unwrap();
        let m = RateModel::quenched(
            Potential::polynomial(1, vec![]).unwrap(),
            1.0,
            &table,
        )
        .unwrap();
        let y = [0.7, 0.3];
        let rh = m.rate_hat(&y, HessianMode::Projected).unwrap();
        let x = 0.4;
        let i2 = 1.0 / (1.0 - x * x); // (L*)'' for a single sign type
        assert_abs_diff_eq!(rh.hess[(0, 0)], i2, epsilon = 1e-8);
        assert_abs_diff_eq!(rh.hess[(0, 1)], -i2, epsilon = 1e-8);
        let eig = rh.hess.clone().symmetric_eigen();
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(ev[0].abs() < 1e-9, "one zero eigenvalue, got {ev:?}");
        assert_abs_diff_eq!(ev[1], 2.0 * i2, epsilon = 1e-8);
    }

    #[test]
    fn rate_hat_gradients_match_finite_differences() {
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[3, 2]).unwrap();
        let m = RateModel::quenched(Potential::hopfield(1), 0.8, &table).unwrap();
        let y = [0.42, 0.18, 0.23, 0.17];
        for mode in [HessianMode::Projected, HessianMode::Exact] {
            let rh = m.rate_hat(&y, mode).unwrap();
            let h = 1e-6;
            for k in 0..4 {
                let mut yp = y.to_vec();
                let mut ym = y.to_vec();
                yp[k] += h;
                ym[k] -= h;
                let fp = m.rate_hat(&yp, mode).unwrap().value;
                let fm = m.rate_hat(&ym, mode).unwrap().value;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (rh.grad[k] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{mode:?} grad[{k}] = {} vs fd {}",
                    rh.grad[k],
                    fd
                );
                let gp = m.rate_hat(&yp, mode).unwrap().grad;
                let gm = m.rate_hat(&ym, mode).unwrap().grad;
                for l in 0..4 {
                    let fdh = (gp[l] - gm[l]) / (2.0 * h);
                    assert!(
                        (rh.hess[(k, l)] - fdh).abs() <= 1e-4 * (1.0 + fdh.abs()),
                        "{mode:?} H[{k}][{l}] = {} vs fd {}",
                        rh.hess[(k, l)],
                        fdh
                    );
                }
            }
        }
    }

    #[test]
    fn rate_hat_modes_agree_at_consistent_points() {
        // at y_a^+ = q_a (1 + tanh<t*, a>)/2 the exact and projected values
        // and the slice gradients coincide
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[23, 27]).unwrap();
        let m = RateModel::quenched(Potential::hopfield(1), 0.75, &table).unwrap();
        let x = [0.31];
        let t = m.legendre(&x).unwrap().t_star;
        let mut y = vec![0.0; 4];
        for (a, (ty, &qa)) in m.types().iter().zip(m.type_probs()).enumerate() {
            let rho = 0.5 * (1.0 + (t[0] * ty[0]).tanh());
            y[2 * a] = qa * rho;
            y[2 * a + 1] = qa * (1.0 - rho);
        }
        let rp = m.rate_hat(&y, HessianMode::Projected).unwrap();
        let re = m.rate_hat(&y, HessianMode::Exact).unwrap();
        assert_abs_diff_eq!(rp.value, re.value, epsilon = 1e-12);
        for a in 0..2 {
            let slice_p = (rp.grad[2 * a] - rp.grad[2 * a + 1]) / 2f64.sqrt();
            let slice_e = (re.grad[2 * a] - re.grad[2 * a + 1]) / 2f64.sqrt();
            assert_abs_diff_eq!(slice_p, slice_e, epsilon = 1e-9);
        }
    }

    #[test]
    fn rate_hat_exact_rejects_boundary() {
        // X stays interior here, so only the exact mode objects
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[5, 5]).unwrap();
        let m = RateModel::quenched(Potential::hopfield(1), 1.0, &table).unwrap();
        let y = [0.5, 0.0, 0.25, 0.25];
        assert!(m.rate_hat(&y, HessianMode::Exact).is_err());
        assert!(m.rate_hat(&y, HessianMode::Projected).is_ok());
    }

    #[test]
    fn lumped_weights_match_spin_enumeration() {
        // n = 6, brute force over all 64 spin configurations
        let dists = [crate::disorder::PatternDistribution::fair_sign()];
        let ens = sample_patterns(&dists, 6, 123).unwrap();
        let table = type_decomposition(&ens);
        let v = Potential::hopfield(1);
        let beta = 0.9;
        let measure = LumpedMeasure::new(&table, &v, beta, 1_000_000).unwrap();

        let mut by_point: std::collections::HashMap<Vec<u64>, f64> = Default::default();
        let mut z = 0.0;
        for bits in 0..64u32 {
            let spins: Vec<i8> = (0..6)
                .map(|i| if bits >> i & 1 == 1 { 1 } else { -1 })
                .collect();
            let s = SpinConfig::new(spins).unwrap();
            let w = (-beta * hamiltonian_spins(&s, &ens, &v).unwrap()).exp();
            z += w;
            *by_point
                .entry(lift(&s, &table).unwrap().plus_counts)
                .or_insert(0.0) += w;
        }
        for (counts, w) in by_point {
            let pt = LatticePoint {
                plus_counts: counts,
            };
            let lw = measure.lumped_log_weight(&pt);
            let direct = (w / z).ln();
            assert!(
                (lw - direct).abs() <= 1e-12 * direct.abs().max(1.0),
                "{lw} vs {direct}"
            );
        }
    }

    #[test]
    fn lumped_weights_normalize() {
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[5, 7]).unwrap();
        let measure = LumpedMeasure::new(&table, &Potential::hopfield(1), 1.3, 1000).unwrap();
        let mut acc = f64::NEG_INFINITY;
        model::for_each_lattice_point(&table, |pt| {
            acc = logaddexp(acc, measure.lumped_log_weight(pt));
        });
        assert!(acc.abs() < 1e-12);
        assert_eq!(measure.num_states(), 48);
        // C(2,1) spot value
        let t2 = fixed_type_table_f64(&[vec![1.0]], &[2]).unwrap();
        let m2 = LumpedMeasure::new(&t2, &Potential::polynomial(1, vec![]).unwrap(), 1.0, 100)
            .unwrap();
        let w1 = m2.log_weight_unnormalized(&LatticePoint { plus_counts: vec![1] });
        let w0 = m2.log_weight_unnormalized(&LatticePoint { plus_counts: vec![0] });
        assert_abs_diff_eq!(w1 - w0, std::f64::consts::LN_2, epsilon = 1e-14);
    }

    #[test]
    fn state_budget_enforced() {
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[100, 100]).unwrap();
        let r = LumpedMeasure::new(&table, &Potential::hopfield(1), 1.0, 100);
        assert!(matches!(r, Err(Error::StateBudget { .. })));
    }

    #[test]
    fn kappa_consistency_and_stirling() {
        // kappa is defined by Q = exp(-n Ihat) kappa; check it against the
        // Stirling correction of a single binomial (Dirac type, v = 0)
        let table = fixed_type_table_f64(&[vec![1.0]], &[100]).unwrap();
        let v = Potential::polynomial(1, vec![]).unwrap();
        let m = RateModel::quenched(v.clone(), 1.0, &table).unwrap();
        let measure = LumpedMeasure::new(&table, &v, 1.0, 1000).unwrap();
        let center = LatticePoint {
            plus_counts: vec![50],
        };
        let k = measure.kappa_hat(&center, &m).unwrap();
        let stirling = (2.0 / (std::f64::consts::PI * 100.0)).sqrt();
        assert!((k / stirling - 1.0).abs() < 0.01, "{k} vs {stirling}");

        // reconstruction identity at an off-center point
        let pt = LatticePoint {
            plus_counts: vec![61],
        };
        let kh = measure.kappa_hat(&pt, &m).unwrap();
        let ih = m
            .rate_hat_lattice(&pt, &table, HessianMode::Exact)
            .unwrap()
            .value;
        let rebuilt = -(100.0 * ih) + kh.ln();
        assert_abs_diff_eq!(measure.lumped_log_weight(&pt), rebuilt, epsilon = 1e-10);
    }
}

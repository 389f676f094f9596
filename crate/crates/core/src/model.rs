//! Energy landscape: potentials v, spin configurations, and the exact
//! projections sigma -> Y -> X.
//!
//! The Hamiltonian is H = -n v(X) with X the vector of pattern overlaps.
//! X is always accumulated in integer arithmetic (pattern entries are exact
//! decimals), with a single final division, so any two routes to the same
//! lattice point give bit-identical energies.

use crate::disorder::{PatternEnsemble, TypeTable};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// One monomial coeff * prod_j x_j^powers[j].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coeff: f64,
    pub powers: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
enum PotKind {
    Quadratic,
    RandomField,
    Poly(Vec<PolyTerm>),
}

/// C^2 potential on [-1,1]^p with analytic gradient and Hessian.
#[derive(Clone, Debug, Serialize)]
pub struct Potential {
    p: usize,
    kind: PotKind,
}

impl Potential {
    /// v(x) = sum_j x_j^2.
    pub fn hopfield(p: usize) -> Self {
        Potential {
            p,
            kind: PotKind::Quadratic,
        }
    }

    /// v(x) = sum_{j<p} x_j^2 + x_p: last overlap acts as a field.
    pub fn random_field(p: usize) -> Self {
        Potential {
            p,
            kind: PotKind::RandomField,
        }
    }

    pub fn polynomial(p: usize, terms: Vec<PolyTerm>) -> Result<Self> {
        for t in &terms {
            if t.powers.len() != p {
                return Err(Error::Dimension(format!(
                    "monomial has {} exponents, potential dimension is {p}",
                    t.powers.len()
                )));
            }
        }
        Ok(Potential {
            p,
            kind: PotKind::Poly(terms),
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.p);
        match &self.kind {
            PotKind::Quadratic => x.iter().map(|v| v * v).sum(),
            PotKind::RandomField => {
                x[..self.p - 1].iter().map(|v| v * v).sum::<f64>() + x[self.p - 1]
            }
            PotKind::Poly(terms) => terms
                .iter()
                .map(|t| {
                    t.coeff
                        * x.iter()
                            .zip(&t.powers)
                            .map(|(v, &e)| v.powi(e as i32))
                            .product::<f64>()
                })
                .sum(),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.p);
        match &self.kind {
            PotKind::Quadratic => x.iter().map(|v| 2.0 * v).collect(),
            PotKind::RandomField => {
                let mut g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
                g[self.p - 1] = 1.0;
                g
            }
            PotKind::Poly(terms) => {
                let mut g = vec![0.0; self.p];
                for t in terms {
                    for k in 0..self.p {
                        let ek = t.powers[k];
                        if ek == 0 {
                            continue;
                        }
                        let mut d = t.coeff * ek as f64 * x[k].powi(ek as i32 - 1);
                        for (j, (&v, &e)) in x.iter().zip(&t.powers).enumerate() {
                            if j != k {
                                d *= v.powi(e as i32);
                            }
                        }
                        g[k] += d;
                    }
                }
                g
            }
        }
    }

    /// Row-major p x p Hessian.
    pub fn hess(&self, x: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(x.len(), self.p);
        let mut h = vec![vec![0.0; self.p]; self.p];
        match &self.kind {
            PotKind::Quadratic => {
                for (k, row) in h.iter_mut().enumerate() {
                    row[k] = 2.0;
                }
            }
            PotKind::RandomField => {
                for (k, row) in h.iter_mut().enumerate().take(self.p - 1) {
                    row[k] = 2.0;
                }
            }
            PotKind::Poly(terms) => {
                for t in terms {
                    for k in 0..self.p {
                        for l in k..self.p {
                            let (ek, el) = (t.powers[k], t.powers[l]);
                            let mut d = t.coeff;
                            if k == l {
                                if ek < 2 {
                                    continue;
                                }
                                d *= (ek * (ek - 1)) as f64 * x[k].powi(ek as i32 - 2);
                            } else {
                                if ek == 0 || el == 0 {
                                    continue;
                                }
                                d *= (ek * el) as f64
                                    * x[k].powi(ek as i32 - 1)
                                    * x[l].powi(el as i32 - 1);
                            }
                            for (j, (&v, &e)) in x.iter().zip(&t.powers).enumerate() {
                                if j != k && j != l {
                                    d *= v.powi(e as i32);
                                }
                            }
                            h[k][l] += d;
                            if k != l {
                                h[l][k] += d;
                            }
                        }
                    }
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpinConfig {
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(spins: Vec<i8>) -> Result<Self> {
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Invalid("spins must be +1 or -1".into()));
        }
        Ok(SpinConfig { spins })
    }

    pub fn all_plus(n: usize) -> Self {
        SpinConfig { spins: vec![1; n] }
    }

    pub fn all_minus(n: usize) -> Self {
        SpinConfig { spins: vec![-1; n] }
    }

    pub fn n(&self) -> usize {
        self.spins.len()
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn flip(&mut self, site: usize) {
        self.spins[site] = -self.spins[site];
    }
}

/// Lumped state: per type a, the integer number of +1 spins among its sites.
/// The full vector (Y_a^+, Y_a^-)_a is recovered as (k_a, n_a - k_a)/n.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatticePoint {
    pub plus_counts: Vec<u64>,
}

impl LatticePoint {
    pub fn new(plus_counts: Vec<u64>, table: &TypeTable) -> Result<Self> {
        if plus_counts.len() != table.num_types() {
            return Err(Error::Dimension(format!(
                "{} counts for {} types",
                plus_counts.len(),
                table.num_types()
            )));
        }
        for (k, &n_a) in plus_counts.iter().zip(table.counts()) {
            if *k > n_a {
                return Err(Error::Invalid(format!(
                    "plus count {k} exceeds type population {n_a}"
                )));
            }
        }
        Ok(LatticePoint { plus_counts })
    }

    /// Full dimension L = 2 |A|.
    pub fn dim_full(&self) -> usize {
        2 * self.plus_counts.len()
    }

    /// Fractions (Y_a^+, Y_a^-) interleaved as (+, -) per type.
    pub fn y_full(&self, table: &TypeTable) -> Vec<f64> {
        let n = table.n() as f64;
        let mut y = Vec::with_capacity(2 * self.plus_counts.len());
        for (k, &n_a) in self.plus_counts.iter().zip(table.counts()) {
            y.push(*k as f64 / n);
            y.push((n_a - k) as f64 / n);
        }
        y
    }
}

/// X from exact per-site accumulation: X_j = (1/n) sum_i sigma_i xi_j(i).
pub fn order_params(sigma: &SpinConfig, ensemble: &PatternEnsemble) -> Result<Vec<f64>> {
    if sigma.n() != ensemble.n {
        return Err(Error::Dimension(format!(
            "{} spins vs {} sites",
            sigma.n(),
            ensemble.n
        )));
    }
    let scales = ensemble.coord_scales();
    let mut acc = vec![0i128; ensemble.p];
    for (i, &s) in sigma.spins().iter().enumerate() {
        let col = ensemble.column(i);
        for (j, d) in col.iter().enumerate() {
            acc[j] += s as i128 * d.mantissa_at_scale(scales[j]);
        }
    }
    Ok(finish_projection(&acc, &scales, ensemble.n as u64))
}

fn finish_projection(acc: &[i128], scales: &[u32], n: u64) -> Vec<f64> {
    acc.iter()
        .zip(scales)
        .map(|(&num, &s)| num as f64 / (n as i128 * 10i128.pow(s)) as f64)
        .collect()
}

/// Exact lump of a spin configuration.
pub fn lift(sigma: &SpinConfig, table: &TypeTable) -> Result<LatticePoint> {
    if sigma.n() as u64 != table.n() {
        return Err(Error::Dimension(format!(
            "{} spins vs {} sites",
            sigma.n(),
            table.n()
        )));
    }
    let mut plus_counts = vec![0u64; table.num_types()];
    for (&s, &t) in sigma.spins().iter().zip(table.site_types()) {
        if s == 1 {
            plus_counts[t as usize] += 1;
        }
    }
    Ok(LatticePoint { plus_counts })
}

/// X_j = sum_a a_j (Y_a^+ - Y_a^-), integer counts, one division per coord.
pub fn project(point: &LatticePoint, table: &TypeTable) -> Vec<f64> {
    finish_projection(&project_mantissas(point, table), table.coord_scales(), table.n())
}

/// Exact integer numerators of n * 10^scale * X; the lump-invariant identity
/// of a fiber. Equal numerators mean exactly equal X.
pub fn project_mantissas(point: &LatticePoint, table: &TypeTable) -> Vec<i128> {
    let mut acc = vec![0i128; table.p()];
    for (a, (k, &n_a)) in point.plus_counts.iter().zip(table.counts()).enumerate() {
        let signed = 2 * *k as i128 - n_a as i128;
        for (j, m) in table.mantissas()[a].iter().enumerate() {
            acc[j] += signed * m;
        }
    }
    acc
}

/// H = -n v(X(Y)).
pub fn hamiltonian(point: &LatticePoint, table: &TypeTable, v: &Potential) -> f64 {
    -(table.n() as f64) * v.eval(&project(point, table))
}

pub fn hamiltonian_spins(
    sigma: &SpinConfig,
    ensemble: &PatternEnsemble,
    v: &Potential,
) -> Result<f64> {
    Ok(-(sigma.n() as f64) * v.eval(&order_params(sigma, ensemble)?))
}

/// Number of lattice points, prod_a (n_a + 1), refusing budget overruns.
pub fn lattice_size(table: &TypeTable, budget: u64) -> Result<u64> {
    let mut total: u128 = 1;
    for &n_a in table.counts() {
        total *= n_a as u128 + 1;
        if total > budget as u128 {
            return Err(Error::StateBudget {
                actual: total.min(u64::MAX as u128) as u64,
                budget,
            });
        }
    }
    Ok(total as u64)
}

/// Visits every lattice point in mixed-radix order (last type fastest).
/// The same point buffer is reused; f must not hold on to it.
pub fn for_each_lattice_point<F: FnMut(&LatticePoint)>(table: &TypeTable, mut f: F) {
    let radices: Vec<u64> = table.counts().to_vec();
    let mut point = LatticePoint {
        plus_counts: vec![0; radices.len()],
    };
    loop {
        f(&point);
        let mut i = radices.len();
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if point.plus_counts[i] < radices[i] {
                point.plus_counts[i] += 1;
                break;
            }
            point.plus_counts[i] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::{
        fixed_type_table_f64, sample_patterns, type_decomposition, PatternDistribution,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_grad(v: &Potential, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (v.eval(&xp) - v.eval(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn builtin_gradients_match_fd() {
        let pts = [vec![0.3, -0.7], vec![0.0, 0.5], vec![-0.9, 0.9]];
        for v in [Potential::hopfield(2), Potential::random_field(2)] {
            for x in &pts {
                let g = v.grad(x);
                let fd = fd_grad(&v, x, 1e-5);
                for (a, b) in g.iter().zip(&fd) {
                    assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn polynomial_derivatives_match_fd() {
        // v = 0.5 x^2 y + x y^3 - 2 y + 0.25 x^4
        let v = Potential::polynomial(
            2,
            vec![
                PolyTerm { coeff: 0.5, powers: vec![2, 1] },
                PolyTerm { coeff: 1.0, powers: vec![1, 3] },
                PolyTerm { coeff: -2.0, powers: vec![0, 1] },
                PolyTerm { coeff: 0.25, powers: vec![4, 0] },
            ],
        )
        .unwrap();
        let x = [0.4, -0.6];
        let g = v.grad(&x);
        let fd = fd_grad(&v, &x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
        let hess = v.hess(&x);
        let h = 1e-4;
        for k in 0..2 {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            let gp = v.grad(&xp);
            let gm = v.grad(&xm);
            for l in 0..2 {
                let fdh = (gp[l] - gm[l]) / (2.0 * h);
                assert!(
                    (hess[k][l] - fdh).abs() <= 1e-4 * (1.0 + fdh.abs()),
                    "H[{k}][{l}] {} vs {}",
                    hess[k][l],
                    fdh
                );
            }
        }
        // exact spot value: dv/dx = x y + y^3 + x^3 at (0.4,-0.6)
        assert!((g[0] - (0.4 * -0.6 + (-0.6f64).powi(3) + 0.4f64.powi(3))).abs() < 1e-15);
    }

    #[test]
    fn aligned_overlap_is_one() {
        let ens = sample_patterns(&[PatternDistribution::dirac(1.0).unwrap()], 8, 3).unwrap();
        let x = order_params(&SpinConfig::all_plus(8), &ens).unwrap();
        assert_eq!(x, vec![1.0]);
        let mut s = SpinConfig::all_plus(8);
        for i in 0..3 {
            s.flip(i);
        }
        // k=5 plus spins: X = (2*5-8)/8
        assert_eq!(order_params(&s, &ens).unwrap(), vec![0.25]);
    }

    #[test]
    fn project_hand_values() {
        let t = fixed_type_table_f64(&[vec![1.0]], &[100]).unwrap();
        let y = LatticePoint::new(vec![70], &t).unwrap();
        assert_eq!(project(&y, &t), vec![0.4]);

        // sorted type order is (1,-1), (1,1): 40 plus spins of type (1,-1), 30 of (1,1)
        let t = fixed_type_table_f64(&[vec![1.0, 1.0], vec![1.0, -1.0]], &[50, 50]).unwrap();
        let y = LatticePoint::new(vec![40, 30], &t).unwrap();
        assert_eq!(project(&y, &t), vec![0.4, -0.2]);
        assert_eq!(y.dim_full(), 4);
        let yf = y.y_full(&t);
        assert_eq!(yf, vec![0.40, 0.10, 0.30, 0.20]);
    }

    #[test]
    fn lift_extremes_and_single_flip() {
        let t = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[3, 5]).unwrap();
        assert_eq!(lift(&SpinConfig::all_plus(8), &t).unwrap().plus_counts, vec![3, 5]);
        assert_eq!(lift(&SpinConfig::all_minus(8), &t).unwrap().plus_counts, vec![0, 0]);
        let mut s = SpinConfig::all_plus(8);
        s.flip(0); // site 0 belongs to the first (lexicographically smaller) type
        assert_eq!(lift(&s, &t).unwrap().plus_counts, vec![2, 5]);
    }

    #[test]
    fn factorization_is_bit_exact() {
        let dists = vec![
            PatternDistribution::from_f64(&[-1.0, 0.5, 1.0], &[0.25, 0.25, 0.5]).unwrap(),
            PatternDistribution::fair_sign(),
        ];
        let ens = sample_patterns(&dists, 61, 99).unwrap();
        let table = type_decomposition(&ens);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let spins: Vec<i8> = (0..61).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
            let s = SpinConfig::new(spins).unwrap();
            let direct = order_params(&s, &ens).unwrap();
            let via_lift = project(&lift(&s, &table).unwrap(), &table);
            assert_eq!(direct, via_lift, "projection must factor exactly");
            let h1 = hamiltonian_spins(&s, &ens, &Potential::hopfield(2)).unwrap();
            let h2 = hamiltonian(&lift(&s, &table).unwrap(), &table, &Potential::hopfield(2));
            assert!(h1 == h2, "energy must factor exactly");
        }
    }

    #[test]
    fn hamiltonian_values() {
        let t = fixed_type_table_f64(&[vec![1.0]], &[100]).unwrap();
        let v = Potential::hopfield(1);
        assert_eq!(hamiltonian(&LatticePoint::new(vec![50], &t).unwrap(), &t, &v), 0.0);
        assert_eq!(hamiltonian(&LatticePoint::new(vec![100], &t).unwrap(), &t, &v), -100.0);
    }

    #[test]
    fn lattice_point_bounds_checked() {
        let t = fixed_type_table_f64(&[vec![1.0]], &[10]).unwrap();
        assert!(LatticePoint::new(vec![11], &t).is_err());
        assert!(LatticePoint::new(vec![4, 4], &t).is_err());
    }
}

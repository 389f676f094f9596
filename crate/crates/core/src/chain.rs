//! The exact lumped Markov chain on the occupation lattice, and the
//! spin-level Glauber chain it is induced by.
//!
//! Direction indexing is fixed once for all modules: direction 2a lowers
//! plus_counts[a] (a "+ to -" flip of one site of type a), direction 2a+1
//! raises it. A step changes two Y coordinates by 1/n each, so lattice step
//! vectors have Euclidean norm sqrt(2)/n.

use crate::disorder::{PatternEnsemble, TypeTable};
use crate::model::{self, LatticePoint, Potential, SpinConfig};
use crate::{Error, Result};

/// Reversible nearest-neighbor chain on (a box of) the occupation lattice.
/// Rates are recomputed from integer counts on demand; nothing is cached.
#[derive(Clone, Debug)]
pub struct LatticeChain {
    table: TypeTable,
    potential: Potential,
    beta: f64,
    lo: Vec<u64>,
    hi: Vec<u64>,
    strides: Vec<u64>,
    num_states: u64,
}

impl LatticeChain {
    pub fn new(
        table: &TypeTable,
        potential: &Potential,
        beta: f64,
        state_budget: u64,
    ) -> Result<Self> {
        let hi = table.counts().to_vec();
        let lo = vec![0; hi.len()];
        LatticeChain::new_restricted(table, potential, beta, state_budget, lo, hi)
    }

    /// Chain reflected into the box lo[a] <= plus_counts[a] <= hi[a]:
    /// steps leaving the box get rate zero. Used to compare a landscape
    /// against its symmetry-reduced half.
    pub fn new_restricted(
        table: &TypeTable,
        potential: &Potential,
        beta: f64,
        state_budget: u64,
        lo: Vec<u64>,
        hi: Vec<u64>,
    ) -> Result<Self> {
        if potential.p() != table.p() {
            return Err(Error::Dimension(format!(
                "potential dimension {} vs {} pattern coords",
                potential.p(),
                table.p()
            )));
        }
        if beta < 0.0 || !beta.is_finite() {
            return Err(Error::Invalid(format!("inverse temperature {beta}")));
        }
        let na = table.num_types();
        if lo.len() != na || hi.len() != na {
            return Err(Error::Dimension("box bounds must have one entry per type".into()));
        }
        for ((&l, &h), &n_a) in lo.iter().zip(&hi).zip(table.counts()) {
            if l > h || h > n_a {
                return Err(Error::Invalid(format!(
                    "invalid box [{l}, {h}] for type population {n_a}"
                )));
            }
        }
        let mut num_states: u128 = 1;
        for (&l, &h) in lo.iter().zip(&hi) {
            num_states *= (h - l + 1) as u128;
            if num_states > state_budget as u128 {
                return Err(Error::StateBudget {
                    actual: num_states.min(u64::MAX as u128) as u64,
                    budget: state_budget,
                });
            }
        }
        let mut strides = vec![1u64; na];
        for a in (0..na.saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * (hi[a + 1] - lo[a + 1] + 1);
        }
        Ok(LatticeChain {
            table: table.clone(),
            potential: potential.clone(),
            beta,
            lo,
            hi,
            strides,
            num_states: num_states as u64,
        })
    }

    pub fn table(&self) -> &TypeTable {
        &self.table
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_states(&self) -> u64 {
        self.num_states
    }

    pub fn num_directions(&self) -> usize {
        2 * self.table.num_types()
    }

    pub fn index_of(&self, point: &LatticePoint) -> Option<u64> {
        let mut idx = 0u64;
        for ((k, (&l, &h)), &s) in point
            .plus_counts
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .zip(&self.strides)
        {
            if *k < l || *k > h {
                return None;
            }
            idx += (k - l) * s;
        }
        Some(idx)
    }

    pub fn point_of(&self, mut idx: u64) -> LatticePoint {
        debug_assert!(idx < self.num_states);
        let mut plus_counts = vec![0u64; self.lo.len()];
        for (a, &s) in self.strides.iter().enumerate() {
            plus_counts[a] = self.lo[a] + idx / s;
            idx %= s;
        }
        LatticePoint { plus_counts }
    }

    /// Destination of direction l, None if it leaves the box.
    pub fn step(&self, point: &LatticePoint, l: usize) -> Option<LatticePoint> {
        let a = l / 2;
        let k = point.plus_counts[a];
        let nk = if l % 2 == 0 {
            if k == self.lo[a] {
                return None;
            }
            k - 1
        } else {
            if k == self.hi[a] {
                return None;
            }
            k + 1
        };
        let mut q = point.clone();
        q.plus_counts[a] = nk;
        Some(q)
    }

    /// Step vector of direction l in full Y coordinates (length 2|A|).
    pub fn step_vector_full(&self, l: usize) -> Vec<f64> {
        let n = self.table.n() as f64;
        let mut e = vec![0.0; 2 * self.table.num_types()];
        let a = l / 2;
        if l % 2 == 0 {
            e[2 * a] = -1.0 / n;
            e[2 * a + 1] = 1.0 / n;
        } else {
            e[2 * a] = 1.0 / n;
            e[2 * a + 1] = -1.0 / n;
        }
        e
    }

    /// Per-direction transition probabilities and the holding probability.
    /// The probabilities sum to at most one by construction; holding is the
    /// exact complement.
    pub fn rates(&self, point: &LatticePoint) -> (Vec<f64>, f64) {
        let nd = self.num_directions();
        let mut rs = vec![0.0; nd];
        for (l, r) in rs.iter_mut().enumerate() {
            *r = self.rate(point, l);
        }
        let mut sum = 0.0;
        for &r in &rs {
            sum += r;
        }
        (rs, 1.0 - sum)
    }

    // energy drop (>= 0 enters the exponential) and the number of flippable
    // sites behind direction l; None when the step is blocked
    fn drop_and_moved(&self, point: &LatticePoint, l: usize) -> Option<(f64, u64)> {
        let dest = self.step(point, l)?;
        let a = l / 2;
        let moved = if l % 2 == 0 {
            point.plus_counts[a] // one of the k plus sites flips down
        } else {
            self.table.counts()[a] - point.plus_counts[a]
        };
        if moved == 0 {
            return None;
        }
        let n = self.table.n();
        let v0 = self.potential.eval(&model::project(point, &self.table));
        let v1 = self.potential.eval(&model::project(&dest, &self.table));
        Some(((n as f64 * self.beta * (v0 - v1)).max(0.0), moved))
    }

    /// Counts enter as an exact ratio; only the exponential factor rounds.
    pub fn rate(&self, point: &LatticePoint, l: usize) -> f64 {
        match self.drop_and_moved(point, l) {
            Some((drop, moved)) => (-drop).exp() * (moved as f64 / self.table.n() as f64),
            None => 0.0,
        }
    }

    /// log r(Y, Y_l), None for blocked steps. Kept in log form so detailed
    /// balance can be verified without underflow.
    pub fn log_rate(&self, point: &LatticePoint, l: usize) -> Option<f64> {
        let (drop, moved) = self.drop_and_moved(point, l)?;
        Some(-drop + (moved as f64).ln() - (self.table.n() as f64).ln())
    }

    pub fn for_each_state<F: FnMut(u64, &LatticePoint)>(&self, mut f: F) {
        // mixed-radix odometer over the box, last type fastest: index order
        let mut point = LatticePoint {
            plus_counts: self.lo.clone(),
        };
        let mut idx = 0u64;
        loop {
            f(idx, &point);
            idx += 1;
            let mut a = self.lo.len();
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                if point.plus_counts[a] < self.hi[a] {
                    point.plus_counts[a] += 1;
                    break;
                }
                point.plus_counts[a] = self.lo[a];
            }
        }
    }

    /// Single-component check over positive-rate edges (union-find).
    pub fn is_irreducible(&self) -> bool {
        let n = self.num_states as usize;
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        self.for_each_state(|idx, pt| {
            for l in 0..self.num_directions() {
                if self.rate(pt, l) > 0.0 {
                    let dest = self.step(pt, l).unwrap();
                    let j = self.index_of(&dest).unwrap();
                    let (ri, rj) = (find(&mut parent, idx as usize), find(&mut parent, j as usize));
                    if ri != rj {
                        parent[ri] = rj;
                    }
                }
            }
        });
        let root = find(&mut parent, 0);
        (0..n).all(|i| find(&mut parent, i) == root)
    }
}

/// Glauber single-flip chain on spin configurations; only usable at sizes
/// where 2^n enumeration is feasible.
#[derive(Clone, Debug)]
pub struct SpinChain {
    pub ensemble: PatternEnsemble,
    pub potential: Potential,
    pub beta: f64,
}

impl SpinChain {
    pub fn new(ensemble: PatternEnsemble, potential: Potential, beta: f64) -> Result<Self> {
        if potential.p() != ensemble.p {
            return Err(Error::Dimension(format!(
                "potential dimension {} vs {} patterns",
                potential.p(),
                ensemble.p
            )));
        }
        Ok(SpinChain {
            ensemble,
            potential,
            beta,
        })
    }

    /// p(sigma, sigma^i) = (1/n) exp(-beta (H(sigma^i) - H(sigma))_+).
    pub fn flip_prob(&self, sigma: &SpinConfig, site: usize) -> Result<f64> {
        let h0 = model::hamiltonian_spins(sigma, &self.ensemble, &self.potential)?;
        let mut s = sigma.clone();
        s.flip(site);
        let h1 = model::hamiltonian_spins(&s, &self.ensemble, &self.potential)?;
        Ok((-(self.beta * (h1 - h0).max(0.0))).exp() / sigma.n() as f64)
    }
}

/// Exhaustively verifies that the spin chain lumps to the lattice chain:
/// for every lattice edge, the stationary-flow-averaged spin transition
/// probability must equal the lattice rate. Returns the largest relative
/// error over all edges.
pub fn lump_check(chain: &LatticeChain, spin: &SpinChain, table: &TypeTable) -> Result<f64> {
    let n = spin.ensemble.n;
    if n > 14 {
        return Err(Error::StateBudget {
            actual: 1u64 << n,
            budget: 1 << 14,
        });
    }
    let nd = chain.num_directions();
    let ns = chain.num_states as usize;
    // accumulate unnormalized fiber masses and edge flows
    let mut fiber_mass = vec![0.0f64; ns];
    let mut flow = vec![vec![0.0f64; nd]; ns];
    for bits in 0..(1u64 << n) {
        let spins: Vec<i8> = (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect();
        let sigma = SpinConfig::new(spins)?;
        let mu = (-spin.beta * model::hamiltonian_spins(&sigma, &spin.ensemble, &spin.potential)?)
            .exp();
        let y = model::lift(&sigma, table)?;
        let yi = chain
            .index_of(&y)
            .ok_or_else(|| Error::Invalid("configuration outside chain box".into()))?
            as usize;
        fiber_mass[yi] += mu;
        for site in 0..n {
            let a = table.site_types()[site] as usize;
            let l = if sigma.spins()[site] == 1 { 2 * a } else { 2 * a + 1 };
            flow[yi][l] += mu * spin.flip_prob(&sigma, site)?;
        }
    }
    let mut worst: f64 = 0.0;
    chain.for_each_state(|idx, pt| {
        for l in 0..nd {
            let induced = flow[idx as usize][l] / fiber_mass[idx as usize];
            let direct = chain.rate(pt, l);
            let denom = direct.abs().max(induced.abs());
            if denom > 0.0 {
                worst = worst.max((induced - direct).abs() / denom);
            }
        }
    });
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::{fixed_type_table_f64, sample_patterns, type_decomposition, PatternDistribution};

    fn small_chain(beta: f64) -> LatticeChain {
        let table = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[4, 5]).unwrap();
        LatticeChain::new(&table, &Potential::hopfield(1), beta, 10_000).unwrap()
    }

    #[test]
    fn enumeration_counts_and_roundtrip() {
        let t1 = fixed_type_table_f64(&[vec![1.0]], &[10]).unwrap();
        let c1 = LatticeChain::new(&t1, &Potential::hopfield(1), 1.0, 100).unwrap();
        assert_eq!(c1.num_states(), 11);

        let t2 = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[50, 50]).unwrap();
        let c2 = LatticeChain::new(&t2, &Potential::hopfield(1), 1.0, 10_000).unwrap();
        assert_eq!(c2.num_states(), 2601);

        let mut seen = 0u64;
        c2.for_each_state(|idx, pt| {
            assert_eq!(c2.index_of(pt), Some(idx));
            assert_eq!(&c2.point_of(idx), pt);
            seen += 1;
        });
        assert_eq!(seen, 2601);
    }

    #[test]
    fn budget_exceeded_signaled() {
        let t = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[2000, 2000]).unwrap();
        match LatticeChain::new(&t, &Potential::hopfield(1), 1.0, 1_000_000) {
            Err(Error::StateBudget { actual, budget }) => {
                assert!(actual > budget);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
    }

    #[test]
    fn flat_potential_rates_are_counts() {
        let t = fixed_type_table_f64(&[vec![1.0]], &[10]).unwrap();
        let v = Potential::polynomial(1, vec![]).unwrap();
        let c = LatticeChain::new(&t, &v, 1.0, 100).unwrap();
        let pt = LatticePoint { plus_counts: vec![5] };
        let (rs, hold) = c.rates(&pt);
        assert_eq!(rs, vec![0.5, 0.5]);
        assert_eq!(hold, 0.0);
        let edge = LatticePoint { plus_counts: vec![0] };
        let (rs, hold) = c.rates(&edge);
        assert_eq!(rs[0], 0.0);
        assert_eq!(rs[1], 1.0);
        assert_eq!(hold, 0.0);
    }

    #[test]
    fn stochasticity_exact() {
        let c = small_chain(1.2);
        c.for_each_state(|_, pt| {
            let (rs, hold) = c.rates(pt);
            assert!(hold >= 0.0, "negative holding at {pt:?}");
            let mut s = 0.0;
            for r in rs {
                s += r;
            }
            assert!(s + hold == 1.0, "rates must complement exactly at {pt:?}");
        });
    }

    #[test]
    fn detailed_balance_in_log_form() {
        for beta in [0.0, 0.7, 1.5] {
            let c = small_chain(beta);
            let m = crate::ldp::LumpedMeasure::new(c.table(), c.potential(), beta, 10_000).unwrap();
            c.for_each_state(|_, pt| {
                for l in 0..c.num_directions() {
                    if let Some(lr) = c.log_rate(pt, l) {
                        let dest = c.step(pt, l).unwrap();
                        let back = l ^ 1; // opposite sign, same type
                        let lr_back = c.log_rate(&dest, back).unwrap();
                        let fwd = m.lumped_log_weight(pt) + lr;
                        let bwd = m.lumped_log_weight(&dest) + lr_back;
                        assert!(
                            (fwd - bwd).abs() <= 1e-12 * fwd.abs().max(1.0),
                            "flux mismatch {fwd} vs {bwd} at {pt:?} dir {l}"
                        );
                    }
                }
            });
        }
    }

    #[test]
    fn irreducible_box() {
        let c = small_chain(0.9);
        assert!(c.is_irreducible());
    }

    #[test]
    fn restricted_chain_respects_box() {
        let t = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[4, 6]).unwrap();
        let c = LatticeChain::new_restricted(
            &t,
            &Potential::hopfield(1),
            1.0,
            1000,
            vec![1, 0],
            vec![3, 3],
        )
        .unwrap();
        assert_eq!(c.num_states(), 12);
        let corner = LatticePoint { plus_counts: vec![1, 3] };
        assert!(c.step(&corner, 0).is_none()); // would drop below lo
        assert!(c.step(&corner, 1).is_some());
        assert!(c.step(&corner, 3).is_none()); // would exceed hi
        assert!(c.index_of(&LatticePoint { plus_counts: vec![0, 0] }).is_none());
        assert!(c.is_irreducible());
    }

    #[test]
    fn lump_check_dirac_small() {
        let ens = sample_patterns(&[PatternDistribution::dirac(1.0).unwrap()], 6, 1).unwrap();
        let table = type_decomposition(&ens);
        let v = Potential::hopfield(1);
        let chain = LatticeChain::new(&table, &v, 1.0, 100).unwrap();
        let spin = SpinChain::new(ens, v, 1.0).unwrap();
        let err = lump_check(&chain, &spin, &table).unwrap();
        assert!(err <= 1e-12, "lumping error {err}");
    }

    #[test]
    fn lump_check_two_types() {
        let table = fixed_type_table_f64(&[vec![1.0, 1.0], vec![1.0, -1.0]], &[5, 5]).unwrap();
        // build the matching ensemble: sites in table order
        let cols: Vec<Vec<crate::disorder::Decimal>> = table
            .site_types()
            .iter()
            .map(|&a| table.types()[a as usize].clone())
            .collect();
        let ens = PatternEnsemble::from_columns(cols).unwrap();
        let v = Potential::hopfield(2);
        let chain = LatticeChain::new(&table, &v, 0.8, 1000).unwrap();
        let spin = SpinChain::new(ens, v, 0.8).unwrap();
        let err = lump_check(&chain, &spin, &table).unwrap();
        assert!(err <= 1e-12, "lumping error {err}");
    }

    #[test]
    fn infinite_temperature_forgets_potential() {
        let t = fixed_type_table_f64(&[vec![-1.0], vec![1.0]], &[3, 4]).unwrap();
        let c1 = LatticeChain::new(&t, &Potential::hopfield(1), 0.0, 100).unwrap();
        let c2 = LatticeChain::new(&t, &Potential::random_field(1), 0.0, 100).unwrap();
        c1.for_each_state(|_, pt| {
            for l in 0..c1.num_directions() {
                assert_eq!(c1.rate(pt, l), c2.rate(pt, l));
            }
        });
    }

    #[test]
    fn lump_check_size_guard() {
        let ens = sample_patterns(&[PatternDistribution::fair_sign()], 15, 1).unwrap();
        let table = type_decomposition(&ens);
        let v = Potential::hopfield(1);
        let chain = LatticeChain::new(&table, &v, 1.0, 1000).unwrap();
        let spin = SpinChain::new(ens, v, 1.0).unwrap();
        assert!(matches!(
            lump_check(&chain, &spin, &table),
            Err(Error::StateBudget { .. })
        ));
    }
}

//! Pattern disorder: sampling, exact type identity, and the type table.
//!
//! A "type" is a distinct value of the per-site pattern column
//! (xi_1(i), ..., xi_p(i)). Sites of the same type are exchangeable, so the
//! only disorder data the lumped chain needs is the list of types and their
//! site counts. Type identity is decided on exactly parsed decimal values,
//! never by floating-point comparison.

use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

/// Exact decimal in [-1, 1]: mantissa / 10^scale, at most 18 fractional
/// digits, normalized (no trailing zeros; zero has scale 0).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Decimal {
    mantissa: i64,
    scale: u32,
}

const MAX_SCALE: u32 = 18;

fn pow10_i128(s: u32) -> i128 {
    10i128.pow(s)
}

impl Decimal {
    pub fn new(mantissa: i64, scale: u32) -> Result<Self> {
        if scale > MAX_SCALE {
            return Err(Error::Invalid(format!(
                "decimal scale {scale} exceeds {MAX_SCALE}"
            )));
        }
        let mut d = Decimal { mantissa, scale };
        d.normalize();
        if (d.mantissa as i128).abs() > pow10_i128(d.scale) {
            return Err(Error::Invalid(format!("decimal {d} outside [-1, 1]")));
        }
        Ok(d)
    }

    fn normalize(&mut self) {
        if self.mantissa == 0 {
            self.scale = 0;
            return;
        }
        while self.scale > 0 && self.mantissa % 10 == 0 {
            self.mantissa /= 10;
            self.scale -= 1;
        }
    }

    /// Parses "0.45", "-1", "+.5". No exponent notation.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let err = || Error::Invalid(format!("cannot parse decimal from {s:?}"));
        let (neg, rest) = match t.as_bytes().first() {
            Some(b'-') => (true, &t[1..]),
            Some(b'+') => (false, &t[1..]),
            Some(_) => (false, t),
            None => return Err(err()),
        };
        let (int_part, frac_part) = match rest.split_once('.') {
            Some((i, f)) => (i, f),
            None => (rest, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return Err(err());
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return Err(err());
        }
        if frac_part.len() as u32 > MAX_SCALE {
            return Err(Error::Invalid(format!(
                "decimal {s:?} has more than {MAX_SCALE} fractional digits"
            )));
        }
        let mut m: i128 = 0;
        for b in int_part.bytes().chain(frac_part.bytes()) {
            m = m * 10 + (b - b'0') as i128;
            if m > i64::MAX as i128 {
                return Err(err());
            }
        }
        if neg {
            m = -m;
        }
        Decimal::new(m as i64, frac_part.len() as u32)
    }

    /// Exact decimal of the shortest round-trip representation of `v`.
    pub fn from_f64(v: f64) -> Result<Self> {
        if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
            return Err(Error::Invalid(format!("pattern value {v} outside [-1, 1]")));
        }
        Decimal::parse(&format!("{v}"))
    }

    pub fn to_f64(self) -> f64 {
        self.mantissa as f64 / pow10_i128(self.scale) as f64
    }

    pub fn is_zero(self) -> bool {
        self.mantissa == 0
    }

    pub fn mantissa_at_scale(self, scale: u32) -> i128 {
        debug_assert!(scale >= self.scale);
        self.mantissa as i128 * pow10_i128(scale - self.scale)
    }

    pub fn scale(self) -> u32 {
        self.scale
    }

    /// Exact product; errors if the result needs more than 18 fractional digits.
    pub fn mul(self, other: Decimal) -> Result<Self> {
        let m = self.mantissa as i128 * other.mantissa as i128;
        let mut scale = self.scale + other.scale;
        let mut m = m;
        while scale > 0 && m % 10 == 0 {
            m /= 10;
            scale -= 1;
        }
        if scale > MAX_SCALE || m.abs() > i64::MAX as i128 {
            return Err(Error::Invalid(
                "decimal product exceeds supported precision".into(),
            ));
        }
        Decimal::new(m as i64, scale)
    }
}

impl Ord for Decimal {
    fn cmp(&self, other: &Self) -> Ordering {
        let a = self.mantissa as i128 * pow10_i128(other.scale);
        let b = other.mantissa as i128 * pow10_i128(self.scale);
        a.cmp(&b)
    }
}

impl PartialOrd for Decimal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Decimal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.mantissa);
        }
        let sign = if self.mantissa < 0 { "-" } else { "" };
        let abs = (self.mantissa as i128).unsigned_abs();
        let div = pow10_i128(self.scale) as u128;
        write!(
            f,
            "{sign}{}.{:0width$}",
            abs / div,
            abs % div,
            width = self.scale as usize
        )
    }
}

impl Serialize for Decimal {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Finite-support distribution for one pattern's i.i.d. components.
#[derive(Clone, Debug, Serialize)]
pub struct PatternDistribution {
    support: Vec<Decimal>,
    probs: Vec<f64>,
    probs_exact: Vec<Decimal>,
}

impl PatternDistribution {
    /// Support values and probabilities given as exact decimal strings.
    pub fn new(support: Vec<Decimal>, probs_exact: Vec<Decimal>) -> Result<Self> {
        if support.is_empty() || support.len() != probs_exact.len() {
            return Err(Error::Invalid(
                "support and probabilities must be non-empty and of equal length".into(),
            ));
        }
        for (i, a) in support.iter().enumerate() {
            if support[..i].contains(a) {
                return Err(Error::Invalid(format!("duplicate support value {a}")));
            }
        }
        let probs: Vec<f64> = probs_exact.iter().map(|d| d.to_f64()).collect();
        for &p in &probs {
            if p <= 0.0 {
                // zero-probability entries would create phantom types downstream
                return Err(Error::Invalid(
                    "probabilities must be strictly positive".into(),
                ));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(PatternDistribution {
            support,
            probs,
            probs_exact,
        })
    }

    pub fn from_f64(support: &[f64], probs: &[f64]) -> Result<Self> {
        let s = support
            .iter()
            .map(|&v| Decimal::from_f64(v))
            .collect::<Result<Vec<_>>>()?;
        let p = probs
            .iter()
            .map(|&v| {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!("probability {v} outside [0, 1]")));
                }
                Decimal::from_f64(v)
            })
            .collect::<Result<Vec<_>>>()?;
        PatternDistribution::new(s, p)
    }

    pub fn dirac(v: f64) -> Result<Self> {
        PatternDistribution::from_f64(&[v], &[1.0])
    }

    /// Fair two-point distribution on {-1, +1}.
    pub fn fair_sign() -> Self {
        PatternDistribution::from_f64(&[-1.0, 1.0], &[0.5, 0.5]).unwrap()
    }

    pub fn support(&self) -> &[Decimal] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn probs_exact(&self) -> &[Decimal] {
        &self.probs_exact
    }

    fn sample(&self, u: f64) -> Decimal {
        let mut acc = 0.0;
        for (a, &p) in self.support.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return *a;
            }
        }
        *self.support.last().unwrap()
    }
}

/// One disorder realization: the per-site pattern columns.
#[derive(Clone, Debug)]
pub struct PatternEnsemble {
    pub n: usize,
    pub p: usize,
    columns: Vec<Vec<Decimal>>,
}

impl PatternEnsemble {
    pub fn from_columns(columns: Vec<Vec<Decimal>>) -> Result<Self> {
        let n = columns.len();
        if n == 0 {
            return Err(Error::Invalid("ensemble needs at least one site".into()));
        }
        let p = columns[0].len();
        if p == 0 || columns.iter().any(|c| c.len() != p) {
            return Err(Error::Invalid("pattern columns must share a positive length".into()));
        }
        Ok(PatternEnsemble { n, p, columns })
    }

    pub fn column(&self, site: usize) -> &[Decimal] {
        &self.columns[site]
    }

    /// Per-coordinate scale that every entry can be rescaled to exactly.
    pub fn coord_scales(&self) -> Vec<u32> {
        let mut s = vec![0u32; self.p];
        for col in &self.columns {
            for (j, d) in col.iter().enumerate() {
                s[j] = s[j].max(d.scale());
            }
        }
        s
    }
}

/// Draws n i.i.d. columns; coordinate j of each column follows dists[j].
///
/// Each site has its own ChaCha stream keyed by the site index, so sampling
/// is reproducible no matter how the sites are iterated.
pub fn sample_patterns(
    dists: &[PatternDistribution],
    n: usize,
    seed: u64,
) -> Result<PatternEnsemble> {
    if dists.is_empty() {
        return Err(Error::Invalid("need at least one pattern distribution".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("need at least one site".into()));
    }
    let mut columns = Vec::with_capacity(n);
    for site in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(site as u64 + 1);
        let col = dists.iter().map(|d| d.sample(rng.gen::<f64>())).collect();
        columns.push(col);
    }
    PatternEnsemble::from_columns(columns)
}

/// Disorder summary: distinct pattern-column values with site counts.
///
/// Types are kept in lexicographic order of their exact decimal coordinates;
/// every downstream index (type, direction) inherits that order.
#[derive(Clone, Debug, Serialize)]
pub struct TypeTable {
    types: Vec<Vec<Decimal>>,
    counts: Vec<u64>,
    n: u64,
    #[serde(skip)]
    site_types: Vec<u32>,
    #[serde(skip)]
    types_f64: Vec<Vec<f64>>,
    /// Per coordinate j: common scale and per-type mantissas at that scale.
    #[serde(skip)]
    coord_scales: Vec<u32>,
    #[serde(skip)]
    mantissas: Vec<Vec<i128>>, // [type][coord]
}

impl TypeTable {
    fn build(types: Vec<Vec<Decimal>>, counts: Vec<u64>, site_types: Vec<u32>) -> Self {
        let n = counts.iter().sum();
        let p = types[0].len();
        let mut coord_scales = vec![0u32; p];
        for t in &types {
            for (j, d) in t.iter().enumerate() {
                coord_scales[j] = coord_scales[j].max(d.scale());
            }
        }
        let mantissas = types
            .iter()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .map(|(j, d)| d.mantissa_at_scale(coord_scales[j]))
                    .collect()
            })
            .collect();
        let types_f64 = types
            .iter()
            .map(|t| t.iter().map(|d| d.to_f64()).collect())
            .collect();
        TypeTable {
            types,
            counts,
            n,
            site_types,
            types_f64,
            coord_scales,
            mantissas,
        }
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    pub fn p(&self) -> usize {
        self.types[0].len()
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn types(&self) -> &[Vec<Decimal>] {
        &self.types
    }

    pub fn types_f64(&self) -> &[Vec<f64>] {
        &self.types_f64
    }

    /// Type index of each site, for lifting spin configurations.
    pub fn site_types(&self) -> &[u32] {
        &self.site_types
    }

    pub fn quenched_probs(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c as f64 / self.n as f64)
            .collect()
    }

    pub fn coord_scales(&self) -> &[u32] {
        &self.coord_scales
    }

    pub fn mantissas(&self) -> &[Vec<i128>] {
        &self.mantissas
    }
}

/// Groups the ensemble's columns into types; counts are exact.
pub fn type_decomposition(ensemble: &PatternEnsemble) -> TypeTable {
    let mut groups: BTreeMap<&Vec<Decimal>, u64> = BTreeMap::new();
    for col in &ensemble.columns {
        *groups.entry(col).or_insert(0) += 1;
    }
    let types: Vec<Vec<Decimal>> = groups.keys().map(|t| (*t).clone()).collect();
    let counts: Vec<u64> = groups.values().copied().collect();
    let index: BTreeMap<&Vec<Decimal>, u32> = types
        .iter()
        .enumerate()
        .map(|(i, t)| (t, i as u32))
        .collect();
    let site_types = ensemble
        .columns
        .iter()
        .map(|c| index[c])
        .collect();
    TypeTable::build(types, counts, site_types)
}

/// Pins the quenched disorder exactly. Sites are assigned to types in
/// blocks, in the table's lexicographic order.
pub fn fixed_type_table(types: Vec<Vec<Decimal>>, counts: Vec<u64>) -> Result<TypeTable> {
    if types.is_empty() || types.len() != counts.len() {
        return Err(Error::Invalid(
            "types and counts must be non-empty and of equal length".into(),
        ));
    }
    let p = types[0].len();
    if p == 0 || types.iter().any(|t| t.len() != p) {
        return Err(Error::Invalid("all types must share a positive length".into()));
    }
    for (i, t) in types.iter().enumerate() {
        if types[..i].contains(t) {
            return Err(Error::Invalid("duplicate type".into()));
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Invalid("type counts must be positive".into()));
    }
    let mut order: Vec<usize> = (0..types.len()).collect();
    order.sort_by(|&i, &j| types[i].cmp(&types[j]));
    let types: Vec<Vec<Decimal>> = order.iter().map(|&i| types[i].clone()).collect();
    let counts: Vec<u64> = order.iter().map(|&i| counts[i]).collect();
    let mut site_types = Vec::with_capacity(counts.iter().sum::<u64>() as usize);
    for (i, &c) in counts.iter().enumerate() {
        site_types.extend(std::iter::repeat(i as u32).take(c as usize));
    }
    Ok(TypeTable::build(types, counts, site_types))
}

/// Convenience: fixed table from f64 type coordinates.
pub fn fixed_type_table_f64(types: &[Vec<f64>], counts: &[u64]) -> Result<TypeTable> {
    let t = types
        .iter()
        .map(|t| t.iter().map(|&v| Decimal::from_f64(v)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    fixed_type_table(t, counts.to_vec())
}

/// Deterministic table with counts matching n * (product probability) by the
/// largest-remainder rule, ties broken toward the lexicographically smaller
/// type. All arithmetic on exact decimals.
pub fn expected_type_table(dists: &[PatternDistribution], n: u64) -> Result<TypeTable> {
    if dists.is_empty() || n == 0 {
        return Err(Error::Invalid("need distributions and n >= 1".into()));
    }
    // product types in lexicographic order with exact product probabilities
    let mut types: Vec<Vec<Decimal>> = vec![vec![]];
    let mut probs: Vec<Decimal> = vec![Decimal::new(1, 0)?];
    for d in dists {
        let mut nt = Vec::new();
        let mut np = Vec::new();
        for (t, pr) in types.iter().zip(&probs) {
            for (a, q) in d.support.iter().zip(&d.probs_exact) {
                let mut t2 = t.clone();
                t2.push(*a);
                nt.push(t2);
                np.push(pr.mul(*q)?);
            }
        }
        types = nt;
        probs = np;
    }
    let mut order: Vec<usize> = (0..types.len()).collect();
    order.sort_by(|&i, &j| types[i].cmp(&types[j]));
    let types: Vec<Vec<Decimal>> = order.iter().map(|&i| types[i].clone()).collect();
    let probs: Vec<Decimal> = order.iter().map(|&i| probs[i]).collect();

    // floor(n*q) exactly; remainders as exact decimals scaled by n
    let mut counts = Vec::with_capacity(types.len());
    let mut rems: Vec<(Decimal, usize)> = Vec::new();
    for (i, q) in probs.iter().enumerate() {
        let num = q.mantissa_at_scale(q.scale()) * n as i128;
        let den = pow10_i128(q.scale());
        let fl = num.div_euclid(den);
        let rem_num = num - fl * den; // in [0, den)
        counts.push(fl as u64);
        rems.push((exact_fraction_as_decimal_key(rem_num, den)?, i));
    }
    let assigned: u64 = counts.iter().sum();
    let mut leftover = n - assigned;
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut k = 0;
    while leftover > 0 {
        counts[rems[k].1] += 1;
        leftover -= 1;
        k += 1;
    }
    let keep: Vec<usize> = (0..types.len()).filter(|&i| counts[i] > 0).collect();
    fixed_type_table(
        keep.iter().map(|&i| types[i].clone()).collect(),
        keep.iter().map(|&i| counts[i]).collect(),
    )
}

// Remainders share the denominator only per type; normalize to a common key.
// den is a power of ten <= 10^18, so rem/den is itself an exact decimal.
fn exact_fraction_as_decimal_key(num: i128, den: i128) -> Result<Decimal> {
    let mut scale = 0u32;
    let mut d = den;
    while d > 1 {
        d /= 10;
        scale += 1;
    }
    Decimal::new(num as i64, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimal_parse_normalize_display() {
        let d = Decimal::parse("0.450").unwrap();
        assert_eq!(d, Decimal::parse("0.45").unwrap());
        assert_eq!(d.to_string(), "0.45");
        assert_eq!(Decimal::parse("-1").unwrap().to_string(), "-1");
        assert_eq!(Decimal::parse("-0.05").unwrap().to_string(), "-0.05");
        assert!(Decimal::parse("1.5").is_err());
        assert!(Decimal::parse("abc").is_err());
        assert_eq!(Decimal::from_f64(0.45).unwrap(), Decimal::parse("0.45").unwrap());
        assert_eq!(Decimal::from_f64(-1.0).unwrap(), Decimal::parse("-1").unwrap());
    }

    #[test]
    fn decimal_order_matches_value() {
        let a = Decimal::parse("0.5").unwrap();
        let b = Decimal::parse("0.45").unwrap();
        let c = Decimal::parse("-0.999999999").unwrap();
        assert!(c < b && b < a);
        assert_eq!(a.cmp(&a), Ordering::Equal);
    }

    #[test]
    fn dirac_sampling_gives_single_type() {
        let d = PatternDistribution::dirac(1.0).unwrap();
        let ens = sample_patterns(&[d], 4, 7).unwrap();
        let t = type_decomposition(&ens);
        assert_eq!(t.num_types(), 1);
        assert_eq!(t.counts(), &[4]);
        assert_eq!(t.n(), 4);
    }

    #[test]
    fn two_pattern_counts_conserved_and_deterministic() {
        let dists = vec![
            PatternDistribution::dirac(1.0).unwrap(),
            PatternDistribution::fair_sign(),
        ];
        let t1 = type_decomposition(&sample_patterns(&dists, 100, 42).unwrap());
        let t2 = type_decomposition(&sample_patterns(&dists, 100, 42).unwrap());
        assert!(t1.num_types() <= 2);
        assert_eq!(t1.counts().iter().sum::<u64>(), 100);
        assert_eq!(t1.counts(), t2.counts());
        assert_eq!(t1.types(), t2.types());
    }

    #[test]
    fn ternary_frequencies_concentrate() {
        let d = PatternDistribution::from_f64(&[-1.0, 0.0, 1.0], &[0.3, 0.3, 0.4]).unwrap();
        let n = 100_000;
        let t = type_decomposition(&sample_patterns(&[d.clone()], n, 11).unwrap());
        assert_eq!(t.num_types(), 3);
        for (ty, &c) in t.types().iter().zip(t.counts()) {
            let q = d.probs()[d.support().iter().position(|a| a == &ty[0]).unwrap()];
            let se = (q * (1.0 - q) / n as f64).sqrt();
            assert!(
                (c as f64 / n as f64 - q).abs() <= 3.0 * se,
                "type {} count {} too far from {}",
                ty[0],
                c,
                q
            );
        }
    }

    #[test]
    fn lexicographic_type_order() {
        let cols = vec![
            vec![Decimal::parse("1").unwrap()],
            vec![Decimal::parse("1").unwrap()],
            vec![Decimal::parse("-1").unwrap()],
        ];
        let t = type_decomposition(&PatternEnsemble::from_columns(cols).unwrap());
        assert_eq!(t.types()[0][0].to_string(), "-1");
        assert_eq!(t.counts(), &[1, 2]);
    }

    #[test]
    fn fixed_table_validation() {
        let rfcw = fixed_type_table_f64(&[vec![1.0, 1.0], vec![1.0, -1.0]], &[50, 50]).unwrap();
        assert_eq!(rfcw.n(), 100);
        assert_eq!(rfcw.types()[0][1].to_string(), "-1"); // sorted
        assert!(fixed_type_table_f64(&[vec![1.0], vec![1.0]], &[1, 1]).is_err());
        assert!(fixed_type_table_f64(&[vec![1.0]], &[0]).is_err());
    }

    #[test]
    fn expected_counts_use_exact_remainder_ties() {
        let d = PatternDistribution::from_f64(&[-1.0, 1.0], &[0.45, 0.55]).unwrap();
        // n=50: remainders are exactly 1/2 each; tie goes to the smaller type (-1)
        let t = expected_type_table(&[d.clone()], 50).unwrap();
        assert_eq!(t.counts(), &[23, 27]);
        for n in [100u64, 200, 400] {
            let t = expected_type_table(&[d.clone()], n).unwrap();
            assert_eq!(t.counts(), &[(45 * n) / 100, (55 * n) / 100]);
        }
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(PatternDistribution::from_f64(&[0.5, 0.5], &[0.5, 0.5]).is_err());
        assert!(PatternDistribution::from_f64(&[2.0], &[1.0]).is_err());
        assert!(PatternDistribution::from_f64(&[0.1, 0.2], &[1.0, 0.0]).is_err());
        assert!(PatternDistribution::from_f64(&[0.1, 0.2], &[0.6, 0.6]).is_err());
    }
}

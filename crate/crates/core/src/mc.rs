//! Monte Carlo estimation of hitting times on the lumped chain. Holding
//! steps are simulated explicitly so tau counts chain steps one for one.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chain::LatticeChain;
use crate::{Error, Result};

/// Where trajectories begin: a fixed state or an explicit distribution
/// (state index, probability), typically the harmonic-measure start.
#[derive(Clone, Debug)]
pub enum StartSpec {
    Fixed(u64),
    Distribution(Vec<(u64, f64)>),
}

/// One hitting-time experiment on the lumped chain.
pub struct McRun<'a> {
    pub chain: &'a LatticeChain,
    pub start: StartSpec,
    pub b_set: Vec<u64>,
    pub trajectories: usize,
    pub master_seed: u64,
    /// Per-trajectory step cap; reaching it censors the sample.
    pub step_budget: u64,
    /// Asymptotic mean-exit prediction; runs predicted to blow the budget
    /// are refused up front.
    pub predicted_mean: Option<f64>,
}

/// Outcome of one trajectory.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct McSample {
    pub id: usize,
    pub tau: u64,
    pub censored: bool,
}

/// Summary of an experiment. The estimator is the sample mean over the
/// completed trajectories; the interval comes from batch means compared on
/// the log scale.
#[derive(Clone, Debug, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// 95% interval, multiplicative around the mean.
    pub ci95: (f64, f64),
    pub completed: usize,
    pub censored: usize,
    pub batch_count: usize,
    #[serde(skip)]
    pub outcomes: Vec<McSample>,
}

impl McEstimate {
    /// Completed hitting times in trajectory order.
    pub fn samples(&self) -> Vec<u64> {
        self.outcomes
            .iter()
            .filter(|s| !s.censored)
            .map(|s| s.tau)
            .collect()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn run_one(
    chain: &LatticeChain,
    start: u64,
    b: &HashSet<u64>,
    budget: u64,
    rng: &mut ChaCha8Rng,
) -> (u64, bool) {
    if b.contains(&start) {
        return (0, true);
    }
    let mut pt = chain.point_of(start);
    for step in 1..=budget {
        let (rates, _holding) = chain.rates(&pt);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut moved = None;
        for (l, r) in rates.iter().enumerate() {
            acc += r;
            if u < acc {
                moved = Some(l);
                break;
            }
        }
        if let Some(l) = moved {
            pt = chain.step(&pt, l).expect("positive rate implies a valid step");
            let idx = chain.index_of(&pt).expect("step stays on the lattice");
            if b.contains(&idx) {
                return (step, true);
            }
        }
    }
    (budget, false)
}

/// Run the experiment: independent trajectories on counter-based RNG
/// streams, merged by trajectory id so the output is deterministic under
/// any parallel schedule.
pub fn simulate_hits(run: &McRun) -> Result<McEstimate> {
    let chain = run.chain;
    let num_states = chain.num_states();
    if run.trajectories == 0 {
        return Err(Error::Invalid("no trajectories requested".into()));
    }
    if run.step_budget == 0 {
        return Err(Error::Invalid("step budget must be positive".into()));
    }
    if run.b_set.is_empty() {
        return Err(Error::Invalid("empty target set".into()));
    }
    for &s in &run.b_set {
        if s >= num_states {
            return Err(Error::Invalid("target state out of range".into()));
        }
    }
    let cdf: Option<Vec<(u64, f64)>> = match &run.start {
        StartSpec::Fixed(s) => {
            if *s >= num_states {
                return Err(Error::Invalid("start state out of range".into()));
            }
            None
        }
        StartSpec::Distribution(d) => {
            if d.is_empty() {
                return Err(Error::Invalid("empty start distribution".into()));
            }
            let mut acc = 0.0;
            let mut cdf = Vec::with_capacity(d.len());
            for &(s, p) in d {
                if s >= num_states {
                    return Err(Error::Invalid("start state out of range".into()));
                }
                if !(0.0..=1.0 + 1e-9).contains(&p) {
                    return Err(Error::Invalid("start probability out of range".into()));
                }
                acc += p;
                cdf.push((s, acc));
            }
            if (acc - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!(
                    "start distribution sums to {acc}, expected 1"
                )));
            }
            Some(cdf)
        }
    };
    if let Some(pred) = run.predicted_mean {
        if pred > run.step_budget as f64 {
            return Err(Error::StateBudget {
                actual: pred.min(u64::MAX as f64) as u64,
                budget: run.step_budget,
            });
        }
    }

    let b: HashSet<u64> = run.b_set.iter().cloned().collect();
    let outcomes: Vec<McSample> = (0..run.trajectories)
        .into_par_iter()
        .map(|tid| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(splitmix64(run.master_seed ^ (tid as u64)));
            let start = match (&run.start, &cdf) {
                (StartSpec::Fixed(s), _) => *s,
                (_, Some(cdf)) => {
                    let u: f64 = rng.gen();
                    cdf.iter()
                        .find(|&&(_, c)| u < c)
                        .map(|&(s, _)| s)
                        .unwrap_or(cdf.last().unwrap().0)
                }
                _ => unreachable!(),
            };
            let (tau, completed) = run_one(chain, start, &b, run.step_budget, &mut rng);
            McSample {
                id: tid,
                tau,
                censored: !completed,
            }
        })
        .collect();

    let samples: Vec<f64> = outcomes
        .iter()
        .filter(|s| !s.censored)
        .map(|s| s.tau as f64)
        .collect();
    let censored = outcomes.len() - samples.len();
    if samples.is_empty() {
        return Err(Error::NoConvergence(
            "every trajectory exhausted the step budget".into(),
        ));
    }
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;

    // Batch means over completed samples in trajectory order.
    let batch_count = samples.len().min(32).max(1);
    let mut bm = vec![0.0f64; batch_count];
    let mut bn = vec![0usize; batch_count];
    for (i, &s) in samples.iter().enumerate() {
        let b = i * batch_count / samples.len();
        bm[b] += s;
        bn[b] += 1;
    }
    let batch_means: Vec<f64> = bm
        .iter()
        .zip(&bn)
        .filter(|(_, &n)| n > 0)
        .map(|(&m, &n)| m / n as f64)
        .collect();
    let nb = batch_means.len();
    let (stderr, ci95) = if nb >= 2 {
        let bmean = batch_means.iter().sum::<f64>() / nb as f64;
        let var = batch_means
            .iter()
            .map(|&m| (m - bmean) * (m - bmean))
            .sum::<f64>()
            / (nb as f64 - 1.0);
        let stderr = (var / nb as f64).sqrt();
        let logs: Vec<f64> = batch_means.iter().map(|&m| m.ln()).collect();
        let lmean = logs.iter().sum::<f64>() / nb as f64;
        let lvar =
            logs.iter().map(|&l| (l - lmean) * (l - lmean)).sum::<f64>() / (nb as f64 - 1.0);
        let lse = (lvar / nb as f64).sqrt();
        (stderr, (mean * (-1.96 * lse).exp(), mean * (1.96 * lse).exp()))
    } else {
        (f64::INFINITY, (0.0, f64::INFINITY))
    };

    Ok(McEstimate {
        mean,
        stderr,
        ci95,
        completed: samples.len(),
        censored,
        batch_count: nb,
        outcomes,
    })
}

/// Kolmogorov-Smirnov distance of tau/mean(tau) against the unit
/// exponential, returned as (D, sqrt(K) * D). The 1% critical value for the
/// scaled statistic is 1.628.
pub fn ks_exponential(samples: &[u64]) -> (f64, f64) {
    assert!(!samples.is_empty());
    let k = samples.len() as f64;
    let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / k;
    let mut xs: Vec<f64> = samples.iter().map(|&s| s as f64 / mean).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = 1.0 - (-x).exp();
        let hi = (i as f64 + 1.0) / k - f;
        let lo = f - i as f64 / k;
        d = d.max(hi).max(lo);
    }
    (d, k.sqrt() * d)
}

/// Write the per-trajectory outcomes as CSV: id, tau, censored flag.
pub fn write_samples_csv<W: std::io::Write>(
    mut out: W,
    outcomes: &[McSample],
) -> std::io::Result<()> {
    writeln!(out, "trajectory,tau,censored")?;
    for s in outcomes {
        writeln!(out, "{},{},{}", s.id, s.tau, if s.censored { 1 } else { 0 })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::fixed_type_table_f64;
    use crate::model::{LatticePoint, Potential};

    fn chain_1d(n: u64, beta: f64) -> LatticeChain {
        let table = fixed_type_table_f64(&[vec![1.0]], &[n]).unwrap();
        LatticeChain::new(&table, &Potential::hopfield(1), beta, 1 << 20).unwrap()
    }

    #[test]
    fn two_state_mean_is_geometric() {
        let chain = chain_1d(1, 0.7);
        let start = LatticePoint {
            plus_counts: vec![1],
        };
        let r = chain.rate(&start, 0);
        let run = McRun {
            chain: &chain,
            start: StartSpec::Fixed(chain.index_of(&start).unwrap()),
            b_set: vec![0],
            trajectories: 10_000,
            master_seed: 7,
            step_budget: 1_000_000,
            predicted_mean: None,
        };
        let est = simulate_hits(&run).unwrap();
        assert_eq!(est.censored, 0);
        assert!(
            (est.mean - 1.0 / r).abs() <= 3.0 * est.stderr,
            "mean {} vs 1/r {}",
            est.mean,
            1.0 / r
        );
    }

    #[test]
    fn matches_exact_solve_on_small_chain() {
        let n = 14;
        let beta = 1.0;
        let chain = chain_1d(n, beta);
        // Start in the positive well, exit into the negative one.
        let a_pt = LatticePoint {
            plus_counts: vec![14],
        };
        let b_pt = LatticePoint {
            plus_counts: vec![0],
        };
        let a = chain.index_of(&a_pt).unwrap();
        let b = chain.index_of(&b_pt).unwrap();
        let exact =
            crate::potential::mean_hitting_direct(&chain, &[b], &[(a, 1.0)]).unwrap();
        let run = McRun {
            chain: &chain,
            start: StartSpec::Fixed(a),
            b_set: vec![b],
            trajectories: 800,
            master_seed: 11,
            step_budget: 10_000_000,
            predicted_mean: Some(exact),
        };
        let est = simulate_hits(&run).unwrap();
        assert_eq!(est.censored, 0);
        assert!(
            (est.mean - exact).abs() <= 3.0 * est.stderr,
            "mc {} +- {} vs exact {}",
            est.mean,
            est.stderr,
            exact
        );
    }

    #[test]
    fn deterministic_given_seeds() {
        let chain = chain_1d(10, 0.8);
        let start = chain
            .index_of(&LatticePoint {
                plus_counts: vec![10],
            })
            .unwrap();
        let run = McRun {
            chain: &chain,
            start: StartSpec::Fixed(start),
            b_set: vec![0],
            trajectories: 200,
            master_seed: 123,
            step_budget: 1_000_000,
            predicted_mean: None,
        };
        let e1 = simulate_hits(&run).unwrap();
        let e2 = simulate_hits(&run).unwrap();
        let s1: Vec<u64> = e1.outcomes.iter().map(|s| s.tau).collect();
        let s2: Vec<u64> = e2.outcomes.iter().map(|s| s.tau).collect();
        assert_eq!(s1, s2);
        assert_eq!(e1.mean, e2.mean);

        let run3 = McRun {
            master_seed: 124,
            ..run
        };
        let e3 = simulate_hits(&run3).unwrap();
        let s3: Vec<u64> = e3.outcomes.iter().map(|s| s.tau).collect();
        assert_ne!(s1, s3);
    }

    #[test]
    fn distribution_start_and_budget_refusal() {
        let chain = chain_1d(10, 0.8);
        let hi = chain
            .index_of(&LatticePoint {
                plus_counts: vec![10],
            })
            .unwrap();
        let lo9 = chain
            .index_of(&LatticePoint {
                plus_counts: vec![9],
            })
            .unwrap();
        let run = McRun {
            chain: &chain,
            start: StartSpec::Distribution(vec![(hi, 0.75), (lo9, 0.25)]),
            b_set: vec![0],
            trajectories: 500,
            master_seed: 5,
            step_budget: 1_000_000,
            predicted_mean: None,
        };
        let est = simulate_hits(&run).unwrap();
        assert_eq!(est.completed, 500);

        let refused = McRun {
            predicted_mean: Some(2e6),
            ..run
        };
        assert!(simulate_hits(&refused).is_err());

        let bad = McRun {
            start: StartSpec::Distribution(vec![(hi, 0.6), (lo9, 0.3)]),
            predicted_mean: None,
            ..refused
        };
        assert!(simulate_hits(&bad).is_err());
    }

    #[test]
    fn censoring_is_flagged() {
        let chain = chain_1d(20, 1.0);
        let start = chain
            .index_of(&LatticePoint {
                plus_counts: vec![20],
            })
            .unwrap();
        let run = McRun {
            chain: &chain,
            start: StartSpec::Fixed(start),
            b_set: vec![0],
            trajectories: 50,
            master_seed: 3,
            step_budget: 40,
            predicted_mean: None,
        };
        // Exit takes ~e^{n Delta I} >> 40 steps, so most runs censor.
        match simulate_hits(&run) {
            Ok(est) => {
                assert!(est.censored > 0);
                assert_eq!(est.completed + est.censored, 50);
                for s in &est.outcomes {
                    if s.censored {
                        assert_eq!(s.tau, 40);
                    }
                }
            }
            Err(Error::NoConvergence(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn ks_statistic_accepts_exponential_shape() {
        // From the top corner the only move is downhill with a small rate,
        // so tau is geometric with small success probability, which is
        // exponential to within O(p); the scaled KS statistic stays below
        // the 1% critical value 1.628.
        let chain = chain_1d(2, 2.0);
        let start = chain
            .index_of(&LatticePoint {
                plus_counts: vec![2],
            })
            .unwrap();
        let target = chain
            .index_of(&LatticePoint {
                plus_counts: vec![1],
            })
            .unwrap();
        let run = McRun {
            chain: &chain,
            start: StartSpec::Fixed(start),
            b_set: vec![target],
            trajectories: 2_000,
            master_seed: 99,
            step_budget: 10_000_000,
            predicted_mean: None,
        };
        let est = simulate_hits(&run).unwrap();
        let (_, scaled) = ks_exponential(&est.samples());
        assert!(scaled < 1.628, "scaled KS {scaled}");
    }

    #[test]
    fn csv_export_round_trips() {
        let outcomes = vec![
            McSample {
                id: 0,
                tau: 12,
                censored: false,
            },
            McSample {
                id: 1,
                tau: 40,
                censored: true,
            },
        ];
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &outcomes).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "trajectory,tau,censored\n0,12,0\n1,40,1\n");
    }
}

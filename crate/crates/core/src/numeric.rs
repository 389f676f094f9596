//! Small numerical kernels shared across the crate.
//!
//! Everything here is deterministic: reductions over slices are performed
//! in index order (or via fixed-shape pairwise trees), never in a
//! parallelism-dependent order, so repeated runs produce bit-identical
//! results.

use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

/// log(sum exp(x_i)), stable, -inf for an empty or all -inf input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// log(exp(a) + exp(b)), stable.
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// ln C(n, k) via ln Gamma. Requires 0 <= k <= n.
pub fn log_binomial(n: u64, k: u64) -> f64 {
    assert!(k <= n, "log_binomial: k={k} > n={n}");
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// ln cosh(u), stable for large |u|: |u| + ln(1 + e^{-2|u|}) - ln 2.
pub fn logcosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// sech^2(u) = 1 - tanh^2(u), computed from tanh for stability.
pub fn sech2(u: f64) -> f64 {
    let t = u.tanh();
    1.0 - t * t
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Binary entropy-like term k/n-weighted: ln C(n,k) = n*h(k/n) + O(log n).
/// h(x) = -x ln x - (1-x) ln(1-x), with h(0)=h(1)=0.
pub fn binary_entropy(x: f64) -> f64 {
    debug_assert!((-1e-12..=1.0 + 1e-12).contains(&x));
    let mut s = 0.0;
    if x > 0.0 {
        s -= x * x.ln();
    }
    if x < 1.0 {
        s -= (1.0 - x) * (1.0 - x).ln();
    }
    s
}

/// Deterministic compensated (Neumaier) sum in index order.
///
/// This is the reduction used when assembling quantities that feed
/// reproducibility-sensitive reports. Rayon is only used in shapes where
/// each output element is produced by exactly one task (per-row matvec,
/// per-trajectory simulation), so determinism is preserved there by
/// construction.
pub fn ordered_sum(xs: &[f64]) -> f64 {
    let mut s = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let t = s + x;
        comp += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + comp
}

/// Streaming Neumaier accumulator for sums that cannot be materialized.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    s: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.s + x;
        self.comp += if self.s.abs() >= x.abs() {
            (self.s - t) + x
        } else {
            (x - t) + self.s
        };
        self.s = t;
    }

    pub fn value(&self) -> f64 {
        self.s + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn logsumexp_matches_direct_small() {
        let xs = [0.1f64, -0.3, 2.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(logsumexp(&xs), direct, epsilon = 1e-14);
    }

    #[test]
    fn logsumexp_handles_extreme_scale() {
        let xs = [-1000.0, -1000.0];
        assert_abs_diff_eq!(
            logsumexp(&xs),
            -1000.0 + std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn logaddexp_agrees_with_logsumexp() {
        assert_abs_diff_eq!(
            logaddexp(0.5, -2.0),
            logsumexp(&[0.5, -2.0]),
            epsilon = 1e-14
        );
        assert_eq!(logaddexp(f64::NEG_INFINITY, 3.0), 3.0);
    }

    #[test]
    fn log_binomial_exact_values() {
        // C(5,2) = 10, C(10,5) = 252, C(2000,1000): checked against entropy bound.
        assert_abs_diff_eq!(log_binomial(5, 2), 10.0_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(log_binomial(10, 5), 252.0_f64.ln(), epsilon = 1e-12);
        let lb = log_binomial(2000, 1000);
        let ub = 2000.0 * binary_entropy(0.5);
        assert!(lb < ub && ub - lb < 10.0);
    }

    #[test]
    fn logcosh_frozen_values() {
        // cosh(1) = 1.5430806348...; ln of it:
        assert_abs_diff_eq!(logcosh(1.0), 0.4337808304830272, epsilon = 1e-15);
        assert_abs_diff_eq!(logcosh(0.0), 0.0, epsilon = 1e-300);
        // Large argument: logcosh(50) ~ 50 - ln 2.
        assert_abs_diff_eq!(logcosh(50.0), 50.0 - std::f64::consts::LN_2, epsilon = 1e-13);
        assert_abs_diff_eq!(logcosh(-3.0), logcosh(3.0), epsilon = 1e-300);
    }

    #[test]
    fn normal_cdf_frozen_values() {
        assert_abs_diff_eq!(normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(normal_cdf(3.0), 0.9986501019683699, epsilon = 1e-12);
        assert_abs_diff_eq!(normal_cdf(-3.0), 1.0 - 0.9986501019683699, epsilon = 1e-12);
    }

    #[test]
    fn sech2_is_derivative_of_tanh() {
        let u = 0.7f64;
        let h = 1e-6f64;
        let fd = ((u + h).tanh() - (u - h).tanh()) / (2.0 * h);
        assert_abs_diff_eq!(sech2(u), fd, epsilon = 1e-9);
    }

    #[test]
    fn binary_entropy_endpoints_and_midpoint() {
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        assert_abs_diff_eq!(
            binary_entropy(0.5),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
    }
}

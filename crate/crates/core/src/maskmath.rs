//! Exact combinatorics of run-constrained mask patterns.
//!
//! A mask pattern of length `L` is *k-inefficient* when it contains a run of
//! at least `k` equal symbols (masked or unmasked). This module counts the
//! complementary *efficient* patterns exactly, evaluates the probability
//! `R_{L,k}(t)` that i.i.d. Bernoulli(t) masking avoids the inefficient set,
//! and integrates that probability under arbitrary time laws.

use num_bigint::BigUint;
use thiserror::Error;

use crate::numeric::{self, QuadError};
use crate::timelaw::TimeLaw;

#[derive(Debug, Clone, Error)]
pub enum MaskMathError {
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("refusing brute force for L={l}: 2^L enumeration capped at L<=24")]
    BruteForceTooLarge { l: usize },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("mask-count law normalization off by {defect:e} (tolerance 1e-9)")]
    Normalization { defect: f64 },
}

/// Sequence length and run threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub l: usize,
    pub k: usize,
}

impl RunSpec {
    pub fn new(l: usize, k: usize) -> Result<Self, MaskMathError> {
        if l < 1 {
            return Err(MaskMathError::InvalidSpec(format!("L={l} must be >= 1")));
        }
        if k < 2 || k > l {
            return Err(MaskMathError::InvalidSpec(format!(
                "k={k} must satisfy 2 <= k <= L={l}"
            )));
        }
        Ok(RunSpec { l, k })
    }
}

/// Exact per-mask-count profile of efficient patterns.
///
/// `counts[n]` is the number of length-`L` binary strings with exactly `n`
/// ones and no run of `k` or more equal symbols; `q(n) = counts[n] / C(L,n)`.
#[derive(Debug, Clone)]
pub struct EfficientProfile {
    pub spec: RunSpec,
    pub counts: Vec<BigUint>,
    binomials: Vec<BigUint>,
}

impl EfficientProfile {
    fn new(spec: RunSpec, counts: Vec<BigUint>) -> Self {
        let binomials = binomial_row(spec.l);
        EfficientProfile {
            spec,
            counts,
            binomials,
        }
    }

    /// q(n) = counts[n] / C(L, n), evaluated by shifted big-integer division
    /// so the quotient keeps full f64 precision at any L.
    pub fn q(&self, n: usize) -> f64 {
        big_ratio_to_f64(&self.counts[n], &self.binomials[n])
    }

    pub fn qs(&self) -> Vec<f64> {
        (0..=self.spec.l).map(|n| self.q(n)).collect()
    }

    /// Exact symmetry check q(n) == q(L-n) (equivalent to equal counts).
    pub fn symmetry_holds_exactly(&self) -> bool {
        let l = self.spec.l;
        (0..=l).all(|n| self.counts[n] == self.counts[l - n])
    }

    /// Exact check of q(n) <= q(n+1) for all n < L/2, by cross-multiplied
    /// big-integer comparison (no floating point).
    pub fn central_monotonicity_holds_exactly(&self) -> bool {
        (0..self.spec.l)
            .filter(|&n| 2 * n < self.spec.l)
            .all(|n| self.q_step_sign(n) >= 0)
    }

    /// Sign of q(n+1) - q(n), computed exactly.
    fn q_step_sign(&self, n: usize) -> i8 {
        let lhs = &self.counts[n + 1] * &self.binomials[n];
        let rhs = &self.counts[n] * &self.binomials[n + 1];
        match lhs.cmp(&rhs) {
            std::cmp::Ordering::Less => -1,
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Greater => 1,
        }
    }

    /// q(n+1) - q(n) with exact sign and full-precision magnitude.
    fn q_step(&self, n: usize) -> f64 {
        let lhs = &self.counts[n + 1] * &self.binomials[n];
        let rhs = &self.counts[n] * &self.binomials[n + 1];
        let denom = &self.binomials[n] * &self.binomials[n + 1];
        if lhs >= rhs {
            big_ratio_to_f64(&(lhs - rhs), &denom)
        } else {
            -big_ratio_to_f64(&(rhs - lhs), &denom)
        }
    }
}

/// Counts efficient patterns for every mask count via a run-length DP over
/// (ones used, current symbol, current run length < k). Exact at any L the
/// caller can afford; O(L^2 k) big-integer additions.
pub fn count_efficient(spec: RunSpec) -> EfficientProfile {
    let RunSpec { l, k } = spec;
    let max_run = k - 1;
    // dp[sym][run - 1][ones] after placing j symbols.
    let mut dp = vec![vec![vec![BigUint::default(); l + 1]; max_run]; 2];
    dp[0][0][0] = BigUint::from(1u32);
    dp[1][0][1] = BigUint::from(1u32);
    for _ in 1..l {
        let mut next = vec![vec![vec![BigUint::default(); l + 1]; max_run]; 2];
        for sym in 0..2usize {
            for run in 0..max_run {
                for ones in 0..=l {
                    let cur = &dp[sym][run][ones];
                    if cur == &BigUint::default() {
                        continue;
                    }
                    // Extend the current run.
                    if run + 1 < max_run && ones + sym <= l {
                        next[sym][run + 1][ones + sym] += cur;
                    }
                    // Switch symbol, starting a fresh run.
                    let other = 1 - sym;
                    if ones + other <= l {
                        next[other][0][ones + other] += cur;
                    }
                }
            }
        }
        dp = next;
    }
    let mut counts = vec![BigUint::default(); l + 1];
    for sym_states in &dp {
        for run_states in sym_states {
            for (ones, c) in run_states.iter().enumerate() {
                counts[ones] += c;
            }
        }
    }
    EfficientProfile::new(spec, counts)
}

/// Independent oracle: exhaustive enumeration of all 2^L patterns.
pub fn brute_force_profile(spec: RunSpec) -> Result<EfficientProfile, MaskMathError> {
    let RunSpec { l, k } = spec;
    if l > 24 {
        return Err(MaskMathError::BruteForceTooLarge { l });
    }
    let mut counts = vec![0u64; l + 1];
    for bits in 0u32..(1u32 << l) {
        let mut max_run = 1usize;
        let mut run = 1usize;
        for j in 1..l {
            let prev = (bits >> (j - 1)) & 1;
            let cur = (bits >> j) & 1;
            if cur == prev {
                run += 1;
                max_run = max_run.max(run);
            } else {
                run = 1;
            }
        }
        if max_run < k {
            counts[bits.count_ones() as usize] += 1;
        }
    }
    Ok(EfficientProfile::new(
        spec,
        counts.into_iter().map(BigUint::from).collect(),
    ))
}

/// R_{L,k}(t): probability that i.i.d. Bernoulli(t) masking avoids every
/// k-run, as a Bernstein-basis sum with log-space binomial weights.
pub fn efficient_prob_at_t(profile: &EfficientProfile, t: f64) -> f64 {
    assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
    let l = profile.spec.l;
    if t == 0.0 {
        return profile.q(0);
    }
    if t == 1.0 {
        return profile.q(l);
    }
    let (ln_t, ln_1t) = (t.ln(), (1.0 - t).ln());
    (0..=l)
        .map(|n| {
            let q = profile.q(n);
            if q == 0.0 {
                return 0.0;
            }
            let ln_w = numeric::ln_binomial(l, n) + n as f64 * ln_t + (l - n) as f64 * ln_1t;
            (ln_w + q.ln()).exp()
        })
        .sum()
}

/// Precomputed paired-positive form of R', evaluable in log space at any t
/// in (0, 1/2).
///
/// Pairing the n-th and (L-1-n)-th Bernstein terms of the derivative turns
/// it into a sum of strictly positive contributions, so the sign of R' is
/// certified without cancellation, and log-space evaluation keeps the
/// strictness certificate meaningful even where R' underflows f64 (large L,
/// extreme t).
pub struct RDerivative {
    l: usize,
    /// (n, ln of L * C(L-1,n) * (q(n+1) - q(n))) for the strictly positive
    /// steps below the middle.
    terms: Vec<(usize, f64)>,
}

impl RDerivative {
    /// ln R'(t) for t in (0, 1/2); `None` when R' is identically zero.
    pub fn ln_value_at(&self, t: f64) -> Option<f64> {
        assert!(t > 0.0 && t < 0.5, "t={t} outside (0, 1/2)");
        if self.terms.is_empty() {
            return None;
        }
        let l = self.l;
        let (ln_t, ln_1t) = (t.ln(), (1.0 - t).ln());
        let logs: Vec<f64> = self
            .terms
            .iter()
            .map(|&(n, ln_coeff)| {
                // bracket = t^n (1-t)^{L-1-n} - t^{L-1-n} (1-t)^n > 0 for t < 1/2
                let a = n as f64 * ln_t + (l - 1 - n) as f64 * ln_1t;
                let b = (l - 1 - n) as f64 * ln_t + n as f64 * ln_1t;
                ln_coeff + a + (1.0 - (b - a).exp()).ln()
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some(m + logs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln())
    }
}

impl EfficientProfile {
    /// Builds the paired-positive derivative form (one pass of exact
    /// big-integer steps, then cheap per-t evaluation).
    pub fn r_derivative(&self) -> RDerivative {
        let l = self.spec.l;
        let mut terms = Vec::new();
        for n in 0..l {
            if 2 * n + 1 >= l {
                break; // paired partner covers the rest; the middle step is zero
            }
            debug_assert!(self.q_step_sign(n) >= 0);
            let d = self.q_step(n);
            if d <= 0.0 {
                continue;
            }
            let ln_coeff = (l as f64).ln() + numeric::ln_binomial(l - 1, n) + d.ln();
            terms.push((n, ln_coeff));
        }
        RDerivative { l, terms }
    }
}

/// ln R'(t) for t in (0, 1/2); `None` when the derivative is exactly zero.
pub fn ln_r_derivative(profile: &EfficientProfile, t: f64) -> Option<f64> {
    profile.r_derivative().ln_value_at(t)
}

/// Law-induced mask-count distribution
/// `w(n) = C(L,n) * E_{t~law}[t^n (1-t)^{L-n}]` for `n = 0..=L`.
///
/// Dirac laws evaluate the integrand at the atom; the uniform law uses the
/// exact Beta integral; other continuous laws use adaptive quadrature and the
/// result is checked to normalize within 1e-9.
pub fn mask_count_law(l: usize, law: &TimeLaw) -> Result<Vec<f64>, MaskMathError> {
    let w: Vec<f64> = match law {
        TimeLaw::Uniform => vec![1.0 / (l + 1) as f64; l + 1],
        TimeLaw::Dirac { mu } => (0..=l).map(|n| bernstein(l, n, *mu)).collect(),
        _ => {
            let (lo, hi) = law.support();
            let center = match law {
                TimeLaw::TruncGaussian { mu, .. } | TimeLaw::TruncLaplace { mu, .. } => *mu,
                _ => 0.5,
            };
            let mut out = Vec::with_capacity(l + 1);
            for n in 0..=l {
                let g = |t: f64| bernstein(l, n, t) * law.density(t).expect("continuous law");
                // Split at the kernel peak and the law's center.
                let peak = n as f64 / l as f64;
                out.push(numeric::integrate(&g, lo, hi, 1e-12, &[peak, center])?);
            }
            out
        }
    };
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(MaskMathError::Normalization {
            defect: (total - 1.0).abs(),
        });
    }
    Ok(w)
}

fn bernstein(l: usize, n: usize, t: f64) -> f64 {
    if t <= 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if t >= 1.0 {
        return if n == l { 1.0 } else { 0.0 };
    }
    (numeric::ln_binomial(l, n) + n as f64 * t.ln() + (l - n) as f64 * (1.0 - t).ln()).exp()
}

/// Probability of avoiding the k-inefficient set when t is drawn from `law`:
/// the count-space sum over mask counts.
pub fn efficient_prob_under_law(
    profile: &EfficientProfile,
    law: &TimeLaw,
) -> Result<f64, MaskMathError> {
    let w = mask_count_law(profile.spec.l, law)?;
    Ok((0..=profile.spec.l).map(|n| w[n] * profile.q(n)).sum())
}

/// Same quantity by direct quadrature of R against the law; the independent
/// route used to cross-check `efficient_prob_under_law`.
pub fn efficient_prob_under_law_quadrature(
    profile: &EfficientProfile,
    law: &TimeLaw,
) -> Result<f64, MaskMathError> {
    law.expectation(|t| efficient_prob_at_t(profile, t))
        .map_err(|e| match e {
            crate::timelaw::LawError::Quadrature(q) => MaskMathError::Quadrature(q),
            other => MaskMathError::InvalidSpec(other.to_string()),
        })
}

/// Row of binomial coefficients C(l, 0..=l) as exact integers.
pub fn binomial_row(l: usize) -> Vec<BigUint> {
    let mut row = vec![BigUint::from(1u32)];
    for n in 0..l {
        let next = &row[n] * BigUint::from(l - n) / BigUint::from(n + 1);
        row.push(next);
    }
    row
}

/// num / den as f64, via a 128-bit left shift so the integer quotient retains
/// more precision than f64 needs before the final conversion.
fn big_ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    if num == &BigUint::default() {
        return 0.0;
    }
    // Shift so the integer quotient carries ~80 significant bits regardless
    // of how the operand magnitudes compare.
    let shift = 80 + den.bits().saturating_sub(num.bits());
    let scaled = (num << shift) / den;
    // BigUint -> f64 via decimal string would lose precision; walk the bits.
    let bits = scaled.bits();
    let top = if bits > 64 {
        let shifted: BigUint = &scaled >> (bits - 64);
        shifted.iter_u64_digits().next().unwrap() as f64 * 2f64.powi((bits - 64) as i32)
    } else {
        scaled.iter_u64_digits().next().unwrap_or(0) as f64
    };
    top * 2f64.powi(-(shift as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(l: usize, k: usize) -> RunSpec {
        RunSpec::new(l, k).unwrap()
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(RunSpec::new(4, 1).is_err());
        assert!(RunSpec::new(4, 5).is_err());
        assert!(RunSpec::new(0, 2).is_err());
    }

    #[test]
    fn l4_k2_only_alternating_patterns_survive() {
        let profile = count_efficient(spec(4, 2));
        let got: Vec<u64> = profile
            .counts
            .iter()
            .map(|c| c.iter_u64_digits().next().unwrap_or(0))
            .collect();
        assert_eq!(got, vec![0, 0, 2, 0, 0]);
    }

    #[test]
    fn k_equal_l_excludes_only_constant_patterns() {
        for l in [2usize, 5, 9] {
            let profile = count_efficient(spec(l, l));
            let binom = binomial_row(l);
            assert_eq!(profile.counts[0], BigUint::default());
            assert_eq!(profile.counts[l], BigUint::default());
            for n in 1..l {
                assert_eq!(profile.counts[n], binom[n], "L={l}, n={n}");
            }
        }
    }

    #[test]
    fn dp_matches_brute_force_on_cited_cases() {
        for (l, k) in [(4, 2), (8, 3), (12, 3), (16, 2)] {
            let dp = count_efficient(spec(l, k));
            let bf = brute_force_profile(spec(l, k)).unwrap();
            assert_eq!(dp.counts, bf.counts, "L={l}, k={k}");
        }
    }

    #[test]
    fn brute_force_refuses_large_l() {
        assert!(matches!(
            brute_force_profile(spec(25, 2)),
            Err(MaskMathError::BruteForceTooLarge { l: 25 })
        ));
    }

    #[test]
    fn r_is_zero_at_the_endpoints() {
        for (l, k) in [(4, 2), (8, 3), (16, 8), (16, 16)] {
            let profile = count_efficient(spec(l, k));
            assert_eq!(efficient_prob_at_t(&profile, 0.0), 0.0);
            assert_eq!(efficient_prob_at_t(&profile, 1.0), 0.0);
        }
    }

    #[test]
    fn r_symmetry_around_half() {
        for (l, k) in [(4, 2), (8, 3), (32, 4), (128, 8)] {
            let profile = count_efficient(spec(l, k));
            for j in 1..50 {
                let t = j as f64 / 100.0;
                let a = efficient_prob_at_t(&profile, t);
                let b = efficient_prob_at_t(&profile, 1.0 - t);
                assert!((a - b).abs() <= 1e-12, "L={l} k={k} t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn r_at_half_for_l4_k2_is_two_sixteenths() {
        // Independent oracle: i.i.d. Bernoulli(1/2) over all 16 patterns,
        // of which exactly two are efficient.
        let profile = count_efficient(spec(4, 2));
        assert!((efficient_prob_at_t(&profile, 0.5) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn q_symmetry_and_central_monotonicity_exact() {
        for l in [4usize, 7, 16, 33, 64] {
            for k in [2usize, 3, 4, 8] {
                if k > l {
                    continue;
                }
                let profile = count_efficient(spec(l, k));
                assert!(profile.symmetry_holds_exactly(), "L={l} k={k}");
                assert!(profile.central_monotonicity_holds_exactly(), "L={l} k={k}");
            }
        }
    }

    #[test]
    fn mask_count_law_uniform_is_flat() {
        let w = mask_count_law(8, &TimeLaw::Uniform).unwrap();
        for &x in &w {
            assert!((x - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_count_law_dirac_is_binomial() {
        let mu = 0.3;
        let w = mask_count_law(6, &TimeLaw::dirac(mu).unwrap()).unwrap();
        let binom = [1.0, 6.0, 15.0, 20.0, 15.0, 6.0, 1.0];
        for (n, &x) in w.iter().enumerate() {
            let direct = binom[n] * mu.powi(n as i32) * (1.0 - mu).powi((6 - n) as i32);
            assert!((x - direct).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn mask_count_law_trunc_gaussian_normalizes() {
        let law = TimeLaw::trunc_gaussian(0.5, 0.1).unwrap();
        for l in [8usize, 128] {
            let w = mask_count_law(l, &law).unwrap();
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "L={l}: {total}");
        }
    }

    #[test]
    fn l4_k2_integral_values() {
        let profile = count_efficient(spec(4, 2));
        // Dirac(0.5) equals the pointwise evaluation.
        let dirac = TimeLaw::dirac(0.5).unwrap();
        let v = efficient_prob_under_law(&profile, &dirac).unwrap();
        assert!((v - 0.125).abs() < 1e-12);
        // Uniform: only q(2) = 1/3 is nonzero, and w is flat 1/5.
        let u = efficient_prob_under_law(&profile, &TimeLaw::Uniform).unwrap();
        assert!((u - 1.0 / 15.0).abs() < 1e-12, "got {u}");
    }

    #[test]
    fn count_space_and_quadrature_routes_agree() {
        let laws = [
            TimeLaw::Uniform,
            TimeLaw::trunc_gaussian(0.5, 0.1).unwrap(),
            TimeLaw::trunc_laplace(0.5, 0.1).unwrap(),
        ];
        for (l, k) in [(8, 3), (16, 4), (64, 8)] {
            let profile = count_efficient(spec(l, k));
            for law in &laws {
                let a = efficient_prob_under_law(&profile, law).unwrap();
                let b = efficient_prob_under_law_quadrature(&profile, law).unwrap();
                assert!((a - b).abs() < 1e-8, "L={l} k={k} {law}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ln_r_derivative_finite_on_open_half_interval() {
        for (l, k) in [(4, 2), (128, 2), (128, 128), (64, 8)] {
            let profile = count_efficient(spec(l, k));
            for t in [1e-3, 0.1, 0.25, 0.499] {
                let ln_d = ln_r_derivative(&profile, t);
                assert!(
                    ln_d.map_or(false, |x| x.is_finite()),
                    "L={l} k={k} t={t}: {ln_d:?}"
                );
            }
        }
    }

    #[test]
    fn dirac_center_beats_uniform_on_a_sample_grid() {
        let dirac = TimeLaw::dirac(0.5).unwrap();
        for (l, k) in [(4, 2), (8, 3), (32, 4)] {
            let profile = count_efficient(spec(l, k));
            let bell = efficient_prob_under_law(&profile, &dirac).unwrap();
            let unif = efficient_prob_under_law(&profile, &TimeLaw::Uniform).unwrap();
            assert!(bell > unif, "L={l} k={k}: {bell} <= {unif}");
        }
    }

    #[test]
    fn big_ratio_keeps_precision_at_large_l() {
        // q(64) for L=128, k=2 is 2 / C(128,64) ~ 8.3e-39; the shifted
        // division must not collapse it to zero or lose leading bits.
        let profile = count_efficient(spec(128, 2));
        let q = profile.q(64);
        let direct = 2.0 * (-numeric::ln_binomial(128, 64)).exp();
        assert!(q > 0.0);
        assert!(((q - direct) / direct).abs() < 1e-9, "{q} vs {direct}");
    }
}

//! Time-sampling laws on `[0, 1]`: CDFs, generalized inverse CDFs,
//! bell-shape classification, and stratified sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numeric::{self, QuadError};

#[derive(Debug, Clone, Error)]
pub enum LawError {
    #[error("invalid law: {0}")]
    InvalidLaw(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("cannot parse law literal `{0}`")]
    Parse(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

/// A probability law on `[0, 1]` used to sample corruption times.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeLaw {
    /// Uniform on `[0, 1]`.
    Uniform,
    /// Point mass at `mu`.
    Dirac { mu: f64 },
    /// Gaussian with mean `mu` and scale `sigma`, renormalized to `[lo, hi]`.
    TruncGaussian { mu: f64, sigma: f64, lo: f64, hi: f64 },
    /// Laplace with location `mu` and scale `b`, renormalized to `[lo, hi]`.
    TruncLaplace { mu: f64, b: f64, lo: f64, hi: f64 },
}

/// Verdict of the bell-shape grid check.
#[derive(Debug, Clone, PartialEq)]
pub enum BellVerdict {
    /// The central-mass inequality holds, strictly at `witness`.
    Holds { witness: f64 },
    /// The inequality holds with equality everywhere on the grid
    /// (not bell-shaped: the strictness clause fails).
    HoldsWeakly,
    /// The inequality fails at `violating_a`.
    Fails { violating_a: f64 },
}

impl BellVerdict {
    pub fn is_bell_shaped(&self) -> bool {
        matches!(self, BellVerdict::Holds { .. })
    }
}

/// One stratified draw per equal-probability stratum of a law.
#[derive(Debug, Clone)]
pub struct StratifiedBatch {
    pub size: usize,
    pub samples: Vec<f64>,
    pub seed: u64,
}

const INV_CDF_TOL: f64 = 1e-12;
pub const DEFAULT_BELL_GRID: usize = 4096;

impl TimeLaw {
    pub fn uniform() -> Self {
        TimeLaw::Uniform
    }

    pub fn dirac(mu: f64) -> Result<Self, LawError> {
        let law = TimeLaw::Dirac { mu };
        law.validate()?;
        Ok(law)
    }

    pub fn trunc_gaussian(mu: f64, sigma: f64) -> Result<Self, LawError> {
        Self::trunc_gaussian_on(mu, sigma, 0.0, 1.0)
    }

    pub fn trunc_gaussian_on(mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<Self, LawError> {
        let law = TimeLaw::TruncGaussian { mu, sigma, lo, hi };
        law.validate()?;
        Ok(law)
    }

    pub fn trunc_laplace(mu: f64, b: f64) -> Result<Self, LawError> {
        Self::trunc_laplace_on(mu, b, 0.0, 1.0)
    }

    pub fn trunc_laplace_on(mu: f64, b: f64, lo: f64, hi: f64) -> Result<Self, LawError> {
        let law = TimeLaw::TruncLaplace { mu, b, lo, hi };
        law.validate()?;
        Ok(law)
    }

    fn validate(&self) -> Result<(), LawError> {
        let check_range = |x: f64, name: &str| -> Result<(), LawError> {
            if !(0.0..=1.0).contains(&x) || !x.is_finite() {
                return Err(LawError::InvalidLaw(format!("{name}={x} outside [0,1]")));
            }
            Ok(())
        };
        match *self {
            TimeLaw::Uniform => Ok(()),
            TimeLaw::Dirac { mu } => check_range(mu, "mu"),
            TimeLaw::TruncGaussian { mu, sigma, lo, hi } => {
                check_range(mu, "mu")?;
                check_range(lo, "lo")?;
                check_range(hi, "hi")?;
                if !(sigma > 0.0) {
                    return Err(LawError::InvalidLaw(format!("sigma={sigma} must be > 0")));
                }
                if lo >= hi {
                    return Err(LawError::InvalidLaw(format!("lo={lo} >= hi={hi}")));
                }
                Ok(())
            }
            TimeLaw::TruncLaplace { mu, b, lo, hi } => {
                check_range(mu, "mu")?;
                check_range(lo, "lo")?;
                check_range(hi, "hi")?;
                if !(b > 0.0) {
                    return Err(LawError::InvalidLaw(format!("b={b} must be > 0")));
                }
                if lo >= hi {
                    return Err(LawError::InvalidLaw(format!("lo={lo} >= hi={hi}")));
                }
                Ok(())
            }
        }
    }

    /// Support endpoints `(lo, hi)`.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            TimeLaw::Uniform => (0.0, 1.0),
            TimeLaw::Dirac { mu } => (mu, mu),
            TimeLaw::TruncGaussian { lo, hi, .. } | TimeLaw::TruncLaplace { lo, hi, .. } => {
                (lo, hi)
            }
        }
    }

    /// True when the law has no atoms.
    pub fn is_continuous(&self) -> bool {
        !matches!(self, TimeLaw::Dirac { .. })
    }

    /// P(s <= t) for s drawn from this law.
    pub fn cdf(&self, t: f64) -> f64 {
        match *self {
            TimeLaw::Uniform => t.clamp(0.0, 1.0),
            TimeLaw::Dirac { mu } => {
                if t >= mu {
                    1.0
                } else {
                    0.0
                }
            }
            TimeLaw::TruncGaussian { mu, sigma, lo, hi } => {
                if t <= lo {
                    return 0.0;
                }
                if t >= hi {
                    return 1.0;
                }
                let phi = |x: f64| numeric::normal_cdf((x - mu) / sigma);
                (phi(t) - phi(lo)) / (phi(hi) - phi(lo))
            }
            TimeLaw::TruncLaplace { mu, b, lo, hi } => {
                if t <= lo {
                    return 0.0;
                }
                if t >= hi {
                    return 1.0;
                }
                (laplace_mass(t, mu, b) - laplace_mass(lo, mu, b))
                    / (laplace_mass(hi, mu, b) - laplace_mass(lo, mu, b))
            }
        }
    }

    /// Normalized density at `t` (zero outside the support).
    ///
    /// Errors for the Dirac law, which has no density.
    pub fn density(&self, t: f64) -> Result<f64, LawError> {
        match *self {
            TimeLaw::Uniform => Ok(if (0.0..=1.0).contains(&t) { 1.0 } else { 0.0 }),
            TimeLaw::Dirac { .. } => Err(LawError::Domain(
                "Dirac law has no density".to_string(),
            )),
            TimeLaw::TruncGaussian { mu, sigma, lo, hi } => {
                if t < lo || t > hi {
                    return Ok(0.0);
                }
                let phi = |x: f64| numeric::normal_cdf((x - mu) / sigma);
                let z = phi(hi) - phi(lo);
                Ok(numeric::normal_pdf((t - mu) / sigma) / (sigma * z))
            }
            TimeLaw::TruncLaplace { mu, b, lo, hi } => {
                if t < lo || t > hi {
                    return Ok(0.0);
                }
                let z = laplace_mass(hi, mu, b) - laplace_mass(lo, mu, b);
                Ok((-(t - mu).abs() / b).exp() / (2.0 * b * z))
            }
        }
    }

    /// Generalized inverse CDF: the smallest `t` with `F(t) > u`
    /// (equivalently inf{t : F(t) >= u} pushed past flat spots, so atoms
    /// map every `u` in `[0, 1)` to the atom location).
    ///
    /// Continuous laws are inverted by bisection on the closed-form CDF to
    /// absolute tolerance 1e-12.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        debug_assert!((0.0..1.0).contains(&u), "u={u} outside [0,1)");
        match *self {
            TimeLaw::Uniform => u,
            TimeLaw::Dirac { mu } => mu,
            TimeLaw::TruncGaussian { lo, hi, .. } | TimeLaw::TruncLaplace { lo, hi, .. } => {
                if u <= 0.0 {
                    return lo;
                }
                let (mut a, mut b) = (lo, hi);
                while b - a > INV_CDF_TOL {
                    let mid = 0.5 * (a + b);
                    if self.cdf(mid) >= u {
                        b = mid;
                    } else {
                        a = mid;
                    }
                }
                0.5 * (a + b)
            }
        }
    }

    /// P(t in [a, 1-a]) with closed-interval semantics: atoms sitting on the
    /// boundary count as inside.
    pub fn central_mass(&self, a: f64) -> Result<f64, LawError> {
        if !(0.0..0.5).contains(&a) {
            return Err(LawError::Domain(format!("a={a} outside [0, 1/2)")));
        }
        match *self {
            TimeLaw::Dirac { mu } => Ok(if mu >= a && mu <= 1.0 - a { 1.0 } else { 0.0 }),
            _ => Ok(self.cdf(1.0 - a) - self.cdf(a)),
        }
    }

    /// Checks the central-mass inequality `P(t in [a,1-a]) >= 1-2a` on a
    /// uniform grid of `grid` points in `[0, 1/2)`, with the strictness
    /// clause: the verdict is bell-shaped only if the inequality is strict
    /// somewhere.
    pub fn is_bell_shaped(&self, grid: usize) -> Result<BellVerdict, LawError> {
        assert!(grid >= 2, "grid must be >= 2");
        // Strictness and violation slack for CDFs evaluated through erf.
        const EPS: f64 = 1e-12;
        let mut best_witness: Option<(f64, f64)> = None;
        for j in 0..grid {
            let a = 0.5 * j as f64 / grid as f64;
            let mass = self.central_mass(a)?;
            let uniform_mass = 1.0 - 2.0 * a;
            if mass < uniform_mass - EPS {
                return Ok(BellVerdict::Fails { violating_a: a });
            }
            let slack = mass - uniform_mass;
            if slack > EPS && best_witness.map_or(true, |(_, s)| slack > s) {
                best_witness = Some((a, slack));
            }
        }
        Ok(match best_witness {
            Some((witness, _)) => BellVerdict::Holds { witness },
            None => BellVerdict::HoldsWeakly,
        })
    }

    /// Stratified batch: `u_i = (i-1)/B + eps_i` with `eps_i ~ U[0, 1/B)`,
    /// mapped through the inverse CDF. Deterministic given `seed`.
    pub fn sample_stratified(&self, batch: usize, seed: u64) -> StratifiedBatch {
        assert!(batch >= 1, "batch size must be >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = 1.0 / batch as f64;
        let samples = (0..batch)
            .map(|i| {
                let eps: f64 = rng.gen_range(0.0..width);
                self.inverse_cdf(i as f64 * width + eps)
            })
            .collect();
        StratifiedBatch {
            size: batch,
            samples,
            seed,
        }
    }

    /// Stratified batch with every in-stratum offset forced to zero:
    /// `t_i = F^{-1}((i-1)/B)`.
    pub fn stratified_grid(&self, batch: usize) -> Vec<f64> {
        assert!(batch >= 1);
        (0..batch)
            .map(|i| self.inverse_cdf(i as f64 / batch as f64))
            .collect()
    }

    /// Independent draws via inverse transform.
    pub fn sample_iid(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.inverse_cdf(rng.gen_range(0.0..1.0)))
            .collect()
    }

    /// E[f(t)] for t drawn from this law. Continuous laws use adaptive
    /// quadrature to absolute tolerance 1e-10; the Dirac law evaluates the
    /// integrand at the atom.
    pub fn expectation<F: Fn(f64) -> f64>(&self, f: F) -> Result<f64, LawError> {
        match *self {
            TimeLaw::Dirac { mu } => Ok(f(mu)),
            _ => {
                let (lo, hi) = self.support();
                let mean = match *self {
                    TimeLaw::TruncGaussian { mu, .. } | TimeLaw::TruncLaplace { mu, .. } => mu,
                    _ => 0.5 * (lo + hi),
                };
                let g = |t: f64| f(t) * self.density(t).expect("continuous law");
                Ok(numeric::integrate(&g, lo, hi, 1e-10, &[mean])?)
            }
        }
    }
}

/// Unnormalized Laplace CDF antiderivative evaluated at `t`.
fn laplace_mass(t: f64, mu: f64, b: f64) -> f64 {
    if t <= mu {
        0.5 * ((t - mu) / b).exp()
    } else {
        1.0 - 0.5 * (-(t - mu) / b).exp()
    }
}

impl fmt::Display for TimeLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TimeLaw::Uniform => write!(f, "uniform"),
            TimeLaw::Dirac { mu } => write!(f, "dirac:{mu}"),
            TimeLaw::TruncGaussian { mu, sigma, lo, hi } => {
                if lo == 0.0 && hi == 1.0 {
                    write!(f, "tgauss:{mu},{sigma}")
                } else {
                    write!(f, "tgauss:{mu},{sigma}@{lo},{hi}")
                }
            }
            TimeLaw::TruncLaplace { mu, b, lo, hi } => {
                if lo == 0.0 && hi == 1.0 {
                    write!(f, "tlaplace:{mu},{b}")
                } else {
                    write!(f, "tlaplace:{mu},{b}@{lo},{hi}")
                }
            }
        }
    }
}

impl FromStr for TimeLaw {
    type Err = LawError;

    /// Parses literals of the form `uniform`, `dirac:0.5`, `tgauss:0.5,0.1`,
    /// `tlaplace:0.5,0.2`, optionally suffixed `@lo,hi` to move the
    /// truncation window.
    fn from_str(s: &str) -> Result<Self, LawError> {
        let s = s.trim();
        if s == "uniform" {
            return Ok(TimeLaw::Uniform);
        }
        let (head, window) = match s.split_once('@') {
            Some((h, w)) => (h, Some(w)),
            None => (s, None),
        };
        let (lo, hi) = match window {
            Some(w) => {
                let (a, b) = w
                    .split_once(',')
                    .ok_or_else(|| LawError::Parse(s.to_string()))?;
                (parse_num(a, s)?, parse_num(b, s)?)
            }
            None => (0.0, 1.0),
        };
        let (kind, args) = head
            .split_once(':')
            .ok_or_else(|| LawError::Parse(s.to_string()))?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| parse_num(a, s))
            .collect::<Result<_, _>>()?;
        match (kind, nums.as_slice()) {
            ("dirac", [mu]) => TimeLaw::dirac(*mu),
            ("tgauss", [mu, sigma]) => TimeLaw::trunc_gaussian_on(*mu, *sigma, lo, hi),
            ("tlaplace", [mu, b]) => TimeLaw::trunc_laplace_on(*mu, *b, lo, hi),
            _ => Err(LawError::Parse(s.to_string())),
        }
    }
}

fn parse_num(tok: &str, whole: &str) -> Result<f64, LawError> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| LawError::Parse(whole.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tg(mu: f64, sigma: f64) -> TimeLaw {
        TimeLaw::trunc_gaussian(mu, sigma).unwrap()
    }

    #[test]
    fn uniform_cdf_is_identity() {
        assert_eq!(TimeLaw::Uniform.cdf(0.5), 0.5);
        assert_eq!(TimeLaw::Uniform.cdf(-0.1), 0.0);
        assert_eq!(TimeLaw::Uniform.cdf(1.2), 1.0);
    }

    #[test]
    fn dirac_cdf_is_a_step() {
        let law = TimeLaw::dirac(0.5).unwrap();
        assert_eq!(law.cdf(0.49), 0.0);
        assert_eq!(law.cdf(0.5), 1.0);
    }

    #[test]
    fn trunc_gaussian_cdf_at_mean_is_half() {
        assert!((tg(0.5, 0.1).cdf(0.5) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn trunc_laplace_cdf_at_mean_is_half_on_symmetric_window() {
        let law = TimeLaw::trunc_laplace(0.5, 0.2).unwrap();
        assert!((law.cdf(0.5) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(TimeLaw::dirac(1.5).is_err());
        assert!(TimeLaw::trunc_gaussian(0.5, 0.0).is_err());
        assert!(TimeLaw::trunc_gaussian_on(0.5, 0.1, 0.8, 0.2).is_err());
        assert!(TimeLaw::trunc_laplace(0.5, -1.0).is_err());
    }

    #[test]
    fn inverse_cdf_uniform_identity() {
        assert_eq!(TimeLaw::Uniform.inverse_cdf(0.25), 0.25);
    }

    #[test]
    fn inverse_cdf_dirac_returns_atom_for_all_u() {
        let law = TimeLaw::dirac(0.5).unwrap();
        for u in [0.0, 0.1, 0.5, 0.999] {
            assert_eq!(law.inverse_cdf(u), 0.5);
        }
    }

    #[test]
    fn inverse_cdf_trunc_gaussian_matches_independent_bisection() {
        let law = tg(0.5, 0.1);
        // Independent oracle: bisect the closed-form CDF directly.
        let u = 0.975;
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (a + b);
            if law.cdf(mid) >= u {
                b = mid;
            } else {
                a = mid;
            }
        }
        let oracle = 0.5 * (a + b);
        let got = law.inverse_cdf(u);
        assert!((got - oracle).abs() < 1e-10);
        assert!(got > 0.69 && got < 0.70, "got {got}");
    }

    #[test]
    fn cdf_inverse_cdf_round_trip_on_grid() {
        let laws = [
            TimeLaw::Uniform,
            tg(0.5, 0.1),
            tg(0.3, 0.2),
            TimeLaw::trunc_laplace(0.5, 0.1).unwrap(),
            TimeLaw::trunc_laplace(0.6, 0.25).unwrap(),
        ];
        for law in &laws {
            for j in 0..1000 {
                let u = j as f64 / 1000.0;
                let t = law.inverse_cdf(u);
                assert!(
                    (law.cdf(t) - u).abs() <= 1e-10,
                    "{law}: u={u}, round trip {}",
                    law.cdf(t)
                );
            }
        }
    }

    #[test]
    fn central_mass_examples() {
        assert!((TimeLaw::Uniform.central_mass(0.2).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(
            TimeLaw::dirac(0.5).unwrap().central_mass(0.49).unwrap(),
            1.0
        );
        assert_eq!(TimeLaw::dirac(0.3).unwrap().central_mass(0.4).unwrap(), 0.0);
        assert!(TimeLaw::Uniform.central_mass(0.5).is_err());
        assert!(TimeLaw::Uniform.central_mass(-0.01).is_err());
    }

    #[test]
    fn bell_shape_classification_matches_hand_classification() {
        let grid = DEFAULT_BELL_GRID;
        assert_eq!(
            TimeLaw::Uniform.is_bell_shaped(grid).unwrap(),
            BellVerdict::HoldsWeakly
        );
        assert!(TimeLaw::dirac(0.5)
            .unwrap()
            .is_bell_shaped(grid)
            .unwrap()
            .is_bell_shaped());
        assert!(tg(0.5, 0.1).is_bell_shaped(grid).unwrap().is_bell_shaped());
        assert!(tg(0.5, 0.2).is_bell_shaped(grid).unwrap().is_bell_shaped());
        assert!(TimeLaw::trunc_laplace(0.5, 0.1)
            .unwrap()
            .is_bell_shaped(grid)
            .unwrap()
            .is_bell_shaped());
        match TimeLaw::dirac(0.3).unwrap().is_bell_shaped(grid).unwrap() {
            BellVerdict::Fails { violating_a } => {
                assert!(violating_a > 0.3 && violating_a < 0.5);
            }
            v => panic!("Dirac(0.3) should fail, got {v:?}"),
        }
        assert!(matches!(
            TimeLaw::dirac(0.7).unwrap().is_bell_shaped(grid).unwrap(),
            BellVerdict::Fails { .. }
        ));
        // Off-center Gaussians with small sigma starve one tail.
        assert!(matches!(
            tg(0.2, 0.05).is_bell_shaped(grid).unwrap(),
            BellVerdict::Fails { .. }
        ));
    }

    #[test]
    fn stratified_grid_with_zero_offsets_is_the_quantile_grid() {
        let got = TimeLaw::Uniform.stratified_grid(4);
        assert_eq!(got, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn stratified_dirac_is_constant() {
        let batch = TimeLaw::dirac(0.5).unwrap().sample_stratified(8, 3);
        assert_eq!(batch.samples, vec![0.5; 8]);
    }

    #[test]
    fn stratified_samples_stay_in_their_stratum_image() {
        let laws = [TimeLaw::Uniform, tg(0.5, 0.1)];
        for law in &laws {
            let b = 16;
            let batch = law.sample_stratified(b, 99);
            for (i, &t) in batch.samples.iter().enumerate() {
                // t lies in [F^{-1}(i/B), F^{-1}((i+1)/B)): CDF of t brackets
                // the stratum, up to inverse-CDF tolerance.
                let lo_u = i as f64 / b as f64;
                let hi_u = (i + 1) as f64 / b as f64;
                assert!(law.cdf(t) >= lo_u - 1e-9, "{law} stratum {i}: t={t}");
                assert!(law.cdf(t) <= hi_u + 1e-9, "{law} stratum {i}: t={t}");
            }
        }
    }

    #[test]
    fn stratified_is_deterministic_per_seed() {
        let law = tg(0.5, 0.2);
        assert_eq!(
            law.sample_stratified(32, 7).samples,
            law.sample_stratified(32, 7).samples
        );
        assert_ne!(
            law.sample_stratified(32, 7).samples,
            law.sample_stratified(32, 8).samples
        );
    }

    #[test]
    fn stratified_mean_matches_quadrature_mean() {
        let law = tg(0.5, 0.1);
        let batch = law.sample_stratified(100_000, 42);
        let mean: f64 = batch.samples.iter().sum::<f64>() / batch.size as f64;
        let truth = law.expectation(|t| t).unwrap();
        // Stratification makes the batch mean far tighter than iid; the iid
        // standard error is a generous ceiling.
        let var = law.expectation(|t| (t - truth) * (t - truth)).unwrap();
        let se = (var / batch.size as f64).sqrt();
        assert!((mean - truth).abs() < 3.0 * se, "mean={mean}, truth={truth}");
    }

    #[test]
    fn continuous_densities_integrate_to_one() {
        let laws = [
            TimeLaw::Uniform,
            tg(0.5, 0.1),
            tg(0.3, 0.25),
            TimeLaw::trunc_laplace(0.5, 0.1).unwrap(),
            TimeLaw::trunc_laplace_on(0.4, 0.3, 0.1, 0.9).unwrap(),
        ];
        for law in &laws {
            let mass = law.expectation(|_| 1.0).unwrap();
            assert!((mass - 1.0).abs() < 1e-9, "{law}: mass={mass}");
        }
    }

    #[test]
    fn expectation_of_dirac_evaluates_at_atom() {
        let law = TimeLaw::dirac(0.3).unwrap();
        assert_eq!(law.expectation(|t| t * t).unwrap(), 0.09);
    }

    #[test]
    fn expectation_uniform_matches_closed_form() {
        let got = TimeLaw::Uniform.expectation(|t| t * t).unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn law_literals_round_trip() {
        for lit in [
            "uniform",
            "dirac:0.5",
            "tgauss:0.5,0.1",
            "tlaplace:0.5,0.2",
            "tgauss:0.5,0.1@0.2,0.8",
        ] {
            let law: TimeLaw = lit.parse().unwrap();
            assert_eq!(law.to_string(), lit);
        }
        assert!("tgauss:0.5".parse::<TimeLaw>().is_err());
        assert!("pareto:1.0".parse::<TimeLaw>().is_err());
        assert!("dirac:1.5".parse::<TimeLaw>().is_err());
    }
}

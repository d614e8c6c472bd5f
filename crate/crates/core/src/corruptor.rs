//! Absorbing-mask forward process, noise schedulers, and NELBO weights.
//!
//! The survival probability `alpha(t)` is the chance a position is still
//! unmasked at time `t`. The linear scheduler sets `alpha = 1 - t`; the
//! middle-flat scheduler composes a truncated-Gaussian inverse CDF with time
//! reflection so a uniform draw of `t` spends most steps at middle corruption
//! levels while leaving the weighted objective unchanged.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::timelaw::TimeLaw;
use crate::Token;

#[derive(Debug, Clone, Error)]
pub enum CorruptError {
    #[error("invalid vocab: {0}")]
    InvalidVocab(String),
    #[error("NELBO weight diverges at t={t}")]
    WeightDivergence { t: f64 },
    #[error("cannot parse scheduler literal `{0}`")]
    Parse(String),
    #[error("scheduler requires a truncated-Gaussian law, got {0}")]
    BadSchedulerLaw(String),
}

/// Vocabulary size and the derived mask sentinel `V + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabSpec {
    pub v: u16,
}

impl VocabSpec {
    pub fn new(v: u16) -> Result<Self, CorruptError> {
        if v < 2 {
            return Err(CorruptError::InvalidVocab(format!("V={v} must be >= 2")));
        }
        Ok(VocabSpec { v })
    }

    pub fn mask_id(&self) -> Token {
        self.v + 1
    }

    pub fn is_real_token(&self, t: Token) -> bool {
        (1..=self.v).contains(&t)
    }
}

/// Noise schedule `alpha(t)` with `alpha(0) = 1`, `alpha(1) = 0` (clamped to
/// the truncation endpoints for the middle-flat family), strictly decreasing.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheduler {
    Linear,
    MiddleFlat(TimeLaw),
}

impl Scheduler {
    pub fn middle_flat(mu: f64, sigma: f64) -> Result<Self, CorruptError> {
        let law = TimeLaw::trunc_gaussian(mu, sigma)
            .map_err(|e| CorruptError::BadSchedulerLaw(e.to_string()))?;
        Ok(Scheduler::MiddleFlat(law))
    }

    /// Survival probability at time `t`.
    pub fn alpha(&self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t), "t={t} outside [0,1]");
        match self {
            Scheduler::Linear => 1.0 - t,
            Scheduler::MiddleFlat(law) => {
                let (lo, hi) = law.support();
                let u = 1.0 - t;
                if u >= 1.0 {
                    hi
                } else if u <= 0.0 {
                    lo
                } else {
                    law.inverse_cdf(u)
                }
            }
        }
    }

    /// NELBO prefactor `-alpha'(t) / (1 - alpha(t))`.
    ///
    /// Linear reduces to `1/t`. Middle-flat uses the analytic derivative
    /// `alpha' = -1 / f(alpha)` of the inverse-CDF composition, giving
    /// `1 / ((1 - alpha) f(alpha))`.
    pub fn nelbo_weight(&self, t: f64) -> Result<f64, CorruptError> {
        if t <= 0.0 {
            return Err(CorruptError::WeightDivergence { t });
        }
        match self {
            Scheduler::Linear => Ok(1.0 / t),
            Scheduler::MiddleFlat(law) => {
                let a = self.alpha(t);
                let density = law.density(a).expect("middle-flat law is continuous");
                let denom = (1.0 - a) * density;
                if denom <= 0.0 {
                    return Err(CorruptError::WeightDivergence { t });
                }
                Ok(1.0 / denom)
            }
        }
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheduler::Linear => write!(f, "linear"),
            Scheduler::MiddleFlat(TimeLaw::TruncGaussian { mu, sigma, .. }) => {
                write!(f, "middleflat:{mu},{sigma}")
            }
            Scheduler::MiddleFlat(law) => write!(f, "middleflat[{law}]"),
        }
    }
}

impl FromStr for Scheduler {
    type Err = CorruptError;

    fn from_str(s: &str) -> Result<Self, CorruptError> {
        let s = s.trim();
        if s == "linear" {
            return Ok(Scheduler::Linear);
        }
        if let Some(args) = s.strip_prefix("middleflat:") {
            let (mu, sigma) = args
                .split_once(',')
                .ok_or_else(|| CorruptError::Parse(s.to_string()))?;
            let mu: f64 = mu
                .trim()
                .parse()
                .map_err(|_| CorruptError::Parse(s.to_string()))?;
            let sigma: f64 = sigma
                .trim()
                .parse()
                .map_err(|_| CorruptError::Parse(s.to_string()))?;
            return Scheduler::middle_flat(mu, sigma);
        }
        Err(CorruptError::Parse(s.to_string()))
    }
}

/// Sampled times are clamped to `[T_EPS, 1 - T_EPS]`: the weighted integrand
/// is improper at 0, and a sample at t -> 0 has no masked targets almost
/// surely.
pub const T_EPS: f64 = 1e-6;

pub fn clamp_time(t: f64) -> f64 {
    t.clamp(T_EPS, 1.0 - T_EPS)
}

/// Replaces each position independently by the mask sentinel with
/// probability `1 - alpha(t)`. The input must be clean (no mask tokens).
pub fn corrupt(
    x: &[Token],
    vocab: VocabSpec,
    t: f64,
    scheduler: &Scheduler,
    seed: u64,
) -> Vec<Token> {
    debug_assert!(x.iter().all(|&tok| vocab.is_real_token(tok)));
    let mask_prob = 1.0 - scheduler.alpha(t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.iter()
        .map(|&tok| {
            if rng.gen_range(0.0..1.0) < mask_prob {
                vocab.mask_id()
            } else {
                tok
            }
        })
        .collect()
}

/// Applies a uniformly random pattern with exactly `n_masks` masked
/// positions, chosen by a partial Fisher-Yates pass over the indices.
pub fn corrupt_exact_count(x: &[Token], vocab: VocabSpec, n_masks: usize, seed: u64) -> Vec<Token> {
    assert!(n_masks <= x.len(), "n_masks={} > L={}", n_masks, x.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = choose_distinct(x.len(), n_masks, &mut rng);
    let mut out = x.to_vec();
    for p in positions {
        out[p] = vocab.mask_id();
    }
    out
}

/// First `n` entries of a Fisher-Yates shuffle of `0..len`.
pub fn choose_distinct(len: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n.min(len.saturating_sub(1)) {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Indices of masked positions in a masked sequence.
pub fn masked_positions(z: &[Token], vocab: VocabSpec) -> Vec<usize> {
    z.iter()
        .enumerate()
        .filter(|(_, &tok)| tok == vocab.mask_id())
        .map(|(i, _)| i)
        .collect()
}

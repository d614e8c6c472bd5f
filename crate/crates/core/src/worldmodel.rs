//! Exact small synthetic data distributions: order-1 Markov chains with a
//! tunable locality dial, plus exact oracles for joint probabilities,
//! entropies, masked-context conditionals, and position marginals.
//!
//! The locality weight `lambda` blends the raw transition matrix toward the
//! uniform one: `lambda = 0` gives i.i.d. uniform tokens (no structure),
//! `lambda = 1` keeps the raw chain. Seeded random worlds draw strictly
//! diagonally dominant raw transitions, so nearby positions carry more
//! predictive information than distant ones.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruptor::VocabSpec;
use crate::Token;

#[derive(Debug, Clone, Error)]
pub enum WorldError {
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("conditional undefined: revealed context has zero probability (position {position})")]
    UndefinedConditional { position: usize },
    #[error("position {position} out of range or not masked")]
    BadPosition { position: usize },
    #[error("cannot parse world literal `{0}`")]
    Parse(String),
}

/// Order-1 Markov chain over tokens `1..=V` with exact oracles.
#[derive(Debug, Clone)]
pub struct MarkovWorld {
    vocab: VocabSpec,
    len: usize,
    /// Effective (lambda-blended) initial distribution, indexed by token - 1.
    initial: Vec<f64>,
    /// Effective row-stochastic transition matrix.
    transition: Vec<Vec<f64>>,
    lambda: f64,
}

/// Exact conditional distribution of one masked position.
#[derive(Debug, Clone)]
pub struct OracleConditional {
    pub position: usize,
    /// Probability of token `a` at `probs[a - 1]`.
    pub probs: Vec<f64>,
}

impl OracleConditional {
    pub fn prob_of(&self, token: Token) -> f64 {
        self.probs[(token - 1) as usize]
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }
}

/// Serialized form: the blended matrices, dumped for reproducibility.
#[derive(Debug, Serialize, Deserialize)]
pub struct WorldJson {
    pub v: u16,
    pub l: usize,
    pub lambda: f64,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

const ROW_SUM_TOL: f64 = 1e-12;

impl MarkovWorld {
    /// Builds a world from raw matrices and a locality weight. Rows must sum
    /// to one within 1e-12 before blending.
    pub fn new(
        vocab: VocabSpec,
        len: usize,
        raw_initial: &[f64],
        raw_transition: &[Vec<f64>],
        lambda: f64,
    ) -> Result<Self, WorldError> {
        let v = vocab.v as usize;
        if len == 0 {
            return Err(WorldError::InvalidWorld("L must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(WorldError::InvalidWorld(format!(
                "lambda={lambda} outside [0,1]"
            )));
        }
        if raw_initial.len() != v || raw_transition.len() != v {
            return Err(WorldError::InvalidWorld("matrix shape mismatch".into()));
        }
        check_distribution(raw_initial, "initial")?;
        for (i, row) in raw_transition.iter().enumerate() {
            if row.len() != v {
                return Err(WorldError::InvalidWorld("matrix shape mismatch".into()));
            }
            check_distribution(row, &format!("transition row {i}"))?;
        }
        let uniform = 1.0 / v as f64;
        let blend = |p: f64| (1.0 - lambda) * uniform + lambda * p;
        let initial = raw_initial.iter().map(|&p| blend(p)).collect();
        let transition = raw_transition
            .iter()
            .map(|row| row.iter().map(|&p| blend(p)).collect())
            .collect();
        Ok(MarkovWorld {
            vocab,
            len,
            initial,
            transition,
            lambda,
        })
    }

    /// Seeded random world with strictly diagonally dominant raw transitions
    /// (diagonal mass in [0.55, 0.85]), the synthetic locality knob.
    pub fn seeded(vocab: VocabSpec, len: usize, lambda: f64, seed: u64) -> Result<Self, WorldError> {
        let v = vocab.v as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = random_distribution(v, &mut rng);
        let mut transition = Vec::with_capacity(v);
        for i in 0..v {
            let diag = rng.gen_range(0.55..0.85);
            let mut off = random_distribution(v - 1, &mut rng);
            for p in &mut off {
                *p *= 1.0 - diag;
            }
            let mut row = Vec::with_capacity(v);
            let mut it = off.into_iter();
            for j in 0..v {
                row.push(if j == i { diag } else { it.next().unwrap() });
            }
            transition.push(row);
        }
        MarkovWorld::new(vocab, len, &initial, &transition, lambda)
    }

    /// Deterministic chain: point-mass initial at `start`, permutation
    /// transition (token a always followed by `perm[a-1]`).
    pub fn deterministic(
        vocab: VocabSpec,
        len: usize,
        start: Token,
        perm: &[Token],
    ) -> Result<Self, WorldError> {
        let v = vocab.v as usize;
        let mut initial = vec![0.0; v];
        initial[(start - 1) as usize] = 1.0;
        let mut transition = vec![vec![0.0; v]; v];
        for (a, &b) in perm.iter().enumerate() {
            transition[a][(b - 1) as usize] = 1.0;
        }
        MarkovWorld::new(vocab, len, &initial, &transition, 1.0)
    }

    pub fn vocab(&self) -> VocabSpec {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Draws one sequence.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.len);
        let mut cur = sample_index(&self.initial, rng);
        out.push((cur + 1) as Token);
        for _ in 1..self.len {
            cur = sample_index(&self.transition[cur], rng);
            out.push((cur + 1) as Token);
        }
        out
    }

    /// Chain-rule product `initial(x^1) * prod transition(x^j -> x^{j+1})`.
    pub fn joint_prob(&self, x: &[Token]) -> f64 {
        debug_assert_eq!(x.len(), self.len);
        let mut p = self.initial[(x[0] - 1) as usize];
        for w in x.windows(2) {
            p *= self.transition[(w[0] - 1) as usize][(w[1] - 1) as usize];
        }
        p
    }

    /// Exact H(X) in nats via the chain rule with exact marginals.
    pub fn entropy(&self) -> f64 {
        let mut h = entropy_of(&self.initial);
        let mut marginal = self.initial.clone();
        for _ in 1..self.len {
            h += marginal
                .iter()
                .zip(&self.transition)
                .map(|(&p, row)| p * entropy_of(row))
                .sum::<f64>();
            marginal = self.step(&marginal);
        }
        h
    }

    fn step(&self, marginal: &[f64]) -> Vec<f64> {
        let v = self.vocab.v as usize;
        let mut next = vec![0.0; v];
        for (a, &p) in marginal.iter().enumerate() {
            for (b, &t) in self.transition[a].iter().enumerate() {
                next[b] += p * t;
            }
        }
        next
    }

    /// Exact marginal of position `i` (0-based) via repeated transition
    /// application.
    pub fn position_marginal(&self, i: usize) -> Vec<f64> {
        assert!(i < self.len, "position {i} out of range");
        let mut marginal = self.initial.clone();
        for _ in 0..i {
            marginal = self.step(&marginal);
        }
        marginal
    }

    /// Exact conditional of the masked position `i` given the revealed
    /// tokens of `z`, by forward-backward message passing with masked
    /// positions marginalized. Errors when the revealed context has zero
    /// probability (the conditional would be arbitrary) or `i` is unmasked.
    pub fn conditional(&self, z: &[Token], i: usize) -> Result<OracleConditional, WorldError> {
        let mask = self.vocab.mask_id();
        if i >= self.len || z[i] != mask {
            return Err(WorldError::BadPosition { position: i });
        }
        self.masked_conditionals(z)?
            .into_iter()
            .find(|c| c.position == i)
            .ok_or(WorldError::BadPosition { position: i })
    }

    /// Exact conditionals of every masked position of `z`, from one pair of
    /// forward/backward sweeps.
    pub fn masked_conditionals(&self, z: &[Token]) -> Result<Vec<OracleConditional>, WorldError> {
        debug_assert_eq!(z.len(), self.len);
        let mask = self.vocab.mask_id();
        let v = self.vocab.v as usize;
        let first_masked = z
            .iter()
            .position(|&t| t == mask)
            .ok_or(WorldError::BadPosition { position: 0 })?;
        let obs = |j: usize, a: usize| -> f64 {
            if z[j] == mask {
                1.0
            } else if (z[j] - 1) as usize == a {
                1.0
            } else {
                0.0
            }
        };
        // Scaled forward messages f_j(a) ~ P(x_j = a, revealed tokens <= j).
        let mut forward = vec![vec![0.0; v]; self.len];
        for a in 0..v {
            forward[0][a] = self.initial[a] * obs(0, a);
        }
        if normalize(&mut forward[0]).is_none() {
            return Err(WorldError::UndefinedConditional {
                position: first_masked,
            });
        }
        for j in 1..self.len {
            for b in 0..v {
                let mut acc = 0.0;
                for a in 0..v {
                    acc += forward[j - 1][a] * self.transition[a][b];
                }
                forward[j][b] = acc * obs(j, b);
            }
            let (prev, cur) = forward.split_at_mut(j);
            let _ = prev;
            if normalize(&mut cur[0]).is_none() {
                return Err(WorldError::UndefinedConditional {
                    position: first_masked,
                });
            }
        }
        // Scaled backward messages b_j(a) ~ P(revealed tokens > j | x_j = a).
        let mut backward = vec![vec![1.0; v]; self.len];
        for j in (0..self.len - 1).rev() {
            for a in 0..v {
                let mut acc = 0.0;
                for b in 0..v {
                    acc += self.transition[a][b] * obs(j + 1, b) * backward[j + 1][b];
                }
                backward[j][a] = acc;
            }
            if normalize(&mut backward[j]).is_none() {
                return Err(WorldError::UndefinedConditional {
                    position: first_masked,
                });
            }
        }
        let mut out = Vec::new();
        for i in 0..self.len {
            if z[i] != mask {
                continue;
            }
            let mut probs: Vec<f64> = (0..v).map(|a| forward[i][a] * backward[i][a]).collect();
            if normalize(&mut probs).is_none() {
                return Err(WorldError::UndefinedConditional { position: i });
            }
            out.push(OracleConditional { position: i, probs });
        }
        Ok(out)
    }

    /// Marginal probability of the revealed tokens of `z` (masked positions
    /// summed out): the normalizer of the conditional oracle.
    pub fn context_prob(&self, z: &[Token]) -> f64 {
        debug_assert_eq!(z.len(), self.len);
        let mask = self.vocab.mask_id();
        let v = self.vocab.v as usize;
        let obs = |j: usize, a: usize| -> f64 {
            if z[j] == mask {
                1.0
            } else if (z[j] - 1) as usize == a {
                1.0
            } else {
                0.0
            }
        };
        let mut f: Vec<f64> = (0..v).map(|a| self.initial[a] * obs(0, a)).collect();
        for j in 1..self.len {
            let mut next = vec![0.0; v];
            for b in 0..v {
                let mut acc = 0.0;
                for a in 0..v {
                    acc += f[a] * self.transition[a][b];
                }
                next[b] = acc * obs(j, b);
            }
            f = next;
        }
        f.iter().sum()
    }

    /// Mutual information I(X^i; X^j) in nats, i < j, from the exact pair
    /// marginal.
    pub fn mutual_information(&self, i: usize, j: usize) -> f64 {
        assert!(i < j && j < self.len);
        let v = self.vocab.v as usize;
        let mi = self.position_marginal(i);
        // Power of the transition matrix over the gap.
        let mut gap = identity(v);
        for _ in 0..(j - i) {
            gap = mat_mul(&gap, &self.transition);
        }
        let mut info = 0.0;
        let mut mj = vec![0.0; v];
        for a in 0..v {
            for b in 0..v {
                mj[b] += mi[a] * gap[a][b];
            }
        }
        for a in 0..v {
            for b in 0..v {
                let p = mi[a] * gap[a][b];
                if p > 0.0 {
                    info += p * (p / (mi[a] * mj[b])).ln();
                }
            }
        }
        info
    }

    /// All sequences with positive probability, paired with exact joint
    /// probabilities. Intended for small worlds; asserts `V^L <= 2^22`.
    pub fn enumerate_support(&self) -> Vec<(Vec<Token>, f64)> {
        let v = self.vocab.v as usize;
        let total = (v as f64).powi(self.len as i32);
        assert!(total <= (1 << 22) as f64, "V^L too large to enumerate");
        let mut out = Vec::new();
        let mut x: Vec<Token> = vec![1; self.len];
        loop {
            let p = self.joint_prob(&x);
            if p > 0.0 {
                out.push((x.clone(), p));
            }
            // Odometer increment.
            let mut j = 0;
            loop {
                if j == self.len {
                    return out;
                }
                if (x[j] as usize) < v {
                    x[j] += 1;
                    break;
                }
                x[j] = 1;
                j += 1;
            }
        }
    }

    pub fn to_json(&self) -> WorldJson {
        WorldJson {
            v: self.vocab.v,
            l: self.len,
            lambda: self.lambda,
            initial: self.initial.clone(),
            transition: self.transition.clone(),
        }
    }

    /// Rebuilds a world from dumped (already blended) matrices.
    pub fn from_json(json: &WorldJson) -> Result<Self, WorldError> {
        let vocab =
            VocabSpec::new(json.v).map_err(|e| WorldError::InvalidWorld(e.to_string()))?;
        let mut w = MarkovWorld::new(vocab, json.l, &json.initial, &json.transition, 1.0)?;
        w.lambda = json.lambda;
        Ok(w)
    }

    /// Parses `world:markov,V=4,L=12,lambda=0.8,seed=7`.
    pub fn parse_literal(s: &str) -> Result<Self, WorldError> {
        let body = s
            .trim()
            .strip_prefix("world:markov,")
            .ok_or_else(|| WorldError::Parse(s.to_string()))?;
        let (mut v, mut l, mut lambda, mut seed) = (None, None, None, None);
        for part in body.split(',') {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| WorldError::Parse(s.to_string()))?;
            match key.trim() {
                "V" => v = Some(val.trim().parse::<u16>().map_err(|_| WorldError::Parse(s.into()))?),
                "L" => l = Some(val.trim().parse::<usize>().map_err(|_| WorldError::Parse(s.into()))?),
                "lambda" => {
                    lambda = Some(val.trim().parse::<f64>().map_err(|_| WorldError::Parse(s.into()))?)
                }
                "seed" => {
                    seed = Some(val.trim().parse::<u64>().map_err(|_| WorldError::Parse(s.into()))?)
                }
                _ => return Err(WorldError::Parse(s.to_string())),
            }
        }
        match (v, l, lambda, seed) {
            (Some(v), Some(l), Some(lambda), Some(seed)) => {
                let vocab =
                    VocabSpec::new(v).map_err(|e| WorldError::InvalidWorld(e.to_string()))?;
                MarkovWorld::seeded(vocab, l, lambda, seed)
            }
            _ => Err(WorldError::Parse(s.to_string())),
        }
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), WorldError> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(WorldError::InvalidWorld(format!("{what} has bad entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(WorldError::InvalidWorld(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(())
}

fn random_distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let raw: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.0f64..1.0).ln_1p_neg()).collect();
    let total: f64 = raw.iter().sum();
    let mut out: Vec<f64> = raw.iter().map(|&x| x / total).collect();
    // Force the sum to exactly 1 against rounding drift.
    let correction: f64 = 1.0 - out.iter().sum::<f64>();
    out[0] += correction;
    out
}

trait Ln1pNeg {
    fn ln_1p_neg(self) -> f64;
}

impl Ln1pNeg for f64 {
    // Exponential draw from a uniform in [0, 1): -ln(1 - u).
    fn ln_1p_neg(self) -> f64 {
        (1.0 - self).ln()
    }
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

fn entropy_of(p: &[f64]) -> f64 {
    p.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum()
}

fn normalize(p: &mut [f64]) -> Option<f64> {
    let total: f64 = p.iter().sum();
    if total <= 0.0 {
        return None;
    }
    for x in p.iter_mut() {
        *x /= total;
    }
    Some(total)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptor::masked_positions;

    fn iid_uniform(v: u16, l: usize) -> MarkovWorld {
        MarkovWorld::seeded(VocabSpec::new(v).unwrap(), l, 0.0, 1).unwrap()
    }

    /// Enumeration-based conditional: the independent oracle for
    /// forward-backward.
    fn conditional_by_enumeration(w: &MarkovWorld, z: &[Token], i: usize) -> Vec<f64> {
        let mask = w.vocab().mask_id();
        let v = w.vocab().v as usize;
        let mut probs = vec![0.0; v];
        for (x, p) in w.enumerate_support() {
            let compatible = z
                .iter()
                .zip(&x)
                .all(|(&zz, &xx)| zz == mask || zz == xx);
            if compatible {
                probs[(x[i] - 1) as usize] += p;
            }
        }
        let total: f64 = probs.iter().sum();
        probs.iter().map(|&p| p / total).collect()
    }

    #[test]
    fn joint_prob_of_iid_uniform_is_v_to_minus_l() {
        let w = iid_uniform(3, 4);
        assert!((w.joint_prob(&[1, 2, 3, 1]) - (1.0f64 / 81.0)).abs() < 1e-15);
    }

    #[test]
    fn joint_prob_worked_example() {
        let vocab = VocabSpec::new(2).unwrap();
        let w = MarkovWorld::new(
            vocab,
            2,
            &[1.0, 0.0],
            &[vec![0.9, 0.1], vec![0.2, 0.8]],
            1.0,
        )
        .unwrap();
        assert!((w.joint_prob(&[1, 1]) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn joint_prob_sums_to_one_over_support() {
        let w = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 7, 0.8, 5).unwrap();
        let total: f64 = w.enumerate_support().iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12, "total={total}");
    }

    #[test]
    fn entropy_of_iid_uniform() {
        let w = iid_uniform(4, 5);
        assert!((w.entropy() - 5.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_of_deterministic_chain_is_zero() {
        let vocab = VocabSpec::new(3).unwrap();
        let w = MarkovWorld::deterministic(vocab, 6, 2, &[2, 3, 1]).unwrap();
        assert_eq!(w.entropy(), 0.0);
    }

    #[test]
    fn entropy_matches_enumeration() {
        let w = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 6, 0.7, 11).unwrap();
        let direct: f64 = w
            .enumerate_support()
            .iter()
            .map(|(_, p)| -p * p.ln())
            .sum();
        assert!((w.entropy() - direct).abs() < 1e-10);
    }

    #[test]
    fn marginal_at_first_position_is_initial() {
        let w = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 5, 0.9, 3).unwrap();
        assert_eq!(w.position_marginal(0), w.initial().to_vec());
    }

    #[test]
    fn marginals_of_iid_uniform_are_flat() {
        let w = iid_uniform(4, 6);
        for i in 0..6 {
            for &p in &w.position_marginal(i) {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stationary_initial_is_a_fixed_point() {
        // Power-iterate the effective transition to its stationary vector,
        // then rebuild the world with that initial.
        let vocab = VocabSpec::new(3).unwrap();
        let base = MarkovWorld::seeded(vocab, 8, 0.85, 17).unwrap();
        let mut pi = vec![1.0 / 3.0; 3];
        for _ in 0..500 {
            pi = base.step(&pi);
        }
        let w = MarkovWorld::new(vocab, 8, &pi, base.transition(), 1.0).unwrap();
        for i in 0..8 {
            let m = w.position_marginal(i);
            for (a, &p) in m.iter().enumerate() {
                assert!((p - pi[a]).abs() < 1e-9, "i={i}, a={a}");
            }
        }
    }

    #[test]
    fn conditional_fully_masked_iid_uniform_is_flat() {
        let w = iid_uniform(3, 4);
        let mask = w.vocab().mask_id();
        let z = vec![mask; 4];
        let c = w.conditional(&z, 2).unwrap();
        for &p in &c.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_in_deterministic_chain_is_point_mass() {
        let vocab = VocabSpec::new(3).unwrap();
        let w = MarkovWorld::deterministic(vocab, 4, 1, &[2, 3, 1]).unwrap();
        // Chain is 1, 2, 3, 1; reveal neighbors of position 1.
        let mask = vocab.mask_id();
        let z = vec![1, mask, 3, mask];
        let c = w.conditional(&z, 1).unwrap();
        assert_eq!(c.probs, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn conditional_matches_enumeration_exhaustively() {
        // Every context and masked target on a V=3, L=6 world.
        let w = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 6, 0.75, 23).unwrap();
        let mask = w.vocab().mask_id();
        let v = w.vocab().v as usize;
        for pattern in 0u32..(1 << 6) {
            if pattern == 0 {
                continue; // nothing masked
            }
            let revealed: Vec<usize> = (0..6).filter(|j| pattern & (1 << j) == 0).collect();
            // Every assignment of revealed values.
            let mut assignment = vec![0usize; revealed.len()];
            loop {
                let mut z: Vec<Token> = vec![mask; 6];
                for (slot, &pos) in revealed.iter().enumerate() {
                    z[pos] = (assignment[slot] + 1) as Token;
                }
                for i in masked_positions(&z, w.vocab()) {
                    let fb = w.conditional(&z, i).unwrap();
                    let en = conditional_by_enumeration(&w, &z, i);
                    for a in 0..v {
                        assert!(
                            (fb.probs[a] - en[a]).abs() < 1e-12,
                            "pattern={pattern:06b} i={i} a={a}"
                        );
                    }
                }
                // Next assignment.
                let mut s = 0;
                loop {
                    if s == assignment.len() {
                        break;
                    }
                    if assignment[s] + 1 < v {
                        assignment[s] += 1;
                        break;
                    }
                    assignment[s] = 0;
                    s += 1;
                }
                if s == assignment.len() {
                    break;
                }
            }
        }
    }

    #[test]
    fn context_prob_matches_enumeration() {
        let w = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 5, 0.7, 31).unwrap();
        let mask = w.vocab().mask_id();
        let z = vec![2, mask, mask, 1, mask];
        let direct: f64 = w
            .enumerate_support()
            .iter()
            .filter(|(x, _)| z.iter().zip(x).all(|(&zz, &xx)| zz == mask || zz == xx))
            .map(|(_, p)| p)
            .sum();
        assert!((w.context_prob(&z) - direct).abs() < 1e-13);
        // Fully masked context has probability one.
        assert!((w.context_prob(&vec![mask; 5]) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn zero_probability_context_errors() {
        let vocab = VocabSpec::new(3).unwrap();
        let w = MarkovWorld::deterministic(vocab, 4, 1, &[2, 3, 1]).unwrap();
        let mask = vocab.mask_id();
        // The chain starting at 1 can never produce token 3 at position 1.
        let z = vec![1, 3, mask, mask];
        assert!(matches!(
            w.conditional(&z, 2),
            Err(WorldError::UndefinedConditional { .. })
        ));
    }

    #[test]
    fn unmasked_target_errors() {
        let w = iid_uniform(3, 4);
        let z = vec![1, 2, 3, 1];
        assert!(matches!(
            w.conditional(&z, 1),
            Err(WorldError::BadPosition { .. })
        ));
    }

    #[test]
    fn mutual_information_decays_with_distance() {
        let w = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 10, 0.9, 7).unwrap();
        let mut prev = f64::INFINITY;
        for j in 1..10 {
            let info = w.mutual_information(0, j);
            assert!(info <= prev + 1e-12, "j={j}: {info} > {prev}");
            assert!(info >= -1e-12);
            prev = info;
        }
        // Flat world carries no information at any distance.
        let flat = iid_uniform(3, 10);
        for j in 1..10 {
            assert!(flat.mutual_information(0, j).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_matches_joint_distribution() {
        let w = MarkovWorld::seeded(VocabSpec::new(2).unwrap(), 3, 0.8, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let draws = 200_000;
        let mut hist = std::collections::HashMap::new();
        for _ in 0..draws {
            let x = w.sample(&mut rng);
            *hist.entry(x).or_insert(0u64) += 1;
        }
        let mut chi2 = 0.0;
        for (x, p) in w.enumerate_support() {
            let e = p * draws as f64;
            let o = *hist.get(&x).unwrap_or(&0) as f64;
            chi2 += (o - e) * (o - e) / e;
        }
        // 7 dof, crit ~29.9 at p=1e-4.
        assert!(chi2 < 29.9, "chi2={chi2}");
    }

    #[test]
    fn world_json_round_trip() {
        let w = MarkovWorld::seeded(VocabSpec::new(4).unwrap(), 12, 0.8, 7).unwrap();
        let json = serde_json::to_string(&w.to_json()).unwrap();
        let parsed: WorldJson = serde_json::from_str(&json).unwrap();
        let back = MarkovWorld::from_json(&parsed).unwrap();
        assert_eq!(back.initial(), w.initial());
        assert_eq!(back.transition(), w.transition());
        assert!((back.entropy() - w.entropy()).abs() < 1e-12);
    }

    #[test]
    fn world_literal_parses() {
        let w = MarkovWorld::parse_literal("world:markov,V=4,L=12,lambda=0.8,seed=7").unwrap();
        assert_eq!(w.vocab().v, 4);
        assert_eq!(w.len(), 12);
        assert!((w.lambda() - 0.8).abs() < 1e-15);
        assert!(MarkovWorld::parse_literal("world:markov,V=4").is_err());
        assert!(MarkovWorld::parse_literal("world:hmm,V=4,L=2,lambda=1,seed=0").is_err());
    }

    #[test]
    fn rejects_bad_matrices() {
        let vocab = VocabSpec::new(2).unwrap();
        let flat = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let lopsided = vec![vec![0.9, 0.2], vec![0.5, 0.5]];
        assert!(MarkovWorld::new(vocab, 3, &[0.6, 0.6], &flat, 1.0).is_err());
        assert!(MarkovWorld::new(vocab, 3, &[0.5, 0.5], &lopsided, 1.0).is_err());
        assert!(MarkovWorld::new(vocab, 3, &[0.5, 0.5], &flat, 1.5).is_err());
    }
}

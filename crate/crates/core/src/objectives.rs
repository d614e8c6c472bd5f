//! Loss estimators and exact loss evaluators: the weighted masked-diffusion
//! NELBO, the unweighted tilted-law objective, the importance-sampled
//! variant, context-level probes, next-token losses, and the exact
//! entropy-plus-KL decomposition.
//!
//! Monte-Carlo estimators report per-sequence values (sum over masked
//! targets) with a standard error across the batch; exact evaluators
//! enumerate every reachable context of a small world and report zero
//! standard error.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corruptor::{self, clamp_time, CorruptError, Scheduler};
use crate::maskmath::{self, MaskMathError};
use crate::numeric;
use crate::predictor::{Predictor, PredictorError, ContextFamily};
use crate::timelaw::{LawError, TimeLaw};
use crate::worldmodel::{MarkovWorld, WorldError};
use crate::Token;

#[derive(Debug, Clone, Error)]
pub enum ObjectiveError {
    #[error("config error: {0}")]
    Config(String),
    #[error("enumeration cap exceeded: V^L * 2^L = {size} > {cap}")]
    CapExceeded { size: f64, cap: u64 },
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Corrupt(#[from] CorruptError),
    #[error(transparent)]
    Law(#[from] LawError),
    #[error(transparent)]
    MaskMath(#[from] MaskMathError),
}

/// A loss value in nats with its Monte-Carlo standard error (zero for exact
/// evaluation), the number of target tokens scored, and how many sampled
/// times hit the clamp window.
#[derive(Debug, Clone, Copy)]
pub struct LossEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_tokens: u64,
    pub clamped: u64,
}

impl LossEstimate {
    fn exact(value: f64, n_tokens: u64) -> Self {
        LossEstimate {
            value,
            std_error: 0.0,
            n_tokens,
            clamped: 0,
        }
    }

    fn from_samples(samples: &[f64], n_tokens: u64, clamped: u64) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std_error = if samples.len() > 1 {
            let var = samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        LossEstimate {
            value: mean,
            std_error,
            n_tokens,
            clamped,
        }
    }
}

/// Exact split of a context-level loss into irreducible conditional entropy
/// and the model's KL gap.
#[derive(Debug, Clone, Copy)]
pub struct Decomposition {
    pub conditional_entropy: f64,
    pub kl_gap: f64,
}

impl Decomposition {
    pub fn total(&self) -> f64 {
        self.conditional_entropy + self.kl_gap
    }
}

/// Where training sequences come from: an exact world sampler or a fixed
/// corpus drawn from uniformly.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    World(&'a MarkovWorld),
    Corpus {
        sequences: &'a [Vec<Token>],
        vocab: crate::corruptor::VocabSpec,
    },
}

impl<'a> Source<'a> {
    pub fn vocab(&self) -> crate::corruptor::VocabSpec {
        match self {
            Source::World(w) => w.vocab(),
            Source::Corpus { vocab, .. } => *vocab,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Source::World(w) => w.len(),
            Source::Corpus { sequences, .. } => sequences.first().map_or(0, |s| s.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<Token> {
        match self {
            Source::World(w) => w.sample(rng),
            Source::Corpus { sequences, .. } => {
                sequences[rng.gen_range(0..sequences.len())].clone()
            }
        }
    }
}

/// Default cap on `V^L * 2^L` for exact evaluators.
pub const EXACT_CAP: u64 = 1 << 22;

fn check_cap(world: &MarkovWorld, cap: u64) -> Result<(), ObjectiveError> {
    let size =
        (world.vocab().v as f64).powi(world.len() as i32) * 2f64.powi(world.len() as i32);
    if size > cap as f64 {
        return Err(ObjectiveError::CapExceeded { size, cap });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Monte-Carlo estimators
// ---------------------------------------------------------------------------

/// Stratified Monte-Carlo masked-diffusion loss.
///
/// Draws one time per stratum of `law`, corrupts one sequence per time, and
/// scores the masked targets. With `weighted` the per-sequence sum carries
/// the NELBO prefactor (the theoretical bound; pair with the uniform law);
/// without it this is the plain tilted-law objective.
pub fn mc_mdm_loss(
    predictor: &Predictor,
    source: &Source,
    scheduler: &Scheduler,
    law: &TimeLaw,
    weighted: bool,
    batch: usize,
    seed: u64,
) -> Result<LossEstimate, ObjectiveError> {
    if predictor.family() != &ContextFamily::Masked {
        return Err(ObjectiveError::Config(
            "mdm loss requires a masked-family predictor".into(),
        ));
    }
    let vocab = source.vocab();
    let times = law.sample_stratified(batch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut samples = Vec::with_capacity(batch);
    let mut n_tokens = 0u64;
    let mut clamped = 0u64;
    for &raw_t in &times.samples {
        let t = clamp_time(raw_t);
        if t != raw_t {
            clamped += 1;
        }
        let x = source.draw(&mut rng);
        let z = corruptor::corrupt(&x, vocab, t, scheduler, rng.gen());
        let mut total = 0.0;
        if z.iter().any(|&tok| tok == vocab.mask_id()) {
            for dist in predictor.predict(&z)? {
                let p = dist.probs[(x[dist.position] - 1) as usize];
                total += -p.max(f64::MIN_POSITIVE).ln();
                n_tokens += 1;
            }
        }
        if weighted {
            total *= scheduler.nelbo_weight(t)?;
        }
        samples.push(total);
    }
    Ok(LossEstimate::from_samples(&samples, n_tokens, clamped))
}

/// Importance-sampled variant: times stay uniform under the linear
/// scheduler, and each sequence's loss is reweighted by the target density.
/// With `drop_weight` (the default form) the NELBO prefactor is dropped so
/// the estimator matches the unweighted tilted objective in expectation;
/// otherwise the per-sample factor is `density / t`.
pub fn importance_loss(
    predictor: &Predictor,
    source: &Source,
    scheduler: &Scheduler,
    target_law: &TimeLaw,
    drop_weight: bool,
    batch: usize,
    seed: u64,
) -> Result<LossEstimate, ObjectiveError> {
    if scheduler != &Scheduler::Linear {
        return Err(ObjectiveError::Config(
            "importance sampling keeps the canonical linear scheduler".into(),
        ));
    }
    if !target_law.is_continuous() {
        return Err(ObjectiveError::Config(
            "importance target law must be continuous".into(),
        ));
    }
    if predictor.family() != &ContextFamily::Masked {
        return Err(ObjectiveError::Config(
            "mdm loss requires a masked-family predictor".into(),
        ));
    }
    let vocab = source.vocab();
    let times = TimeLaw::Uniform.sample_stratified(batch, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut samples = Vec::with_capacity(batch);
    let mut n_tokens = 0u64;
    let mut clamped = 0u64;
    for &raw_t in &times.samples {
        let t = clamp_time(raw_t);
        if t != raw_t {
            clamped += 1;
        }
        let x = source.draw(&mut rng);
        let z = corruptor::corrupt(&x, vocab, t, scheduler, rng.gen());
        let mut total = 0.0;
        if z.iter().any(|&tok| tok == vocab.mask_id()) {
            for dist in predictor.predict(&z)? {
                let p = dist.probs[(x[dist.position] - 1) as usize];
                total += -p.max(f64::MIN_POSITIVE).ln();
                n_tokens += 1;
            }
        }
        let mut weight = target_law.density(t)?;
        if !drop_weight {
            weight /= t;
        }
        samples.push(weight * total);
    }
    Ok(LossEstimate::from_samples(&samples, n_tokens, clamped))
}

/// Monte-Carlo context-level probe: patterns with exactly `L - n_c` masks
/// (or the family's deterministic prefix pattern), one uniformly chosen
/// target per sample.
pub fn context_level_loss(
    predictor: &Predictor,
    source: &Source,
    n_c: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LossEstimate, ObjectiveError> {
    let l = source.len();
    if n_c >= l {
        return Err(ObjectiveError::Config(format!(
            "context level {n_c} outside 0..{l}"
        )));
    }
    let vocab = source.vocab();
    let mask = vocab.mask_id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = source.draw(&mut rng);
        let (z, target) = match predictor.family() {
            ContextFamily::Masked => {
                let z = corruptor::corrupt_exact_count(&x, vocab, l - n_c, rng.gen());
                let masked = corruptor::masked_positions(&z, vocab);
                let target = masked[rng.gen_range(0..masked.len())];
                (z, target)
            }
            family => {
                let order = family.order(l).expect("prefix family");
                let mut z: Vec<Token> = vec![mask; l];
                for &pos in &order[..n_c] {
                    z[pos] = x[pos];
                }
                (z, order[n_c])
            }
        };
        // Prefix-family tabular/net predictors consume the clean sequence;
        // the masked encoding above is only how the context is keyed.
        let probs = match predictor.family() {
            ContextFamily::Masked => predictor.predict_at(&z, target)?,
            _ => predictor
                .predict(&x)?
                .into_iter()
                .find(|d| d.position == target)
                .map(|d| d.probs)
                .expect("target rank exists"),
        };
        let p = probs[(x[target] - 1) as usize];
        samples.push(-p.max(f64::MIN_POSITIVE).ln());
    }
    Ok(LossEstimate::from_samples(&samples, n_samples as u64, 0))
}

/// Monte-Carlo validation NELBO via the time-agnostic rewriting: the sum
/// over context levels of the level loss, estimated with an equal sample
/// count per level (one uniform pattern and one uniform target each).
/// Far lower variance than the time-domain weighted estimator, and the
/// same expectation.
pub fn mc_nelbo_level_stratified(
    predictor: &Predictor,
    source: &Source,
    samples_per_level: usize,
    seed: u64,
) -> Result<LossEstimate, ObjectiveError> {
    if predictor.family() != &ContextFamily::Masked {
        return Err(ObjectiveError::Config(
            "mdm loss requires a masked-family predictor".into(),
        ));
    }
    let l = source.len();
    let vocab = source.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut value = 0.0;
    let mut var = 0.0;
    let mut n_tokens = 0u64;
    for n_c in 0..l {
        let mut samples = Vec::with_capacity(samples_per_level);
        for _ in 0..samples_per_level {
            let x = source.draw(&mut rng);
            let z = corruptor::corrupt_exact_count(&x, vocab, l - n_c, rng.gen());
            let masked = corruptor::masked_positions(&z, vocab);
            let target = masked[rng.gen_range(0..masked.len())];
            let probs = predictor.predict_at(&z, target)?;
            let p = probs[(x[target] - 1) as usize];
            samples.push(-p.max(f64::MIN_POSITIVE).ln());
            n_tokens += 1;
        }
        let est = LossEstimate::from_samples(&samples, samples.len() as u64, 0);
        value += est.value;
        var += est.std_error * est.std_error;
    }
    Ok(LossEstimate {
        value,
        std_error: var.sqrt(),
        n_tokens,
        clamped: 0,
    })
}

/// Next-token loss over a batch of clean sequences, summed over all `L`
/// positions in the predictor's generation order.
pub fn arm_loss(predictor: &Predictor, batch: &[Vec<Token>]) -> Result<LossEstimate, ObjectiveError> {
    if predictor.family() == &ContextFamily::Masked {
        return Err(ObjectiveError::Config(
            "arm loss requires a prefix-family predictor".into(),
        ));
    }
    let mut samples = Vec::with_capacity(batch.len());
    let mut n_tokens = 0u64;
    for x in batch {
        let mut total = 0.0;
        for dist in predictor.predict(x)? {
            let p = dist.probs[(x[dist.position] - 1) as usize];
            total += -p.max(f64::MIN_POSITIVE).ln();
            n_tokens += 1;
        }
        samples.push(total);
    }
    Ok(LossEstimate::from_samples(&samples, n_tokens, 0))
}

// ---------------------------------------------------------------------------
// Exact evaluators
// ---------------------------------------------------------------------------

/// Per-level exact cross-entropy and conditional entropy for a
/// masked-family predictor, indexed by the number of context tokens.
#[derive(Debug, Clone)]
pub struct LevelProfile {
    /// E[-log p_model] per target at each context level.
    pub cross_entropy: Vec<f64>,
    /// Irreducible conditional entropy at each context level.
    pub entropy: Vec<f64>,
}

impl LevelProfile {
    pub fn kl_gap(&self, n_c: usize) -> f64 {
        self.cross_entropy[n_c] - self.entropy[n_c]
    }

    /// Sum of per-level cross-entropies: the exact masked-diffusion loss.
    pub fn total_cross_entropy(&self) -> f64 {
        self.cross_entropy.iter().sum()
    }
}

/// Exact per-level profile of a masked-family predictor by enumerating
/// every pattern and every revealed assignment with positive probability.
pub fn masked_level_profile(
    predictor: &Predictor,
    world: &MarkovWorld,
    cap: u64,
) -> Result<LevelProfile, ObjectiveError> {
    if predictor.family() != &ContextFamily::Masked {
        return Err(ObjectiveError::Config(
            "level profile requires a masked-family predictor".into(),
        ));
    }
    check_cap(world, cap)?;
    let l = world.len();
    let v = world.vocab().v;
    let mask = world.vocab().mask_id();
    let binom: Vec<f64> = (0..=l).map(|n| numeric::ln_binomial(l, n).exp()).collect();
    let mut cross_entropy = vec![0.0; l];
    let mut entropy = vec![0.0; l];
    for pattern in 1u32..(1u32 << l) {
        let n_masks = pattern.count_ones() as usize;
        let n_c = l - n_masks;
        let revealed: Vec<usize> = (0..l).filter(|j| pattern & (1 << j) == 0).collect();
        let pattern_weight = 1.0 / binom[n_masks];
        for_each_assignment(v, revealed.len(), |vals| {
            let mut z: Vec<Token> = vec![mask; l];
            for (slot, &pos) in revealed.iter().enumerate() {
                z[pos] = vals[slot];
            }
            let prob = world.context_prob(&z);
            if prob <= 0.0 {
                return;
            }
            let conds = world.masked_conditionals(&z).expect("positive context");
            let dists = predictor.predict(&z).expect("valid context");
            let mut ce = 0.0;
            let mut h = 0.0;
            for (cond, dist) in conds.iter().zip(&dists) {
                debug_assert_eq!(cond.position, dist.position);
                for a in 0..v as usize {
                    let po = cond.probs[a];
                    if po > 0.0 {
                        ce += po * -dist.probs[a].max(f64::MIN_POSITIVE).ln();
                        h += po * -po.ln();
                    }
                }
            }
            let w = prob * pattern_weight / n_masks as f64;
            cross_entropy[n_c] += w * ce;
            entropy[n_c] += w * h;
        });
    }
    Ok(LevelProfile {
        cross_entropy,
        entropy,
    })
}

/// Exact masked-diffusion loss: the sum over context levels of the exact
/// per-target cross-entropy (the time-agnostic rewriting of the weighted
/// bound). Zero standard error.
pub fn exact_mdm_loss(
    predictor: &Predictor,
    world: &MarkovWorld,
    cap: u64,
) -> Result<LossEstimate, ObjectiveError> {
    let profile = masked_level_profile(predictor, world, cap)?;
    Ok(LossEstimate::exact(
        profile.total_cross_entropy(),
        world.len() as u64,
    ))
}

/// Exact value of the unweighted tilted-law objective: the level losses
/// reweighted by the law-induced mask-count distribution, counting every
/// masked target.
pub fn exact_masked_loss_under_law(
    predictor: &Predictor,
    world: &MarkovWorld,
    law: &TimeLaw,
    cap: u64,
) -> Result<f64, ObjectiveError> {
    let profile = masked_level_profile(predictor, world, cap)?;
    let l = world.len();
    let w = maskmath::mask_count_law(l, law)?;
    // Sum over mask counts n of n * w(n) * per-target loss at N_c = L - n.
    Ok((1..=l)
        .map(|n| n as f64 * w[n] * profile.cross_entropy[l - n])
        .sum())
}

/// Exact expectation of the importance-sampled estimator by quadrature over
/// the uniform time axis (the route that does not pass through mask-count
/// space).
pub fn exact_importance_expectation(
    predictor: &Predictor,
    world: &MarkovWorld,
    target_law: &TimeLaw,
    drop_weight: bool,
    cap: u64,
) -> Result<f64, ObjectiveError> {
    if !target_law.is_continuous() {
        return Err(ObjectiveError::Config(
            "importance target law must be continuous".into(),
        ));
    }
    let profile = masked_level_profile(predictor, world, cap)?;
    let l = world.len();
    // m(t) = E[sum over masked targets] at time t, a Bernstein polynomial in
    // the per-level sums.
    let m = |t: f64| -> f64 {
        (1..=l)
            .map(|n| {
                let ln_w = numeric::ln_binomial(l, n)
                    + (n as f64) * t.max(1e-300).ln()
                    + ((l - n) as f64) * (1.0 - t).max(1e-300).ln();
                ln_w.exp() * n as f64 * profile.cross_entropy[l - n]
            })
            .sum()
    };
    let g = |t: f64| -> f64 {
        let density = target_law.density(t).expect("continuous law");
        let base = if drop_weight { 1.0 } else { 1.0 / t.max(1e-12) } * density;
        base * m(t)
    };
    Ok(numeric::integrate(&g, 0.0, 1.0, 1e-10, &[0.5]).map_err(MaskMathError::from)?)
}

/// Exact next-token loss (sum over all positions in generation order) under
/// the world distribution.
pub fn exact_arm_loss(
    predictor: &Predictor,
    world: &MarkovWorld,
    cap: u64,
) -> Result<LossEstimate, ObjectiveError> {
    if predictor.family() == &ContextFamily::Masked {
        return Err(ObjectiveError::Config(
            "arm loss requires a prefix-family predictor".into(),
        ));
    }
    check_cap(world, cap)?;
    let mut total = 0.0;
    for (x, prob) in world.enumerate_support() {
        let mut seq_loss = 0.0;
        for dist in predictor.predict(&x)? {
            let p = dist.probs[(x[dist.position] - 1) as usize];
            seq_loss += -p.max(f64::MIN_POSITIVE).ln();
        }
        total += prob * seq_loss;
    }
    Ok(LossEstimate::exact(total, world.len() as u64))
}

/// Exact family loss: masked-diffusion for masked predictors, next-token
/// for prefix families.
pub fn exact_family_loss(
    predictor: &Predictor,
    world: &MarkovWorld,
    cap: u64,
) -> Result<LossEstimate, ObjectiveError> {
    match predictor.family() {
        ContextFamily::Masked => exact_mdm_loss(predictor, world, cap),
        _ => exact_arm_loss(predictor, world, cap),
    }
}

/// Exact conditional entropy and KL gap at one context level, under the
/// predictor family's own context and target sampling law.
pub fn decompose(
    predictor: &Predictor,
    world: &MarkovWorld,
    n_c: usize,
    cap: u64,
) -> Result<Decomposition, ObjectiveError> {
    let l = world.len();
    if n_c >= l {
        return Err(ObjectiveError::Config(format!(
            "context level {n_c} outside 0..{l}"
        )));
    }
    check_cap(world, cap)?;
    match predictor.family() {
        ContextFamily::Masked => {
            let profile = masked_level_profile(predictor, world, cap)?;
            Ok(Decomposition {
                conditional_entropy: profile.entropy[n_c],
                kl_gap: profile.cross_entropy[n_c] - profile.entropy[n_c],
            })
        }
        family => {
            let order = family.order(l).expect("prefix family");
            let v = world.vocab().v;
            let mask = world.vocab().mask_id();
            let target = order[n_c];
            let mut ce = 0.0;
            let mut h = 0.0;
            for_each_assignment(v, n_c, |vals| {
                let mut z: Vec<Token> = vec![mask; l];
                for (slot, &pos) in order[..n_c].iter().enumerate() {
                    z[pos] = vals[slot];
                }
                let prob = world.context_prob(&z);
                if prob <= 0.0 {
                    return;
                }
                let cond = world.conditional(&z, target).expect("positive context");
                // The model consumes a clean sequence; fill unseen slots
                // with any completion: only the prefix affects rank n_c.
                let mut x: Vec<Token> = z.iter().map(|&t| if t == mask { 1 } else { t }).collect();
                x[target] = 1;
                let dist = predictor
                    .predict(&x)
                    .expect("valid context")
                    .into_iter()
                    .find(|d| d.position == target)
                    .expect("target rank exists");
                for a in 0..v as usize {
                    let po = cond.probs[a];
                    if po > 0.0 {
                        ce += prob * po * -dist.probs[a].max(f64::MIN_POSITIVE).ln();
                        h += prob * po * -po.ln();
                    }
                }
            });
            Ok(Decomposition {
                conditional_entropy: h,
                kl_gap: ce - h,
            })
        }
    }
}

fn for_each_assignment<F: FnMut(&[Token])>(v: u16, slots: usize, mut f: F) {
    let mut vals: Vec<Token> = vec![1; slots];
    loop {
        f(&vals);
        let mut s = 0;
        loop {
            if s == slots {
                return;
            }
            if vals[s] < v {
                vals[s] += 1;
                break;
            }
            vals[s] = 1;
            s += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptor::VocabSpec;
    use crate::predictor::{fit_tabular_to_oracle, NetConfig, NetPredictor, TabularPredictor};

    fn world() -> MarkovWorld {
        MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 5, 0.8, 42).unwrap()
    }

    fn uniform_predictor(l: usize) -> Predictor {
        Predictor::Tabular(
            TabularPredictor::new(ContextFamily::Masked, VocabSpec::new(3).unwrap(), l, 1 << 23)
                .unwrap(),
        )
    }

    fn oracle_predictor(w: &MarkovWorld) -> Predictor {
        Predictor::Tabular(fit_tabular_to_oracle(w, ContextFamily::Masked, 1 << 23).unwrap())
    }

    #[test]
    fn exact_mdm_loss_of_uniform_predictor_is_l_log_v() {
        let w = world();
        let p = uniform_predictor(5);
        let e = exact_mdm_loss(&p, &w, EXACT_CAP).unwrap();
        assert!((e.value - 5.0 * 3.0f64.ln()).abs() < 1e-9, "{}", e.value);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn exact_mdm_loss_of_oracle_is_data_entropy() {
        let w = world();
        let p = oracle_predictor(&w);
        let e = exact_mdm_loss(&p, &w, EXACT_CAP).unwrap();
        assert!(
            (e.value - w.entropy()).abs() < 1e-9,
            "loss {} vs entropy {}",
            e.value,
            w.entropy()
        );
    }

    #[test]
    fn exact_arm_loss_of_oracle_is_data_entropy() {
        let w = world();
        for family in [
            ContextFamily::Prefix,
            ContextFamily::random_permutation(5, 77),
        ] {
            let p = Predictor::Tabular(
                fit_tabular_to_oracle(&w, family, 1 << 23).unwrap(),
            );
            let e = exact_arm_loss(&p, &w, EXACT_CAP).unwrap();
            assert!((e.value - w.entropy()).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_cap_refusal() {
        let big = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 12, 0.5, 1).unwrap();
        let p = Predictor::Net(
            NetPredictor::new(
                ContextFamily::Masked,
                big.vocab(),
                12,
                NetConfig { dim: 8, layers: 1 },
                0,
            )
            .unwrap(),
        );
        assert!(matches!(
            exact_mdm_loss(&p, &big, EXACT_CAP),
            Err(ObjectiveError::CapExceeded { .. })
        ));
    }

    #[test]
    fn decompose_oracle_has_zero_kl() {
        let w = world();
        let p = oracle_predictor(&w);
        for n_c in 0..5 {
            let d = decompose(&p, &w, n_c, EXACT_CAP).unwrap();
            assert!(d.kl_gap.abs() < 1e-9, "n_c={n_c}: {}", d.kl_gap);
            assert!(d.kl_gap > -1e-12);
        }
    }

    #[test]
    fn decompose_uniform_predictor_on_flat_world() {
        let flat = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 4, 0.0, 3).unwrap();
        let p = uniform_predictor(4);
        for n_c in 0..4 {
            let d = decompose(&p, &flat, n_c, EXACT_CAP).unwrap();
            assert!((d.conditional_entropy - 3.0f64.ln()).abs() < 1e-10);
            assert!(d.kl_gap.abs() < 1e-10);
        }
    }

    #[test]
    fn decompose_sums_to_exact_context_level_loss_for_random_predictor() {
        let w = world();
        let mut p = uniform_predictor(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for x in p.params_mut() {
            *x = rng.gen_range(-1.0..1.0);
        }
        let profile = masked_level_profile(&p, &w, EXACT_CAP).unwrap();
        for n_c in 0..5 {
            let d = decompose(&p, &w, n_c, EXACT_CAP).unwrap();
            assert!((d.total() - profile.cross_entropy[n_c]).abs() < 1e-9);
            assert!(d.kl_gap >= 0.0);
        }
    }

    #[test]
    fn mc_mdm_loss_matches_exact_weighted() {
        let w = world();
        let p = oracle_predictor(&w);
        let exact = exact_mdm_loss(&p, &w, EXACT_CAP).unwrap();
        let mc = mc_mdm_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &TimeLaw::Uniform,
            true,
            20_000,
            7,
        )
        .unwrap();
        assert!(
            (mc.value - exact.value).abs() < 4.0 * mc.std_error,
            "mc {} +- {} vs exact {}",
            mc.value,
            mc.std_error,
            exact.value
        );
    }

    #[test]
    fn mc_mdm_loss_matches_exact_unweighted_bell() {
        let w = world();
        let p = uniform_predictor(5);
        let law = TimeLaw::trunc_gaussian(0.5, 0.1).unwrap();
        let exact = exact_masked_loss_under_law(&p, &w, &law, EXACT_CAP).unwrap();
        let mc = mc_mdm_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &law,
            false,
            20_000,
            11,
        )
        .unwrap();
        assert!(
            (mc.value - exact).abs() < 4.0 * mc.std_error.max(1e-12),
            "mc {} +- {} vs exact {}",
            mc.value,
            mc.std_error,
            exact
        );
    }

    #[test]
    fn unweighted_uniform_predictor_closed_form() {
        // Expected masked count per sequence is L * E[t]; each masked token
        // contributes log V.
        let w = world();
        let p = uniform_predictor(5);
        let law = TimeLaw::dirac(0.4).unwrap();
        let exact = exact_masked_loss_under_law(&p, &w, &law, EXACT_CAP).unwrap();
        assert!((exact - 5.0 * 0.4 * 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn importance_expectation_matches_bell_objective() {
        let w = world();
        let p = oracle_predictor(&w);
        let law = TimeLaw::trunc_gaussian(0.5, 0.1).unwrap();
        let via_counts = exact_masked_loss_under_law(&p, &w, &law, EXACT_CAP).unwrap();
        let via_quadrature =
            exact_importance_expectation(&p, &w, &law, true, EXACT_CAP).unwrap();
        assert!(
            (via_counts - via_quadrature).abs() < 1e-6,
            "{via_counts} vs {via_quadrature}"
        );
    }

    #[test]
    fn importance_estimator_is_consistent() {
        let w = world();
        let p = uniform_predictor(5);
        let law = TimeLaw::trunc_gaussian(0.5, 0.1).unwrap();
        let exact = exact_masked_loss_under_law(&p, &w, &law, EXACT_CAP).unwrap();
        let est = importance_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &law,
            true,
            20_000,
            3,
        )
        .unwrap();
        assert!(
            (est.value - exact).abs() < 4.0 * est.std_error,
            "est {} +- {} vs exact {}",
            est.value,
            est.std_error,
            exact
        );
    }

    #[test]
    fn importance_flat_target_reduces_to_uniform_unweighted() {
        let w = world();
        let p = uniform_predictor(5);
        let a = importance_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &TimeLaw::Uniform,
            true,
            512,
            21,
        )
        .unwrap();
        let b = mc_mdm_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &TimeLaw::Uniform,
            false,
            512,
            21,
        )
        .unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn importance_rejects_bad_configs() {
        let w = world();
        let p = uniform_predictor(5);
        let s = Scheduler::middle_flat(0.5, 0.1).unwrap();
        assert!(importance_loss(
            &p,
            &Source::World(&w),
            &s,
            &TimeLaw::Uniform,
            true,
            8,
            0
        )
        .is_err());
        let dirac = TimeLaw::dirac(0.5).unwrap();
        assert!(importance_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &dirac,
            true,
            8,
            0
        )
        .is_err());
    }

    #[test]
    fn context_level_loss_uniform_predictor_is_log_v() {
        let w = world();
        let p = uniform_predictor(5);
        for n_c in [0usize, 2, 4] {
            let e = context_level_loss(&p, &Source::World(&w), n_c, 200, 5).unwrap();
            assert!((e.value - 3.0f64.ln()).abs() < 1e-12);
            assert!(e.std_error < 1e-9);
        }
    }

    #[test]
    fn context_level_zero_matches_marginal_entropy_for_oracle() {
        let w = world();
        let p = oracle_predictor(&w);
        let d = decompose(&p, &w, 0, EXACT_CAP).unwrap();
        let avg_marginal_entropy: f64 = (0..5)
            .map(|i| {
                let m = w.position_marginal(i);
                m.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum::<f64>()
            })
            .sum::<f64>()
            / 5.0;
        assert!((d.total() - avg_marginal_entropy).abs() < 1e-10);
    }

    #[test]
    fn context_level_last_is_zero_for_deterministic_chain_oracle() {
        let vocab = VocabSpec::new(3).unwrap();
        let w = MarkovWorld::deterministic(vocab, 4, 1, &[2, 3, 1]).unwrap();
        let p = oracle_predictor(&w);
        let e = context_level_loss(&p, &Source::World(&w), 3, 100, 9).unwrap();
        assert!(e.value.abs() < 1e-12);
    }

    #[test]
    fn arm_loss_uniform_predictor_is_l_log_v() {
        let w = world();
        let p = Predictor::Tabular(
            TabularPredictor::new(ContextFamily::Prefix, w.vocab(), 5, 1 << 23).unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Vec<Token>> = (0..16).map(|_| w.sample(&mut rng)).collect();
        let e = arm_loss(&p, &batch).unwrap();
        assert!((e.value - 5.0 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigma_identity_equals_prefix_arm_loss() {
        let w = world();
        let prefix = Predictor::Tabular(
            fit_tabular_to_oracle(&w, ContextFamily::Prefix, 1 << 23).unwrap(),
        );
        let identity = Predictor::Tabular(
            fit_tabular_to_oracle(&w, ContextFamily::PermutedPrefix((0..5).collect()), 1 << 23)
                .unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch: Vec<Vec<Token>> = (0..8).map(|_| w.sample(&mut rng)).collect();
        let a = arm_loss(&prefix, &batch).unwrap();
        let b = arm_loss(&identity, &batch).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn level_stratified_nelbo_matches_exact() {
        let w = world();
        let mut p = uniform_predictor(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for x in p.params_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
        let exact = exact_mdm_loss(&p, &w, EXACT_CAP).unwrap();
        let mc = mc_nelbo_level_stratified(&p, &Source::World(&w), 20_000, 5).unwrap();
        assert!(
            (mc.value - exact.value).abs() < 4.0 * mc.std_error,
            "mc {} +- {} vs exact {}",
            mc.value,
            mc.std_error,
            exact.value
        );
    }

    #[test]
    fn estimator_consistency_holds_for_net_predictor() {
        let w = world();
        let p = Predictor::Net(
            NetPredictor::new(
                ContextFamily::Masked,
                w.vocab(),
                5,
                NetConfig { dim: 8, layers: 1 },
                4,
            )
            .unwrap(),
        );
        let exact = exact_mdm_loss(&p, &w, EXACT_CAP).unwrap();
        let mc = mc_mdm_loss(
            &p,
            &Source::World(&w),
            &Scheduler::Linear,
            &TimeLaw::Uniform,
            true,
            8_000,
            13,
        )
        .unwrap();
        assert!(
            (mc.value - exact.value).abs() < 4.0 * mc.std_error,
            "mc {} +- {} vs exact {}",
            mc.value,
            mc.std_error,
            exact.value
        );
    }
}

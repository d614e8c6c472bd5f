//! Training loops, experiment orchestration, per-context diagnostics,
//! gradient-similarity analyses, speedup measurement, and an ancestral
//! sampler.
//!
//! Every run is deterministic given its seed. Evaluation always scores the
//! weighted uniform-time bound (the validation NELBO), no matter which law
//! the arm trains with, so steps-to-target ratios compare like with like.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruptor::{self, clamp_time, Scheduler};
use crate::maskmath;
use crate::objectives::{
    self, masked_level_profile, ObjectiveError, Source, EXACT_CAP,
};
use crate::predictor::{
    BatchItem, ContextFamily, NetConfig, NetPredictor, Optimizer, Predictor, PredictorError,
    TabularPredictor, TABULAR_CAP_ENTRIES,
};
use crate::timelaw::TimeLaw;
use crate::worldmodel::MarkovWorld;
use crate::Token;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Which objective an arm trains with.
///
/// `weighted` selects the theoretical bound (NELBO prefactor on, uniform law
/// only); otherwise the plain tilted-law objective. `importance` keeps
/// uniform sampling and reweights losses by the target density instead.
#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub law: TimeLaw,
    pub scheduler: Scheduler,
    pub weighted: bool,
    pub importance: Option<TimeLaw>,
}

impl ObjectiveConfig {
    /// Standard weighted bound: uniform time, NELBO prefactor on.
    pub fn standard() -> Self {
        ObjectiveConfig {
            law: TimeLaw::Uniform,
            scheduler: Scheduler::Linear,
            weighted: true,
            importance: None,
        }
    }

    /// Unweighted objective under a tilted time law.
    pub fn tilted(law: TimeLaw) -> Self {
        ObjectiveConfig {
            law,
            scheduler: Scheduler::Linear,
            weighted: false,
            importance: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.weighted && self.law != TimeLaw::Uniform {
            return Err(TrainError::Config(
                "the weighted bound pairs with uniform time sampling; \
                 tilted laws drop the prefactor"
                    .into(),
            ));
        }
        if let Some(target) = &self.importance {
            if self.weighted || self.law != TimeLaw::Uniform {
                return Err(TrainError::Config(
                    "importance reweighting keeps uniform unweighted sampling".into(),
                ));
            }
            if self.scheduler != Scheduler::Linear {
                return Err(TrainError::Config(
                    "importance reweighting keeps the linear scheduler".into(),
                ));
            }
            if !target.is_continuous() {
                return Err(TrainError::Config(
                    "importance target law must be continuous".into(),
                ));
            }
        }
        Ok(())
    }

    /// Per-sequence loss weight for a sample at time `t`.
    fn weight_at(&self, t: f64) -> Result<f64, TrainError> {
        if let Some(target) = &self.importance {
            return Ok(target.density(t).map_err(ObjectiveError::from)?);
        }
        if self.weighted {
            return Ok(self
                .scheduler
                .nelbo_weight(t)
                .map_err(ObjectiveError::from)?);
        }
        Ok(1.0)
    }

    /// Which law times are physically drawn from.
    fn sampling_law(&self) -> &TimeLaw {
        if self.importance.is_some() {
            &TimeLaw::Uniform
        } else {
            &self.law
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorConfig {
    Tabular,
    Net(NetConfig),
}

impl PredictorConfig {
    pub fn build(
        &self,
        family: ContextFamily,
        world: &MarkovWorld,
        seed: u64,
    ) -> Result<Predictor, PredictorError> {
        match self {
            PredictorConfig::Tabular => Ok(Predictor::Tabular(TabularPredictor::new(
                family,
                world.vocab(),
                world.len(),
                TABULAR_CAP_ENTRIES,
            )?)),
            PredictorConfig::Net(cfg) => Ok(Predictor::Net(NetPredictor::new(
                family,
                world.vocab(),
                world.len(),
                *cfg,
                seed,
            )?)),
        }
    }

    /// Parses `tabular` or `net:d=32,layers=2`.
    pub fn parse(s: &str) -> Result<Self, PredictorError> {
        let s = s.trim();
        if s == "tabular" {
            return Ok(PredictorConfig::Tabular);
        }
        if let Some(body) = s.strip_prefix("net:") {
            let mut cfg = NetConfig::default();
            for part in body.split(',') {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| PredictorError::Parse(s.to_string()))?;
                match k.trim() {
                    "d" => {
                        cfg.dim = v.trim().parse().map_err(|_| PredictorError::Parse(s.into()))?
                    }
                    "layers" => {
                        cfg.layers =
                            v.trim().parse().map_err(|_| PredictorError::Parse(s.into()))?
                    }
                    _ => return Err(PredictorError::Parse(s.to_string())),
                }
            }
            return Ok(PredictorConfig::Net(cfg));
        }
        Err(PredictorError::Parse(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Exact,
    Mc { samples: usize },
}

/// Full description of one training arm.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub predictor: PredictorConfig,
    pub objective: ObjectiveConfig,
    pub batch: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub eval_mode: EvalMode,
    pub lr: f64,
    pub warmup: u64,
    pub seed: u64,
    /// Shared across arms so every arm sees the same evaluation stream.
    pub eval_seed: u64,
    /// Record per-level losses at each evaluation (exact mode only).
    pub track_levels: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.objective.validate()?;
        if self.batch == 0 {
            return Err(TrainError::Config("batch size must be >= 1".into()));
        }
        if self.steps > 0 && (self.eval_every == 0 || self.steps % self.eval_every != 0) {
            return Err(TrainError::Config(format!(
                "eval cadence {} must divide steps {}",
                self.eval_every, self.steps
            )));
        }
        Ok(())
    }
}

/// One evaluation row of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub eval_nelbo: f64,
    pub per_level: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub rows: Vec<MetricsRow>,
}

impl TrainMetrics {
    pub fn final_nelbo(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_nelbo)
    }
}

/// Trains one arm and returns its predictor plus the metrics series.
pub fn run_training(
    world: &MarkovWorld,
    spec: &ExperimentSpec,
) -> Result<(Predictor, TrainMetrics), TrainError> {
    spec.validate()?;
    let mut predictor = spec
        .predictor
        .build(ContextFamily::Masked, world, spec.seed)?;
    let mut opt = Optimizer::adam(spec.lr, predictor.param_len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocab = world.vocab();
    let source = Source::World(world);
    let mut metrics = TrainMetrics::default();
    let mut last_train_loss: Option<f64> = None;

    let evaluate = |p: &Predictor| -> Result<(f64, Option<Vec<f64>>), TrainError> {
        match spec.eval_mode {
            EvalMode::Exact => {
                let profile = masked_level_profile(p, world, EXACT_CAP)?;
                let levels = spec.track_levels.then(|| profile.cross_entropy.clone());
                Ok((profile.total_cross_entropy(), levels))
            }
            EvalMode::Mc { samples } => {
                // The validation NELBO in its time-agnostic rewriting:
                // level-stratified sampling, same expectation as the
                // weighted time-domain estimator with far less variance.
                let est = objectives::mc_nelbo_level_stratified(
                    p,
                    &source,
                    samples.div_ceil(world.len()),
                    spec.eval_seed,
                )?;
                Ok((est.value, None))
            }
        }
    };

    let (nelbo, per_level) = evaluate(&predictor)?;
    metrics.rows.push(MetricsRow {
        step: 0,
        train_loss: None,
        eval_nelbo: nelbo,
        per_level,
    });

    for step in 1..=spec.steps {
        let times = spec
            .objective
            .sampling_law()
            .sample_stratified(spec.batch, rng.gen());
        let mut batch_items = Vec::with_capacity(spec.batch);
        for &raw_t in &times.samples {
            let t = clamp_time(raw_t);
            let x = source.draw(&mut rng);
            let z = corruptor::corrupt(&x, vocab, t, &spec.objective.scheduler, rng.gen());
            let masked = corruptor::masked_positions(&z, vocab);
            if masked.is_empty() {
                continue;
            }
            let w = spec.objective.weight_at(t)?;
            let targets: Vec<(usize, Token, f64)> =
                masked.iter().map(|&i| (i, x[i], w)).collect();
            batch_items.push(BatchItem {
                context: z,
                targets,
            });
        }
        if !batch_items.is_empty() {
            let report = predictor.loss_and_grad(&batch_items, spec.batch as f64)?;
            if !report.loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            if spec.warmup > 0 {
                let scale = (step as f64 / spec.warmup as f64).min(1.0);
                opt.set_lr(spec.lr * scale);
            }
            opt.apply(&mut predictor, &report)?;
            last_train_loss = Some(report.loss);
        }
        if step % spec.eval_every == 0 {
            let (nelbo, per_level) = evaluate(&predictor)?;
            if !nelbo.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            metrics.rows.push(MetricsRow {
                step,
                train_loss: last_train_loss,
                eval_nelbo: nelbo,
                per_level,
            });
        }
    }
    Ok((predictor, metrics))
}

// ---------------------------------------------------------------------------
// Steps-to-target and speedup reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepsToTarget {
    Reached { step: u64 },
    NotReached,
}

/// First evaluation step whose NELBO is at or below `target`.
pub fn steps_to_target(metrics: &TrainMetrics, target: f64) -> StepsToTarget {
    for row in &metrics.rows {
        if row.eval_nelbo <= target {
            return StepsToTarget::Reached { step: row.step };
        }
    }
    StepsToTarget::NotReached
}

/// Linearly interpolated crossing step between evaluation points; labeled
/// as interpolated wherever it is reported.
pub fn steps_to_target_interpolated(metrics: &TrainMetrics, target: f64) -> Option<f64> {
    let rows = &metrics.rows;
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.eval_nelbo > target && b.eval_nelbo <= target {
            let frac = (a.eval_nelbo - target) / (a.eval_nelbo - b.eval_nelbo);
            return Some(a.step as f64 + frac * (b.step - a.step) as f64);
        }
    }
    if let Some(first) = rows.first() {
        if first.eval_nelbo <= target {
            return Some(first.step as f64);
        }
    }
    None
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmOutcome {
    pub steps_to_target: Option<u64>,
    /// baseline steps / this arm's steps; missing when either side never
    /// reached the target (flagged, never defaulted).
    pub ratio_vs_baseline: Option<f64>,
    pub final_nelbo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub target_nll: f64,
    pub baseline: String,
    pub interpolated: bool,
    pub arms: BTreeMap<String, ArmOutcome>,
}

/// Builds the cross-arm speedup report against a named baseline arm.
pub fn speedup_report(
    target_nll: f64,
    baseline: &str,
    arms: &[(String, &TrainMetrics)],
) -> Result<SpeedupReport, TrainError> {
    let baseline_metrics = arms
        .iter()
        .find(|(name, _)| name == baseline)
        .map(|(_, m)| *m)
        .ok_or_else(|| TrainError::Config(format!("baseline arm `{baseline}` not found")))?;
    let baseline_steps = match steps_to_target(baseline_metrics, target_nll) {
        StepsToTarget::Reached { step } => Some(step),
        StepsToTarget::NotReached => None,
    };
    let mut out = BTreeMap::new();
    for (name, metrics) in arms {
        let steps = match steps_to_target(metrics, target_nll) {
            StepsToTarget::Reached { step } => Some(step),
            StepsToTarget::NotReached => None,
        };
        let ratio = match (baseline_steps, steps) {
            (Some(b), Some(s)) if s > 0 => Some(b as f64 / s as f64),
            _ => None,
        };
        out.insert(
            name.clone(),
            ArmOutcome {
                steps_to_target: steps,
                ratio_vs_baseline: ratio,
                final_nelbo: metrics.final_nelbo().unwrap_or(f64::NAN),
            },
        );
    }
    Ok(SpeedupReport {
        target_nll,
        baseline: baseline.to_string(),
        interpolated: false,
        arms: out,
    })
}

// ---------------------------------------------------------------------------
// Per-level curves
// ---------------------------------------------------------------------------

/// Monte-Carlo context-level losses at the requested levels.
pub fn per_level_curves(
    predictor: &Predictor,
    source: &Source,
    levels: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(usize, objectives::LossEstimate)>, ObjectiveError> {
    levels
        .iter()
        .enumerate()
        .map(|(j, &n_c)| {
            objectives::context_level_loss(predictor, source, n_c, n_samples, seed ^ (j as u64))
                .map(|e| (n_c, e))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gradient-similarity analyses
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct SimilarityReport {
    pub mean_cosine: f64,
    pub trials: usize,
    pub resampled: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    if a == b {
        // Identical gradients have cosine one by definition; avoid rounding
        // through the norms.
        return Some(1.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb))
}

fn center_loss_grad(
    predictor: &Predictor,
    x: &[Token],
    masked: &[usize],
    center: usize,
) -> Result<Vec<f64>, TrainError> {
    let vocab = predictor.vocab();
    let mut z = x.to_vec();
    for &p in masked {
        z[p] = vocab.mask_id();
    }
    let item = BatchItem {
        context: z,
        targets: vec![(center, x[center], 1.0)],
    };
    Ok(predictor.loss_and_grad(&[item], 1.0)?.grad)
}

/// Cosine similarity between the center-token gradient with and without
/// `n_extra` additional masks placed uniformly without replacement in the
/// symmetric window of radius `r` around the center.
pub fn grad_similarity_radius(
    predictor: &Predictor,
    source: &Source,
    r: usize,
    n_extra: usize,
    trials: usize,
    seed: u64,
) -> Result<SimilarityReport, TrainError> {
    let l = source.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sims = Vec::with_capacity(trials);
    let mut resampled = 0usize;
    let max_attempts = trials * 100 + 100;
    let mut attempts = 0;
    while sims.len() < trials {
        attempts += 1;
        if attempts > max_attempts {
            return Err(TrainError::Config(format!(
                "window radius {r} cannot host {n_extra} extra masks"
            )));
        }
        let x = source.draw(&mut rng);
        let center = rng.gen_range(0..l);
        let window: Vec<usize> = (center.saturating_sub(r)..=(center + r).min(l - 1))
            .filter(|&j| j != center)
            .collect();
        if window.len() < n_extra {
            resampled += 1;
            continue;
        }
        let base = center_loss_grad(predictor, &x, &[center], center)?;
        let picked = corruptor::choose_distinct(window.len(), n_extra, &mut rng);
        let mut masked: Vec<usize> = picked.iter().map(|&j| window[j]).collect();
        masked.push(center);
        let extra = center_loss_grad(predictor, &x, &masked, center)?;
        match cosine(&base, &extra) {
            Some(c) => sims.push(c),
            None => {
                resampled += 1;
            }
        }
    }
    Ok(SimilarityReport {
        mean_cosine: sims.iter().sum::<f64>() / sims.len() as f64,
        trials: sims.len(),
        resampled,
    })
}

/// Cosine similarity between the joint-mask gradient and the sum of the
/// single-mask gradients over the same positions.
pub fn grad_additivity(
    predictor: &Predictor,
    source: &Source,
    n_masks: usize,
    trials: usize,
    seed: u64,
) -> Result<SimilarityReport, TrainError> {
    let l = source.len();
    if n_masks == 0 || n_masks > l {
        return Err(TrainError::Config(format!(
            "n_masks={n_masks} outside 1..={l}"
        )));
    }
    let vocab = predictor.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sims = Vec::with_capacity(trials);
    let mut skipped = 0usize;
    while sims.len() < trials {
        let x = source.draw(&mut rng);
        let positions = corruptor::choose_distinct(l, n_masks, &mut rng);
        // Sum of single-mask gradients.
        let mut summed = vec![0.0; predictor.param_len()];
        for &p in &positions {
            let g = center_loss_grad(predictor, &x, &[p], p)?;
            for (s, gi) in summed.iter_mut().zip(&g) {
                *s += gi;
            }
        }
        // Joint gradient: all positions masked, every one a target.
        let mut z = x.to_vec();
        for &p in &positions {
            z[p] = vocab.mask_id();
        }
        let item = BatchItem {
            context: z,
            targets: positions.iter().map(|&p| (p, x[p], 1.0)).collect(),
        };
        let joint = predictor.loss_and_grad(&[item], 1.0)?.grad;
        match cosine(&joint, &summed) {
            Some(c) => sims.push(c),
            None => {
                skipped += 1;
                if skipped > trials * 100 {
                    return Err(TrainError::Config("degenerate gradients".into()));
                }
            }
        }
    }
    Ok(SimilarityReport {
        mean_cosine: sims.iter().sum::<f64>() / sims.len() as f64,
        trials: sims.len(),
        resampled: skipped,
    })
}

// ---------------------------------------------------------------------------
// Ancestral sampling
// ---------------------------------------------------------------------------

/// Reverse-process generation: start fully masked at t = 1 and walk T equal
/// steps toward 0, revealing each masked position with probability
/// `(alpha_s - alpha_t) / (1 - alpha_t)` and drawing revealed tokens from
/// the model prediction. Any position still masked after the last step is
/// revealed from the final prediction.
pub fn ancestral_sample(
    predictor: &Predictor,
    steps: usize,
    scheduler: &Scheduler,
    seed: u64,
) -> Result<Vec<Token>, TrainError> {
    if predictor.family() != &ContextFamily::Masked {
        return Err(TrainError::Config(
            "ancestral sampling requires a masked-family predictor".into(),
        ));
    }
    assert!(steps >= 1, "need at least one reverse step");
    let vocab = predictor.vocab();
    let l = predictor.len();
    let mask = vocab.mask_id();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z: Vec<Token> = vec![mask; l];
    for tau in (1..=steps).rev() {
        let t = tau as f64 / steps as f64;
        let s = (tau - 1) as f64 / steps as f64;
        let (at, as_) = (scheduler.alpha(t), scheduler.alpha(s));
        let reveal = ((as_ - at) / (1.0 - at)).clamp(0.0, 1.0);
        if !z.contains(&mask) {
            break;
        }
        let dists = predictor.predict(&z)?;
        for dist in dists {
            if rng.gen_range(0.0..1.0) < reveal {
                z[dist.position] = draw_token(&dist.probs, &mut rng);
            }
        }
    }
    if z.contains(&mask) {
        let dists = predictor.predict(&z)?;
        for dist in dists {
            z[dist.position] = draw_token(&dist.probs, &mut rng);
        }
    }
    debug_assert!(z.iter().all(|&t| t != mask));
    Ok(z)
}

fn draw_token(probs: &[f64], rng: &mut ChaCha8Rng) -> Token {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (a + 1) as Token;
        }
    }
    probs.len() as Token
}

// ---------------------------------------------------------------------------
// Exact-gradient training for the tabular predictor
// ---------------------------------------------------------------------------

/// The full expected-gradient batch of a tabular masked objective: one item
/// per reachable context, soft targets weighted by the oracle conditional
/// and the law-induced level weights. Training on this batch is exact
/// gradient descent on the population objective.
pub fn exact_expected_batch(
    world: &MarkovWorld,
    objective: &ObjectiveConfig,
) -> Result<Vec<BatchItem>, TrainError> {
    objective.validate()?;
    if objective.importance.is_some() {
        return Err(TrainError::Config(
            "exact batches cover direct sampling objectives only".into(),
        ));
    }
    if objective.scheduler != Scheduler::Linear {
        return Err(TrainError::Config(
            "exact batches assume the linear scheduler".into(),
        ));
    }
    let l = world.len();
    let v = world.vocab().v;
    let mask = world.vocab().mask_id();
    // Per-level weight: 1 for the weighted bound; (L - N_c) w(L - N_c) for a
    // tilted law (mask-count tilt times the per-target multiplicity).
    let level_weight: Vec<f64> = if objective.weighted {
        vec![1.0; l]
    } else {
        let w = maskmath::mask_count_law(l, &objective.law).map_err(ObjectiveError::from)?;
        (0..l).map(|n_c| (l - n_c) as f64 * w[l - n_c]).collect()
    };
    let binom: Vec<f64> = (0..=l)
        .map(|n| crate::numeric::ln_binomial(l, n).exp())
        .collect();
    let mut items = Vec::new();
    for pattern in 1u32..(1u32 << l) {
        let n_masks = pattern.count_ones() as usize;
        let n_c = l - n_masks;
        if level_weight[n_c] == 0.0 {
            continue;
        }
        let revealed: Vec<usize> = (0..l).filter(|j| pattern & (1 << j) == 0).collect();
        let pattern_weight = level_weight[n_c] / (binom[n_masks] * n_masks as f64);
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
            let mut targets = Vec::new();
            for cond in &conds {
                for a in 0..v as usize {
                    let po = cond.probs[a];
                    if po > 0.0 {
                        targets.push((
                            cond.position,
                            (a + 1) as Token,
                            prob * pattern_weight * po,
                        ));
                    }
                }
            }
            items.push(BatchItem {
                context: z,
                targets,
            });
        });
    }
    Ok(items)
}

/// Trains a tabular masked predictor by exact gradient descent on the
/// population objective, with a linearly decaying learning rate. The
/// deterministic analog of training to convergence.
pub fn train_tabular_exact(
    world: &MarkovWorld,
    objective: &ObjectiveConfig,
    steps: u64,
    lr: f64,
) -> Result<Predictor, TrainError> {
    let batch = exact_expected_batch(world, objective)?;
    let mut predictor = Predictor::Tabular(TabularPredictor::new(
        ContextFamily::Masked,
        world.vocab(),
        world.len(),
        TABULAR_CAP_ENTRIES,
    )?);
    let mut opt = Optimizer::adam(lr, predictor.param_len());
    for step in 0..steps {
        let report = predictor.loss_and_grad(&batch, 1.0)?;
        if !report.loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        let frac = step as f64 / steps as f64;
        opt.set_lr(lr * (1.0 - frac).max(1e-4));
        opt.apply(&mut predictor, &report)?;
    }
    Ok(predictor)
}

/// Largest total-variation distance between the predictor's conditionals
/// and the oracle over every reachable masked context and target.
pub fn max_tv_to_oracle(predictor: &Predictor, world: &MarkovWorld) -> Result<f64, TrainError> {
    let mut worst = 0.0f64;
    for_each_context(world, |z, _prob, conds| {
        let dists = predictor.predict(z).expect("valid context");
        for (cond, dist) in conds.iter().zip(&dists) {
            let tv = 0.5
                * cond
                    .probs
                    .iter()
                    .zip(&dist.probs)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
    });
    Ok(worst)
}

/// Largest total-variation distance between two predictors over every
/// reachable masked context and target.
pub fn max_tv_between(
    a: &Predictor,
    b: &Predictor,
    world: &MarkovWorld,
) -> Result<f64, TrainError> {
    let mut worst = 0.0f64;
    for_each_context(world, |z, _prob, _conds| {
        let da = a.predict(z).expect("valid context");
        let db = b.predict(z).expect("valid context");
        for (x, y) in da.iter().zip(&db) {
            let tv = 0.5
                * x.probs
                    .iter()
                    .zip(&y.probs)
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
    });
    Ok(worst)
}

/// Visits every masked context with positive probability, with its oracle
/// conditionals.
fn for_each_context<F: FnMut(&[Token], f64, &[crate::worldmodel::OracleConditional])>(
    world: &MarkovWorld,
    mut f: F,
) {
    let l = world.len();
    let v = world.vocab().v;
    let mask = world.vocab().mask_id();
    for pattern in 1u32..(1u32 << l) {
        let revealed: Vec<usize> = (0..l).filter(|j| pattern & (1 << j) == 0).collect();
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
            f(&z, prob, &conds);
        });
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

// ---------------------------------------------------------------------------
// Next-token training (order comparison experiments)
// ---------------------------------------------------------------------------

/// Trains a tabular next-token predictor by sampled SGD and reports the
/// first evaluation step whose exact loss is within `epsilon` of the data
/// entropy.
pub fn train_arm_to_entropy(
    world: &MarkovWorld,
    family: ContextFamily,
    steps: u64,
    batch: usize,
    lr: f64,
    eval_every: u64,
    epsilon: f64,
    seed: u64,
) -> Result<Option<u64>, TrainError> {
    let mut predictor = Predictor::Tabular(TabularPredictor::new(
        family,
        world.vocab(),
        world.len(),
        TABULAR_CAP_ENTRIES,
    )?);
    let mut opt = Optimizer::adam(lr, predictor.param_len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = world.entropy() + epsilon;
    let check = |p: &Predictor| -> Result<bool, TrainError> {
        Ok(objectives::exact_arm_loss(p, world, EXACT_CAP)?.value <= target)
    };
    if check(&predictor)? {
        return Ok(Some(0));
    }
    for step in 1..=steps {
        let items: Vec<BatchItem> = (0..batch)
            .map(|_| {
                let x = world.sample(&mut rng);
                let targets = (0..world.len()).map(|j| (j, x[j], 1.0)).collect();
                BatchItem {
                    context: x,
                    targets,
                }
            })
            .collect();
        let report = predictor.loss_and_grad(&items, batch as f64)?;
        if !report.loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        opt.apply(&mut predictor, &report)?;
        if step % eval_every == 0 && check(&predictor)? {
            return Ok(Some(step));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruptor::VocabSpec;
    use crate::predictor::fit_tabular_to_oracle;

    fn world() -> MarkovWorld {
        MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 5, 0.8, 42).unwrap()
    }

    fn quick_spec(steps: u64) -> ExperimentSpec {
        ExperimentSpec {
            predictor: PredictorConfig::Net(NetConfig { dim: 8, layers: 1 }),
            objective: ObjectiveConfig::standard(),
            batch: 8,
            steps,
            eval_every: if steps == 0 { 1 } else { steps },
            eval_mode: EvalMode::Exact,
            lr: 5e-3,
            warmup: 0,
            seed: 7,
            eval_seed: 99,
            track_levels: false,
        }
    }

    #[test]
    fn zero_steps_yields_only_the_initial_evaluation() {
        let w = world();
        let (_, metrics) = run_training(&w, &quick_spec(0)).unwrap();
        assert_eq!(metrics.rows.len(), 1);
        assert_eq!(metrics.rows[0].step, 0);
        assert!(metrics.rows[0].train_loss.is_none());
    }

    #[test]
    fn same_seed_gives_identical_metrics() {
        let w = world();
        let spec = quick_spec(20);
        let (p1, m1) = run_training(&w, &spec).unwrap();
        let (p2, m2) = run_training(&w, &spec).unwrap();
        assert_eq!(p1.params(), p2.params());
        let a: Vec<f64> = m1.rows.iter().map(|r| r.eval_nelbo).collect();
        let b: Vec<f64> = m2.rows.iter().map(|r| r.eval_nelbo).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn mixing_weight_and_tilted_law_is_a_config_error() {
        let cfg = ObjectiveConfig {
            law: TimeLaw::trunc_gaussian(0.5, 0.1).unwrap(),
            scheduler: Scheduler::Linear,
            weighted: true,
            importance: None,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eval_cadence_must_divide_steps() {
        let mut spec = quick_spec(10);
        spec.eval_every = 3;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn steps_to_target_basics() {
        let metrics = TrainMetrics {
            rows: vec![
                MetricsRow {
                    step: 0,
                    train_loss: None,
                    eval_nelbo: 3.0,
                    per_level: None,
                },
                MetricsRow {
                    step: 10,
                    train_loss: Some(2.5),
                    eval_nelbo: 2.0,
                    per_level: None,
                },
                MetricsRow {
                    step: 20,
                    train_loss: Some(1.5),
                    eval_nelbo: 1.0,
                    per_level: None,
                },
            ],
        };
        assert_eq!(
            steps_to_target(&metrics, 3.5),
            StepsToTarget::Reached { step: 0 }
        );
        assert_eq!(
            steps_to_target(&metrics, 2.0),
            StepsToTarget::Reached { step: 10 }
        );
        assert_eq!(steps_to_target(&metrics, 0.5), StepsToTarget::NotReached);
        let interp = steps_to_target_interpolated(&metrics, 1.5).unwrap();
        assert!((interp - 15.0).abs() < 1e-12);
    }

    #[test]
    fn speedup_report_flags_unreached_arms() {
        let fast = TrainMetrics {
            rows: vec![MetricsRow {
                step: 5,
                train_loss: None,
                eval_nelbo: 1.0,
                per_level: None,
            }],
        };
        let slow = TrainMetrics {
            rows: vec![MetricsRow {
                step: 5,
                train_loss: None,
                eval_nelbo: 2.0,
                per_level: None,
            }],
        };
        let arms = vec![("base".to_string(), &fast), ("other".to_string(), &slow)];
        let report = speedup_report(1.5, "base", &arms).unwrap();
        assert_eq!(report.arms["base"].steps_to_target, Some(5));
        assert_eq!(report.arms["other"].steps_to_target, None);
        assert!(report.arms["other"].ratio_vs_baseline.is_none());
    }

    #[test]
    fn grad_similarity_is_exactly_one_with_no_extra_masks() {
        let w = world();
        let p = Predictor::Net(
            NetPredictor::new(
                ContextFamily::Masked,
                w.vocab(),
                5,
                NetConfig { dim: 8, layers: 2 },
                3,
            )
            .unwrap(),
        );
        let rep = grad_similarity_radius(&p, &Source::World(&w), 5, 0, 16, 11).unwrap();
        assert_eq!(rep.mean_cosine, 1.0);
    }

    #[test]
    fn grad_additivity_is_exactly_one_for_single_mask() {
        let w = world();
        let p = Predictor::Net(
            NetPredictor::new(
                ContextFamily::Masked,
                w.vocab(),
                5,
                NetConfig { dim: 8, layers: 2 },
                3,
            )
            .unwrap(),
        );
        let rep = grad_additivity(&p, &Source::World(&w), 1, 16, 13).unwrap();
        assert_eq!(rep.mean_cosine, 1.0);
    }

    #[test]
    fn grad_additivity_untrained_is_finite_and_in_range() {
        let w = world();
        let p = Predictor::Net(
            NetPredictor::new(
                ContextFamily::Masked,
                w.vocab(),
                5,
                NetConfig { dim: 8, layers: 2 },
                5,
            )
            .unwrap(),
        );
        let rep = grad_additivity(&p, &Source::World(&w), 2, 32, 17).unwrap();
        assert!(rep.mean_cosine.is_finite());
        assert!(rep.mean_cosine >= -1.0 - 1e-12 && rep.mean_cosine <= 1.0 + 1e-12);
    }

    #[test]
    fn similarity_window_too_small_resamples_then_errors() {
        let w = world();
        let p = Predictor::Net(
            NetPredictor::new(
                ContextFamily::Masked,
                w.vocab(),
                5,
                NetConfig { dim: 8, layers: 1 },
                3,
            )
            .unwrap(),
        );
        // radius 1 window holds at most 2 candidates; asking for 3 extra
        // masks can never succeed.
        assert!(grad_similarity_radius(&p, &Source::World(&w), 1, 3, 4, 19).is_err());
    }

    #[test]
    fn ancestral_sample_never_emits_masks_and_is_deterministic() {
        let w = world();
        let p = Predictor::Tabular(
            fit_tabular_to_oracle(&w, ContextFamily::Masked, 1 << 23).unwrap(),
        );
        for steps in [1usize, 4, 16] {
            let x = ancestral_sample(&p, steps, &Scheduler::Linear, 5).unwrap();
            assert_eq!(x.len(), 5);
            assert!(x.iter().all(|&t| w.vocab().is_real_token(t)));
        }
        let a = ancestral_sample(&p, 8, &Scheduler::Linear, 21).unwrap();
        let b = ancestral_sample(&p, 8, &Scheduler::Linear, 21).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ancestral_unigram_is_uniform_on_flat_world() {
        let flat = MarkovWorld::seeded(VocabSpec::new(3).unwrap(), 4, 0.0, 2).unwrap();
        let p = Predictor::Tabular(
            fit_tabular_to_oracle(&flat, ContextFamily::Masked, 1 << 23).unwrap(),
        );
        let mut counts = [0u64; 3];
        let draws = 3000u64;
        for s in 0..draws {
            for tok in ancestral_sample(&p, 4, &Scheduler::Linear, s).unwrap() {
                counts[(tok - 1) as usize] += 1;
            }
        }
        let total = (draws * 4) as f64;
        let expect = total / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect) * (c as f64 - expect) / expect)
            .sum();
        // 2 dof, crit ~18.4 at p=1e-4.
        assert!(chi2 < 18.4, "chi2={chi2}");
    }

    #[test]
    fn exact_tabular_training_reaches_the_oracle() {
        let w = MarkovWorld::seeded(VocabSpec::new(2).unwrap(), 4, 0.8, 6).unwrap();
        let cfg = ObjectiveConfig::standard();
        let p = train_tabular_exact(&w, &cfg, 1500, 0.1).unwrap();
        let tv = max_tv_to_oracle(&p, &w).unwrap();
        assert!(tv < 1e-3, "tv={tv}");
    }

    #[test]
    fn exact_batch_respects_law_level_weights() {
        // Under Dirac(0.5), levels carry binomial weights; the batch items
        // at excluded levels vanish only for laws with zero mass there.
        let w = MarkovWorld::seeded(VocabSpec::new(2).unwrap(), 4, 0.5, 9).unwrap();
        let batch =
            exact_expected_batch(&w, &ObjectiveConfig::tilted(TimeLaw::dirac(0.5).unwrap()))
                .unwrap();
        assert!(!batch.is_empty());
        let total_weight: f64 = batch
            .iter()
            .flat_map(|item| item.targets.iter().map(|t| t.2))
            .sum();
        // Total target weight = sum_n n w(n) = E[masked count] = L * mu.
        assert!((total_weight - 4.0 * 0.5).abs() < 1e-9, "{total_weight}");
    }

    #[test]
    fn training_reduces_eval_nelbo() {
        let w = world();
        let mut spec = quick_spec(300);
        spec.eval_every = 300;
        spec.lr = 1e-2;
        let (_, metrics) = run_training(&w, &spec).unwrap();
        let first = metrics.rows.first().unwrap().eval_nelbo;
        let last = metrics.rows.last().unwrap().eval_nelbo;
        assert!(
            last < first,
            "no improvement: {first} -> {last} (entropy {})",
            w.entropy()
        );
    }
}

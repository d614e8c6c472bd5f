//! Trainable conditional models `p(x^i | context)` over three context
//! families, with an exact-capacity tabular backend and a small
//! differentiable network backend.
//!
//! Both backends expose one flat parameter vector, exact reverse-mode
//! gradients over a fixed operation set (affine, tanh, mean-pool,
//! softmax-cross-entropy), and deterministic updates. The mask sentinel is
//! excluded from every output distribution by construction: output heads
//! have `V` logits.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corruptor::VocabSpec;
use crate::worldmodel::{MarkovWorld, WorldError};
use crate::Token;

#[derive(Debug, Clone, Error)]
pub enum PredictorError {
    #[error("family error: {0}")]
    Family(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tabular context space too large: {contexts} contexts exceeds cap {cap}")]
    CapExceeded { contexts: u64, cap: u64 },
    #[error("world error: {0}")]
    World(#[from] WorldError),
    #[error("checkpoint io: {0}")]
    Io(String),
    #[error("cannot parse predictor literal `{0}`")]
    Parse(String),
}

/// How a context is constructed and which positions are predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextFamily {
    /// Arbitrary masked sequences; targets are the masked positions.
    Masked,
    /// Left-to-right prefixes; targets are all next positions in order.
    Prefix,
    /// Prefixes in one fixed permutation order.
    PermutedPrefix(Vec<usize>),
}

impl ContextFamily {
    /// Generation order as a list of positions; `None` for the masked family.
    pub fn order(&self, l: usize) -> Option<Vec<usize>> {
        match self {
            ContextFamily::Masked => None,
            ContextFamily::Prefix => Some((0..l).collect()),
            ContextFamily::PermutedPrefix(sigma) => Some(sigma.clone()),
        }
    }

    pub fn validate(&self, l: usize) -> Result<(), PredictorError> {
        if let ContextFamily::PermutedPrefix(sigma) = self {
            let mut seen = vec![false; l];
            if sigma.len() != l {
                return Err(PredictorError::Family(format!(
                    "sigma length {} != L={l}",
                    sigma.len()
                )));
            }
            for &p in sigma {
                if p >= l || seen[p] {
                    return Err(PredictorError::Family("sigma is not a bijection".into()));
                }
                seen[p] = true;
            }
        }
        Ok(())
    }

    /// Uniformly random permutation order.
    pub fn random_permutation(l: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sigma: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            let j = rng.gen_range(0..=i);
            sigma.swap(i, j);
        }
        ContextFamily::PermutedPrefix(sigma)
    }

    pub fn name(&self) -> String {
        match self {
            ContextFamily::Masked => "masked".into(),
            ContextFamily::Prefix => "prefix".into(),
            ContextFamily::PermutedPrefix(sigma) => {
                let body: Vec<String> = sigma.iter().map(|p| p.to_string()).collect();
                format!("permuted:{}", body.join("-"))
            }
        }
    }

    pub fn parse_name(s: &str) -> Result<Self, PredictorError> {
        if s == "masked" {
            return Ok(ContextFamily::Masked);
        }
        if s == "prefix" {
            return Ok(ContextFamily::Prefix);
        }
        if let Some(body) = s.strip_prefix("permuted:") {
            let sigma: Result<Vec<usize>, _> = body.split('-').map(|p| p.parse()).collect();
            return sigma
                .map(ContextFamily::PermutedPrefix)
                .map_err(|_| PredictorError::Parse(s.to_string()));
        }
        Err(PredictorError::Parse(s.to_string()))
    }
}

/// Predicted distribution over real tokens at one target position.
#[derive(Debug, Clone)]
pub struct TargetDist {
    pub position: usize,
    /// `probs[a - 1]` is the probability of token `a`; the mask sentinel has
    /// probability zero by construction.
    pub probs: Vec<f64>,
}

/// One grouped batch entry: a context plus every target read from it.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Masked sequence (masked family) or clean sequence (prefix families).
    pub context: Vec<Token>,
    /// (target position, true token, weight) triples.
    pub targets: Vec<(usize, Token, f64)>,
}

/// Flat loss value and parameter gradient.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// A conditional model with one of the two backends.
#[derive(Debug, Clone)]
pub enum Predictor {
    Tabular(TabularPredictor),
    Net(NetPredictor),
}

impl Predictor {
    pub fn family(&self) -> &ContextFamily {
        match self {
            Predictor::Tabular(p) => &p.family,
            Predictor::Net(p) => &p.family,
        }
    }

    pub fn vocab(&self) -> VocabSpec {
        match self {
            Predictor::Tabular(p) => p.vocab,
            Predictor::Net(p) => p.vocab,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Predictor::Tabular(p) => p.l,
            Predictor::Net(p) => p.l,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn param_len(&self) -> usize {
        self.params().len()
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Predictor::Tabular(p) => &p.logits,
            Predictor::Net(p) => &p.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Predictor::Tabular(p) => &mut p.logits,
            Predictor::Net(p) => &mut p.params,
        }
    }

    /// Per-target distributions for one context. For the masked family the
    /// input is a masked sequence and targets are its masked positions; for
    /// prefix families the input is a clean sequence and one distribution is
    /// returned per generation rank.
    pub fn predict(&self, tokens: &[Token]) -> Result<Vec<TargetDist>, PredictorError> {
        match self {
            Predictor::Tabular(p) => p.predict(tokens),
            Predictor::Net(p) => p.predict(tokens),
        }
    }

    /// Distribution at one target position of one context.
    pub fn predict_at(&self, tokens: &[Token], position: usize) -> Result<Vec<f64>, PredictorError> {
        let all = self.predict(tokens)?;
        all.into_iter()
            .find(|d| d.position == position)
            .map(|d| d.probs)
            .ok_or_else(|| PredictorError::Family(format!("position {position} is not a target")))
    }

    /// Weighted negative log-likelihood over the batch, divided by
    /// `normalizer`, with the exact parameter gradient.
    pub fn loss_and_grad(
        &self,
        batch: &[BatchItem],
        normalizer: f64,
    ) -> Result<GradientReport, PredictorError> {
        match self {
            Predictor::Tabular(p) => p.loss_and_grad(batch, normalizer),
            Predictor::Net(p) => p.loss_and_grad(batch, normalizer),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Plain gradient step or adaptive-moment update, applied in place.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, n_params: usize) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match self {
            Optimizer::Sgd { lr } | Optimizer::Adam { lr, .. } => *lr = new_lr,
        }
    }

    pub fn apply(
        &mut self,
        predictor: &mut Predictor,
        report: &GradientReport,
    ) -> Result<(), PredictorError> {
        let params = predictor.params_mut();
        if params.len() != report.grad.len() {
            return Err(PredictorError::Shape(format!(
                "gradient length {} != parameter count {}",
                report.grad.len(),
                params.len()
            )));
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(&report.grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                if m.len() != params.len() {
                    return Err(PredictorError::Shape(
                        "optimizer state does not match predictor".into(),
                    ));
                }
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    let g = report.grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tabular backend
// ---------------------------------------------------------------------------

/// Exact-capacity predictor: one row of `V` logits per (context, position).
/// Contexts are keyed by the base-(V+1) integer encoding of the masked
/// sequence (digit 0 = mask).
#[derive(Debug, Clone)]
pub struct TabularPredictor {
    pub family: ContextFamily,
    pub vocab: VocabSpec,
    pub l: usize,
    n_contexts: u64,
    /// Dense table, index = (key * L + position) * V + (token - 1).
    logits: Vec<f64>,
}

/// Default cap on dense table entries (contexts * L * V).
pub const TABULAR_CAP_ENTRIES: u64 = 1 << 23;

impl TabularPredictor {
    pub fn new(
        family: ContextFamily,
        vocab: VocabSpec,
        l: usize,
        cap_entries: u64,
    ) -> Result<Self, PredictorError> {
        family.validate(l)?;
        let n_contexts = ((vocab.v + 1) as u64)
            .checked_pow(l as u32)
            .ok_or_else(|| PredictorError::CapExceeded {
                contexts: u64::MAX,
                cap: cap_entries,
            })?;
        let entries = n_contexts
            .checked_mul(l as u64 * vocab.v as u64)
            .ok_or_else(|| PredictorError::CapExceeded {
                contexts: n_contexts,
                cap: cap_entries,
            })?;
        if entries > cap_entries {
            return Err(PredictorError::CapExceeded {
                contexts: n_contexts,
                cap: cap_entries,
            });
        }
        Ok(TabularPredictor {
            family,
            vocab,
            l,
            n_contexts,
            logits: vec![0.0; entries as usize],
        })
    }

    /// Number of addressable contexts, (V+1)^L.
    pub fn n_contexts(&self) -> u64 {
        self.n_contexts
    }

    /// Base-(V+1) key of a masked sequence (mask digit 0, token digit 1..V).
    pub fn context_key(&self, z: &[Token]) -> u64 {
        let base = (self.vocab.v + 1) as u64;
        let mask = self.vocab.mask_id();
        let mut key = 0u64;
        for &tok in z.iter().rev() {
            let digit = if tok == mask { 0 } else { tok as u64 };
            key = key * base + digit;
        }
        key
    }

    fn row_offset(&self, key: u64, position: usize) -> usize {
        ((key * self.l as u64 + position as u64) * self.vocab.v as u64) as usize
    }

    fn row(&self, key: u64, position: usize) -> &[f64] {
        let off = self.row_offset(key, position);
        &self.logits[off..off + self.vocab.v as usize]
    }

    /// Overwrites the logits of one (context, position) row with the log of
    /// a probability vector; zero probabilities become -inf logits.
    pub fn assign_distribution(&mut self, z: &[Token], position: usize, probs: &[f64]) {
        let key = self.context_key(z);
        let off = self.row_offset(key, position);
        for (slot, &p) in probs.iter().enumerate() {
            self.logits[off + slot] = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        }
    }

    fn validate_masked_context(&self, z: &[Token]) -> Result<Vec<usize>, PredictorError> {
        if z.len() != self.l {
            return Err(PredictorError::Family(format!(
                "context length {} != L={}",
                z.len(),
                self.l
            )));
        }
        let mask = self.vocab.mask_id();
        let targets: Vec<usize> = z
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask)
            .map(|(i, _)| i)
            .collect();
        if z.iter().any(|&t| t != mask && !self.vocab.is_real_token(t)) {
            return Err(PredictorError::Family("token out of vocabulary".into()));
        }
        if targets.is_empty() {
            return Err(PredictorError::Family("no masked target positions".into()));
        }
        Ok(targets)
    }

    fn validate_clean_context(&self, x: &[Token]) -> Result<(), PredictorError> {
        if x.len() != self.l {
            return Err(PredictorError::Family(format!(
                "context length {} != L={}",
                x.len(),
                self.l
            )));
        }
        if x.iter().any(|&t| !self.vocab.is_real_token(t)) {
            return Err(PredictorError::Family(
                "prefix-family input must be a clean sequence".into(),
            ));
        }
        Ok(())
    }

    pub fn predict(&self, tokens: &[Token]) -> Result<Vec<TargetDist>, PredictorError> {
        match &self.family {
            ContextFamily::Masked => {
                let targets = self.validate_masked_context(tokens)?;
                let key = self.context_key(tokens);
                Ok(targets
                    .into_iter()
                    .map(|i| TargetDist {
                        position: i,
                        probs: softmax(self.row(key, i)),
                    })
                    .collect())
            }
            family => {
                self.validate_clean_context(tokens)?;
                let order = family.order(self.l).expect("prefix family");
                let mask = self.vocab.mask_id();
                let mut z: Vec<Token> = vec![mask; self.l];
                let mut out = Vec::with_capacity(self.l);
                for &pos in &order {
                    let key = self.context_key(&z);
                    out.push(TargetDist {
                        position: pos,
                        probs: softmax(self.row(key, pos)),
                    });
                    z[pos] = tokens[pos];
                }
                Ok(out)
            }
        }
    }

    pub fn loss_and_grad(
        &self,
        batch: &[BatchItem],
        normalizer: f64,
    ) -> Result<GradientReport, PredictorError> {
        assert!(normalizer > 0.0);
        let mut grad = vec![0.0; self.logits.len()];
        let mut loss = 0.0;
        for item in batch {
            // Resolve each target to its table row.
            let rows: Vec<(usize, usize, Token, f64)> = match &self.family {
                ContextFamily::Masked => {
                    self.validate_masked_context(&item.context)?;
                    let key = self.context_key(&item.context);
                    item.targets
                        .iter()
                        .map(|&(pos, tok, w)| (self.row_offset(key, pos), pos, tok, w))
                        .collect()
                }
                family => {
                    self.validate_clean_context(&item.context)?;
                    let order = family.order(self.l).expect("prefix family");
                    let mask = self.vocab.mask_id();
                    let mut z: Vec<Token> = vec![mask; self.l];
                    let mut offsets = vec![0usize; self.l];
                    for &pos in &order {
                        offsets[pos] = self.row_offset(self.context_key(&z), pos);
                        z[pos] = item.context[pos];
                    }
                    item.targets
                        .iter()
                        .map(|&(pos, tok, w)| (offsets[pos], pos, tok, w))
                        .collect()
                }
            };
            for (off, _pos, tok, w) in rows {
                let row = &self.logits[off..off + self.vocab.v as usize];
                let probs = softmax(row);
                let slot = (tok - 1) as usize;
                loss += w * -probs[slot].max(f64::MIN_POSITIVE).ln();
                for (a, &p) in probs.iter().enumerate() {
                    grad[off + a] += w * (p - if a == slot { 1.0 } else { 0.0 });
                }
            }
        }
        loss /= normalizer;
        for g in &mut grad {
            *g /= normalizer;
        }
        Ok(GradientReport { loss, grad })
    }
}

/// Numerically stable softmax; -inf logits get exact zero probability.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![1.0 / logits.len() as f64; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Fits a tabular predictor so that `predict` equals the exact data
/// conditional at every reachable context of the family.
pub fn fit_tabular_to_oracle(
    world: &MarkovWorld,
    family: ContextFamily,
    cap_entries: u64,
) -> Result<TabularPredictor, PredictorError> {
    let vocab = world.vocab();
    let l = world.len();
    let mut tab = TabularPredictor::new(family.clone(), vocab, l, cap_entries)?;
    let mask = vocab.mask_id();
    match &family {
        ContextFamily::Masked => {
            // All patterns, all revealed assignments with positive mass.
            for pattern in 0u32..(1u32 << l) {
                if pattern == 0 {
                    continue;
                }
                let revealed: Vec<usize> = (0..l).filter(|j| pattern & (1 << j) == 0).collect();
                for_each_assignment(vocab.v, revealed.len(), |vals| {
                    let mut z: Vec<Token> = vec![mask; l];
                    for (slot, &pos) in revealed.iter().enumerate() {
                        z[pos] = vals[slot];
                    }
                    for i in 0..l {
                        if z[i] != mask {
                            continue;
                        }
                        if let Ok(cond) = world.conditional(&z, i) {
                            tab.assign_distribution(&z, i, &cond.probs);
                        }
                    }
                });
            }
        }
        family => {
            let order = family.order(l).expect("prefix family");
            for rank in 0..l {
                let prefix_positions = &order[..rank];
                let target = order[rank];
                for_each_assignment(vocab.v, rank, |vals| {
                    let mut z: Vec<Token> = vec![mask; l];
                    for (slot, &pos) in prefix_positions.iter().enumerate() {
                        z[pos] = vals[slot];
                    }
                    if let Ok(cond) = world.conditional(&z, target) {
                        tab.assign_distribution(&z, target, &cond.probs);
                    }
                });
            }
        }
    }
    Ok(tab)
}

/// Calls `f` with every token assignment of `slots` positions.
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
// Network backend
// ---------------------------------------------------------------------------

/// Small time-agnostic network: token + position embeddings, 1-2 mixing
/// layers pooling over visible positions (full visibility for the masked
/// family, causal-in-order for prefix families), and a per-position output
/// head over the real vocabulary.
#[derive(Debug, Clone)]
pub struct NetPredictor {
    pub family: ContextFamily,
    pub vocab: VocabSpec,
    pub l: usize,
    pub dim: usize,
    pub layers: usize,
    pub params: Vec<f64>,
    offsets: NetOffsets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NetOffsets {
    tok_emb: usize,   // (V+1) x d, row = token - 1; mask row = V
    pos_emb: usize,   // L x d
    layer0: usize,    // per layer: W_self d*d, W_ctx d*d, b d
    layer_stride: usize,
    w_q: usize,       // d x d
    w_p: usize,       // d x d
    b_q: usize,       // d
    w_out: usize,     // V x d
    b_out: usize,     // V
    start: usize,     // d (prefix-family begin state)
    total: usize,
}

/// Network width and depth configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub dim: usize,
    pub layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { dim: 32, layers: 2 }
    }
}

impl NetOffsets {
    fn new(v: usize, l: usize, d: usize, layers: usize) -> Self {
        let mut cursor = 0usize;
        let take = |n: usize, cursor: &mut usize| {
            let at = *cursor;
            *cursor += n;
            at
        };
        let tok_emb = take((v + 1) * d, &mut cursor);
        let pos_emb = take(l * d, &mut cursor);
        let layer0 = cursor;
        let layer_stride = 2 * d * d + d;
        cursor += layers * layer_stride;
        let w_q = take(d * d, &mut cursor);
        let w_p = take(d * d, &mut cursor);
        let b_q = take(d, &mut cursor);
        let w_out = take(v * d, &mut cursor);
        let b_out = take(v, &mut cursor);
        let start = take(d, &mut cursor);
        NetOffsets {
            tok_emb,
            pos_emb,
            layer0,
            layer_stride,
            w_q,
            w_p,
            b_q,
            w_out,
            b_out,
            start,
            total: cursor,
        }
    }

    fn layer(&self, l: usize) -> (usize, usize, usize) {
        let base = self.layer0 + l * self.layer_stride;
        (base, base + self.sq(), base + 2 * self.sq())
    }

    fn sq(&self) -> usize {
        // W_self and W_ctx are d x d; stride = 2 d^2 + d.
        (self.layer_stride - self.dim()) / 2
    }

    fn dim(&self) -> usize {
        // b has length d and layer_stride = 2d^2 + d solves to this:
        // stored implicitly; recompute from stride: 2d^2 + d - stride = 0.
        // Cheaper: keep d in the predictor; this helper is only used via
        // layer() above with sq() consistent by construction.
        let s = self.layer_stride;
        // d = positive root of 2d^2 + d - s = 0
        (((1.0 + 8.0 * s as f64).sqrt() - 1.0) / 4.0).round() as usize
    }
}

/// Scratch buffers for one forward/backward pass.
struct NetTrace {
    emb: Vec<Vec<f64>>,           // h^0
    hidden: Vec<Vec<Vec<f64>>>,   // h^l per layer, length `layers`
    pooled: Vec<Vec<Vec<f64>>>,   // pooling input per layer per position
    head_state: Vec<Vec<f64>>,    // s_j fed to the head at each target
    head_q: Vec<Vec<f64>>,        // tanh output of the head
    logits: Vec<Vec<f64>>,
    order: Option<Vec<usize>>,
}

impl NetPredictor {
    pub fn new(
        family: ContextFamily,
        vocab: VocabSpec,
        l: usize,
        config: NetConfig,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        family.validate(l)?;
        if config.layers == 0 || config.layers > 2 {
            return Err(PredictorError::Shape(format!(
                "layers={} outside 1..=2",
                config.layers
            )));
        }
        let v = vocab.v as usize;
        let d = config.dim;
        let offsets = NetOffsets::new(v, l, d, config.layers);
        let mut params = vec![0.0; offsets.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Symmetric init: position embeddings, biases and the start state are
        // zero; matrices and token embeddings are Xavier-uniform.
        let xavier = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.gen_range(-a..a)
        };
        for row in 0..=v {
            for c in 0..d {
                params[offsets.tok_emb + row * d + c] = xavier(v + 1, d, &mut rng);
            }
        }
        for layer in 0..config.layers {
            let (w_self, w_ctx, _b) = offsets.layer(layer);
            for i in 0..d * d {
                params[w_self + i] = xavier(d, d, &mut rng);
                params[w_ctx + i] = xavier(d, d, &mut rng);
            }
        }
        for i in 0..d * d {
            params[offsets.w_q + i] = xavier(d, d, &mut rng);
            params[offsets.w_p + i] = xavier(d, d, &mut rng);
        }
        for i in 0..v * d {
            params[offsets.w_out + i] = xavier(d, v, &mut rng);
        }
        Ok(NetPredictor {
            family,
            vocab,
            l,
            dim: d,
            layers: config.layers,
            params,
            offsets,
        })
    }

    fn mat(&self, at: usize, rows: usize, cols: usize) -> &[f64] {
        let _ = rows;
        let _ = cols;
        &self.params[at..]
    }

    /// y = W x + y0 where W is rows x cols at `at` (row-major).
    fn affine(&self, at: usize, rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
        let w = self.mat(at, rows, cols);
        for r in 0..rows {
            let mut acc = 0.0;
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += row[c] * x[c];
            }
            y[r] += acc;
        }
    }

    /// x += W^T dy.
    fn affine_transpose_acc(
        params: &[f64],
        at: usize,
        rows: usize,
        cols: usize,
        dy: &[f64],
        dx: &mut [f64],
    ) {
        for r in 0..rows {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            let row = &params[at + r * cols..at + (r + 1) * cols];
            for c in 0..cols {
                dx[c] += row[c] * g;
            }
        }
    }

    /// dW += dy x^T.
    fn outer_acc(grad: &mut [f64], at: usize, rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
        for r in 0..rows {
            let g = dy[r];
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[at + r * cols..at + (r + 1) * cols];
            for c in 0..cols {
                row[c] += g * x[c];
            }
        }
    }

    fn token_row(&self, tok: Token) -> usize {
        // Tokens 1..=V at rows 0..V-1; mask sentinel at row V.
        (tok - 1) as usize
    }

    fn validate(&self, tokens: &[Token]) -> Result<Vec<usize>, PredictorError> {
        if tokens.len() != self.l {
            return Err(PredictorError::Family(format!(
                "context length {} != L={}",
                tokens.len(),
                self.l
            )));
        }
        let mask = self.vocab.mask_id();
        match &self.family {
            ContextFamily::Masked => {
                if tokens
                    .iter()
                    .any(|&t| t != mask && !self.vocab.is_real_token(t))
                {
                    return Err(PredictorError::Family("token out of vocabulary".into()));
                }
                let targets: Vec<usize> = tokens
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t == mask)
                    .map(|(i, _)| i)
                    .collect();
                if targets.is_empty() {
                    return Err(PredictorError::Family("no masked target positions".into()));
                }
                Ok(targets)
            }
            family => {
                if tokens.iter().any(|&t| !self.vocab.is_real_token(t)) {
                    return Err(PredictorError::Family(
                        "prefix-family input must be a clean sequence".into(),
                    ));
                }
                Ok(family.order(self.l).expect("prefix family"))
            }
        }
    }

    /// Forward pass; returns target positions plus the full trace for
    /// backward.
    fn forward(&self, tokens: &[Token]) -> Result<(Vec<usize>, NetTrace), PredictorError> {
        let targets = self.validate(tokens)?;
        let d = self.dim;
        let v = self.vocab.v as usize;
        let o = &self.offsets;
        let pos_emb = |j: usize| &self.params[o.pos_emb + j * d..o.pos_emb + (j + 1) * d];
        // Embeddings.
        let emb: Vec<Vec<f64>> = (0..self.l)
            .map(|j| {
                let row = self.token_row(tokens[j]);
                let te = &self.params[o.tok_emb + row * d..o.tok_emb + (row + 1) * d];
                te.iter().zip(pos_emb(j)).map(|(a, b)| a + b).collect()
            })
            .collect();
        let order = self.family.order(self.l);
        // Mixing layers.
        let mut hidden: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers);
        let mut pooled_all: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers);
        let mut prev: &Vec<Vec<f64>> = &emb;
        for layer in 0..self.layers {
            let (w_self, w_ctx, b) = o.layer(layer);
            let pooled: Vec<Vec<f64>> = match &order {
                None => {
                    // Full visibility: one shared mean.
                    let mut m = vec![0.0; d];
                    for h in prev {
                        for (mm, &x) in m.iter_mut().zip(h) {
                            *mm += x;
                        }
                    }
                    for mm in &mut m {
                        *mm /= self.l as f64;
                    }
                    vec![m; self.l]
                }
                Some(ord) => {
                    // Causal inclusive cumulative mean in generation order.
                    let mut out = vec![vec![0.0; d]; self.l];
                    let mut acc = vec![0.0; d];
                    for (r, &pos) in ord.iter().enumerate() {
                        for (a, &x) in acc.iter_mut().zip(&prev[pos]) {
                            *a += x;
                        }
                        let inv = 1.0 / (r + 1) as f64;
                        for (slot, &a) in out[pos].iter_mut().zip(&acc) {
                            *slot = a * inv;
                        }
                    }
                    out
                }
            };
            let mut next: Vec<Vec<f64>> = Vec::with_capacity(self.l);
            for j in 0..self.l {
                let mut a = self.params[b..b + d].to_vec();
                self.affine(w_self, d, d, &prev[j], &mut a);
                self.affine(w_ctx, d, d, &pooled[j], &mut a);
                for x in &mut a {
                    *x = x.tanh();
                }
                next.push(a);
            }
            pooled_all.push(pooled);
            hidden.push(next);
            prev = hidden.last().unwrap();
        }
        let last = hidden.last().unwrap();
        // Output head per target.
        let mut head_state = Vec::with_capacity(targets.len());
        let mut head_q = Vec::with_capacity(targets.len());
        let mut logits = Vec::with_capacity(targets.len());
        for (slot, &pos) in targets.iter().enumerate() {
            let state: Vec<f64> = match &order {
                None => last[pos].clone(),
                Some(ord) => {
                    let rank = slot; // targets are emitted in order for prefix families
                    debug_assert_eq!(ord[rank], pos);
                    if rank == 0 {
                        self.params[o.start..o.start + d].to_vec()
                    } else {
                        last[ord[rank - 1]].clone()
                    }
                }
            };
            let mut u = self.params[o.b_q..o.b_q + d].to_vec();
            self.affine(o.w_q, d, d, &state, &mut u);
            self.affine(o.w_p, d, d, pos_emb(pos), &mut u);
            for x in &mut u {
                *x = x.tanh();
            }
            let mut lg = self.params[o.b_out..o.b_out + v].to_vec();
            self.affine(o.w_out, v, d, &u, &mut lg);
            head_state.push(state);
            head_q.push(u);
            logits.push(lg);
        }
        Ok((
            targets,
            NetTrace {
                emb,
                hidden,
                pooled: pooled_all,
                head_state,
                head_q,
                logits,
                order,
            },
        ))
    }

    pub fn predict(&self, tokens: &[Token]) -> Result<Vec<TargetDist>, PredictorError> {
        let (targets, trace) = self.forward(tokens)?;
        Ok(targets
            .iter()
            .zip(&trace.logits)
            .map(|(&position, lg)| TargetDist {
                position,
                probs: softmax(lg),
            })
            .collect())
    }

    pub fn loss_and_grad(
        &self,
        batch: &[BatchItem],
        normalizer: f64,
    ) -> Result<GradientReport, PredictorError> {
        assert!(normalizer > 0.0);
        let d = self.dim;
        let v = self.vocab.v as usize;
        let o = &self.offsets;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for item in batch {
            let (targets, trace) = self.forward(&item.context)?;
            // Weight per target slot; skip contexts with no requested target.
            let mut slot_weight = vec![0.0f64; targets.len()];
            let mut slot_token = vec![0 as Token; targets.len()];
            for &(pos, tok, w) in &item.targets {
                let slot = targets
                    .iter()
                    .position(|&p| p == pos)
                    .ok_or_else(|| {
                        PredictorError::Family(format!("position {pos} is not a target"))
                    })?;
                slot_weight[slot] += w;
                slot_token[slot] = tok;
            }
            // dh accumulators for the last hidden layer.
            let mut d_last = vec![vec![0.0; d]; self.l];
            let mut d_start = vec![0.0; d];
            for (slot, &pos) in targets.iter().enumerate() {
                let w = slot_weight[slot];
                if w == 0.0 {
                    continue;
                }
                let tok = slot_token[slot];
                let probs = softmax(&trace.logits[slot]);
                let tslot = (tok - 1) as usize;
                loss += w * -probs[tslot].max(f64::MIN_POSITIVE).ln();
                let dlogits: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(a, &p)| w * (p - if a == tslot { 1.0 } else { 0.0 }))
                    .collect();
                // Head backward.
                Self::outer_acc(&mut grad, o.w_out, v, d, &dlogits, &trace.head_q[slot]);
                for (a, &g) in dlogits.iter().enumerate() {
                    grad[o.b_out + a] += g;
                }
                let mut dq = vec![0.0; d];
                Self::affine_transpose_acc(&self.params, o.w_out, v, d, &dlogits, &mut dq);
                let q = &trace.head_q[slot];
                let du: Vec<f64> = dq.iter().zip(q).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                let pe = &self.params[o.pos_emb + pos * d..o.pos_emb + (pos + 1) * d];
                Self::outer_acc(&mut grad, o.w_q, d, d, &du, &trace.head_state[slot]);
                Self::outer_acc(&mut grad, o.w_p, d, d, &du, pe);
                for (c, &g) in du.iter().enumerate() {
                    grad[o.b_q + c] += g;
                }
                // d(pos_emb) through the head.
                let mut dpe = vec![0.0; d];
                Self::affine_transpose_acc(&self.params, o.w_p, d, d, &du, &mut dpe);
                for (c, &g) in dpe.iter().enumerate() {
                    grad[o.pos_emb + pos * d + c] += g;
                }
                // State backward: into the last hidden layer or start vector.
                let mut ds = vec![0.0; d];
                Self::affine_transpose_acc(&self.params, o.w_q, d, d, &du, &mut ds);
                match &trace.order {
                    None => {
                        for (c, &g) in ds.iter().enumerate() {
                            d_last[pos][c] += g;
                        }
                    }
                    Some(ord) => {
                        if slot == 0 {
                            for (c, &g) in ds.iter().enumerate() {
                                d_start[c] += g;
                            }
                        } else {
                            let prev_pos = ord[slot - 1];
                            for (c, &g) in ds.iter().enumerate() {
                                d_last[prev_pos][c] += g;
                            }
                        }
                    }
                }
            }
            for (c, &g) in d_start.iter().enumerate() {
                grad[o.start + c] += g;
            }
            // Mixing layers backward, top to bottom.
            let mut d_upper = d_last;
            for layer in (0..self.layers).rev() {
                let (w_self, w_ctx, b) = o.layer(layer);
                let h = &trace.hidden[layer];
                let below: &Vec<Vec<f64>> = if layer == 0 {
                    &trace.emb
                } else {
                    &trace.hidden[layer - 1]
                };
                let pooled = &trace.pooled[layer];
                let mut d_below = vec![vec![0.0; d]; self.l];
                let mut d_pooled = vec![vec![0.0; d]; self.l];
                for j in 0..self.l {
                    let da: Vec<f64> = d_upper[j]
                        .iter()
                        .zip(&h[j])
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect();
                    if da.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    Self::outer_acc(&mut grad, w_self, d, d, &da, &below[j]);
                    Self::outer_acc(&mut grad, w_ctx, d, d, &da, &pooled[j]);
                    for (c, &g) in da.iter().enumerate() {
                        grad[b + c] += g;
                    }
                    Self::affine_transpose_acc(&self.params, w_self, d, d, &da, &mut d_below[j]);
                    Self::affine_transpose_acc(&self.params, w_ctx, d, d, &da, &mut d_pooled[j]);
                }
                // Pooling backward.
                match &trace.order {
                    None => {
                        let mut total = vec![0.0; d];
                        for dp in &d_pooled {
                            for (t, &g) in total.iter_mut().zip(dp) {
                                *t += g;
                            }
                        }
                        let inv = 1.0 / self.l as f64;
                        for j in 0..self.l {
                            for (c, &g) in total.iter().enumerate() {
                                d_below[j][c] += g * inv;
                            }
                        }
                    }
                    Some(ord) => {
                        // pooled at rank r is mean of below over ranks <= r:
                        // d_below[rank r'] += sum_{r >= r'} d_pooled[r] / (r+1).
                        let mut suffix = vec![0.0; d];
                        for r in (0..self.l).rev() {
                            let pos = ord[r];
                            let inv = 1.0 / (r + 1) as f64;
                            for (s, &g) in suffix.iter_mut().zip(&d_pooled[pos]) {
                                *s += g * inv;
                            }
                            for (c, &s) in suffix.iter().enumerate() {
                                d_below[pos][c] += s;
                            }
                        }
                    }
                }
                d_upper = d_below;
            }
            // Embedding backward.
            for j in 0..self.l {
                let row = self.token_row(item.context[j]);
                for (c, &g) in d_upper[j].iter().enumerate() {
                    grad[o.tok_emb + row * d + c] += g;
                    grad[o.pos_emb + j * d + c] += g;
                }
            }
        }
        loss /= normalizer;
        for g in &mut grad {
            *g /= normalizer;
        }
        Ok(GradientReport { loss, grad })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// JSON header of a parameter checkpoint; the flat f64 array follows in
/// little-endian bytes.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub family: String,
    pub v: u16,
    pub l: usize,
    pub dim: usize,
    pub layers: usize,
    pub param_len: usize,
    pub seed: u64,
    pub step: u64,
}

pub fn save_checkpoint(
    predictor: &Predictor,
    path: &Path,
    seed: u64,
    step: u64,
) -> Result<(), PredictorError> {
    let (kind, dim, layers) = match predictor {
        Predictor::Tabular(_) => ("tabular".to_string(), 0, 0),
        Predictor::Net(n) => ("net".to_string(), n.dim, n.layers),
    };
    let header = CheckpointHeader {
        kind,
        family: predictor.family().name(),
        v: predictor.vocab().v,
        l: predictor.len(),
        dim,
        layers,
        param_len: predictor.param_len(),
        seed,
        step,
    };
    let mut file =
        std::fs::File::create(path).map_err(|e| PredictorError::Io(e.to_string()))?;
    let mut header_line =
        serde_json::to_string(&header).map_err(|e| PredictorError::Io(e.to_string()))?;
    header_line.push('\n');
    file.write_all(header_line.as_bytes())
        .map_err(|e| PredictorError::Io(e.to_string()))?;
    let mut bytes = Vec::with_capacity(predictor.param_len() * 8);
    for &p in predictor.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    file.write_all(&bytes)
        .map_err(|e| PredictorError::Io(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<(Predictor, CheckpointHeader), PredictorError> {
    let mut file = std::fs::File::open(path).map_err(|e| PredictorError::Io(e.to_string()))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|e| PredictorError::Io(e.to_string()))?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| PredictorError::Io("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&raw[..newline])
        .map_err(|e| PredictorError::Io(e.to_string()))?;
    let body = &raw[newline + 1..];
    if body.len() != header.param_len * 8 {
        return Err(PredictorError::Io(format!(
            "expected {} parameter bytes, found {}",
            header.param_len * 8,
            body.len()
        )));
    }
    let params: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let family = ContextFamily::parse_name(&header.family)?;
    let vocab = VocabSpec::new(header.v).map_err(|e| PredictorError::Io(e.to_string()))?;
    let mut predictor = match header.kind.as_str() {
        "tabular" => Predictor::Tabular(TabularPredictor::new(
            family,
            vocab,
            header.l,
            TABULAR_CAP_ENTRIES,
        )?),
        "net" => Predictor::Net(NetPredictor::new(
            family,
            vocab,
            header.l,
            NetConfig {
                dim: header.dim,
                layers: header.layers,
            },
            header.seed,
        )?),
        k => return Err(PredictorError::Io(format!("unknown checkpoint kind {k}"))),
    };
    if predictor.param_len() != header.param_len {
        return Err(PredictorError::Io("parameter count mismatch".into()));
    }
    predictor.params_mut().copy_from_slice(&params);
    Ok((predictor, header))
}

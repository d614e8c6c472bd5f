//! Desk-scale laboratory for masked-diffusion-model training objectives.
//!
//! The crate provides, on small synthetic worlds where everything is exactly
//! computable:
//!
//! - time-sampling laws on `[0,1]` with stratified sampling ([`timelaw`]),
//! - exact combinatorics of run-constrained mask patterns ([`maskmath`]),
//! - the absorbing-mask forward process and noise schedulers ([`corruptor`]),
//! - order-1 Markov worlds with exact conditional oracles ([`worldmodel`]),
//! - tabular and small-network conditional predictors ([`predictor`]),
//! - Monte-Carlo and exact loss evaluators ([`objectives`]),
//! - training loops and analysis instruments ([`trainlab`]).

pub mod corruptor;
pub mod maskmath;
pub mod numeric;
pub mod objectives;
pub mod predictor;
pub mod timelaw;
pub mod trainlab;
pub mod verify;
pub mod worldmodel;

/// Token identifier. Real tokens are `1..=V`; the mask sentinel is `V + 1`.
pub type Token = u16;

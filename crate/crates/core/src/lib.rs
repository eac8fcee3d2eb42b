//! Modality-adaptive contrastive decoding for audio-visual language models.
//!
//! The engine talks to a model only through [`LogitProvider`]: next-token
//! logits under one of four input configurations, each modality either
//! intact or perturbed. Fusion rules live in [`strategies`], the decoding
//! loop in [`generation`], and a seeded synthetic model plus benchmark in
//! [`provider::synth`] and [`harness`].
//!
//! ```
//! use madec::prelude::*;
//!
//! let suite = build_suite(&SuiteConfig::new(2, 42)).unwrap();
//! let provider = suite.provider();
//! let task = &suite.tasks[0];
//! let ctx = Context::generation(task.id, task.question.tokens.clone());
//!
//! let out = generate(
//!     &provider,
//!     &DecodingParams::mad(2.5),
//!     &ctx,
//!     &GenerationLimits::new(4),
//!     &GenerationOptions::default(),
//! )
//! .unwrap();
//! assert_eq!(out.tokens[0], task.correct);
//! ```

pub mod error;
pub mod generation;
pub mod harness;
pub mod numeric;
pub mod provider;
pub mod rng;
pub mod strategies;
pub mod vocab;
pub mod weights;

pub use error::{Error, ProviderError, Result};
pub use provider::LogitProvider;

pub mod prelude {
    pub use crate::error::{Error, ProviderError, Result};
    pub use crate::generation::{expected_calls, generate, read_traces_jsonl, replay_check, DecodingTrace, Generation, GenerationLimits, GenerationOptions, ReplayOutcome, TraceStatus};
    pub use crate::harness::{build_suite, evaluate, Category, EvalOptions, Suite, SuiteConfig, SuiteMetrics, TaskSpec, WeightSource};
    pub use crate::numeric::{argmax_token, softmax, LogitVector};
    pub use crate::provider::{BranchLogits, Context, LogitProvider, ModalityConfig, ModalityState, SynthModelSpec, SynthProvider};
    pub use crate::strategies::{fuse, mad_logits, DecodingParams, Strategy};
    pub use crate::vocab::{TokenId, Vocabulary};
    pub use crate::weights::{extract_weights, masked_weights, ModalityWeights, PromptRegistry, Relevance, WeightMask};
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
}

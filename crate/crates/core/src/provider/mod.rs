//! The logit-provider abstraction: a deterministic function from a modality
//! configuration and a context to next-token logits.
//!
//! A provider stands in for an audio-visual LLM. The engine never sees
//! tensors; it asks for logits under one of four input configurations (each
//! modality either standard or perturbed) and does all fusion itself.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::LogitVector;
use crate::vocab::{TokenId, Vocabulary};

pub mod remote;
pub mod synth;
pub mod wire;

pub use remote::{RemoteOptions, RemoteProvider};
pub use synth::{QuestionSpec, RandomSpecShape, SynthModelSpec, SynthProvider};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityState {
    Standard,
    Perturbed,
}

impl ModalityState {
    pub fn is_standard(self) -> bool {
        self == ModalityState::Standard
    }
}

/// Which of the four input variants a forward pass sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub video: ModalityState,
    pub audio: ModalityState,
}

impl ModalityConfig {
    /// `vaq`: both modalities intact.
    pub const CLEAN: Self = Self::new(ModalityState::Standard, ModalityState::Standard);
    /// `ṽaq`: video perturbed.
    pub const VIDEO_PERTURBED: Self = Self::new(ModalityState::Perturbed, ModalityState::Standard);
    /// `vãq`: audio perturbed.
    pub const AUDIO_PERTURBED: Self = Self::new(ModalityState::Standard, ModalityState::Perturbed);
    /// `ṽãq`: both perturbed.
    pub const BOTH_PERTURBED: Self = Self::new(ModalityState::Perturbed, ModalityState::Perturbed);

    pub const ALL: [Self; 4] = [
        Self::CLEAN,
        Self::VIDEO_PERTURBED,
        Self::AUDIO_PERTURBED,
        Self::BOTH_PERTURBED,
    ];

    pub const fn new(video: ModalityState, audio: ModalityState) -> Self {
        Self { video, audio }
    }

    /// Position in [`ModalityConfig::ALL`].
    pub fn index(self) -> usize {
        match (self.video, self.audio) {
            (ModalityState::Standard, ModalityState::Standard) => 0,
            (ModalityState::Perturbed, ModalityState::Standard) => 1,
            (ModalityState::Standard, ModalityState::Perturbed) => 2,
            (ModalityState::Perturbed, ModalityState::Perturbed) => 3,
        }
    }
}

impl fmt::Display for ModalityConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = if self.video.is_standard() { "v" } else { "~v" };
        let a = if self.audio.is_standard() { "a" } else { "~a" };
        write!(f, "{v}{a}q")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generation,
    /// The modality self-assessment query, phrased with the given prompt variant.
    ModalityQuery(u32),
}

/// Everything a forward pass conditions on besides the modality inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub question_id: u64,
    pub question: Vec<TokenId>,
    prefix: Vec<TokenId>,
    pub mode: Mode,
}

impl Context {
    pub fn generation(question_id: u64, question: Vec<TokenId>) -> Self {
        Self {
            question_id,
            question,
            prefix: Vec::new(),
            mode: Mode::Generation,
        }
    }

    /// The same question under the modality query prompt `prompt`.
    pub fn modality_query(&self, prompt: u32) -> Self {
        Self {
            mode: Mode::ModalityQuery(prompt),
            ..self.clone()
        }
    }

    /// Replaces the prefix. `eos` may only appear as the last element.
    pub fn with_prefix(mut self, prefix: Vec<TokenId>, eos: TokenId) -> Result<Self> {
        if let Some(pos) = prefix.iter().position(|&t| t == eos) {
            if pos + 1 != prefix.len() {
                return Err(Error::invalid("EOS inside a prefix"));
            }
        }
        self.prefix = prefix;
        Ok(self)
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    pub(crate) fn push(&mut self, token: TokenId, eos: TokenId) -> Result<()> {
        if self.prefix.last() == Some(&eos) {
            return Err(Error::invalid("cannot extend a prefix that ended with EOS"));
        }
        self.prefix.push(token);
        Ok(())
    }
}

/// Thread-safe monotone call counter shared by provider implementations.
#[derive(Debug, Default)]
pub struct CallCounter(AtomicU64);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// A source of modality-conditioned next-token logits.
///
/// Implementations must be deterministic for a fixed state and count every
/// forward pass exactly once.
pub trait LogitProvider: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    /// One forward pass. Generation mode returns next-token logits; query mode
    /// returns the full vocabulary distribution for the self-assessment prompt
    /// (only the meta tokens are read from it).
    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector>;

    /// Total forward passes served so far.
    fn calls(&self) -> u64;
}

impl<P: LogitProvider + ?Sized> LogitProvider for &P {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        (**self).logits(cfg, ctx)
    }
    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Arc<P> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        (**self).logits(cfg, ctx)
    }
    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

impl<P: LogitProvider + ?Sized> LogitProvider for Box<P> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        (**self).logits(cfg, ctx)
    }
    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

/// Next-token logits for `ctx` under `cfg`. Exactly one provider call.
pub fn eval_logits<P: LogitProvider + ?Sized>(
    provider: &P,
    cfg: ModalityConfig,
    ctx: &Context,
) -> Result<LogitVector> {
    if ctx.mode != Mode::Generation {
        return Err(Error::invalid("eval_logits requires a generation-mode context"));
    }
    let out = provider.logits(cfg, ctx)?;
    check_len(provider, &out)?;
    Ok(out)
}

/// Raw logits of the three meta tokens under the modality query prompt.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLogits {
    pub both: f64,
    pub video: f64,
    pub audio: f64,
}

impl MetaLogits {
    /// `[z_av, z_v, z_a]`.
    pub fn to_array(self) -> [f64; 3] {
        [self.both, self.video, self.audio]
    }
}

/// Reads `(z_av, z_v, z_a)` from a single clean-input forward pass under the
/// modality query prompt carried by `ctx`.
pub fn eval_modality_query<P: LogitProvider + ?Sized>(
    provider: &P,
    ctx: &Context,
) -> Result<MetaLogits> {
    if !matches!(ctx.mode, Mode::ModalityQuery(_)) {
        return Err(Error::invalid("eval_modality_query requires a modality-query context"));
    }
    let sp = provider.vocab().special();
    let out = provider.logits(ModalityConfig::CLEAN, ctx)?;
    check_len(provider, &out)?;
    let read = |id: TokenId| {
        out.get(id)
            .ok_or_else(|| Error::Configuration(format!("meta token {id} outside the vocabulary")))
    };
    Ok(MetaLogits {
        both: read(sp.both)?,
        video: read(sp.video)?,
        audio: read(sp.audio)?,
    })
}

fn check_len<P: LogitProvider + ?Sized>(provider: &P, v: &LogitVector) -> Result<()> {
    let want = provider.vocab().len();
    if v.len() != want {
        return Err(crate::error::ProviderError::Malformed(format!(
            "expected {want} logits, got {}",
            v.len()
        ))
        .into());
    }
    Ok(())
}

/// Logits for all four modality configurations of one decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLogits {
    /// `logit^{vaq}`
    pub clean: LogitVector,
    /// `logit^{ṽaq}`
    pub video_perturbed: LogitVector,
    /// `logit^{vãq}`
    pub audio_perturbed: LogitVector,
    /// `logit^{ṽãq}`
    pub both_perturbed: LogitVector,
}

impl BranchLogits {
    pub fn new(
        clean: LogitVector,
        video_perturbed: LogitVector,
        audio_perturbed: LogitVector,
        both_perturbed: LogitVector,
    ) -> Result<Self> {
        let n = clean.len();
        for v in [&video_perturbed, &audio_perturbed, &both_perturbed] {
            if v.len() != n {
                return Err(Error::invalid("branch logits differ in length"));
            }
        }
        Ok(Self {
            clean,
            video_perturbed,
            audio_perturbed,
            both_perturbed,
        })
    }

    /// Four provider calls, one per configuration.
    pub fn evaluate<P: LogitProvider + ?Sized>(provider: &P, ctx: &Context) -> Result<Self> {
        Self::new(
            eval_logits(provider, ModalityConfig::CLEAN, ctx)?,
            eval_logits(provider, ModalityConfig::VIDEO_PERTURBED, ctx)?,
            eval_logits(provider, ModalityConfig::AUDIO_PERTURBED, ctx)?,
            eval_logits(provider, ModalityConfig::BOTH_PERTURBED, ctx)?,
        )
    }

    pub fn get(&self, cfg: ModalityConfig) -> &LogitVector {
        match cfg.index() {
            0 => &self.clean,
            1 => &self.video_perturbed,
            2 => &self.audio_perturbed,
            _ => &self.both_perturbed,
        }
    }

    pub fn to_partial(&self) -> PartialBranches {
        let mut p = PartialBranches::default();
        for cfg in ModalityConfig::ALL {
            p.insert(cfg, self.get(cfg).clone());
        }
        p
    }
}

/// Whichever branches a strategy actually needed for one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PartialBranches {
    slots: [Option<LogitVector>; 4],
}

impl PartialBranches {
    pub fn insert(&mut self, cfg: ModalityConfig, logits: LogitVector) {
        self.slots[cfg.index()] = Some(logits);
    }

    pub fn get(&self, cfg: ModalityConfig) -> Result<&LogitVector> {
        self.slots[cfg.index()]
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("branch {cfg} was not evaluated")))
    }

    pub fn present(&self) -> impl Iterator<Item = (ModalityConfig, &LogitVector)> {
        ModalityConfig::ALL
            .into_iter()
            .filter_map(|c| self.slots[c.index()].as_ref().map(|v| (c, v)))
    }

    pub fn into_full(self) -> Option<BranchLogits> {
        let [a, b, c, d] = self.slots;
        BranchLogits::new(a?, b?, c?, d?).ok()
    }
}

/// Wraps a provider and counts the calls made through this handle only, so
/// concurrent generations over a shared provider each get their own count.
pub struct CountingProvider<'a> {
    inner: &'a dyn LogitProvider,
    calls: CallCounter,
}

impl<'a> CountingProvider<'a> {
    pub fn new(inner: &'a dyn LogitProvider) -> Self {
        Self {
            inner,
            calls: CallCounter::default(),
        }
    }
}

impl LogitProvider for CountingProvider<'_> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        self.calls.bump();
        self.inner.logits(cfg, ctx)
    }

    fn calls(&self) -> u64 {
        self.calls.get()
    }
}

//! A seeded log-linear provider whose logits are a closed-form function of
//! the modality configuration.
//!
//! For question `q` in generation mode:
//!
//! ```text
//! L(y) = b_q(y)
//!      + [video standard] * (s^v_q(y) + x^v_q(y))
//!      + [audio standard] * (s^a_q(y) + x^a_q(y))
//!      + eos_bias(|prefix|) * [y = EOS]
//! ```
//!
//! `s` terms are grounding signals, `x` terms cross-modal interference.
//! Perturbing a modality removes both of its terms (hard gating). Under the
//! modality query prompt the meta token matching the question's relevance
//! gets `δ_q`, the other two get 0, each plus a small per-prompt jitter, and
//! every other token gets `-10 δ_q`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::LogitVector;
use crate::provider::{CallCounter, Context, LogitProvider, ModalityConfig, Mode};
use crate::rng::SplitMix64;
use crate::vocab::{TokenId, Vocabulary};
use crate::weights::Relevance;

/// EOS bias by prefix length used by generated specs: EOS is suppressed
/// before the first answer token and forced right after it.
pub const DEFAULT_EOS_BIAS: [f64; 2] = [-20.0, 50.0];

/// One question of a synthetic spec. Every vector has one entry per token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionSpec {
    pub id: u64,
    /// Token ids of the question text; unique within a spec.
    pub tokens: Vec<TokenId>,
    pub prior: Vec<f64>,
    pub video_grounding: Vec<f64>,
    pub audio_grounding: Vec<f64>,
    pub video_interference: Vec<f64>,
    pub audio_interference: Vec<f64>,
    pub relevance: Relevance,
    /// `δ_q` in nats, `>= 0`.
    pub meta_margin: f64,
    /// Per prompt variant, jitter on the `[both, video, audio]` meta logits.
    /// Empty means no jitter for any prompt.
    #[serde(default)]
    pub meta_jitter: Vec<[f64; 3]>,
}

impl QuestionSpec {
    /// A question with all vectors zero; callers fill in what they need.
    pub fn zeros(id: u64, tokens: Vec<TokenId>, vocab_size: usize, relevance: Relevance) -> Self {
        let z = vec![0.0; vocab_size];
        Self {
            id,
            tokens,
            prior: z.clone(),
            video_grounding: z.clone(),
            audio_grounding: z.clone(),
            video_interference: z.clone(),
            audio_interference: z,
            relevance,
            meta_margin: 0.0,
            meta_jitter: Vec::new(),
        }
    }

    fn vectors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("prior", &self.prior),
            ("video_grounding", &self.video_grounding),
            ("audio_grounding", &self.audio_grounding),
            ("video_interference", &self.video_interference),
            ("audio_interference", &self.audio_interference),
        ]
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        for (name, v) in self.vectors() {
            if v.len() != vocab_size {
                return Err(Error::invalid(format!(
                    "question {}: {name} has {} entries, vocabulary has {vocab_size}",
                    self.id,
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("question {}: {name} is not finite", self.id)));
            }
        }
        if !(self.meta_margin.is_finite() && self.meta_margin >= 0.0) {
            return Err(Error::invalid(format!("question {}: bad meta margin", self.id)));
        }
        let bound = self.meta_margin / 4.0;
        for eps in self.meta_jitter.iter().flatten() {
            if !(eps.abs() < bound || *eps == 0.0) {
                return Err(Error::invalid(format!(
                    "question {}: meta jitter {eps} not below δ/4 = {bound}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    fn jitter(&self, prompt: u32) -> Result<[f64; 3]> {
        if self.meta_jitter.is_empty() {
            return Ok([0.0; 3]);
        }
        self.meta_jitter
            .get(prompt as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("prompt variant {prompt} is not registered")))
    }
}

/// Shape of a [`SynthModelSpec::random`] spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomSpecShape {
    pub questions: u64,
    pub content_tokens: usize,
    pub prompts: u32,
}

impl Default for RandomSpecShape {
    fn default() -> Self {
        Self {
            questions: 64,
            content_tokens: 12,
            prompts: 5,
        }
    }
}

/// Field tags for [`SplitMix64::stream`] in random specs.
mod tag {
    pub const PRIOR: u64 = 0;
    pub const VIDEO_GROUNDING: u64 = 1;
    pub const AUDIO_GROUNDING: u64 = 2;
    pub const VIDEO_INTERFERENCE: u64 = 3;
    pub const AUDIO_INTERFERENCE: u64 = 4;
    pub const META: u64 = 5;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthModelSpec {
    seed: u64,
    vocab: Vocabulary,
    eos_bias: Vec<f64>,
    questions: Vec<QuestionSpec>,
    by_id: HashMap<u64, usize>,
    by_tokens: HashMap<Vec<TokenId>, u64>,
}

#[derive(Serialize, Deserialize)]
struct SpecFile {
    seed: u64,
    vocab: Vocabulary,
    eos_bias: Vec<f64>,
    questions: Vec<QuestionSpec>,
}

impl Serialize for SynthModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SpecFile {
            seed: self.seed,
            vocab: self.vocab.clone(),
            eos_bias: self.eos_bias.clone(),
            questions: self.questions.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SynthModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = SpecFile::deserialize(d)?;
        SynthModelSpec::new(f.seed, f.vocab, f.eos_bias, f.questions).map_err(serde::de::Error::custom)
    }
}

impl SynthModelSpec {
    pub fn new(
        seed: u64,
        vocab: Vocabulary,
        eos_bias: Vec<f64>,
        questions: Vec<QuestionSpec>,
    ) -> Result<Self> {
        if eos_bias.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("EOS bias schedule is not finite"));
        }
        let mut by_id = HashMap::new();
        let mut by_tokens = HashMap::new();
        for (i, q) in questions.iter().enumerate() {
            q.validate(vocab.len())?;
            if by_id.insert(q.id, i).is_some() {
                return Err(Error::invalid(format!("question id {} used twice", q.id)));
            }
            if q.tokens.iter().any(|&t| t as usize >= vocab.len()) {
                return Err(Error::invalid(format!("question {}: token out of range", q.id)));
            }
            if by_tokens.insert(q.tokens.clone(), q.id).is_some() {
                return Err(Error::invalid(format!("question {}: token list not unique", q.id)));
            }
        }
        Ok(Self {
            seed,
            vocab,
            eos_bias,
            questions,
            by_id,
            by_tokens,
        })
    }

    /// A spec whose every entry is drawn from the documented SplitMix64
    /// streams, so another implementation can rebuild it from `seed` alone.
    ///
    /// Per question `q` (vocabulary size `V`, `K` content tokens):
    /// - tokens: base-`K` digits of `q`, least significant first, each
    ///   mapped to content id `4 + digit` (`q = 0` gives one digit);
    /// - tag 0: `V` prior entries, `U[-4, 4)`;
    /// - tags 1..=4: video grounding, audio grounding, video interference,
    ///   audio interference, `V` entries each, `U[-2, 2)`;
    /// - tag 5: relevance `[both, video, audio][next % 3]`, then
    ///   `δ = U[0.5, 4)`, then for each prompt and each of
    ///   `[both, video, audio]`: `ε = 0.9 (δ/4) U[-1, 1)`.
    ///
    /// EOS bias is [`DEFAULT_EOS_BIAS`].
    pub fn random(seed: u64, shape: RandomSpecShape) -> Result<Self> {
        if shape.content_tokens < 2 {
            return Err(Error::invalid("random spec needs at least 2 content tokens"));
        }
        let vocab = Vocabulary::standard(shape.content_tokens);
        let v = vocab.len();
        let questions = (0..shape.questions)
            .map(|q| {
                let draw = |t: u64, lo: f64, hi: f64| {
                    let mut g = SplitMix64::stream(seed, q, t);
                    (0..v).map(|_| g.uniform(lo, hi)).collect::<Vec<f64>>()
                };
                let mut meta = SplitMix64::stream(seed, q, tag::META);
                let relevance = Relevance::ORDER[(meta.next_u64() % 3) as usize];
                let delta = meta.uniform(0.5, 4.0);
                let meta_jitter = (0..shape.prompts)
                    .map(|_| {
                        let mut e = [0.0; 3];
                        for x in &mut e {
                            *x = 0.9 * (delta / 4.0) * meta.uniform(-1.0, 1.0);
                        }
                        e
                    })
                    .collect();
                QuestionSpec {
                    id: q,
                    tokens: question_tokens(q, shape.content_tokens),
                    prior: draw(tag::PRIOR, -4.0, 4.0),
                    video_grounding: draw(tag::VIDEO_GROUNDING, -2.0, 2.0),
                    audio_grounding: draw(tag::AUDIO_GROUNDING, -2.0, 2.0),
                    video_interference: draw(tag::VIDEO_INTERFERENCE, -2.0, 2.0),
                    audio_interference: draw(tag::AUDIO_INTERFERENCE, -2.0, 2.0),
                    relevance,
                    meta_margin: delta,
                    meta_jitter,
                }
            })
            .collect();
        Self::new(seed, vocab, DEFAULT_EOS_BIAS.to_vec(), questions)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn eos_bias_schedule(&self) -> &[f64] {
        &self.eos_bias
    }

    /// EOS bias for a prefix of length `len`; the schedule's last entry
    /// repeats, and an empty schedule means no bias.
    pub fn eos_bias(&self, len: usize) -> f64 {
        match self.eos_bias.as_slice() {
            [] => 0.0,
            s => s[len.min(s.len() - 1)],
        }
    }

    pub fn questions(&self) -> &[QuestionSpec] {
        &self.questions
    }

    pub fn question(&self, id: u64) -> Result<&QuestionSpec> {
        self.by_id
            .get(&id)
            .map(|&i| &self.questions[i])
            .ok_or(Error::UnknownQuestion(id))
    }

    /// Resolves a question from its token list (the wire protocol carries
    /// tokens, not ids).
    pub fn question_by_tokens(&self, tokens: &[TokenId]) -> Option<u64> {
        self.by_tokens.get(tokens).copied()
    }

    /// A generation context for question `id`.
    pub fn context(&self, id: u64) -> Result<Context> {
        let q = self.question(id)?;
        Ok(Context::generation(q.id, q.tokens.clone()))
    }
}

/// Base-`k` little-endian digits of `q`, mapped onto content ids `4..4+k`.
pub fn question_tokens(mut q: u64, k: usize) -> Vec<TokenId> {
    let k = k as u64;
    let mut out = Vec::new();
    loop {
        out.push((4 + q % k) as TokenId);
        q /= k;
        if q == 0 {
            return out;
        }
    }
}

/// Logits of `spec` for `cfg` and `ctx`.
pub fn synth_logits(spec: &SynthModelSpec, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
    let q = spec.question(ctx.question_id)?;
    let v = spec.vocab.len();
    let out = match ctx.mode {
        Mode::Generation => {
            let mut out = q.prior.clone();
            if cfg.video.is_standard() {
                for (o, (s, x)) in out.iter_mut().zip(q.video_grounding.iter().zip(&q.video_interference)) {
                    *o += s + x;
                }
            }
            if cfg.audio.is_standard() {
                for (o, (s, x)) in out.iter_mut().zip(q.audio_grounding.iter().zip(&q.audio_interference)) {
                    *o += s + x;
                }
            }
            out[spec.vocab.eos() as usize] += spec.eos_bias(ctx.prefix().len());
            out
        }
        Mode::ModalityQuery(prompt) => {
            let delta = q.meta_margin;
            let jitter = q.jitter(prompt)?;
            let sp = spec.vocab.special();
            let mut out = vec![-10.0 * delta; v];
            for (r, eps) in Relevance::ORDER.into_iter().zip(jitter) {
                let mu = if r == q.relevance { delta } else { 0.0 };
                out[sp.meta(r) as usize] = mu + eps;
            }
            out
        }
    };
    LogitVector::new(out)
}

/// In-process provider over a [`SynthModelSpec`]. Pure and freely shareable.
#[derive(Debug)]
pub struct SynthProvider {
    spec: Arc<SynthModelSpec>,
    calls: CallCounter,
}

impl SynthProvider {
    pub fn new(spec: impl Into<Arc<SynthModelSpec>>) -> Self {
        Self {
            spec: spec.into(),
            calls: CallCounter::default(),
        }
    }

    pub fn spec(&self) -> &SynthModelSpec {
        &self.spec
    }
}

impl LogitProvider for SynthProvider {
    fn vocab(&self) -> &Vocabulary {
        &self.spec.vocab
    }

    fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        self.calls.bump();
        synth_logits(&self.spec, cfg, ctx)
    }

    fn calls(&self) -> u64 {
        self.calls.get()
    }
}

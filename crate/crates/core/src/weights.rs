//! Modality-adaptive weights.
//!
//! The model is asked which modality a question needs; the logits it assigns
//! to the answers `both`, `video` and `audio` are turned into a point on the
//! simplex with a softmax. Those three numbers scale the contrast applied to
//! each branch during decoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax;
use crate::provider::{eval_modality_query, Context, LogitProvider, MetaLogits};

/// The modality a question depends on; also names the three meta tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relevance {
    Both,
    Video,
    Audio,
}

impl Relevance {
    /// Canonical order `(av, v, a)`; also the argmax tie-break order.
    pub const ORDER: [Relevance; 3] = [Relevance::Both, Relevance::Video, Relevance::Audio];

    pub fn short(self) -> &'static str {
        match self {
            Relevance::Both => "av",
            Relevance::Video => "v",
            Relevance::Audio => "a",
        }
    }
}

impl fmt::Display for Relevance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for Relevance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "av" | "both" => Ok(Relevance::Both),
            "v" | "video" => Ok(Relevance::Video),
            "a" | "audio" => Ok(Relevance::Audio),
            other => Err(Error::invalid(format!("unknown modality {other:?} (expected av, v or a)"))),
        }
    }
}

/// `(w_av, w_v, w_a)` on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeights {
    pub av: f64,
    pub v: f64,
    pub a: f64,
}

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl ModalityWeights {
    pub const UNIFORM: Self = Self {
        av: 1.0 / 3.0,
        v: 1.0 / 3.0,
        a: 1.0 / 3.0,
    };

    pub fn new(av: f64, v: f64, a: f64) -> Result<Self> {
        let w = Self { av, v, a };
        let ok = w.to_array().iter().all(|x| (0.0..=1.0).contains(x))
            && (av + v + a - 1.0).abs() <= SIMPLEX_TOLERANCE;
        if !ok {
            return Err(Error::invalid(format!("weights ({av}, {v}, {a}) are not on the simplex")));
        }
        Ok(w)
    }

    /// Softmax over `[z_av, z_v, z_a]`.
    pub fn from_meta_logits(z: MetaLogits) -> Result<Self> {
        let p = softmax(&z.to_array())?.into_inner();
        Ok(Self {
            av: p[0],
            v: p[1],
            a: p[2],
        })
    }

    pub fn one_hot(r: Relevance) -> Self {
        let mut w = Self { av: 0.0, v: 0.0, a: 0.0 };
        *w.get_mut(r) = 1.0;
        w
    }

    pub fn get(&self, r: Relevance) -> f64 {
        match r {
            Relevance::Both => self.av,
            Relevance::Video => self.v,
            Relevance::Audio => self.a,
        }
    }

    fn get_mut(&mut self, r: Relevance) -> &mut f64 {
        match r {
            Relevance::Both => &mut self.av,
            Relevance::Video => &mut self.v,
            Relevance::Audio => &mut self.a,
        }
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.av, self.v, self.a]
    }

    /// The largest weight; ties resolve `av > v > a`.
    pub fn argmax(&self) -> Relevance {
        let mut best = Relevance::Both;
        for r in [Relevance::Video, Relevance::Audio] {
            if self.get(r) > self.get(best) {
                best = r;
            }
        }
        best
    }
}

/// A subset of `{av, v, a}` whose weights are switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct WeightMask {
    pub av: bool,
    pub v: bool,
    pub a: bool,
}

impl WeightMask {
    pub const NONE: Self = Self {
        av: false,
        v: false,
        a: false,
    };

    pub fn of(modalities: &[Relevance]) -> Self {
        let mut m = Self::NONE;
        for r in modalities {
            match r {
                Relevance::Both => m.av = true,
                Relevance::Video => m.v = true,
                Relevance::Audio => m.a = true,
            }
        }
        m
    }

    pub fn contains(&self, r: Relevance) -> bool {
        match r {
            Relevance::Both => self.av,
            Relevance::Video => self.v,
            Relevance::Audio => self.a,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.av || self.v || self.a)
    }

    pub fn members(&self) -> Vec<Relevance> {
        Relevance::ORDER.into_iter().filter(|r| self.contains(*r)).collect()
    }
}

impl fmt::Display for WeightMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<&str> = self.members().into_iter().map(Relevance::short).collect();
        f.write_str(&names.join("+"))
    }
}

impl TryFrom<Vec<String>> for WeightMask {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        let rs = names.iter().map(|s| s.parse()).collect::<Result<Vec<Relevance>>>()?;
        Ok(Self::of(&rs))
    }
}

impl From<WeightMask> for Vec<String> {
    fn from(m: WeightMask) -> Self {
        m.members().into_iter().map(|r| r.short().to_string()).collect()
    }
}

/// How a masked weight is switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSemantics {
    /// Zero the masked weights and rescale the survivors to sum to 1. This is
    /// the same as re-running the softmax over the surviving meta logits.
    #[default]
    Renormalize,
    /// Zero the masked weights and leave the survivors as they are, i.e. only
    /// the masked branches lose their contrast.
    Zero,
}

/// Zeroes the masked weights and rescales the survivors by their sum.
/// Masking all three is an error; an empty mask is the identity.
pub fn masked_weights(w: ModalityWeights, mask: WeightMask) -> Result<ModalityWeights> {
    if mask.av && mask.v && mask.a {
        return Err(Error::invalid("cannot mask all three modality weights"));
    }
    if mask.is_empty() {
        return Ok(w);
    }
    let keep = |r: Relevance| if mask.contains(r) { 0.0 } else { w.get(r) };
    let (av, v, a) = (keep(Relevance::Both), keep(Relevance::Video), keep(Relevance::Audio));
    let total = av + v + a;
    if total <= 0.0 {
        return Err(Error::invalid("surviving weights sum to zero"));
    }
    Ok(ModalityWeights {
        av: av / total,
        v: v / total,
        a: a / total,
    })
}

/// Masked weights without renormalization. The result is generally off the
/// simplex, so it comes back as a raw `(av, v, a)` triple.
pub fn zeroed_weights(w: ModalityWeights, mask: WeightMask) -> [f64; 3] {
    Relevance::ORDER.map(|r| if mask.contains(r) { 0.0 } else { w.get(r) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FixedWeights {
    Uniform,
    Argmax(ModalityWeights),
}

pub fn fixed_weights(kind: FixedWeights) -> ModalityWeights {
    match kind {
        FixedWeights::Uniform => ModalityWeights::UNIFORM,
        FixedWeights::Argmax(w) => ModalityWeights::one_hot(w.argmax()),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub id: u32,
    pub text: String,
}

/// Phrasings of the modality self-assessment prompt. Id 0 is canonical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRegistry {
    variants: Vec<PromptVariant>,
}

const STANDARD_PROMPTS: [&str; 5] = [
    "To answer this question, which modality is needed (audio, video, or both)?",
    "Identify which modality is required to answer the question (audio, video, or both).",
    "Given this question, select the necessary modality for reasoning (audio, video, or both).",
    "Which modality does this question require (audio, video, or both)?",
    "State the modality relevant for answering this question (audio, video, both).",
];

impl PromptRegistry {
    /// The canonical prompt plus its four alternative phrasings.
    pub fn standard() -> Self {
        Self::from_texts(STANDARD_PROMPTS.iter().map(|s| s.to_string()).collect())
            .expect("standard prompts are nonempty")
    }

    /// Registers `texts` with ids `0..len`.
    pub fn from_texts(texts: Vec<String>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::invalid("prompt registry is empty"));
        }
        let variants = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| PromptVariant { id: i as u32, text })
            .collect();
        Ok(Self { variants })
    }

    pub fn get(&self, id: u32) -> Result<&PromptVariant> {
        self.variants
            .get(id as usize)
            .ok_or_else(|| Error::invalid(format!("prompt variant {id} is not registered")))
    }

    pub fn canonical(&self) -> &PromptVariant {
        &self.variants[0]
    }

    pub fn variants(&self) -> &[PromptVariant] {
        &self.variants
    }

    pub fn len(&self) -> usize {
        self.variants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variants.is_empty()
    }
}

/// Asks `provider` which modality `ctx`'s question needs and converts the
/// answer into weights. One provider call.
pub fn extract_weights<P: LogitProvider + ?Sized>(
    provider: &P,
    ctx: &Context,
    prompt: &PromptVariant,
) -> Result<ModalityWeights> {
    let z = eval_modality_query(provider, &ctx.modality_query(prompt.id))?;
    ModalityWeights::from_meta_logits(z)
}

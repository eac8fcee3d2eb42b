use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::LogitVector;
use crate::provider::synth::{question_tokens, synth_logits, DEFAULT_EOS_BIAS};
use crate::provider::{BranchLogits, QuestionSpec, SynthModelSpec, SynthProvider};
use crate::rng::SplitMix64;
use crate::strategies::mad_logits;
use crate::vocab::{TokenId, Vocabulary};
use crate::weights::ModalityWeights;

use super::Category;

/// γ at which the oracle side of the certificate is checked.
pub const CERTIFICATE_GAMMA: f64 = 2.5;

/// Stream tag of the first construction attempt; attempt `k` uses `+ k`.
const ATTEMPT_TAG: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub n_per_category: usize,
    pub seed: u64,
    pub content_tokens: usize,
    /// Number of registered query prompts to draw jitter for.
    pub prompts: u32,
    /// Range of the meta margin `δ`.
    pub meta_margin: [f64; 2],
    /// Jitter bound as a fraction of `δ/4`; must be in `[0, 1)`.
    pub jitter_fraction: f64,
    pub max_attempts: u32,
    /// Smallest accepted gap between the top two logits on either side of
    /// the certificate.
    pub min_margin: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_per_category: 50,
            seed: 0,
            content_tokens: 12,
            prompts: 5,
            meta_margin: [3.0, 4.0],
            jitter_fraction: 0.5,
            max_attempts: 64,
            min_margin: 1e-3,
        }
    }
}

impl SuiteConfig {
    pub fn new(n_per_category: usize, seed: u64) -> Self {
        Self {
            n_per_category,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_category == 0 {
            return Err(Error::invalid("n_per_category must be >= 1"));
        }
        if self.content_tokens < 3 {
            return Err(Error::invalid("suites need at least 3 content tokens"));
        }
        if self.prompts == 0 {
            return Err(Error::invalid("suites need at least one prompt"));
        }
        let [lo, hi] = self.meta_margin;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::invalid(format!("bad meta margin range [{lo}, {hi}]")));
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err(Error::invalid("jitter_fraction must be in [0, 1)"));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts must be >= 1"));
        }
        if !(self.min_margin.is_finite() && self.min_margin >= 0.0) {
            return Err(Error::invalid("min_margin must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One certified task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub category: Category,
    pub correct: TokenId,
    pub distractor: TokenId,
    /// Over-grounded decoy (language-dominance tasks only).
    pub echo: Option<TokenId>,
    /// Construction attempts used, counting from 1.
    pub attempts: u32,
    pub question: QuestionSpec,
}

/// Top-logit gaps proving a task separates greedy from oracle MAD.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `l_vaq[distractor]` minus the best other token.
    pub greedy_margin: f64,
    /// Oracle MAD logit of `correct` minus the best other token.
    pub mad_margin: f64,
}

impl Certificate {
    pub fn holds(&self, min_margin: f64) -> bool {
        self.greedy_margin > 0.0 && self.mad_margin > 0.0 && self.greedy_margin >= min_margin && self.mad_margin >= min_margin
    }
}

fn margin_of(l: &LogitVector, token: TokenId) -> f64 {
    let v = l.as_slice();
    let best_other = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != token as usize)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    v[token as usize] - best_other
}

/// Evaluates the four first-step branches of `task` and measures how far
/// greedy prefers the distractor and oracle-weighted MAD prefers the correct
/// token. Positive margins on both sides mean the certificate holds.
pub fn check_certificate(spec: &SynthModelSpec, task: &TaskSpec) -> Result<Certificate> {
    let ctx = spec.context(task.id)?;
    let b = BranchLogits::new(
        synth_logits(spec, crate::provider::ModalityConfig::CLEAN, &ctx)?,
        synth_logits(spec, crate::provider::ModalityConfig::VIDEO_PERTURBED, &ctx)?,
        synth_logits(spec, crate::provider::ModalityConfig::AUDIO_PERTURBED, &ctx)?,
        synth_logits(spec, crate::provider::ModalityConfig::BOTH_PERTURBED, &ctx)?,
    )?;
    let oracle = ModalityWeights::one_hot(task.category.relevance());
    let fused = mad_logits(&b, CERTIFICATE_GAMMA, &oracle)?;
    Ok(Certificate {
        greedy_margin: margin_of(&b.clean, task.distractor),
        mad_margin: margin_of(&fused, task.correct),
    })
}

/// A certified suite and the synthetic spec realizing it.
#[derive(Clone, Debug)]
pub struct Suite {
    pub config: SuiteConfig,
    pub tasks: Vec<TaskSpec>,
    spec: Arc<SynthModelSpec>,
}

impl Suite {
    pub fn spec(&self) -> &SynthModelSpec {
        &self.spec
    }

    pub fn shared_spec(&self) -> Arc<SynthModelSpec> {
        self.spec.clone()
    }

    /// A fresh in-process provider over the suite's spec.
    pub fn provider(&self) -> SynthProvider {
        SynthProvider::new(self.spec.clone())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn task(&self, id: u64) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    /// Re-checks every task's certificate and construction rule; returns the
    /// ids and reasons of failures.
    pub fn verify(&self) -> Result<Vec<(u64, String)>> {
        let mut bad = Vec::new();
        for t in &self.tasks {
            if let Err(e) = check_construction(t) {
                bad.push((t.id, e));
                continue;
            }
            let c = check_certificate(&self.spec, t)?;
            if !c.holds(self.config.min_margin) {
                bad.push((t.id, format!("certificate fails: {c:?}")));
            }
        }
        Ok(bad)
    }
}

/// Structural checks of the category table for one task.
pub fn check_construction(t: &TaskSpec) -> std::result::Result<(), String> {
    let q = &t.question;
    let (c, d) = (t.correct as usize, t.distractor as usize);
    if c == d {
        return Err("correct equals distractor".into());
    }
    if q.relevance != t.category.relevance() {
        return Err(format!("relevance {} does not match {}", q.relevance, t.category));
    }
    let favors = |v: &[f64], good: usize, bad: usize| v[good] > v[bad];
    let ok = match t.category {
        Category::VisualDom => favors(&q.audio_grounding, c, d) && favors(&q.video_grounding, d, c),
        Category::AudioDom => favors(&q.video_grounding, c, d) && favors(&q.audio_grounding, d, c),
        Category::VideoDrivenAudioHall => favors(&q.audio_grounding, c, d) && favors(&q.video_interference, d, c),
        Category::AudioDrivenVideoHall => favors(&q.video_grounding, c, d) && favors(&q.audio_interference, d, c),
        Category::LanguageDom => {
            favors(&q.prior, d, c) && favors(&q.video_grounding, c, d) && favors(&q.audio_grounding, c, d) && t.echo.is_some()
        }
    };
    if ok {
        Ok(())
    } else {
        Err(format!("construction rule for {} violated", t.category))
    }
}

fn draw_task(config: &SuiteConfig, vocab: &Vocabulary, id: u64, category: Category, attempt: u32) -> TaskSpec {
    let mut g = SplitMix64::stream(config.seed, id, ATTEMPT_TAG + attempt as u64);
    let content = vocab.content_ids();
    let k = content.len() as u64;
    let ci = g.below(k);
    let di = (ci + 1 + g.below(k - 1)) % k;
    let oi = loop {
        let o = g.below(k);
        if o != ci && o != di {
            break o;
        }
    };
    let (c, d, o) = (content[ci as usize], content[di as usize], content[oi as usize]);
    let (cu, du, ou) = (c as usize, d as usize, o as usize);
    let language = category == Category::LanguageDom;

    let n = vocab.len();
    let mut q = QuestionSpec::zeros(id, question_tokens(id, config.content_tokens), n, category.relevance());
    for (i, b) in q.prior.iter_mut().enumerate() {
        *b = g.uniform(-0.05, 0.05);
        let answer = i == cu || i == du || (language && i == ou);
        if !answer {
            *b -= 3.0;
        }
    }
    for s in q.video_grounding.iter_mut() {
        *s = g.uniform(-0.1, 0.1);
    }
    for s in q.audio_grounding.iter_mut() {
        *s = g.uniform(-0.1, 0.1);
    }

    let a = g.uniform(1.5, 3.0);
    match category {
        Category::VisualDom => {
            q.audio_grounding[cu] += a;
            q.video_grounding[du] += g.uniform(1.04, 1.18) * a;
        }
        Category::AudioDom => {
            q.video_grounding[cu] += a;
            q.audio_grounding[du] += g.uniform(1.04, 1.18) * a;
        }
        Category::VideoDrivenAudioHall => {
            q.audio_grounding[cu] += a;
            q.video_interference[du] += g.uniform(1.04, 1.18) * a;
            q.prior[du] += g.uniform(0.0, 0.05) * a;
        }
        Category::AudioDrivenVideoHall => {
            q.video_grounding[cu] += a;
            q.audio_interference[du] += g.uniform(1.04, 1.18) * a;
            q.prior[du] += g.uniform(0.0, 0.05) * a;
        }
        Category::LanguageDom => {
            let a2 = g.uniform(1.5, 3.0);
            let s = a + a2;
            q.video_grounding[cu] += a;
            q.audio_grounding[cu] += a2;
            q.prior[du] += g.uniform(1.03, 1.12) * s;
            let eta = g.uniform(0.8, 1.2);
            q.video_grounding[ou] += a * (1.0 + eta);
            q.audio_grounding[ou] += a2 * (1.0 + eta);
            q.prior[ou] -= g.uniform(1.6, 2.0) * eta * s;
        }
    }

    let [lo, hi] = config.meta_margin;
    let delta = g.uniform(lo, hi);
    q.meta_margin = delta;
    q.meta_jitter = (0..config.prompts)
        .map(|_| {
            let mut e = [0.0; 3];
            for x in &mut e {
                *x = config.jitter_fraction * (delta / 4.0) * g.uniform(-1.0, 1.0);
            }
            e
        })
        .collect();

    TaskSpec {
        id,
        category,
        correct: c,
        distractor: d,
        echo: language.then_some(o),
        attempts: attempt + 1,
        question: q,
    }
}

/// Builds `n_per_category` certified tasks per category. Task ids run
/// category-major: the `i`-th task of category `k` has id `k * n + i`.
pub fn build_suite(config: &SuiteConfig) -> Result<Suite> {
    config.validate()?;
    let vocab = Vocabulary::standard(config.content_tokens);
    let n = config.n_per_category as u64;
    let mut tasks = Vec::with_capacity(Category::ALL.len() * config.n_per_category);
    for category in Category::ALL {
        for i in 0..n {
            let id = category.index() as u64 * n + i;
            let mut accepted = None;
            for attempt in 0..config.max_attempts {
                let task = draw_task(config, &vocab, id, category, attempt);
                let single = SynthModelSpec::new(config.seed, vocab.clone(), DEFAULT_EOS_BIAS.to_vec(), vec![task.question.clone()])?;
                if check_construction(&task).is_ok() && check_certificate(&single, &task)?.holds(config.min_margin) {
                    accepted = Some(task);
                    break;
                }
            }
            match accepted {
                Some(t) => tasks.push(t),
                None => {
                    return Err(Error::SuiteGeneration {
                        category,
                        attempts: config.max_attempts,
                    })
                }
            }
        }
    }
    let questions = tasks.iter().map(|t| t.question.clone()).collect();
    let spec = SynthModelSpec::new(config.seed, vocab, DEFAULT_EOS_BIAS.to_vec(), questions)?;
    Ok(Suite {
        config: config.clone(),
        tasks,
        spec: Arc::new(spec),
    })
}

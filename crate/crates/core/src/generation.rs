//! The autoregressive decoding loop.
//!
//! Weights (for strategies that use them) are extracted once from the clean
//! input before the first step. Each step then evaluates the branches the
//! strategy needs, fuses them, and appends the argmax token, until EOS or the
//! token limit.

use std::fmt;
use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, ProviderError, Result};
use crate::numeric::LogitVector;
use crate::provider::{eval_logits, eval_modality_query, Context, CountingProvider, LogitProvider, ModalityConfig, Mode, PartialBranches};
use crate::strategies::{fuse_partial, DecodingParams, Strategy};
use crate::vocab::TokenId;
use crate::weights::ModalityWeights;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub max_tokens: usize,
    /// Longest a single provider call may take before the generation aborts.
    #[serde(default, with = "opt_millis")]
    pub call_timeout: Option<Duration>,
}

impl GenerationLimits {
    pub fn new(max_tokens: usize) -> Self {
        Self {
            max_tokens,
            call_timeout: None,
        }
    }
}

impl Default for GenerationLimits {
    fn default() -> Self {
        Self::new(16)
    }
}

mod opt_millis {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        d.map(|d| d.as_millis() as u64).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        Ok(Option::<u64>::deserialize(d)?.map(Duration::from_millis))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Prompt variant used for the modality query.
    pub prompt: u32,
    /// Re-extract weights before every step instead of once per sequence.
    pub per_step_weights: bool,
    /// Evaluate all four branches every step whatever the strategy needs.
    pub all_branch_calls: bool,
    /// Use these weights instead of querying the provider.
    pub oracle_weights: Option<ModalityWeights>,
    /// Entries kept in each branch's top-k summary.
    pub top_k: usize,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            prompt: 0,
            per_step_weights: false,
            all_branch_calls: false,
            oracle_weights: None,
            top_k: 3,
        }
    }
}

impl GenerationOptions {
    fn queries_weights(&self, strategy: &Strategy) -> bool {
        strategy.uses_weights() && self.oracle_weights.is_none()
    }
}

/// Provider calls a generation of `steps` steps makes.
pub fn expected_calls(strategy: &Strategy, options: &GenerationOptions, steps: usize) -> u64 {
    let steps = steps as u64;
    let queries = match (options.queries_weights(strategy), options.per_step_weights) {
        (false, _) => 0,
        (true, false) => 1,
        (true, true) => steps,
    };
    let per_step = if options.all_branch_calls {
        4
    } else {
        match strategy {
            Strategy::Greedy => 1,
            Strategy::MadArgmax => 2,
            _ => 4,
        }
    };
    queries + per_step * steps
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSummary {
    pub branch: String,
    pub argmax: TokenId,
    pub top_k: Vec<(TokenId, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Weights used at this step when they are re-extracted per step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<ModalityWeights>,
    pub branches: Vec<BranchSummary>,
    pub fused_argmax: TokenId,
    /// Gap between the best and second-best fused logit.
    pub fused_margin: f64,
    pub token: TokenId,
    /// Provider calls so far, including this step.
    pub calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    /// EOS was emitted.
    Completed,
    /// The token limit was reached first.
    Truncated,
    /// A provider error stopped the loop.
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingTrace {
    pub question_id: u64,
    pub params: DecodingParams,
    pub options: GenerationOptions,
    /// Weights extracted before the loop (or the oracle weights).
    pub weights: Option<ModalityWeights>,
    pub steps: Vec<StepRecord>,
    pub tokens: Vec<TokenId>,
    pub status: TraceStatus,
    pub calls: u64,
}

impl DecodingTrace {
    fn new(ctx: &Context, params: DecodingParams, options: GenerationOptions) -> Self {
        Self {
            question_id: ctx.question_id,
            params,
            options,
            weights: None,
            steps: Vec::new(),
            tokens: Vec::new(),
            status: TraceStatus::Aborted,
            calls: 0,
        }
    }

    /// The same trace with wall-clock fields removed.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for s in &mut t.steps {
            s.ms = None;
        }
        t
    }

    pub fn total_ms(&self) -> f64 {
        self.steps.iter().filter_map(|s| s.ms).sum()
    }

    /// Whether the call count matches [`expected_calls`].
    pub fn calls_consistent(&self) -> bool {
        self.calls == expected_calls(&self.params.strategy, &self.options, self.steps.len())
    }

    /// One header line followed by one line per step.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            record: &'static str,
            question_id: u64,
            params: &'a DecodingParams,
            options: &'a GenerationOptions,
            weights: &'a Option<ModalityWeights>,
            tokens: &'a [TokenId],
            status: TraceStatus,
            calls: u64,
        }
        #[derive(Serialize)]
        struct Step<'a> {
            record: &'static str,
            question_id: u64,
            #[serde(flatten)]
            step: &'a StepRecord,
        }
        let header = Header {
            record: "header",
            question_id: self.question_id,
            params: &self.params,
            options: &self.options,
            weights: &self.weights,
            tokens: &self.tokens,
            status: self.status,
            calls: self.calls,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for step in &self.steps {
            serde_json::to_writer(&mut out, &Step { record: "step", question_id: self.question_id, step })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Reads traces written by [`DecodingTrace::write_jsonl`].
pub fn read_traces_jsonl<R: std::io::BufRead>(input: R) -> Result<Vec<DecodingTrace>> {
    #[derive(Deserialize)]
    struct Header {
        question_id: u64,
        params: DecodingParams,
        options: GenerationOptions,
        weights: Option<ModalityWeights>,
        tokens: Vec<TokenId>,
        status: TraceStatus,
        calls: u64,
    }
    #[derive(Deserialize)]
    struct Tag {
        record: String,
        question_id: u64,
    }
    let bad = |n: usize, e: serde_json::Error| Error::invalid(format!("trace line {n}: {e}"));
    let mut out: Vec<DecodingTrace> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tag: Tag = serde_json::from_str(&line).map_err(|e| bad(i + 1, e))?;
        match tag.record.as_str() {
            "header" => {
                let h: Header = serde_json::from_str(&line).map_err(|e| bad(i + 1, e))?;
                out.push(DecodingTrace {
                    question_id: h.question_id,
                    params: h.params,
                    options: h.options,
                    weights: h.weights,
                    steps: Vec::new(),
                    tokens: h.tokens,
                    status: h.status,
                    calls: h.calls,
                });
            }
            "step" => {
                let step: StepRecord = serde_json::from_str(&line).map_err(|e| bad(i + 1, e))?;
                match out.last_mut() {
                    Some(t) if t.question_id == tag.question_id => t.steps.push(step),
                    _ => return Err(Error::invalid(format!("trace line {}: step without its header", i + 1))),
                }
            }
            other => return Err(Error::invalid(format!("trace line {}: unknown record {other:?}", i + 1))),
        }
    }
    Ok(out)
}

/// A failed generation together with everything recorded before the failure.
#[derive(Debug)]
pub struct GenerationError {
    pub error: Error,
    pub trace: Box<DecodingTrace>,
}

impl fmt::Display for GenerationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.trace.steps.len())
    }
}

impl std::error::Error for GenerationError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<GenerationError> for Error {
    fn from(e: GenerationError) -> Self {
        e.error
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub trace: DecodingTrace,
}

struct Loop<'a> {
    provider: CountingProvider<'a>,
    limits: GenerationLimits,
}

impl Loop<'_> {
    fn timed<T>(&self, f: impl FnOnce(&CountingProvider<'_>) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&self.provider)?;
        if let Some(limit) = self.limits.call_timeout {
            if start.elapsed() > limit {
                return Err(ProviderError::Timeout(limit).into());
            }
        }
        Ok(out)
    }

    fn weights(&self, ctx: &Context, prompt: u32) -> Result<ModalityWeights> {
        let z = self.timed(|p| eval_modality_query(p, &ctx.modality_query(prompt)))?;
        ModalityWeights::from_meta_logits(z)
    }

    fn branch(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
        self.timed(|p| eval_logits(p, cfg, ctx))
    }
}

/// Decodes greedily from `ctx` under `params`.
///
/// On a provider error the partial trace is returned inside the error.
pub fn generate(
    provider: &dyn LogitProvider,
    params: &DecodingParams,
    ctx: &Context,
    limits: &GenerationLimits,
    options: &GenerationOptions,
) -> Result<Generation, GenerationError> {
    let mut trace = DecodingTrace::new(ctx, *params, *options);
    let run = Loop {
        provider: CountingProvider::new(provider),
        limits: *limits,
    };
    let result = decode(&run, params, ctx, options, &mut trace);
    trace.calls = run.provider.calls();
    match result {
        Ok(status) => {
            trace.status = status;
            Ok(Generation {
                tokens: trace.tokens.clone(),
                trace,
            })
        }
        Err(error) => {
            trace.status = TraceStatus::Aborted;
            Err(GenerationError {
                error,
                trace: Box::new(trace),
            })
        }
    }
}

fn decode(
    run: &Loop<'_>,
    params: &DecodingParams,
    ctx: &Context,
    options: &GenerationOptions,
    trace: &mut DecodingTrace,
) -> Result<TraceStatus> {
    params.validate()?;
    if limits_invalid(&run.limits) {
        return Err(Error::invalid("max_tokens must be > 0"));
    }
    if ctx.mode != Mode::Generation {
        return Err(Error::invalid("generation needs a generation-mode context"));
    }
    if !ctx.prefix().is_empty() {
        return Err(Error::invalid("generation starts from an empty prefix"));
    }
    let strategy = params.strategy;
    let eos = run.provider.vocab().eos();
    let queries = options.queries_weights(&strategy);

    let mut weights = options.oracle_weights.filter(|_| strategy.uses_weights());
    if queries && !options.per_step_weights {
        weights = Some(run.weights(ctx, options.prompt)?);
    }
    trace.weights = weights;

    let mut ctx = ctx.clone();
    for step in 0..run.limits.max_tokens {
        let start = Instant::now();
        let mut step_weights = None;
        if queries && options.per_step_weights {
            let w = run.weights(&ctx, options.prompt)?;
            weights = Some(w);
            step_weights = Some(w);
        }
        let configs = if options.all_branch_calls {
            ModalityConfig::ALL.to_vec()
        } else {
            strategy.required_branches(weights.as_ref())?
        };
        let mut branches = PartialBranches::default();
        for cfg in configs {
            branches.insert(cfg, run.branch(cfg, &ctx)?);
        }
        let fused = fuse_partial(&branches, params, weights.as_ref())?;
        let token = fused.argmax()?;
        let summaries = branches
            .present()
            .map(|(cfg, l)| {
                Ok(BranchSummary {
                    branch: cfg.to_string(),
                    argmax: l.argmax()?,
                    top_k: l.top_k(options.top_k),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ctx.push(token, eos)?;
        trace.tokens.push(token);
        trace.steps.push(StepRecord {
            step,
            weights: step_weights,
            branches: summaries,
            fused_argmax: token,
            fused_margin: fused.top_margin(),
            token,
            calls: run.provider.calls(),
            ms: Some(start.elapsed().as_secs_f64() * 1e3),
        });
        if token == eos {
            return Ok(TraceStatus::Completed);
        }
    }
    Ok(TraceStatus::Truncated)
}

fn limits_invalid(limits: &GenerationLimits) -> bool {
    limits.max_tokens == 0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ReplayOutcome {
    Match,
    /// First step whose token differs (or where one sequence ended early).
    Diverged { step: usize },
}

impl ReplayOutcome {
    pub fn is_match(self) -> bool {
        self == ReplayOutcome::Match
    }
}

/// Regenerates `ctx` under `params` and compares the tokens with `trace`,
/// both the final sequence and the per-step records.
pub fn replay_check(
    trace: &DecodingTrace,
    provider: &dyn LogitProvider,
    params: &DecodingParams,
    ctx: &Context,
    limits: &GenerationLimits,
) -> Result<ReplayOutcome> {
    let again = generate(provider, params, ctx, limits, &trace.options)?;
    let recorded: Vec<TokenId> = trace.steps.iter().map(|s| s.token).collect();
    let replayed: Vec<TokenId> = again.trace.steps.iter().map(|s| s.token).collect();
    let first = first_difference(&trace.tokens, &again.tokens);
    Ok(match (first, first_difference(&recorded, &replayed)) {
        (None, None) => ReplayOutcome::Match,
        (Some(a), Some(b)) => ReplayOutcome::Diverged { step: a.min(b) },
        (Some(step), None) | (None, Some(step)) => ReplayOutcome::Diverged { step },
    })
}

fn first_difference(a: &[TokenId], b: &[TokenId]) -> Option<usize> {
    match a.iter().zip(b).position(|(x, y)| x != y) {
        Some(i) => Some(i),
        None if a.len() != b.len() => Some(a.len().min(b.len())),
        None => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::synth::{QuestionSpec, SynthModelSpec, SynthProvider, DEFAULT_EOS_BIAS};
    use crate::provider::RandomSpecShape;
    use crate::strategies::{mad_logits, DEFAULT_GAMMA};
    use crate::vocab::Vocabulary;
    use crate::weights::{Relevance, WeightMask};
    use std::sync::Mutex;

    /// Vocabulary [<eos>, both, video, audio, w0, w1]; token 4 is grounded,
    /// token 5 is the hallucination driven by the video stream.
    fn demo_spec(eos_bias: Vec<f64>) -> SynthModelSpec {
        let vocab = Vocabulary::standard(2);
        let mut q = QuestionSpec::zeros(0, vec![4], vocab.len(), Relevance::Audio);
        for i in 0..4 {
            q.prior[i] = -5.0;
        }
        q.prior[5] = 1.0;
        q.audio_grounding[4] = 3.0;
        q.video_interference[5] = 3.0;
        q.meta_margin = 2.0;
        SynthModelSpec::new(0, vocab, eos_bias, vec![q]).unwrap()
    }

    fn run(p: &SynthProvider, params: DecodingParams, max: usize) -> Generation {
        let ctx = p.spec().context(0).unwrap();
        generate(p, &params, &ctx, &GenerationLimits::new(max), &GenerationOptions::default()).unwrap()
    }

    #[test]
    fn greedy_hallucinates_mad_grounds() {
        let spec = demo_spec(DEFAULT_EOS_BIAS.to_vec());
        let p = SynthProvider::new(spec.clone());
        let greedy = run(&p, DecodingParams::greedy(), 8);
        let mad = run(&p, DecodingParams::mad(DEFAULT_GAMMA), 8);
        assert_eq!(greedy.tokens, vec![5, 0]);
        assert_eq!(mad.tokens, vec![4, 0]);

        // By hand: weights = softmax(0, 0, 2); branches at step 0.
        let e2 = 2f64.exp();
        let w = ModalityWeights::new(1.0 / (2.0 + e2), 1.0 / (2.0 + e2), e2 / (2.0 + e2)).unwrap();
        let ctx = spec.context(0).unwrap();
        let b = crate::provider::BranchLogits::evaluate(&SynthProvider::new(spec.clone()), &ctx).unwrap();
        assert_eq!(b.clean.as_slice()[4..], [3.0, 4.0]);
        assert_eq!(b.video_perturbed.as_slice()[4..], [3.0, 1.0]);
        let fused = mad_logits(&b, DEFAULT_GAMMA, &w).unwrap();
        assert_eq!(fused.argmax().unwrap(), 4);
        assert_eq!(mad.trace.weights.unwrap().argmax(), Relevance::Audio);
        assert!((mad.trace.weights.unwrap().a - w.a).abs() < 1e-12);
    }

    #[test]
    fn truncation_without_eos() {
        let p = SynthProvider::new(demo_spec(vec![-100.0]));
        let g = run(&p, DecodingParams::greedy(), 3);
        assert_eq!(g.tokens.len(), 3);
        assert_eq!(g.trace.status, TraceStatus::Truncated);
        assert_eq!(g.trace.calls, 3);
    }

    #[test]
    fn call_counts_per_strategy() {
        let spec = SynthModelSpec::random(11, RandomSpecShape { questions: 8, ..Default::default() }).unwrap();
        let p = SynthProvider::new(spec.clone());
        let strategies = [
            Strategy::Greedy,
            Strategy::VcdExtended { alpha: 1.0 },
            Strategy::FourBranch { alpha_av: 1.0, alpha_v: 0.5, alpha_a: 0.5 },
            Strategy::Mad,
            Strategy::MadUniform,
            Strategy::MadArgmax,
            Strategy::MadMasked { mask: WeightMask::of(&[Relevance::Audio]) },
        ];
        let option_sets = [
            GenerationOptions::default(),
            GenerationOptions { per_step_weights: true, ..Default::default() },
            GenerationOptions { all_branch_calls: true, ..Default::default() },
            GenerationOptions { oracle_weights: Some(ModalityWeights::UNIFORM), ..Default::default() },
        ];
        for q in spec.questions() {
            let ctx = spec.context(q.id).unwrap();
            for s in strategies {
                for o in option_sets {
                    let before = p.calls();
                    let g = generate(&p, &DecodingParams::new(s, 2.5), &ctx, &GenerationLimits::new(4), &o).unwrap();
                    let n = g.trace.steps.len();
                    assert_eq!(g.trace.calls, p.calls() - before);
                    assert_eq!(g.trace.calls, expected_calls(&s, &o, n), "{s} {o:?}");
                    assert!(g.trace.calls_consistent());
                }
            }
        }
        let d = GenerationOptions::default();
        assert_eq!(expected_calls(&Strategy::Greedy, &d, 5), 5);
        assert_eq!(expected_calls(&Strategy::Mad, &d, 5), 21);
        assert_eq!(expected_calls(&Strategy::MadArgmax, &d, 5), 11);
        assert_eq!(expected_calls(&Strategy::MadUniform, &d, 5), 20);
    }

    /// Records the prefix of every generation-mode call.
    struct Recorder<'a> {
        inner: &'a SynthProvider,
        seen: Mutex<Vec<Vec<TokenId>>>,
    }

    impl LogitProvider for Recorder<'_> {
        fn vocab(&self) -> &Vocabulary {
            self.inner.vocab()
        }
        fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
            if ctx.mode == Mode::Generation {
                self.seen.lock().unwrap().push(ctx.prefix().to_vec());
            }
            self.inner.logits(cfg, ctx)
        }
        fn calls(&self) -> u64 {
            self.inner.calls()
        }
    }

    #[test]
    fn prefixes_grow_one_token_per_step() {
        let spec = SynthModelSpec::random(2, RandomSpecShape { questions: 4, ..Default::default() }).unwrap();
        let inner = SynthProvider::new(spec.clone());
        let rec = Recorder { inner: &inner, seen: Mutex::new(Vec::new()) };
        let g = generate(&rec, &DecodingParams::mad(2.5), &spec.context(3).unwrap(), &GenerationLimits::new(5), &GenerationOptions::default()).unwrap();
        let seen = rec.seen.into_inner().unwrap();
        assert_eq!(seen.len(), 4 * g.tokens.len());
        for (i, chunk) in seen.chunks(4).enumerate() {
            for prefix in chunk {
                assert_eq!(prefix.as_slice(), &g.tokens[..i]);
            }
        }
    }

    #[test]
    fn replay_matches_and_diverges() {
        let spec = demo_spec(DEFAULT_EOS_BIAS.to_vec());
        let p = SynthProvider::new(spec.clone());
        let ctx = spec.context(0).unwrap();
        let limits = GenerationLimits::new(8);
        let params = DecodingParams::mad(2.5);
        let g = run(&p, params, 8);
        assert!(replay_check(&g.trace, &p, &params, &ctx, &limits).unwrap().is_match());

        // At γ = 0 the fused rule is 2 vaq + vãq + ṽaq: token 4 gets 2*3+0+3 = 9,
        // token 5 gets 2*4+4+1 = 13, so step 0 flips.
        let zero = DecodingParams::mad(0.0);
        assert_eq!(replay_check(&g.trace, &p, &zero, &ctx, &limits).unwrap(), ReplayOutcome::Diverged { step: 0 });

        let mut tampered = g.trace.clone();
        tampered.steps[1].token ^= 1;
        assert_eq!(replay_check(&tampered, &p, &params, &ctx, &limits).unwrap(), ReplayOutcome::Diverged { step: 1 });

        let other = SynthModelSpec::random(1, RandomSpecShape { questions: 1, ..Default::default() }).unwrap();
        let q = SynthProvider::new(other.clone());
        let h = run(&q, params, 8);
        let other2 = SynthModelSpec::random(2, RandomSpecShape { questions: 1, ..Default::default() }).unwrap();
        let outcome = replay_check(&h.trace, &SynthProvider::new(other2), &params, &other.context(0).unwrap(), &limits).unwrap();
        assert!(!outcome.is_match());
    }

    #[test]
    fn errors_keep_the_partial_trace() {
        struct FailAfter<'a>(&'a SynthProvider, u64);
        impl LogitProvider for FailAfter<'_> {
            fn vocab(&self) -> &Vocabulary {
                self.0.vocab()
            }
            fn logits(&self, cfg: ModalityConfig, ctx: &Context) -> Result<LogitVector> {
                if self.0.calls() >= self.1 {
                    return Err(ProviderError::Transport { retries: 0, message: "gone".into() }.into());
                }
                self.0.logits(cfg, ctx)
            }
            fn calls(&self) -> u64 {
                self.0.calls()
            }
        }
        let p = SynthProvider::new(demo_spec(vec![-100.0]));
        let f = FailAfter(&p, 9);
        let err = generate(&f, &DecodingParams::mad(2.5), &p.spec().context(0).unwrap(), &GenerationLimits::new(5), &GenerationOptions::default()).unwrap_err();
        assert_eq!(err.trace.steps.len(), 2);
        assert_eq!(err.trace.status, TraceStatus::Aborted);
        assert_eq!(err.trace.calls, 10);
        assert!(matches!(err.error.provider_error(), Some(ProviderError::Transport { .. })));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = SynthProvider::new(demo_spec(vec![]));
        let ctx = p.spec().context(0).unwrap();
        let o = GenerationOptions::default();
        assert!(generate(&p, &DecodingParams::greedy(), &ctx, &GenerationLimits::new(0), &o).is_err());
        assert!(generate(&p, &DecodingParams::greedy(), &ctx.modality_query(0), &GenerationLimits::new(1), &o).is_err());
        let pre = ctx.clone().with_prefix(vec![4], 0).unwrap();
        assert!(generate(&p, &DecodingParams::greedy(), &pre, &GenerationLimits::new(1), &o).is_err());
    }

    #[test]
    fn jsonl_has_a_header_and_one_line_per_step() {
        let p = SynthProvider::new(demo_spec(vec![-100.0]));
        let g = run(&p, DecodingParams::mad(2.5), 3);
        let mut buf = Vec::new();
        g.trace.without_timing().write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0]["record"], "header");
        assert_eq!(lines[0]["status"], "truncated");
        assert_eq!(lines[1]["record"], "step");
        assert_eq!(lines[3]["calls"], 13);
        assert!(lines[1].get("ms").is_none());

        let back = read_traces_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, vec![g.trace.without_timing()]);
        assert!(read_traces_jsonl(&b"{\"record\":\"step\",\"question_id\":0}\n"[..]).is_err());
    }
}

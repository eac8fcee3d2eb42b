//! A second, deliberately naive implementation of the synthetic provider and
//! of the suite certificate, compared against the library.

use madec::prelude::*;
use madec::provider::{Mode, QuestionSpec, RandomSpecShape};
use proptest::prelude::*;

const GAMMA: f64 = 2.5;

/// Logit of token `y` straight from the closed form.
fn reference_logit(spec: &SynthModelSpec, q: &QuestionSpec, video_on: bool, audio_on: bool, prefix_len: usize, y: usize) -> f64 {
    let mut l = q.prior[y];
    if video_on {
        l += q.video_grounding[y] + q.video_interference[y];
    }
    if audio_on {
        l += q.audio_grounding[y] + q.audio_interference[y];
    }
    if y == spec.vocab().eos() as usize {
        let sched = spec.eos_bias_schedule();
        if !sched.is_empty() {
            l += sched[prefix_len.min(sched.len() - 1)];
        }
    }
    l
}

fn reference_meta(spec: &SynthModelSpec, q: &QuestionSpec, prompt: usize, y: usize) -> f64 {
    let sp = spec.vocab().special();
    let metas = [(sp.both, Relevance::Both), (sp.video, Relevance::Video), (sp.audio, Relevance::Audio)];
    for (k, (id, r)) in metas.iter().enumerate() {
        if *id as usize == y {
            let eps = q.meta_jitter.get(prompt).map_or(0.0, |j| j[k]);
            return if *r == q.relevance { q.meta_margin } else { 0.0 } + eps;
        }
    }
    -10.0 * q.meta_margin
}

#[test]
fn synth_logits_match_the_reference_exhaustively() {
    let spec = SynthModelSpec::random(99, RandomSpecShape { questions: 40, content_tokens: 10, prompts: 5 }).unwrap();
    let p = SynthProvider::new(spec.clone());
    let v = spec.vocab().len();
    for q in spec.questions() {
        for cfg in ModalityConfig::ALL {
            for len in 0..4 {
                let prefix = vec![4; len];
                let ctx = Context::generation(q.id, q.tokens.clone()).with_prefix(prefix, 0).unwrap();
                let got = p.logits(cfg, &ctx).unwrap();
                for y in 0..v {
                    let want = reference_logit(&spec, q, cfg.video == ModalityState::Standard, cfg.audio == ModalityState::Standard, len, y);
                    assert!((got.as_slice()[y] - want).abs() <= 1e-12);
                }
            }
        }
        for prompt in 0..5 {
            let ctx = Context::generation(q.id, q.tokens.clone()).modality_query(prompt);
            assert_eq!(ctx.mode, Mode::ModalityQuery(prompt));
            let got = p.logits(ModalityConfig::CLEAN, &ctx).unwrap();
            assert_eq!(got.len(), v);
            for y in 0..v {
                assert!((got.as_slice()[y] - reference_meta(&spec, q, prompt as usize, y)).abs() <= 1e-12);
            }
        }
    }
}

/// Oracle MAD at the first step, written per token from the four gated
/// branches without going through the library's fusion code.
fn reference_oracle_mad(spec: &SynthModelSpec, t: &TaskSpec) -> Vec<f64> {
    let q = &t.question;
    let (wav, wv, wa) = match t.category.relevance() {
        Relevance::Both => (1.0, 0.0, 0.0),
        Relevance::Video => (0.0, 1.0, 0.0),
        Relevance::Audio => (0.0, 0.0, 1.0),
    };
    (0..spec.vocab().len())
        .map(|y| {
            let l = |v, a| reference_logit(spec, q, v, a, 0, y);
            let (vaq, tvaq, vtaq, tvtaq) = (l(true, true), l(false, true), l(true, false), l(false, false));
            let (aav, av, aa) = (GAMMA * wav, GAMMA * wv, GAMMA * wa);
            ((1.0 + aav) * vaq - aav * tvaq) + ((1.0 + aav) * vaq - aav * vtaq) + ((1.0 + av) * vtaq - av * tvtaq) + ((1.0 + aa) * tvaq - aa * tvtaq)
        })
        .collect()
}

fn best(v: &[f64]) -> usize {
    let mut b = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[b] {
            b = i;
        }
    }
    b
}

#[test]
fn every_certificate_rechecks_independently() {
    let suite = build_suite(&SuiteConfig::new(50, 2024)).unwrap();
    assert_eq!(suite.len(), 250);
    let spec = suite.spec();
    for t in &suite.tasks {
        let clean: Vec<f64> = (0..spec.vocab().len()).map(|y| reference_logit(spec, &t.question, true, true, 0, y)).collect();
        assert_eq!(best(&clean), t.distractor as usize, "task {}", t.id);
        assert_eq!(best(&reference_oracle_mad(spec, t)), t.correct as usize, "task {}", t.id);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gating_removes_exactly_the_signal_terms(seed in any::<u64>()) {
        let spec = SynthModelSpec::random(seed, RandomSpecShape { questions: 3, content_tokens: 6, prompts: 1 }).unwrap();
        let p = SynthProvider::new(spec.clone());
        for q in spec.questions() {
            let ctx = spec.context(q.id).unwrap();
            let base = p.logits(ModalityConfig::BOTH_PERTURBED, &ctx).unwrap();
            for cfg in ModalityConfig::ALL {
                let l = p.logits(cfg, &ctx).unwrap();
                for y in 0..l.len() {
                    let mut want = 0.0;
                    if cfg.video == ModalityState::Standard { want += q.video_grounding[y] + q.video_interference[y]; }
                    if cfg.audio == ModalityState::Standard { want += q.audio_grounding[y] + q.audio_interference[y]; }
                    prop_assert!((l.as_slice()[y] - base.as_slice()[y] - want).abs() <= 1e-12);
                }
            }
        }
    }
}

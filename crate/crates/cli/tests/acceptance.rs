//! Acceptance gate. Each criterion is checked against a reference computed
//! here, independently of the library code paths it validates.
//!
//! Run with `cargo test -p madec-cli --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use madec::generation::expected_calls;
use madec::harness::{gamma_sweep, Category, EvalOptions, Evaluation, Outcome, WeightSource, DEFAULT_GAMMAS};
use madec::prelude::*;
use madec::provider::{MetaLogits, QuestionSpec};
use madec::rng::SplitMix64;
use madec::strategies::{cd_logits, four_branch_logits, vcd_extended_logits, weighted_cd_logits};

const SEED: u64 = 2024;
const EXACT: f64 = 1e-12;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn lv(v: Vec<f64>) -> LogitVector {
    LogitVector::new(v).unwrap()
}

fn random_vec(g: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| g.uniform(-10.0, 10.0)).collect()
}

fn random_branches(g: &mut SplitMix64, n: usize) -> [Vec<f64>; 4] {
    [random_vec(g, n), random_vec(g, n), random_vec(g, n), random_vec(g, n)]
}

fn to_branches(b: &[Vec<f64>; 4]) -> BranchLogits {
    BranchLogits::new(lv(b[0].clone()), lv(b[1].clone()), lv(b[2].clone()), lv(b[3].clone())).unwrap()
}

/// Four-line sum written out elementwise. Branch order is
/// `[vaq, ṽaq, vãq, ṽãq]`, alphas `[av, v, a]`.
fn reference_four_lines(b: &[Vec<f64>; 4], alpha: [f64; 3]) -> Vec<f64> {
    let [av, v, a] = alpha;
    (0..b[0].len())
        .map(|i| {
            let (c, vp, ap, bp) = (b[0][i], b[1][i], b[2][i], b[3][i]);
            ((1.0 + av) * c - av * vp) + ((1.0 + av) * c - av * ap) + ((1.0 + v) * ap - v * bp) + ((1.0 + a) * vp - a * bp)
        })
        .collect()
}

fn reference_softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = z.map(|x| (x - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|x| x / s)
}

fn random_weights(g: &mut SplitMix64) -> ModalityWeights {
    let p = reference_softmax3([g.uniform(-5.0, 5.0), g.uniform(-5.0, 5.0), g.uniform(-5.0, 5.0)]);
    ModalityWeights::new(p[0], p[1], p[2]).unwrap()
}

fn equivalence() -> Check {
    let start = Instant::now();
    let mut g = SplitMix64::new(SEED);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = 2 + g.below(30) as usize;
        let raw = random_branches(&mut g, n);
        let b = to_branches(&raw);
        let gamma = g.uniform(0.0, 5.0);
        let w = random_weights(&mut g);
        let alphas = [gamma * w.av, gamma * w.v, gamma * w.a];

        let mad = mad_logits(&b, gamma, &w).map_err(|e| e.to_string())?;
        let four = four_branch_logits(&b, alphas[0], alphas[1], alphas[2]).map_err(|e| e.to_string())?;
        worst = worst.max(max_dev(mad.as_slice(), four.as_slice()));
        worst = worst.max(max_dev(mad.as_slice(), &reference_four_lines(&raw, alphas)));

        for (m, (with, without)) in [(w.av, (&b.clean, &b.video_perturbed)), (w.v, (&b.audio_perturbed, &b.both_perturbed)), (w.a, (&b.video_perturbed, &b.both_perturbed))] {
            let wcd = weighted_cd_logits(with, without, gamma, m).map_err(|e| e.to_string())?;
            let cd = cd_logits(with, without, gamma * m).map_err(|e| e.to_string())?;
            worst = worst.max(max_dev(wcd.as_slice(), cd.as_slice()));
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= EXACT, || format!("max deviation {worst:e}"))?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 trials, max deviation {worst:e}, {elapsed:.2?}"))
}

fn affine_identities() -> Check {
    let mut g = SplitMix64::new(SEED ^ 1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = 2 + g.below(30) as usize;
        let gamma = g.uniform(0.0, 5.0);
        let w = random_weights(&mut g);

        let l = random_vec(&mut g, n);
        let same = to_branches(&[l.clone(), l.clone(), l.clone(), l.clone()]);
        let four_l: Vec<f64> = l.iter().map(|x| 4.0 * x).collect();
        worst = worst.max(max_dev(mad_logits(&same, gamma, &w).unwrap().as_slice(), &four_l));
        worst = worst.max(max_dev(vcd_extended_logits(&same, gamma).unwrap().as_slice(), &l));

        let raw = random_branches(&mut g, n);
        let b = to_branches(&raw);
        let zero: Vec<f64> = (0..n).map(|i| 2.0 * raw[0][i] + raw[2][i] + raw[1][i]).collect();
        worst = worst.max(max_dev(mad_logits(&b, 0.0, &w).unwrap().as_slice(), &zero));

        let c = g.uniform(-50.0, 50.0);
        let shifted = raw.clone().map(|v| v.into_iter().map(|x| x + c).collect::<Vec<_>>());
        let base = mad_logits(&b, gamma, &w).unwrap();
        let moved = mad_logits(&to_branches(&shifted), gamma, &w).unwrap();
        let expect: Vec<f64> = base.as_slice().iter().map(|x| x + 4.0 * c).collect();
        worst = worst.max(max_dev(moved.as_slice(), &expect));
        ensure(base.argmax().unwrap() == moved.argmax().unwrap(), || "shift changed the argmax".into())?;
    }
    ensure(worst <= EXACT, || format!("max deviation {worst:e}"))?;
    Ok(format!("500 trials per identity, max deviation {worst:e}"))
}

fn weight_extraction(suite: &Suite) -> Check {
    let mut g = SplitMix64::new(SEED ^ 2);
    let (mut simplex, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let z = [g.uniform(-20.0, 20.0), g.uniform(-20.0, 20.0), g.uniform(-20.0, 20.0)];
        let c = g.uniform(-100.0, 100.0);
        let meta = |z: [f64; 3]| MetaLogits { both: z[0], video: z[1], audio: z[2] };
        let w = ModalityWeights::from_meta_logits(meta(z)).unwrap();
        let ws = ModalityWeights::from_meta_logits(meta(z.map(|x| x + c))).unwrap();
        simplex = simplex.max((w.av + w.v + w.a - 1.0).abs());
        shift = shift.max(max_dev(&w.to_array(), &ws.to_array()));
        shift = shift.max(max_dev(&w.to_array(), &reference_softmax3(z)));
        ensure(w.to_array().iter().all(|x| *x >= 0.0), || "negative weight".into())?;
    }
    ensure(simplex <= 1e-9, || format!("simplex deviation {simplex:e}"))?;
    ensure(shift <= EXACT, || format!("shift deviation {shift:e}"))?;

    let provider = suite.provider();
    let registry = PromptRegistry::standard();
    ensure(registry.len() == 5, || "expected 5 prompt variants".into())?;
    let mut flips = 0;
    for task in &suite.tasks {
        let ctx = Context::generation(task.id, task.question.tokens.clone());
        for p in registry.variants() {
            let w = extract_weights(&provider, &ctx, p).map_err(|e| e.to_string())?;
            if w.argmax() != task.question.relevance {
                flips += 1;
            }
        }
    }
    ensure(flips == 0, || format!("{flips} argmax flips"))?;
    Ok(format!(
        "simplex {simplex:e}, shift {shift:e}, 0 flips over {} questions x 5 prompts",
        suite.len()
    ))
}

/// First-token decisions from the generating formula, empty prefix.
struct Reference<'a> {
    spec: &'a SynthModelSpec,
}

impl Reference<'_> {
    fn branch(&self, q: &QuestionSpec, video: bool, audio: bool) -> Vec<f64> {
        let eos = self.spec.vocab().eos() as usize;
        (0..q.prior.len())
            .map(|i| {
                let mut x = q.prior[i];
                if video {
                    x += q.video_grounding[i] + q.video_interference[i];
                }
                if audio {
                    x += q.audio_grounding[i] + q.audio_interference[i];
                }
                if i == eos {
                    x += self.spec.eos_bias(0);
                }
                x
            })
            .collect()
    }

    fn argmax(v: &[f64]) -> TokenId {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best as TokenId
    }

    fn greedy(&self, q: &QuestionSpec) -> TokenId {
        Self::argmax(&self.branch(q, true, true))
    }

    fn oracle_mad(&self, q: &QuestionSpec, gamma: f64) -> TokenId {
        let raw = [self.branch(q, true, true), self.branch(q, false, true), self.branch(q, true, false), self.branch(q, false, false)];
        let one_hot = |r: Relevance| if q.relevance == r { gamma } else { 0.0 };
        Self::argmax(&reference_four_lines(&raw, [one_hot(Relevance::Both), one_hot(Relevance::Video), one_hot(Relevance::Audio)]))
    }
}

fn run(p: &SynthProvider, s: &Suite, params: DecodingParams, weights: WeightSource) -> Evaluation {
    let opts = EvalOptions {
        workers: 1,
        weights,
        ..Default::default()
    };
    evaluate(p, s, &params, &opts).unwrap()
}

fn separation(suite: &Suite) -> Check {
    let start = Instant::now();
    let p = suite.provider();
    let greedy = run(&p, suite, DecodingParams::greedy(), WeightSource::Extracted);
    let oracle = run(&p, suite, DecodingParams::mad(2.5), WeightSource::Oracle);
    let extracted = run(&p, suite, DecodingParams::mad(2.5), WeightSource::Extracted);
    let elapsed = start.elapsed();

    let reference = Reference { spec: suite.spec() };
    for ((task, g), o) in suite.tasks.iter().zip(&greedy.results).zip(&oracle.results) {
        let want_g = reference.greedy(&task.question);
        let want_o = reference.oracle_mad(&task.question, 2.5);
        ensure(want_g == task.distractor && want_o == task.correct, || format!("task {}: certificate not reproduced by the reference", task.id))?;
        ensure(g.first_token == Some(want_g), || format!("task {}: greedy disagrees with the reference", task.id))?;
        ensure(o.first_token == Some(want_o), || format!("task {}: oracle MAD disagrees with the reference", task.id))?;
    }
    for c in Category::ALL.into_iter().filter(|c| c.is_hallucination()) {
        let acc = greedy.metrics.category(c).accuracy();
        ensure(acc == 0.0, || format!("greedy accuracy {acc} on {c}"))?;
    }
    ensure(oracle.metrics.accuracy() == 1.0, || format!("oracle MAD accuracy {}", oracle.metrics.accuracy()))?;
    let ext = extracted.metrics.accuracy();
    ensure(ext >= 0.95, || format!("extracted MAD accuracy {ext}"))?;
    for r in extracted.results.iter().filter(|r| r.outcome != Outcome::Correct) {
        ensure(r.weights_agree == Some(false), || format!("task {} failed with correct weight argmax", r.task))?;
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "greedy overall {:.2}, oracle MAD {:.2}, extracted MAD {:.2}, {elapsed:.2?}",
        greedy.metrics.accuracy(),
        oracle.metrics.accuracy(),
        ext
    ))
}

fn fusion_ablation(suite: &Suite) -> Check {
    let p = suite.provider();
    let mad = run(&p, suite, DecodingParams::mad(2.5), WeightSource::Extracted).metrics;
    let uniform = run(&p, suite, DecodingParams::new(Strategy::MadUniform, 2.5), WeightSource::Extracted).metrics;
    let argmax = run(&p, suite, DecodingParams::new(Strategy::MadArgmax, 2.5), WeightSource::Extracted).metrics;
    ensure(mad.accuracy() >= uniform.accuracy(), || format!("mad {} < uniform {}", mad.accuracy(), uniform.accuracy()))?;
    ensure(mad.accuracy() >= argmax.accuracy(), || format!("mad {} < argmax {}", mad.accuracy(), argmax.accuracy()))?;
    let av = Category::ALL.into_iter().find(|c| c.relevance() == Relevance::Both).unwrap();
    let (a, m) = (argmax.category(av).accuracy(), mad.category(av).accuracy());
    ensure(a < m, || format!("argmax {a} not below mad {m} on {av}"))?;
    Ok(format!(
        "mad {:.3}, uniform {:.3}, argmax {:.3}; {av}: argmax {a:.3} < mad {m:.3}",
        mad.accuracy(),
        uniform.accuracy(),
        argmax.accuracy()
    ))
}

fn weight_masks(suite: &Suite) -> Check {
    let p = suite.provider();
    let full = run(&p, suite, DecodingParams::mad(2.5), WeightSource::Extracted).metrics;
    let masked = |r: Relevance| run(&p, suite, DecodingParams::new(Strategy::MadMasked { mask: WeightMask::of(&[r]) }, 2.5), WeightSource::Extracted).metrics;
    let mut notes = Vec::new();
    for r in Relevance::ORDER {
        let m = masked(r);
        ensure(full.accuracy() >= m.accuracy(), || format!("full {} < masked -{} {}", full.accuracy(), r.short(), m.accuracy()))?;
        if r != Relevance::Both {
            for c in Category::ALL.into_iter().filter(|c| c.relevance() == r) {
                let (lo, hi) = (m.category(c).accuracy(), full.category(c).accuracy());
                ensure(lo < hi, || format!("masking {} leaves {c} at {lo} vs {hi}", r.short()))?;
            }
        }
        notes.push(format!("-{} {:.3}", r.short(), m.accuracy()));
    }
    Ok(format!("full {:.3}; {}", full.accuracy(), notes.join(", ")))
}

const CONFIG: &str = r#"
seed = 2024
output_dir = "unused"

[suite]
n_per_category = 50

[decoding]
strategy = "mad"
gamma = 2.5
"#;

fn madec(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_madec")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("madec {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

fn same_files(a: &Path, b: &Path, skip: &[&str]) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut n = 0;
    for name in names {
        let name = name.to_string_lossy().to_string();
        if skip.contains(&name.as_str()) {
            continue;
        }
        let x = fs::read(a.join(&name)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(&name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(x == y, || format!("{name} differs between reruns"))?;
        n += 1;
    }
    Ok(n)
}

fn gamma_sweep_table(suite: &Suite, tmp: &Path) -> Check {
    let p = suite.provider();
    let t = gamma_sweep(&p, suite, &DecodingParams::mad(2.5), &DEFAULT_GAMMAS, &EvalOptions::default()).map_err(|e| e.to_string())?;
    let gammas: Vec<f64> = t.rows.iter().map(|(g, _)| *g).collect();
    ensure(gammas == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0], || format!("gammas {gammas:?}"))?;
    let csv = t.to_csv();
    ensure(csv.lines().count() == 7, || "expected header plus 6 rows".into())?;

    let config = tmp.join("sweep.toml");
    fs::write(&config, CONFIG).unwrap();
    let (a, b) = (tmp.join("sweep-a"), tmp.join("sweep-b"));
    for dir in [&a, &b] {
        madec(&["sweep", config.to_str().unwrap(), "--output", dir.to_str().unwrap()])?;
    }
    let n = same_files(&a, &b, &[])?;
    let written = fs::read_to_string(a.join("sweep.csv")).unwrap();
    ensure(written == csv, || "CLI sweep differs from the in-process table".into())?;
    Ok(format!("6 rows, {n} files byte-identical across reruns"))
}

fn call_counts(suite: &Suite) -> Check {
    let p = suite.provider();
    let mut traces = 0;
    for (strategy, per_step, per_seq) in [(Strategy::Greedy, 1, 0), (Strategy::Mad, 4, 1), (Strategy::MadArgmax, 2, 1)] {
        let params = DecodingParams::new(strategy, 2.5);
        let e = run(&p, suite, params, WeightSource::Extracted);
        for t in &e.traces {
            let steps = t.steps.len() as u64;
            ensure(t.calls == per_step * steps + per_seq, || format!("{strategy} task {}: {} calls for {steps} steps", t.question_id, t.calls))?;
            ensure(t.calls == expected_calls(&strategy, &t.options, t.steps.len()), || "library formula disagrees".into())?;
            ensure(t.calls_consistent(), || format!("task {}: per-step calls do not add up", t.question_id))?;
            traces += 1;
        }
    }
    Ok(format!("{traces} traces, exact"))
}

fn determinism(suite: &Suite, tmp: &Path) -> Check {
    let p = suite.provider();
    let mut replayed = 0;
    for params in [DecodingParams::greedy(), DecodingParams::mad(2.5), DecodingParams::new(Strategy::MadArgmax, 2.5)] {
        let e = run(&p, suite, params, WeightSource::Extracted);
        for (t, task) in e.traces.iter().zip(&suite.tasks) {
            let ctx = Context::generation(task.id, task.question.tokens.clone());
            let outcome = replay_check(t, &p, &params, &ctx, &EvalOptions::default().limits).map_err(|e| e.to_string())?;
            ensure(outcome.is_match(), || format!("{} task {}: {outcome:?}", params.strategy, task.id))?;
            replayed += 1;
        }
    }

    let config = tmp.join("run.toml");
    fs::write(&config, CONFIG).unwrap();
    let (a, b) = (tmp.join("run-a"), tmp.join("run-b"));
    for dir in [&a, &b] {
        madec(&["run", config.to_str().unwrap(), "--output", dir.to_str().unwrap()])?;
    }
    let n = same_files(&a, &b, &["latency.csv"])?;
    madec(&["replay", a.to_str().unwrap(), "--all"])?;
    Ok(format!("{replayed} traces replayed; {n} run files byte-identical; CLI replay of all traces matches"))
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = build_suite(&SuiteConfig::new(50, SEED)).unwrap();
    assert_eq!(suite.len(), 250);

    let checks: Vec<Criterion> = vec![
        ("fusion equivalence", Box::new(equivalence)),
        ("affine identities", Box::new(affine_identities)),
        ("weight extraction", Box::new(|| weight_extraction(&suite))),
        ("benchmark separation", Box::new(|| separation(&suite))),
        ("fusion ablation directions", Box::new(|| fusion_ablation(&suite))),
        ("weight mask directions", Box::new(|| weight_masks(&suite))),
        ("gamma sweep table", Box::new(|| gamma_sweep_table(&suite, tmp.path()))),
        ("call-count accounting", Box::new(|| call_counts(&suite))),
        ("determinism and replay", Box::new(|| determinism(&suite, tmp.path()))),
    ];

    let mut failed = 0;
    for (name, check) in &checks {
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

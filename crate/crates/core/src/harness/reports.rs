use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::expected_calls;
use crate::provider::{Context, LogitProvider};
use crate::strategies::DecodingParams;
use crate::weights::{extract_weights, ModalityWeights, PromptRegistry, Relevance};

use super::eval::{evaluate, EvalOptions, Evaluation};
use super::metrics::{fmt4, fmt6, SuiteMetrics};
use super::{Category, Suite};

/// γ grid of the sensitivity analysis.
pub const DEFAULT_GAMMAS: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub strategy: String,
    pub rows: Vec<(f64, SuiteMetrics)>,
}

impl SweepTable {
    /// One row per γ: overall accuracy and hallucination rate, then the
    /// accuracy of each category.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gamma,accuracy,hallucination_rate");
        for c in Category::ALL {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (g, m) in &self.rows {
            let _ = write!(s, "{g},{},{}", fmt6(m.accuracy()), fmt6(m.overall.hallucination_rate()));
            for c in &m.categories {
                let _ = write!(s, ",{}", fmt6(c.accuracy()));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("strategy: {}\n\n| γ | accuracy | hallucination |", self.strategy);
        for c in Category::ALL {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---:|---:|---:|");
        s.push_str(&"---:|".repeat(Category::ALL.len()));
        s.push('\n');
        for (g, m) in &self.rows {
            let _ = write!(s, "| {g} | {} | {} |", fmt4(m.accuracy()), fmt4(m.overall.hallucination_rate()));
            for c in &m.categories {
                let _ = write!(s, " {} |", fmt4(c.accuracy()));
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates `base` once per γ.
pub fn gamma_sweep(
    provider: &dyn LogitProvider,
    suite: &Suite,
    base: &DecodingParams,
    gammas: &[f64],
    options: &EvalOptions,
) -> Result<SweepTable> {
    if gammas.is_empty() {
        return Err(Error::invalid("gamma sweep needs at least one γ"));
    }
    let rows = gammas
        .iter()
        .map(|&g| Ok((g, evaluate(provider, suite, &base.with_gamma(g), options)?.metrics)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        strategy: base.strategy.to_string(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub category: Category,
    pub n: usize,
    /// Mean `[w_av, w_v, w_a]`.
    pub mean: [f64; 3],
    pub dominant: Relevance,
    pub expected: Relevance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub prompt: u32,
    pub rows: Vec<WeightRow>,
}

impl WeightReport {
    /// Whether every category's largest mean weight is the modality it needs.
    pub fn pattern_holds(&self) -> bool {
        self.rows.iter().all(|r| r.dominant == r.expected)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,n,w_av,w_v,w_a,dominant,expected\n");
        for r in &self.rows {
            let [av, v, a] = r.mean.map(fmt6);
            let _ = writeln!(s, "{},{},{av},{v},{a},{},{}", r.category, r.n, r.dominant.short(), r.expected.short());
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("prompt variant: {}\n\n| category | n | w_av | w_v | w_a | dominant | expected |\n|---|---:|---:|---:|---:|---|---|\n", self.prompt);
        for r in &self.rows {
            let [av, v, a] = r.mean.map(fmt4);
            let _ = writeln!(s, "| {} | {} | {av} | {v} | {a} | {} | {} |", r.category, r.n, r.dominant, r.expected);
        }
        s
    }
}

/// Mean extracted weights per category, one query per task.
pub fn weight_distribution_report(provider: &dyn LogitProvider, suite: &Suite, prompt: &crate::weights::PromptVariant) -> Result<WeightReport> {
    if suite.is_empty() {
        return Err(Error::invalid("cannot report on an empty suite"));
    }
    let mut sums = [[0.0f64; 3]; 5];
    let mut counts = [0usize; 5];
    for t in &suite.tasks {
        let ctx = Context::generation(t.id, t.question.tokens.clone());
        let w = extract_weights(provider, &ctx, prompt).map_err(|e| Error::Task {
            task: t.id,
            source: Box::new(e),
        })?;
        let i = t.category.index();
        for (k, x) in w.to_array().into_iter().enumerate() {
            sums[i][k] += x;
        }
        counts[i] += 1;
    }
    let rows = Category::ALL
        .iter()
        .filter(|c| counts[c.index()] > 0)
        .map(|&c| {
            let i = c.index();
            let mean = sums[i].map(|x| x / counts[i] as f64);
            let dominant = ModalityWeights {
                av: mean[0],
                v: mean[1],
                a: mean[2],
            }
            .argmax();
            WeightRow {
                category: c,
                n: counts[i],
                mean,
                dominant,
                expected: c.relevance(),
            }
        })
        .collect();
    Ok(WeightReport { prompt: prompt.id, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt: u32,
    pub accuracy: f64,
    /// Tasks whose weight argmax differs from the canonical prompt's.
    pub argmax_flips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRobustness {
    pub rows: Vec<PromptRow>,
    pub mean: f64,
    /// Population standard deviation over prompts.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl PromptRobustness {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("prompt,accuracy,argmax_flips\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.prompt, fmt6(r.accuracy), r.argmax_flips);
        }
        let _ = writeln!(s, "mean,{},", fmt6(self.mean));
        let _ = writeln!(s, "std,{},", fmt6(self.std));
        let _ = writeln!(s, "min,{},", fmt6(self.min));
        let _ = writeln!(s, "max,{},", fmt6(self.max));
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| prompt | accuracy | weight argmax flips |\n|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(s, "| {} | {} | {} |", r.prompt, fmt4(r.accuracy), r.argmax_flips);
        }
        let _ = writeln!(
            s,
            "\nmean {} · std {} · min {} · max {}",
            fmt4(self.mean),
            fmt4(self.std),
            fmt4(self.min),
            fmt4(self.max)
        );
        s
    }
}

/// Evaluates `params` once per registered prompt variant.
pub fn prompt_robustness(
    provider: &dyn LogitProvider,
    suite: &Suite,
    prompts: &PromptRegistry,
    params: &DecodingParams,
    options: &EvalOptions,
) -> Result<PromptRobustness> {
    if prompts.is_empty() {
        return Err(Error::Configuration("no prompt variants registered".into()));
    }
    let mut rows = Vec::new();
    let mut canonical: Option<Vec<Option<Relevance>>> = None;
    for p in prompts.variants() {
        let mut opts = *options;
        opts.generation.prompt = p.id;
        let e = evaluate(provider, suite, params, &opts)?;
        let argmaxes: Vec<Option<Relevance>> = e.results.iter().map(|r| r.weights.map(|w| w.argmax())).collect();
        let reference = canonical.get_or_insert_with(|| argmaxes.clone());
        let flips = reference.iter().zip(&argmaxes).filter(|(a, b)| a != b).count();
        rows.push(PromptRow {
            prompt: p.id,
            accuracy: e.metrics.accuracy(),
            argmax_flips: flips,
        });
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / n;
    let min = rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    let max = rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
    Ok(PromptRobustness {
        rows,
        mean,
        std: var.sqrt(),
        min,
        max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub strategy: String,
    pub sequences: usize,
    pub tokens: u64,
    pub calls: u64,
    pub calls_per_token: f64,
    pub mean_ms_per_token: f64,
    pub p95_ms_per_step: f64,
}

impl LatencyRow {
    /// Summarizes one evaluation; checks every trace's call count.
    pub fn from_evaluation(params: &DecodingParams, e: &Evaluation) -> Result<Self> {
        let mut step_ms = Vec::new();
        for t in &e.traces {
            let want = expected_calls(&params.strategy, &t.options, t.steps.len());
            if t.calls != want {
                return Err(Error::Invariant(format!(
                    "{}: question {} made {} calls, expected {want}",
                    params.strategy, t.question_id, t.calls
                )));
            }
            step_ms.extend(t.steps.iter().filter_map(|s| s.ms));
        }
        step_ms.sort_by(f64::total_cmp);
        let p95 = match step_ms.len() {
            0 => 0.0,
            n => step_ms[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1],
        };
        Ok(Self {
            strategy: params.strategy.to_string(),
            sequences: e.results.len(),
            tokens: e.metrics.tokens,
            calls: e.metrics.calls,
            calls_per_token: e.metrics.calls_per_token(),
            mean_ms_per_token: e.metrics.mean_ms_per_token.unwrap_or(0.0),
            p95_ms_per_step: p95,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
}

impl LatencyReport {
    /// Call columns only; stable across runs.
    pub fn calls_csv(&self) -> String {
        let mut s = String::from("strategy,sequences,tokens,calls,calls_per_token\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.strategy, r.sequences, r.tokens, r.calls, fmt6(r.calls_per_token));
        }
        s
    }

    /// Includes wall-clock columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,sequences,tokens,calls,calls_per_token,mean_ms_per_token,p95_ms_per_step\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.strategy,
                r.sequences,
                r.tokens,
                r.calls,
                fmt6(r.calls_per_token),
                fmt6(r.mean_ms_per_token),
                fmt6(r.p95_ms_per_step)
            );
        }
        s
    }
}

/// Runs each strategy over the suite and reports provider calls and
/// wall-clock per token. Fails with an invariant error if any trace's call
/// count departs from [`expected_calls`].
pub fn latency_report(
    provider: &dyn LogitProvider,
    suite: &Suite,
    params: &[DecodingParams],
    options: &EvalOptions,
) -> Result<LatencyReport> {
    let rows = params
        .iter()
        .map(|p| LatencyRow::from_evaluation(p, &evaluate(provider, suite, p, options)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(LatencyReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{build_suite, SuiteConfig};
    use crate::strategies::Strategy;

    #[test]
    fn sweep_rejects_empty_grid_and_is_deterministic() {
        let suite = build_suite(&SuiteConfig::new(4, 2)).unwrap();
        let p = suite.provider();
        let base = DecodingParams::mad(2.5);
        assert!(gamma_sweep(&p, &suite, &base, &[], &EvalOptions::default()).is_err());
        let a = gamma_sweep(&p, &suite, &base, &DEFAULT_GAMMAS, &EvalOptions::default()).unwrap();
        let b = gamma_sweep(&p, &suite, &base, &DEFAULT_GAMMAS, &EvalOptions { workers: 3, ..Default::default() }).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv().lines().count(), 7);
    }

    #[test]
    fn gamma_zero_collapses_mad_variants() {
        let suite = build_suite(&SuiteConfig::new(3, 8)).unwrap();
        let p = suite.provider();
        let o = EvalOptions::default();
        let mad = gamma_sweep(&p, &suite, &DecodingParams::mad(1.0), &[0.0], &o).unwrap();
        let uni = gamma_sweep(&p, &suite, &DecodingParams::new(Strategy::MadUniform, 1.0), &[0.0], &o).unwrap();
        let fb = evaluate(&p, &suite, &DecodingParams::new(Strategy::FourBranch { alpha_av: 0.0, alpha_v: 0.0, alpha_a: 0.0 }, 0.0), &o).unwrap();
        let firsts = |m: &SuiteMetrics| m.categories.iter().map(|c| c.correct).collect::<Vec<_>>();
        assert_eq!(firsts(&mad.rows[0].1), firsts(&fb.metrics));
        assert_eq!(firsts(&uni.rows[0].1), firsts(&fb.metrics));
    }

    #[test]
    fn weight_rows_sum_to_one_and_follow_relevance() {
        let suite = build_suite(&SuiteConfig::new(5, 3)).unwrap();
        let p = suite.provider();
        let r = weight_distribution_report(&p, &suite, PromptRegistry::standard().canonical()).unwrap();
        assert!(r.pattern_holds());
        for row in &r.rows {
            assert!((row.mean.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert_eq!(p.calls(), 25);
    }

    #[test]
    fn unit_margin_without_jitter_gives_the_closed_form_weight() {
        let cfg = SuiteConfig {
            meta_margin: [1.0, 1.0],
            jitter_fraction: 0.0,
            ..SuiteConfig::new(3, 6)
        };
        let suite = build_suite(&cfg).unwrap();
        let r = weight_distribution_report(&suite.provider(), &suite, PromptRegistry::standard().canonical()).unwrap();
        let e = std::f64::consts::E;
        let visual = r.rows.iter().find(|x| x.category == Category::VisualDom).unwrap();
        assert!((visual.mean[2] - e / (e + 2.0)).abs() <= 1e-12);
    }

    #[test]
    fn prompts_do_not_move_accuracy() {
        let suite = build_suite(&SuiteConfig::new(4, 10)).unwrap();
        let p = suite.provider();
        let r = prompt_robustness(&p, &suite, &PromptRegistry::standard(), &DecodingParams::mad(2.5), &EvalOptions::default()).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert_eq!(r.std, 0.0);
        assert!(r.rows.iter().all(|x| x.argmax_flips == 0));
    }

    #[test]
    fn latency_counts_calls_exactly() {
        let suite = build_suite(&SuiteConfig::new(2, 1)).unwrap();
        let p = suite.provider();
        let params = [DecodingParams::greedy(), DecodingParams::mad(2.5), DecodingParams::new(Strategy::MadArgmax, 2.5)];
        let r = latency_report(&p, &suite, &params, &EvalOptions::default()).unwrap();
        // Every task emits one answer token then EOS.
        let per_seq = [2.0, 9.0, 5.0];
        for (row, calls) in r.rows.iter().zip(per_seq) {
            assert_eq!(row.tokens, 20);
            assert!((row.calls_per_token - calls / 2.0).abs() < 1e-12);
        }
        assert!(r.calls_csv().starts_with("strategy,sequences"));
    }
}

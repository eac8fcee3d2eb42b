use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;
use crate::weights::ModalityWeights;

use super::{Category, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Correct,
    /// The first answer token was the distractor.
    Hallucination,
    Other,
}

impl Outcome {
    pub fn score(task: &TaskSpec, first: Option<TokenId>) -> Self {
        match first {
            Some(t) if t == task.correct => Outcome::Correct,
            Some(t) if t == task.distractor => Outcome::Hallucination,
            _ => Outcome::Other,
        }
    }
}

/// The result of decoding one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: u64,
    pub category: Category,
    pub first_token: Option<TokenId>,
    pub outcome: Outcome,
    pub weights: Option<ModalityWeights>,
    /// Whether the weights' argmax names the modality the task needs.
    pub weights_agree: Option<bool>,
    pub tokens: usize,
    pub calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: Option<Category>,
    pub n: usize,
    pub correct: usize,
    pub hallucinated: usize,
    pub other: usize,
    /// Mean `[w_av, w_v, w_a]` over tasks that used weights.
    pub mean_weights: Option<[f64; 3]>,
}

impl CategoryMetrics {
    pub fn accuracy(&self) -> f64 {
        ratio(self.correct, self.n)
    }

    pub fn hallucination_rate(&self) -> f64 {
        ratio(self.hallucinated, self.n)
    }

    pub fn other_rate(&self) -> f64 {
        ratio(self.other, self.n)
    }
}

fn ratio(a: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        a as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    /// One entry per category in [`Category::ALL`] order.
    pub categories: Vec<CategoryMetrics>,
    pub overall: CategoryMetrics,
    pub tokens: u64,
    pub calls: u64,
    /// Wall-clock; excluded from every deterministic output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ms_per_token: Option<f64>,
}

impl SuiteMetrics {
    /// Aggregates results; the order of `results` does not matter.
    pub fn aggregate(results: &[TaskResult]) -> Self {
        let mut sorted: Vec<&TaskResult> = results.iter().collect();
        sorted.sort_by_key(|r| r.task);
        let mut cats: Vec<CategoryMetrics> = Category::ALL
            .iter()
            .map(|&c| CategoryMetrics {
                category: Some(c),
                ..Default::default()
            })
            .collect();
        let mut overall = CategoryMetrics::default();
        let mut wsum = [[0.0f64; 3]; 5];
        let mut wn = [0usize; 5];
        let mut all_w = [0.0f64; 3];
        let mut all_wn = 0usize;
        let (mut tokens, mut calls, mut ms, mut timed) = (0u64, 0u64, 0.0, true);
        for r in sorted {
            let i = r.category.index();
            for m in [&mut cats[i], &mut overall] {
                m.n += 1;
                match r.outcome {
                    Outcome::Correct => m.correct += 1,
                    Outcome::Hallucination => m.hallucinated += 1,
                    Outcome::Other => m.other += 1,
                }
            }
            if let Some(w) = r.weights {
                for (k, x) in w.to_array().into_iter().enumerate() {
                    wsum[i][k] += x;
                    all_w[k] += x;
                }
                wn[i] += 1;
                all_wn += 1;
            }
            tokens += r.tokens as u64;
            calls += r.calls;
            match r.ms {
                Some(x) => ms += x,
                None => timed = false,
            }
        }
        let mean = |s: [f64; 3], n: usize| (n > 0).then(|| s.map(|x| x / n as f64));
        for (i, c) in cats.iter_mut().enumerate() {
            c.mean_weights = mean(wsum[i], wn[i]);
        }
        overall.mean_weights = mean(all_w, all_wn);
        Self {
            categories: cats,
            overall,
            tokens,
            calls,
            mean_ms_per_token: (timed && tokens > 0).then(|| ms / tokens as f64),
        }
    }

    pub fn category(&self, c: Category) -> &CategoryMetrics {
        &self.categories[c.index()]
    }

    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn calls_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.calls as f64 / self.tokens as f64
        }
    }

    /// Per-category rows plus an overall row; no wall-clock columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,n,accuracy,hallucination_rate,other_rate,w_av,w_v,w_a\n");
        for m in self.categories.iter().chain(std::iter::once(&self.overall)) {
            let name = m.category.map_or("overall", |c| c.name());
            let [av, v, a] = m.mean_weights.map_or([String::new(), String::new(), String::new()], |w| w.map(fmt6));
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{av},{v},{a}",
                m.n,
                fmt6(m.accuracy()),
                fmt6(m.hallucination_rate()),
                fmt6(m.other_rate())
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| category | n | accuracy | hallucination | other |\n|---|---:|---:|---:|---:|\n");
        for m in self.categories.iter().chain(std::iter::once(&self.overall)) {
            let name = m.category.map_or("**overall**", |c| c.name());
            let _ = writeln!(
                s,
                "| {name} | {} | {} | {} | {} |",
                m.n,
                fmt4(m.accuracy()),
                fmt4(m.hallucination_rate()),
                fmt4(m.other_rate())
            );
        }
        let _ = writeln!(s, "\nprovider calls per token: {}", fmt4(self.calls_per_token()));
        s
    }
}

pub(crate) fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

pub(crate) fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

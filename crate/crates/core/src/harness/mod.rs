//! Synthetic benchmark and analyses: certified task suites, accuracy by
//! dominance category, the γ sweep, weight distributions, prompt robustness,
//! and call/latency accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::weights::Relevance;

mod eval;
mod metrics;
mod reports;
mod suite;

pub use eval::{evaluate, EvalOptions, Evaluation, WeightSource};
pub use metrics::{CategoryMetrics, Outcome, SuiteMetrics, TaskResult};
pub use reports::{
    gamma_sweep, latency_report, prompt_robustness, weight_distribution_report, LatencyReport, LatencyRow,
    PromptRobustness, PromptRow, SweepTable, WeightReport, WeightRow, DEFAULT_GAMMAS,
};
pub use suite::{build_suite, check_certificate, Certificate, Suite, SuiteConfig, TaskSpec, CERTIFICATE_GAMMA};

/// Which modality over-reliance a task probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    /// Video evidence pulls the answer to an audio question.
    VisualDom,
    /// Audio evidence pulls the answer to a video question.
    AudioDom,
    /// The language prior contradicts joint audio-visual evidence.
    LanguageDom,
    /// Video content induces a fabricated sound.
    VideoDrivenAudioHall,
    /// Audio content induces a fabricated visual.
    AudioDrivenVideoHall,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::VisualDom,
        Category::AudioDom,
        Category::LanguageDom,
        Category::VideoDrivenAudioHall,
        Category::AudioDrivenVideoHall,
    ];

    /// The modality the question actually needs.
    pub fn relevance(self) -> Relevance {
        match self {
            Category::VisualDom | Category::VideoDrivenAudioHall => Relevance::Audio,
            Category::AudioDom | Category::AudioDrivenVideoHall => Relevance::Video,
            Category::LanguageDom => Relevance::Both,
        }
    }

    pub fn is_hallucination(self) -> bool {
        matches!(self, Category::VideoDrivenAudioHall | Category::AudioDrivenVideoHall)
    }

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::VisualDom => "visual_dom",
            Category::AudioDom => "audio_dom",
            Category::LanguageDom => "language_dom",
            Category::VideoDrivenAudioHall => "video_driven_audio_hall",
            Category::AudioDrivenVideoHall => "audio_driven_video_hall",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category {s:?}"))
    }
}

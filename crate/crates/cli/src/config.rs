//! Run configuration: one TOML file, every key known in advance.

use std::path::{Path, PathBuf};

use madec::generation::{GenerationLimits, GenerationOptions};
use madec::harness::{EvalOptions, SuiteConfig, WeightSource};
use madec::strategies::{DecodingParams, Strategy};
use madec::weights::{MaskSemantics, PromptRegistry, WeightMask};
use serde::Deserialize;

use crate::exit::CliError;

pub const ENV_OUTPUT_ROOT: &str = "MADEC_OUTPUT_ROOT";
pub const ENV_WORKERS: &str = "MADEC_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Greedy,
    VcdExtended,
    FourBranch,
    Mad,
    MadUniform,
    MadArgmax,
    MadMasked,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub n_per_category: usize,
    #[serde(default = "d::content_tokens")]
    pub content_tokens: usize,
    #[serde(default = "d::meta_margin")]
    pub meta_margin: [f64; 2],
    #[serde(default = "d::jitter_fraction")]
    pub jitter_fraction: f64,
    #[serde(default = "d::max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "d::min_margin")]
    pub min_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingSection {
    pub strategy: StrategyName,
    #[serde(default = "d::gamma")]
    pub gamma: f64,
    /// VCD-Extended contrast strength.
    pub alpha: Option<f64>,
    /// Four-branch strengths `[alpha_av, alpha_v, alpha_a]`.
    pub alphas: Option<[f64; 3]>,
    /// Weights switched off by `mad_masked`.
    pub mask: Option<WeightMask>,
    #[serde(default)]
    pub mask_semantics: MaskSemantics,
    #[serde(default)]
    pub prompt: u32,
    #[serde(default)]
    pub per_step_weights: bool,
    #[serde(default)]
    pub all_branch_calls: bool,
    #[serde(default)]
    pub weights: WeightSource,
    #[serde(default = "d::max_tokens")]
    pub max_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Synth,
    Bridge,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSection {
    #[serde(default)]
    pub kind: ProviderKind,
    /// Bridge program and arguments; `{spec}` is replaced by the path of the
    /// suite spec written to the run directory.
    pub command: Option<Vec<String>>,
    /// `host:port` of a TCP bridge.
    pub address: Option<String>,
    #[serde(default = "d::timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Synth,
            command: None,
            address: None,
            timeout_ms: d::timeout_ms(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "d::workers")]
    pub workers: usize,
    /// Query prompt texts by id; the built-in five when absent.
    pub prompts: Option<Vec<String>>,
    pub suite: SuiteSection,
    pub decoding: DecodingSection,
    #[serde(default)]
    pub provider: ProviderSection,
}

mod d {
    use madec::harness::SuiteConfig;

    pub fn content_tokens() -> usize {
        SuiteConfig::default().content_tokens
    }
    pub fn meta_margin() -> [f64; 2] {
        SuiteConfig::default().meta_margin
    }
    pub fn jitter_fraction() -> f64 {
        SuiteConfig::default().jitter_fraction
    }
    pub fn max_attempts() -> u32 {
        SuiteConfig::default().max_attempts
    }
    pub fn min_margin() -> f64 {
        SuiteConfig::default().min_margin
    }
    pub fn gamma() -> f64 {
        madec::strategies::DEFAULT_GAMMA
    }
    pub fn max_tokens() -> usize {
        4
    }
    pub fn timeout_ms() -> u64 {
        10_000
    }
    pub fn workers() -> usize {
        1
    }
}

/// A parsed and validated config plus the exact text it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub text: String,
    pub params: DecodingParams,
    pub prompts: PromptRegistry,
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(w) = std::env::var_os(ENV_WORKERS) {
            let w = w.to_string_lossy();
            config.workers = w
                .parse()
                .map_err(|_| CliError::config(format!("{ENV_WORKERS}={w:?} is not a worker count")))?;
        }
        let params = config.decoding_params()?;
        let prompts = match &config.prompts {
            None => PromptRegistry::standard(),
            Some(texts) if texts.is_empty() => return Err(CliError::config("prompts: registry is empty")),
            Some(texts) => PromptRegistry::from_texts(texts.clone()).map_err(|e| CliError::config(format!("prompts: {e}")))?,
        };
        prompts
            .get(config.decoding.prompt)
            .map_err(|_| CliError::config(format!("decoding.prompt: variant {} is not registered", config.decoding.prompt)))?;
        config.validate()?;
        Ok(Self {
            text: text.to_string(),
            config,
            params,
            prompts,
        })
    }

    pub fn suite_config(&self) -> SuiteConfig {
        let s = &self.config.suite;
        SuiteConfig {
            n_per_category: s.n_per_category,
            seed: self.config.seed,
            content_tokens: s.content_tokens,
            prompts: self.prompts.len() as u32,
            meta_margin: s.meta_margin,
            jitter_fraction: s.jitter_fraction,
            max_attempts: s.max_attempts,
            min_margin: s.min_margin,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        let d = &self.config.decoding;
        EvalOptions {
            workers: self.config.workers,
            limits: GenerationLimits {
                max_tokens: d.max_tokens,
                call_timeout: None,
            },
            generation: GenerationOptions {
                prompt: d.prompt,
                per_step_weights: d.per_step_weights,
                all_branch_calls: d.all_branch_calls,
                ..GenerationOptions::default()
            },
            weights: d.weights,
        }
    }

    /// The run directory, under `MADEC_OUTPUT_ROOT` when the configured path
    /// is relative and the variable is set.
    pub fn output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        let dir = override_dir.unwrap_or(&self.config.output_dir);
        match std::env::var_os(ENV_OUTPUT_ROOT) {
            Some(root) if dir.is_relative() => Path::new(&root).join(dir),
            _ => dir.to_path_buf(),
        }
    }
}

impl RunConfig {
    fn decoding_params(&self) -> Result<DecodingParams, CliError> {
        let d = &self.decoding;
        let need = |field: &str| CliError::config(format!("decoding.{field} is required for strategy {:?}", d.strategy));
        let strategy = match d.strategy {
            StrategyName::Greedy => Strategy::Greedy,
            StrategyName::VcdExtended => Strategy::VcdExtended {
                alpha: d.alpha.ok_or_else(|| need("alpha"))?,
            },
            StrategyName::FourBranch => {
                let [alpha_av, alpha_v, alpha_a] = d.alphas.ok_or_else(|| need("alphas"))?;
                Strategy::FourBranch { alpha_av, alpha_v, alpha_a }
            }
            StrategyName::Mad => Strategy::Mad,
            StrategyName::MadUniform => Strategy::MadUniform,
            StrategyName::MadArgmax => Strategy::MadArgmax,
            StrategyName::MadMasked => Strategy::MadMasked {
                mask: d.mask.ok_or_else(|| need("mask"))?,
            },
        };
        let params = DecodingParams {
            gamma: d.gamma,
            strategy,
            mask_semantics: d.mask_semantics,
        };
        params.validate().map_err(|e| CliError::config(format!("decoding: {e}")))?;
        Ok(params)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.workers == 0 {
            return Err(CliError::config("workers must be >= 1"));
        }
        if self.decoding.max_tokens == 0 {
            return Err(CliError::config("decoding.max_tokens must be >= 1"));
        }
        match self.provider.kind {
            ProviderKind::Synth if self.provider.command.is_some() || self.provider.address.is_some() => {
                Err(CliError::config("provider: command/address need kind = \"bridge\""))
            }
            ProviderKind::Bridge if self.provider.command.is_some() == self.provider.address.is_some() => {
                Err(CliError::config("provider: a bridge needs exactly one of command or address"))
            }
            _ => Ok(()),
        }?;
        let suite = SuiteConfig {
            n_per_category: self.suite.n_per_category,
            content_tokens: self.suite.content_tokens,
            meta_margin: self.suite.meta_margin,
            jitter_fraction: self.suite.jitter_fraction,
            max_attempts: self.suite.max_attempts,
            min_margin: self.suite.min_margin,
            ..SuiteConfig::default()
        };
        suite.validate().map_err(|e| CliError::config(format!("suite: {e}")))
    }
}

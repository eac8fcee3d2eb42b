//! Logit fusion rules: plain greedy, single-pair contrastive decoding, the
//! VCD-Extended baseline, the four-branch audio-visual decomposition, and
//! modality-adaptive decoding with its ablations.
//!
//! Every rule is a pure function of the branch logits. Branch names follow
//! the modality configuration they were computed under: `clean` is `vaq`,
//! `video_perturbed` is `ṽaq`, `audio_perturbed` is `vãq`, `both_perturbed`
//! is `ṽãq`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::LogitVector;
use crate::provider::{BranchLogits, ModalityConfig, PartialBranches};
use crate::weights::{masked_weights, zeroed_weights, MaskSemantics, ModalityWeights, Relevance, WeightMask};

pub const DEFAULT_GAMMA: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Argmax of the clean branch.
    Greedy,
    /// One contrast against each single- and double-perturbed branch.
    VcdExtended { alpha: f64 },
    /// The four-line decomposition with free contrast strengths.
    FourBranch { alpha_av: f64, alpha_v: f64, alpha_a: f64 },
    /// Four-branch with `alpha_m = gamma * w_m` from extracted weights.
    Mad,
    /// Mad with `w = (1/3, 1/3, 1/3)`.
    MadUniform,
    /// Only the line of the most relevant modality, at full strength `gamma`.
    MadArgmax,
    /// Mad with some weights switched off.
    MadMasked { mask: WeightMask },
}

impl Strategy {
    /// Whether the strategy needs extracted modality weights.
    pub fn uses_weights(&self) -> bool {
        matches!(self, Strategy::Mad | Strategy::MadArgmax | Strategy::MadMasked { .. })
    }

    /// The branches one decoding step has to evaluate. `weights` is only
    /// consulted by [`Strategy::MadArgmax`].
    pub fn required_branches(&self, weights: Option<&ModalityWeights>) -> Result<Vec<ModalityConfig>> {
        Ok(match self {
            Strategy::Greedy => vec![ModalityConfig::CLEAN],
            Strategy::MadArgmax => {
                let w = weights.ok_or_else(|| Error::invalid("mad_argmax needs modality weights"))?;
                argmax_line_branches(w.argmax()).to_vec()
            }
            _ => ModalityConfig::ALL.to_vec(),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::VcdExtended { .. } => "vcd_extended",
            Strategy::FourBranch { .. } => "four_branch",
            Strategy::Mad => "mad",
            Strategy::MadUniform => "mad_uniform",
            Strategy::MadArgmax => "mad_argmax",
            Strategy::MadMasked { .. } => "mad_masked",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::VcdExtended { alpha } => write!(f, "vcd_extended(alpha={alpha})"),
            Strategy::FourBranch { alpha_av, alpha_v, alpha_a } => {
                write!(f, "four_branch(av={alpha_av}, v={alpha_v}, a={alpha_a})")
            }
            Strategy::MadMasked { mask } => write!(f, "mad_masked(-{mask})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    /// Base contrast strength shared by all modalities.
    pub gamma: f64,
    pub strategy: Strategy,
    #[serde(default)]
    pub mask_semantics: MaskSemantics,
}

impl DecodingParams {
    pub fn new(strategy: Strategy, gamma: f64) -> Self {
        Self {
            gamma,
            strategy,
            mask_semantics: MaskSemantics::default(),
        }
    }

    pub fn mad(gamma: f64) -> Self {
        Self::new(Strategy::Mad, gamma)
    }

    pub fn greedy() -> Self {
        Self::new(Strategy::Greedy, DEFAULT_GAMMA)
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be finite and >= 0, got {x}")))
            }
        };
        check("gamma", self.gamma)?;
        match self.strategy {
            Strategy::VcdExtended { alpha } => check("alpha", alpha),
            Strategy::FourBranch { alpha_av, alpha_v, alpha_a } => {
                check("alpha_av", alpha_av)?;
                check("alpha_v", alpha_v)?;
                check("alpha_a", alpha_a)
            }
            Strategy::MadMasked { mask } if mask.av && mask.v && mask.a => {
                Err(Error::invalid("cannot mask all three modality weights"))
            }
            _ => Ok(()),
        }
    }
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self::mad(DEFAULT_GAMMA)
    }
}

fn check_alpha(name: &str, alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be finite and >= 0, got {alpha}")))
    }
}

/// `(1 + alpha) * clean - alpha * degraded`.
pub fn cd_logits(clean: &LogitVector, degraded: &LogitVector, alpha: f64) -> Result<LogitVector> {
    check_alpha("alpha", alpha)?;
    clean.lincomb(1.0 + alpha, degraded, -alpha)
}

/// `l_m + gamma * w_m * (l_m - l_m̃)`: contrast for one modality with an
/// adaptive strength.
pub fn weighted_cd_logits(
    with_modality: &LogitVector,
    without_modality: &LogitVector,
    gamma: f64,
    w_m: f64,
) -> Result<LogitVector> {
    check_alpha("gamma", gamma)?;
    if !(0.0..=1.0).contains(&w_m) {
        return Err(Error::invalid(format!("modality weight {w_m} outside [0, 1]")));
    }
    let diff = with_modality.lincomb(1.0, without_modality, -1.0)?;
    let mut out = with_modality.clone();
    out.add_scaled(&diff, gamma * w_m)?;
    Ok(out)
}

/// `(1 + 3 alpha) * vaq - alpha * (ṽaq + vãq + ṽãq)`.
pub fn vcd_extended_logits(b: &BranchLogits, alpha: f64) -> Result<LogitVector> {
    check_alpha("alpha", alpha)?;
    let mut out = b.clean.lincomb(1.0 + 3.0 * alpha, &b.video_perturbed, -alpha)?;
    out.add_scaled(&b.audio_perturbed, -alpha)?;
    out.add_scaled(&b.both_perturbed, -alpha)?;
    Ok(out)
}

/// The four-line decomposition, summed line by line:
///
/// ```text
///   (1 + α_av) vaq - α_av ṽaq     visual contrast, audio present
/// + (1 + α_av) vaq - α_av vãq     audio contrast, video present
/// + (1 + α_v)  vãq - α_v  ṽãq     visual contrast, audio absent
/// + (1 + α_a)  ṽaq - α_a  ṽãq     audio contrast, video absent
/// ```
///
/// The coefficients of each line sum to 1, so four equal branches `L` fuse
/// to `4L`, and with every alpha at 0 the result is `2 vaq + vãq + ṽaq`
/// rather than plain greedy.
pub fn four_branch_logits(b: &BranchLogits, alpha_av: f64, alpha_v: f64, alpha_a: f64) -> Result<LogitVector> {
    let lines = [
        cd_logits(&b.clean, &b.video_perturbed, alpha_av)?,
        cd_logits(&b.clean, &b.audio_perturbed, alpha_av)?,
        cd_logits(&b.audio_perturbed, &b.both_perturbed, alpha_v)?,
        cd_logits(&b.video_perturbed, &b.both_perturbed, alpha_a)?,
    ];
    let mut out = LogitVector::zeros(b.clean.len());
    for line in &lines {
        out.add_scaled(line, 1.0)?;
    }
    Ok(out)
}

/// Modality-adaptive decoding: the four-branch rule at `alpha_m = gamma * w_m`.
pub fn mad_logits(b: &BranchLogits, gamma: f64, w: &ModalityWeights) -> Result<LogitVector> {
    check_alpha("gamma", gamma)?;
    four_branch_logits(b, gamma * w.av, gamma * w.v, gamma * w.a)
}

/// Branches used by the single line [`argmax_line_logits`] keeps.
pub fn argmax_line_branches(r: Relevance) -> [ModalityConfig; 2] {
    match r {
        Relevance::Video => [ModalityConfig::AUDIO_PERTURBED, ModalityConfig::BOTH_PERTURBED],
        Relevance::Audio => [ModalityConfig::VIDEO_PERTURBED, ModalityConfig::BOTH_PERTURBED],
        Relevance::Both => [ModalityConfig::CLEAN, ModalityConfig::BOTH_PERTURBED],
    }
}

/// The one contrast line kept by the argmax ablation, at strength `gamma`:
///
/// - video: `(1 + γ) vãq - γ ṽãq` (visual contrast with audio absent)
/// - audio: `(1 + γ) ṽaq - γ ṽãq` (audio contrast with video absent)
/// - both:  `(1 + γ) vaq - γ ṽãq` (joint contrast against both removed)
///
/// Each needs exactly two branches.
pub fn argmax_line_logits(b: &PartialBranches, gamma: f64, r: Relevance) -> Result<LogitVector> {
    let [with, without] = argmax_line_branches(r);
    cd_logits(b.get(with)?, b.get(without)?, gamma)
}

/// Dispatches to the rule selected by `params`. `weights` are the extracted
/// modality weights; they are required by the strategies that use them.
pub fn fuse(b: &BranchLogits, params: &DecodingParams, weights: Option<&ModalityWeights>) -> Result<LogitVector> {
    fuse_partial(&b.to_partial(), params, weights)
}

/// [`fuse`] over whichever branches were evaluated; errors if the strategy
/// needs one that is missing.
pub fn fuse_partial(b: &PartialBranches, params: &DecodingParams, weights: Option<&ModalityWeights>) -> Result<LogitVector> {
    params.validate()?;
    let gamma = params.gamma;
    let need_w = || {
        weights.ok_or_else(|| Error::invalid(format!("{} needs modality weights", params.strategy.name())))
    };
    let full = || -> Result<BranchLogits> {
        BranchLogits::new(
            b.get(ModalityConfig::CLEAN)?.clone(),
            b.get(ModalityConfig::VIDEO_PERTURBED)?.clone(),
            b.get(ModalityConfig::AUDIO_PERTURBED)?.clone(),
            b.get(ModalityConfig::BOTH_PERTURBED)?.clone(),
        )
    };
    match params.strategy {
        Strategy::Greedy => Ok(b.get(ModalityConfig::CLEAN)?.clone()),
        Strategy::VcdExtended { alpha } => vcd_extended_logits(&full()?, alpha),
        Strategy::FourBranch { alpha_av, alpha_v, alpha_a } => four_branch_logits(&full()?, alpha_av, alpha_v, alpha_a),
        Strategy::Mad => mad_logits(&full()?, gamma, need_w()?),
        Strategy::MadUniform => mad_logits(&full()?, gamma, &ModalityWeights::UNIFORM),
        Strategy::MadArgmax => argmax_line_logits(b, gamma, need_w()?.argmax()),
        Strategy::MadMasked { mask } => {
            let w = need_w()?;
            match params.mask_semantics {
                MaskSemantics::Renormalize => mad_logits(&full()?, gamma, &masked_weights(*w, mask)?),
                MaskSemantics::Zero => {
                    let [av, v, a] = zeroed_weights(*w, mask);
                    four_branch_logits(&full()?, gamma * av, gamma * v, gamma * a)
                }
            }
        }
    }
}

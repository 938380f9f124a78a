//! Stroke-end skip gate.
//!
//! Each finished stroke is compared with the previous input; the closer they
//! are, the more likely the expensive generation round is skipped. A prompt
//! change always regenerates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{cosine_similarity, GrayImage};

pub const DEFAULT_TAU: f64 = 0.95;

/// `max(0, (x - tau) / (1 - tau))`.
pub fn skip_probability(x: f64, tau: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::contract(format!("tau must lie in [0, 1), got {tau}")));
    }
    Ok(((x - tau) / (1.0 - tau)).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAction {
    Skip,
    Generate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReason {
    FirstInput,
    PromptChanged,
    SampledSkip,
    SampledGenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub action: GateAction,
    /// Cosine similarity of the ink maps; `0.0` when it was not computed.
    pub similarity: f64,
    pub probability: f64,
    pub reason: GateReason,
}

impl GateDecision {
    fn forced(reason: GateReason) -> Self {
        Self {
            action: GateAction::Generate,
            similarity: 0.0,
            probability: 0.0,
            reason,
        }
    }

    pub fn is_skip(&self) -> bool {
        self.action == GateAction::Skip
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    reference: Option<GrayImage>,
    tau: f64,
    rng: ChaCha8Rng,
    last_prompt: String,
}

impl GateState {
    pub fn new(tau: f64, seed: u64) -> Result<Self> {
        skip_probability(0.0, tau)?;
        Ok(Self {
            reference: None,
            tau,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_prompt: String::new(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn reference(&self) -> Option<&GrayImage> {
        self.reference.as_ref()
    }

    pub fn last_prompt(&self) -> &str {
        &self.last_prompt
    }

    /// Decides whether `input` warrants a new generation round.
    ///
    /// Similarity is measured between ink maps (`1 - intensity`) so that
    /// blank paper contributes nothing. Whatever the outcome, `input` and
    /// `prompt` become the new reference; on error the state is untouched.
    pub fn evaluate(&mut self, input: &GrayImage, prompt: &str) -> Result<GateDecision> {
        let decision = match &self.reference {
            None => GateDecision::forced(GateReason::FirstInput),
            Some(_) if prompt != self.last_prompt => GateDecision::forced(GateReason::PromptChanged),
            Some(reference) => {
                let x = cosine_similarity(&input.inverted(), &reference.inverted())?;
                let p = skip_probability(x, self.tau)?;
                let u: f64 = self.rng.random();
                let (action, reason) = if u < p {
                    (GateAction::Skip, GateReason::SampledSkip)
                } else {
                    (GateAction::Generate, GateReason::SampledGenerate)
                };
                GateDecision {
                    action,
                    similarity: x,
                    probability: p,
                    reason,
                }
            }
        };
        self.reference = Some(input.clone());
        if self.last_prompt != prompt {
            self.last_prompt = prompt.to_owned();
        }
        Ok(decision)
    }
}

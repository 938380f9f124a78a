//! Neural capabilities behind one trait.
//!
//! The pipeline only ever talks to [`ModelBackend`]; which implementation
//! sits behind it is decided once, at construction.

pub mod protocol;
mod remote;
mod synthetic;

pub use remote::{RemoteBackend, RemoteConfig};
pub use synthetic::SyntheticBackend;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Latent, RgbImage, LATENT_DOWNSCALE};

/// Text conditioning: `tokens x dim` values, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    tokens: usize,
    dim: usize,
    data: Vec<f32>,
}

impl PromptEmbedding {
    pub fn new(tokens: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim == 0 {
            return Err(Error::contract("embedding dimensions must be positive"));
        }
        if data.len() != tokens * dim {
            return Err(Error::mismatch(tokens * dim, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("embedding contains non-finite values"));
        }
        Ok(Self { tokens, dim, data })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub working_resolution: usize,
    pub latent_downscale: usize,
    pub styles: Vec<String>,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            working_resolution: 512,
            latent_downscale: LATENT_DOWNSCALE,
            styles: vec!["anime".into(), "realistic".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_downscale != LATENT_DOWNSCALE {
            return Err(Error::contract(format!(
                "latent downscale is fixed at {LATENT_DOWNSCALE}, got {}",
                self.latent_downscale
            )));
        }
        if self.working_resolution == 0 || self.working_resolution % self.latent_downscale != 0 {
            return Err(Error::contract(format!(
                "working resolution {} is not a positive multiple of {}",
                self.working_resolution, self.latent_downscale
            )));
        }
        if self.styles.is_empty() || self.styles.iter().any(String::is_empty) {
            return Err(Error::contract("style list must be non-empty with non-empty ids"));
        }
        Ok(())
    }

    pub fn check_style(&self, style: &str) -> Result<()> {
        if self.styles.iter().any(|s| s == style) {
            Ok(())
        } else {
            Err(Error::UnknownStyle(style.to_owned()))
        }
    }
}

/// One item of a noise-prediction batch.
#[derive(Debug, Clone, Copy)]
pub struct NoiseQuery<'a> {
    pub latent: &'a Latent,
    pub timestep: usize,
    pub embed: &'a PromptEmbedding,
}

/// The five neural capabilities a backend provides.
///
/// Implementations must be callable concurrently. A batched
/// [`predict_noise`](ModelBackend::predict_noise) call must return exactly
/// what per-item calls would.
pub trait ModelBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn encode_prompt(&self, text: &str, style: &str) -> Result<PromptEmbedding>;

    fn vae_encode(&self, img: &RgbImage) -> Result<Latent>;

    fn vae_decode(&self, latent: &Latent) -> Result<RgbImage>;

    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>>;

    /// Line map, dark lines on a light ground, same size as `img`.
    fn extract_lines(&self, img: &RgbImage) -> Result<GrayImage>;
}

impl<B: ModelBackend + ?Sized> ModelBackend for std::sync::Arc<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        (**self).descriptor()
    }

    fn encode_prompt(&self, text: &str, style: &str) -> Result<PromptEmbedding> {
        (**self).encode_prompt(text, style)
    }

    fn vae_encode(&self, img: &RgbImage) -> Result<Latent> {
        (**self).vae_encode(img)
    }

    fn vae_decode(&self, latent: &Latent) -> Result<RgbImage> {
        (**self).vae_decode(latent)
    }

    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>> {
        (**self).predict_noise(batch)
    }

    fn extract_lines(&self, img: &RgbImage) -> Result<GrayImage> {
        (**self).extract_lines(img)
    }
}

/// Shape checks shared by every backend.
pub(crate) fn check_noise_outputs(batch: &[NoiseQuery<'_>], out: &[Latent]) -> Result<()> {
    if batch.len() != out.len() {
        return Err(Error::Protocol(format!(
            "predict_noise returned {} latents for a batch of {}",
            out.len(),
            batch.len()
        )));
    }
    for (q, o) in batch.iter().zip(out) {
        if q.latent.shape() != o.shape() {
            return Err(Error::Protocol(format!(
                "predict_noise returned shape {:?} for input {:?}",
                o.shape(),
                q.latent.shape()
            )));
        }
    }
    Ok(())
}

//! Backend doubles for tests and benchmarks.

use std::sync::Mutex;

use crate::backend::{BackendDescriptor, BackendKind, ModelBackend, NoiseQuery, PromptEmbedding};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Latent, RgbImage};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub encode_prompt: usize,
    pub vae_encode: usize,
    pub vae_decode: usize,
    pub extract_lines: usize,
    /// Size of every `predict_noise` batch, in call order.
    pub predict_noise_batches: Vec<usize>,
}

impl OpCounts {
    pub fn predict_noise(&self) -> usize {
        self.predict_noise_batches.len()
    }
}

/// Forwards to an inner backend and records every call.
#[derive(Debug)]
pub struct CountingBackend<B> {
    inner: B,
    counts: Mutex<OpCounts>,
}

impl<B: ModelBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            counts: Mutex::new(OpCounts::default()),
        }
    }

    pub fn counts(&self) -> OpCounts {
        self.counts.lock().unwrap().clone()
    }

    pub fn reset(&self) {
        *self.counts.lock().unwrap() = OpCounts::default();
    }

    fn record(&self, f: impl FnOnce(&mut OpCounts)) {
        f(&mut self.counts.lock().unwrap());
    }
}

impl<B: ModelBackend> ModelBackend for CountingBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn encode_prompt(&self, text: &str, style: &str) -> Result<PromptEmbedding> {
        self.record(|c| c.encode_prompt += 1);
        self.inner.encode_prompt(text, style)
    }

    fn vae_encode(&self, img: &RgbImage) -> Result<Latent> {
        self.record(|c| c.vae_encode += 1);
        self.inner.vae_encode(img)
    }

    fn vae_decode(&self, latent: &Latent) -> Result<RgbImage> {
        self.record(|c| c.vae_decode += 1);
        self.inner.vae_decode(latent)
    }

    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>> {
        self.record(|c| c.predict_noise_batches.push(batch.len()));
        self.inner.predict_noise(batch)
    }

    fn extract_lines(&self, img: &RgbImage) -> Result<GrayImage> {
        self.record(|c| c.extract_lines += 1);
        self.inner.extract_lines(img)
    }
}

/// Returns correctly shaped constant outputs without doing any work, so
/// timings measure orchestration alone.
///
/// `extract_lines` hands back a fixed, non-trivial line drawing so the
/// sketch optimizer downstream still does its full amount of work.
#[derive(Debug, Clone)]
pub struct ZeroCostBackend {
    descriptor: BackendDescriptor,
    embed: PromptEmbedding,
    latent: Latent,
    decoded: RgbImage,
    lines: GrayImage,
}

impl ZeroCostBackend {
    pub fn new(working_resolution: usize) -> Result<Self> {
        let descriptor = BackendDescriptor {
            working_resolution,
            ..BackendDescriptor::new(BackendKind::Synthetic)
        };
        descriptor.validate()?;
        let r = working_resolution;
        let (lh, lw) = Latent::shape_for_image(r, r)?;
        let lines = GrayImage::from_fn(r, r, |x, y| {
            let ring = ((x as f64 - r as f64 / 2.0).hypot(y as f64 - r as f64 / 3.0) % 40.0) < 2.0;
            let stroke = (x + 2 * y) % 97 < 2;
            if ring || stroke { 0.1 } else { 0.95 }
        })?;
        Ok(Self {
            embed: PromptEmbedding::new(1, 1, vec![0.0])?,
            latent: Latent::zeros(lh, lw),
            decoded: RgbImage::filled(r, r, [0.5; 3])?,
            lines,
            descriptor,
        })
    }
}

impl ModelBackend for ZeroCostBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode_prompt(&self, _text: &str, _style: &str) -> Result<PromptEmbedding> {
        Ok(self.embed.clone())
    }

    fn vae_encode(&self, _img: &RgbImage) -> Result<Latent> {
        Ok(self.latent.clone())
    }

    fn vae_decode(&self, _latent: &Latent) -> Result<RgbImage> {
        Ok(self.decoded.clone())
    }

    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>> {
        Ok(batch.iter().map(|_| self.latent.clone()).collect())
    }

    fn extract_lines(&self, _img: &RgbImage) -> Result<GrayImage> {
        Ok(self.lines.clone())
    }
}

/// Which operation a [`FailingBackend`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailOn {
    EncodePrompt,
    VaeEncode,
    VaeDecode,
    PredictNoise,
    ExtractLines,
}

/// Delegates to `inner` except for one operation, which always fails with
/// [`Error::Remote`].
#[derive(Debug)]
pub struct FailingBackend<B> {
    inner: B,
    fail_on: FailOn,
}

impl<B: ModelBackend> FailingBackend<B> {
    pub fn new(inner: B, fail_on: FailOn) -> Self {
        Self { inner, fail_on }
    }

    fn gate(&self, op: FailOn) -> Result<()> {
        if op == self.fail_on {
            Err(Error::Remote(format!("injected failure in {op:?}")))
        } else {
            Ok(())
        }
    }
}

impl<B: ModelBackend> ModelBackend for FailingBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn encode_prompt(&self, text: &str, style: &str) -> Result<PromptEmbedding> {
        self.gate(FailOn::EncodePrompt)?;
        self.inner.encode_prompt(text, style)
    }

    fn vae_encode(&self, img: &RgbImage) -> Result<Latent> {
        self.gate(FailOn::VaeEncode)?;
        self.inner.vae_encode(img)
    }

    fn vae_decode(&self, latent: &Latent) -> Result<RgbImage> {
        self.gate(FailOn::VaeDecode)?;
        self.inner.vae_decode(latent)
    }

    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>> {
        self.gate(FailOn::PredictNoise)?;
        self.inner.predict_noise(batch)
    }

    fn extract_lines(&self, img: &RgbImage) -> Result<GrayImage> {
        self.gate(FailOn::ExtractLines)?;
        self.inner.extract_lines(img)
    }
}

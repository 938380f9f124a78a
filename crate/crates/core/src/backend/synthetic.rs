use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{BackendDescriptor, BackendKind, ModelBackend, NoiseQuery, PromptEmbedding};
use crate::error::Result;
use crate::imaging::{GrayImage, Latent, RgbImage, LATENT_CHANNELS, LATENT_DOWNSCALE};
use crate::sketch;

const EMBED_TOKENS: usize = 8;
const EMBED_DIM: usize = 32;

/// Channel map of the synthetic codec: latent channels 0..3 are twice the
/// block means of R, G, B; channel 3 is their sum. Decoding halves the
/// first three channels, which is exact in binary floating point.
const ENCODE_MAP: [[f64; 3]; LATENT_CHANNELS] = [
    [2.0, 0.0, 0.0],
    [0.0, 2.0, 0.0],
    [0.0, 0.0, 2.0],
    [1.0, 1.0, 1.0],
];
const DECODE_MAP: [[f64; LATENT_CHANNELS]; 3] = [
    [0.5, 0.0, 0.0, 0.0],
    [0.0, 0.5, 0.0, 0.0],
    [0.0, 0.0, 0.5, 0.0],
];

/// Deterministic stand-in for the neural models.
///
/// Every capability is a pure function of its inputs and the backend seed,
/// which makes full pipeline runs bit-reproducible without any weights.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    seed: u64,
    descriptor: BackendDescriptor,
}

impl SyntheticBackend {
    pub fn new(seed: u64) -> Self {
        Self::with_descriptor(seed, BackendDescriptor::new(BackendKind::Synthetic))
    }

    pub fn with_descriptor(seed: u64, mut descriptor: BackendDescriptor) -> Self {
        descriptor.kind = BackendKind::Synthetic;
        Self { seed, descriptor }
    }

    fn hasher(&self, domain: &[u8]) -> Sha256 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((domain.len() as u64).to_le_bytes());
        h.update(domain);
        h
    }
}

fn rng_from(hasher: Sha256) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn hash_str(h: &mut Sha256, s: &str) {
    h.update((s.len() as u64).to_le_bytes());
    h.update(s.as_bytes());
}

impl ModelBackend for SyntheticBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode_prompt(&self, text: &str, style: &str) -> Result<PromptEmbedding> {
        self.descriptor.check_style(style)?;
        let mut h = self.hasher(b"prompt");
        hash_str(&mut h, text);
        hash_str(&mut h, style);
        let mut rng = rng_from(h);
        let data = (0..EMBED_TOKENS * EMBED_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        PromptEmbedding::new(EMBED_TOKENS, EMBED_DIM, data)
    }

    /// 8x8 average pooling followed by the fixed channel map.
    fn vae_encode(&self, img: &RgbImage) -> Result<Latent> {
        let (h, w) = Latent::shape_for_image(img.width(), img.height())?;
        let plane = h * w;
        let mut data = vec![0.0; LATENT_CHANNELS * plane];
        let src = img.data();
        let stride = img.width() * 3;
        let area = (LATENT_DOWNSCALE * LATENT_DOWNSCALE) as f64;
        for by in 0..h {
            for bx in 0..w {
                let mut sums = [0.0f64; 3];
                for y in by * LATENT_DOWNSCALE..(by + 1) * LATENT_DOWNSCALE {
                    let row = &src[y * stride..(y + 1) * stride];
                    for x in bx * LATENT_DOWNSCALE..(bx + 1) * LATENT_DOWNSCALE {
                        for (c, sum) in sums.iter_mut().enumerate() {
                            *sum += f64::from(row[3 * x + c]);
                        }
                    }
                }
                let means = sums.map(|s| s / area);
                for (k, weights) in ENCODE_MAP.iter().enumerate() {
                    data[k * plane + by * w + bx] =
                        weights.iter().zip(&means).map(|(a, m)| a * m).sum();
                }
            }
        }
        Latent::new(h, w, data)
    }

    /// Inverse channel map followed by nearest-neighbour upsampling.
    fn vae_decode(&self, latent: &Latent) -> Result<RgbImage> {
        let (h, w) = (latent.height(), latent.width());
        let plane = h * w;
        let z = latent.data();
        let mut colors = Vec::with_capacity(plane);
        for i in 0..plane {
            let rgb = DECODE_MAP.map(|weights| {
                let v: f64 = weights.iter().enumerate().map(|(k, a)| a * z[k * plane + i]).sum();
                (v as f32).clamp(0.0, 1.0)
            });
            colors.push(rgb);
        }
        let (width, height) = (w * LATENT_DOWNSCALE, h * LATENT_DOWNSCALE);
        let mut data = Vec::with_capacity(3 * width * height);
        for y in 0..height {
            let row = &colors[(y / LATENT_DOWNSCALE) * w..(y / LATENT_DOWNSCALE + 1) * w];
            for x in 0..width {
                data.extend_from_slice(&row[x / LATENT_DOWNSCALE]);
            }
        }
        RgbImage::new(width, height, data)
    }

    /// Standard normal field seeded by a digest of the latent contents, the
    /// timestep and the embedding.
    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>> {
        batch
            .iter()
            .map(|q| {
                let mut h = self.hasher(b"eps");
                h.update((q.timestep as u64).to_le_bytes());
                for dim in q.latent.shape() {
                    h.update((dim as u64).to_le_bytes());
                }
                for v in q.latent.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
                h.update((q.embed.tokens() as u64).to_le_bytes());
                h.update((q.embed.dim() as u64).to_le_bytes());
                for v in q.embed.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
                let mut rng = rng_from(h);
                let data = (0..q.latent.len())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                Latent::new(q.latent.height(), q.latent.width(), data)
            })
            .collect()
    }

    fn extract_lines(&self, img: &RgbImage) -> Result<GrayImage> {
        Ok(sketch::classical_lines(img))
    }
}

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, PromptEmbedding};
use crate::error::Result;
use crate::imaging::{Latent, LATENT_CHANNELS};

/// Which caches are active. Toggling any of them must never change results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub noise: bool,
    pub scheduler: bool,
    pub prompt_embed: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            noise: true,
            scheduler: true,
            prompt_embed: true,
        }
    }
}

impl CacheConfig {
    pub fn disabled() -> Self {
        Self {
            noise: false,
            scheduler: false,
            prompt_embed: false,
        }
    }
}

/// Identifies one fixed noise tensor: the candidate slot, the round seed
/// and which draw within the round (0 is the initial noising, `k > 0` the
/// re-noising before step `k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub slot: usize,
    pub seed: u64,
    pub draw: usize,
    pub height: usize,
    pub width: usize,
}

impl NoiseKey {
    fn rng_seed(&self) -> u64 {
        // splitmix64 over the key fields
        let mut h = self.seed;
        for v in [self.slot, self.draw, self.height, self.width] {
            h = splitmix64(h ^ (v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        h
    }

    /// Standard normal tensor determined solely by the key.
    pub fn generate(&self) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed());
        let n = LATENT_CHANNELS * self.height * self.width;
        let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Latent::new(self.height, self.width, data).expect("normal samples are finite")
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub noise_hits: u64,
    pub noise_misses: u64,
    pub prompt_hits: u64,
    pub prompt_misses: u64,
}

/// Noise and prompt-embedding caches shared by every round of a pipeline.
/// The coefficient cache lives in [`super::Scheduler`].
///
/// Misses are computed outside the lock; concurrent misses on the same key
/// may compute twice and the last insert wins, which is harmless because
/// both values are identical.
#[derive(Debug, Default)]
pub struct SchedulerCaches {
    config: CacheConfig,
    noise: Mutex<HashMap<NoiseKey, Arc<Latent>>>,
    prompts: Mutex<HashMap<(String, String), Arc<PromptEmbedding>>>,
    noise_hits: AtomicU64,
    noise_misses: AtomicU64,
    prompt_hits: AtomicU64,
    prompt_misses: AtomicU64,
}

impl SchedulerCaches {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    pub fn noise(&self, key: NoiseKey) -> Arc<Latent> {
        if !self.config.noise {
            self.noise_misses.fetch_add(1, Ordering::Relaxed);
            return Arc::new(key.generate());
        }
        if let Some(hit) = self.noise.lock().unwrap().get(&key) {
            self.noise_hits.fetch_add(1, Ordering::Relaxed);
            return Arc::clone(hit);
        }
        self.noise_misses.fetch_add(1, Ordering::Relaxed);
        let value = Arc::new(key.generate());
        self.noise.lock().unwrap().insert(key, Arc::clone(&value));
        value
    }

    /// Returns the embedding for `(prompt, style)`, calling the backend only
    /// on a miss (or always, with the cache disabled).
    pub fn prompt_embed(
        &self,
        backend: &dyn ModelBackend,
        prompt: &str,
        style: &str,
    ) -> Result<Arc<PromptEmbedding>> {
        if self.config.prompt_embed {
            let key = (prompt.to_owned(), style.to_owned());
            if let Some(hit) = self.prompts.lock().unwrap().get(&key) {
                self.prompt_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(Arc::clone(hit));
            }
            self.prompt_misses.fetch_add(1, Ordering::Relaxed);
            let value = Arc::new(backend.encode_prompt(prompt, style)?);
            self.prompts.lock().unwrap().insert(key, Arc::clone(&value));
            Ok(value)
        } else {
            self.prompt_misses.fetch_add(1, Ordering::Relaxed);
            Ok(Arc::new(backend.encode_prompt(prompt, style)?))
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            noise_hits: self.noise_hits.load(Ordering::Relaxed),
            noise_misses: self.noise_misses.load(Ordering::Relaxed),
            prompt_hits: self.prompt_hits.load(Ordering::Relaxed),
            prompt_misses: self.prompt_misses.load(Ordering::Relaxed),
        }
    }
}

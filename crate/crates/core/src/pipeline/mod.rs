//! One generation round: sketch in, candidate images and guidance sketches
//! out.
//!
//! ```text
//! sketch -> lift to RGB -> vae_encode -> add slot noise (t_start)
//!        -> stream-batched denoising over the plan (CFG per config)
//!        -> vae_decode -> extract_lines -> optimize
//! ```

mod queue;

pub use queue::{Enqueued, QueuedRequest, RoundQueue};

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{ModelBackend, NoiseQuery, PromptEmbedding};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Latent, RgbImage};
use crate::scheduler::{
    cfg_combine, CacheConfig, CfgMode, GuidanceConfig, NoiseKey, NoiseSchedule, Scheduler,
    SchedulerCaches, StepTarget, TimestepPlan,
};
use crate::sketch::{self, FilterParams};

/// Noise injected when re-noising between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreshNoise {
    /// Fixed per-(slot, seed, step) tensors from the noise cache.
    #[default]
    Cached,
    /// No noise: a deterministic DDIM-like rescale of the x0 estimate.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub num_candidates: usize,
    /// Number of denoising steps; the actual timesteps come from
    /// [`PipelineConfig::plan`].
    pub steps: usize,
    pub guidance: GuidanceConfig,
    /// Fraction of the schedule the encoded sketch is noised to.
    pub strength: f64,
    pub fresh_noise: FreshNoise,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_candidates: 4,
            steps: 4,
            guidance: GuidanceConfig::default(),
            strength: 0.8,
            fresh_noise: FreshNoise::Cached,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_candidates == 0 {
            return Err(Error::contract("num_candidates must be at least 1"));
        }
        self.guidance.validate()?;
        TimestepPlan::uniform(2, self.steps, self.strength).map(|_| ())
    }

    pub fn plan(&self, total_steps: usize) -> Result<TimestepPlan> {
        TimestepPlan::uniform(total_steps, self.steps, self.strength)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub round_id: u64,
    pub sketch: GrayImage,
    pub prompt: String,
    pub style: String,
    pub seed: u64,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub queue_wait: Duration,
    pub encode: Duration,
    pub denoise: Duration,
    pub decode: Duration,
    pub optimize: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.queue_wait + self.encode + self.denoise + self.decode + self.optimize
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRound {
    pub request: GenerationRequest,
    pub rgb_candidates: Vec<RgbImage>,
    pub guidance_sketches: Vec<GrayImage>,
    pub timings: StageTimings,
}

impl GenerationRound {
    pub fn metrics(&self) -> RoundMetrics<'_> {
        RoundMetrics(self)
    }
}

/// Single-line `key=value` rendering of a round's stage timings.
pub struct RoundMetrics<'a>(&'a GenerationRound);

impl fmt::Display for RoundMetrics<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.0;
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        write!(
            f,
            "round_id={} candidates={} queue_wait_ms={:.3} encode_ms={:.3} denoise_ms={:.3} decode_ms={:.3} optimize_ms={:.3} total_ms={:.3}",
            r.request.round_id,
            r.rgb_candidates.len(),
            ms(r.timings.queue_wait),
            ms(r.timings.encode),
            ms(r.timings.denoise),
            ms(r.timings.decode),
            ms(r.timings.optimize),
            ms(r.timings.total()),
        )
    }
}

/// Position of one candidate in the denoising plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotCursor {
    pub slot: usize,
    pub latent: Latent,
    /// Index into the plan of the next step to take.
    pub position: usize,
}

impl SlotCursor {
    pub fn is_done(&self, plan: &TimestepPlan) -> bool {
        self.position >= plan.len()
    }
}

/// Everything shared by the slots of one round.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseContext<'a> {
    pub plan: &'a TimestepPlan,
    pub cond: &'a PromptEmbedding,
    /// Required when guidance mode is `Full`.
    pub uncond: Option<&'a PromptEmbedding>,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub fresh_noise: FreshNoise,
}

/// Shared cancellation flag checked between pipeline stages and steps.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }
}

pub struct Pipeline {
    backend: Arc<dyn ModelBackend>,
    scheduler: Scheduler,
    caches: SchedulerCaches,
    filter: FilterParams,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("backend", self.backend.descriptor())
            .field("caches", &self.caches.config())
            .field("filter", &self.filter)
            .finish()
    }
}

impl Pipeline {
    pub fn new(
        backend: Arc<dyn ModelBackend>,
        schedule: NoiseSchedule,
        caches: CacheConfig,
        filter: FilterParams,
    ) -> Result<Self> {
        backend.descriptor().validate()?;
        filter.validate()?;
        Ok(Self {
            backend,
            scheduler: Scheduler::new(schedule, caches.scheduler),
            caches: SchedulerCaches::new(caches),
            filter,
        })
    }

    pub fn backend(&self) -> &dyn ModelBackend {
        self.backend.as_ref()
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn caches(&self) -> &SchedulerCaches {
        &self.caches
    }

    pub fn filter(&self) -> &FilterParams {
        &self.filter
    }

    fn slot_noise(&self, slot: usize, seed: u64, draw: usize, like: &Latent) -> Arc<Latent> {
        self.caches.noise(NoiseKey {
            slot,
            seed,
            draw,
            height: like.height(),
            width: like.width(),
        })
    }

    /// Advances every unfinished cursor by one step with a single predictor
    /// call. Under full guidance the batch holds the unconditional queries
    /// first, then the conditional ones.
    pub fn stream_batch_step(&self, cursors: &mut [SlotCursor], ctx: &DenoiseContext<'_>) -> Result<()> {
        let active: Vec<usize> = (0..cursors.len())
            .filter(|&i| !cursors[i].is_done(ctx.plan))
            .collect();
        if active.is_empty() {
            return Ok(());
        }
        let guided = ctx.guidance.mode == CfgMode::Full;
        let uncond = match (guided, ctx.uncond) {
            (true, Some(e)) => Some(e),
            (true, None) => return Err(Error::contract("full guidance needs an unconditional embedding")),
            (false, _) => None,
        };

        let query = |i: usize, embed| NoiseQuery {
            latent: &cursors[i].latent,
            timestep: ctx.plan.steps()[cursors[i].position],
            embed,
        };
        let mut batch = Vec::with_capacity(active.len() * if guided { 2 } else { 1 });
        if let Some(u) = uncond {
            batch.extend(active.iter().map(|&i| query(i, u)));
        }
        batch.extend(active.iter().map(|&i| query(i, ctx.cond)));
        let mut eps = self.backend.predict_noise(&batch)?;
        crate::backend::check_noise_outputs(&batch, &eps)?;
        drop(batch);

        let cond_eps = eps.split_off(if guided { active.len() } else { 0 });
        for (k, &i) in active.iter().enumerate() {
            let e = match guided {
                true => cfg_combine(&eps[k], &cond_eps[k], ctx.guidance)?,
                false => cond_eps[k].clone(),
            };
            let cursor = &mut cursors[i];
            let t = ctx.plan.steps()[cursor.position];
            let target = ctx.plan.target_after(cursor.position);
            let fresh = match (target, ctx.fresh_noise) {
                (StepTarget::Final, _) => None,
                (_, FreshNoise::Cached) => {
                    Some(self.slot_noise(cursor.slot, ctx.seed, cursor.position + 1, &cursor.latent))
                }
                (_, FreshNoise::Zero) => Some(Arc::new(Latent::zeros(cursor.latent.height(), cursor.latent.width()))),
            };
            cursor.latent = self.scheduler.step(&cursor.latent, &e, t, target, fresh.as_deref())?;
            cursor.position += 1;
        }
        Ok(())
    }

    /// Runs [`stream_batch_step`](Self::stream_batch_step) until every
    /// cursor has finished the plan.
    pub fn denoise(&self, cursors: &mut [SlotCursor], ctx: &DenoiseContext<'_>, cancel: &CancelToken) -> Result<()> {
        while cursors.iter().any(|c| !c.is_done(ctx.plan)) {
            cancel.check()?;
            self.stream_batch_step(cursors, ctx)?;
        }
        Ok(())
    }

    pub fn run_round(&self, req: &GenerationRequest) -> Result<GenerationRound> {
        self.run_round_with(req, &CancelToken::new())
    }

    pub fn run_round_with(&self, req: &GenerationRequest, cancel: &CancelToken) -> Result<GenerationRound> {
        req.config.validate()?;
        let desc = self.backend.descriptor();
        let res = desc.working_resolution;
        if req.sketch.dims() != (res, res) {
            return Err(Error::mismatch(
                format!("{res}x{res}"),
                format!("{}x{}", req.sketch.width(), req.sketch.height()),
            ));
        }
        desc.check_style(&req.style)?;
        let plan = req.config.plan(self.scheduler.schedule().total_steps())?;
        let mut timings = StageTimings::default();

        let started = Instant::now();
        let z = self.backend.vae_encode(&req.sketch.to_rgb())?;
        let cond = self.caches.prompt_embed(self.backend(), &req.prompt, &req.style)?;
        let uncond = match req.config.guidance.mode {
            CfgMode::Full => Some(self.caches.prompt_embed(self.backend(), "", &req.style)?),
            CfgMode::None => None,
        };
        timings.encode = started.elapsed();
        cancel.check()?;

        let started = Instant::now();
        let mut cursors = (0..req.config.num_candidates)
            .map(|slot| {
                let noise = self.slot_noise(slot, req.seed, 0, &z);
                Ok(SlotCursor {
                    slot,
                    latent: self.scheduler.add_noise(&z, &noise, plan.start())?,
                    position: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ctx = DenoiseContext {
            plan: &plan,
            cond: &cond,
            uncond: uncond.as_deref(),
            guidance: req.config.guidance,
            seed: req.seed,
            fresh_noise: req.config.fresh_noise,
        };
        self.denoise(&mut cursors, &ctx, cancel)?;
        timings.denoise = started.elapsed();
        cancel.check()?;

        let started = Instant::now();
        let rgb_candidates = cursors
            .iter()
            .map(|c| self.backend.vae_decode(&c.latent))
            .collect::<Result<Vec<_>>>()?;
        timings.decode = started.elapsed();
        cancel.check()?;

        let started = Instant::now();
        let refine = |rgb: &RgbImage| {
            let lines = self.backend.extract_lines(rgb)?;
            sketch::optimize(&lines, &self.filter)
        };
        // Handing work to the pool only pays off with more than one thread.
        let guidance_sketches = if rayon::current_num_threads() > 1 {
            rgb_candidates.par_iter().map(refine).collect::<Result<Vec<_>>>()?
        } else {
            rgb_candidates.iter().map(refine).collect::<Result<Vec<_>>>()?
        };
        timings.optimize = started.elapsed();

        Ok(GenerationRound {
            request: req.clone(),
            rgb_candidates,
            guidance_sketches,
            timings,
        })
    }
}

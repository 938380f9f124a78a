use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use sketchguide::backend::{BackendDescriptor, BackendKind};
use sketchguide::pipeline::Pipeline;
use sketchguide::scheduler::{
    CacheConfig, CfgMode, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS,
};
use sketchguide::session::SessionConfig;
use sketchguide::{FilterParams, ModelBackend, PipelineConfig, RemoteBackend, RemoteConfig, SyntheticBackend};

/// Environment variable naming the configuration file.
pub const CONFIG_ENV: &str = "GUIDANCE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub working_resolution: usize,
    pub styles: Vec<String>,
}

impl Default for BackendSection {
    fn default() -> Self {
        let d = BackendDescriptor::new(BackendKind::Synthetic);
        Self {
            kind: d.kind,
            working_resolution: d.working_resolution,
            styles: d.styles,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            train_steps: DEFAULT_TRAIN_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub tau: f64,
    pub seed: u64,
    /// Rounds computed at once across all sessions; 0 means one per core.
    pub workers: usize,
    /// Start with the synthetic backend when the remote one is unreachable.
    pub fallback_to_synthetic: bool,
    pub backend: BackendSection,
    pub remote: RemoteConfig,
    pub pipeline: PipelineConfig,
    pub filter: FilterParams,
    pub schedule: ScheduleSection,
    pub caches: CacheConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("data"),
            tau: sketchguide::gate::DEFAULT_TAU,
            seed: 0,
            workers: 0,
            fallback_to_synthetic: false,
            backend: BackendSection::default(),
            remote: RemoteConfig::default(),
            pipeline: PipelineConfig::default(),
            filter: FilterParams::default(),
            schedule: ScheduleSection::default(),
            caches: CacheConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("loading {}", path.display()))
    }

    /// Loads `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.descriptor().validate()?;
        self.noise_schedule()?;
        self.filter.validate()?;
        self.session_config().validate()?;
        if self.remote.max_in_flight == 0 {
            bail!("remote.max_in_flight must be at least 1");
        }
        Ok(())
    }

    pub fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: self.backend.kind,
            working_resolution: self.backend.working_resolution,
            styles: self.backend.styles.clone(),
            ..BackendDescriptor::new(self.backend.kind)
        }
    }

    pub fn noise_schedule(&self) -> sketchguide::Result<NoiseSchedule> {
        let s = self.schedule;
        NoiseSchedule::scaled_linear(s.train_steps, s.beta_start, s.beta_end)
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            resolution: self.backend.working_resolution,
            styles: self.backend.styles.clone(),
            style: self.backend.styles.first().cloned().unwrap_or_default(),
            tau: self.tau,
            seed: self.seed,
            pipeline: self.pipeline,
            ..SessionConfig::default()
        }
    }

    pub fn worker_count(&self) -> usize {
        match self.workers {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    pub fn build_backend(&self) -> Result<Arc<dyn ModelBackend>> {
        let descriptor = self.descriptor();
        match self.backend.kind {
            BackendKind::Synthetic => Ok(Arc::new(SyntheticBackend::with_descriptor(self.seed, descriptor))),
            BackendKind::Remote => match RemoteBackend::connect(self.remote.clone(), descriptor.clone()) {
                Ok(remote) => Ok(Arc::new(remote)),
                Err(e) if self.fallback_to_synthetic => {
                    log::warn!("remote backend at {} unavailable ({e}); using synthetic", self.remote.addr);
                    let descriptor = BackendDescriptor {
                        kind: BackendKind::Synthetic,
                        ..descriptor
                    };
                    Ok(Arc::new(SyntheticBackend::with_descriptor(self.seed, descriptor)))
                }
                Err(e) => Err(e).with_context(|| format!("connecting to model server at {}", self.remote.addr)),
            },
        }
    }

    pub fn build_pipeline(&self) -> Result<Pipeline> {
        Ok(Pipeline::new(self.build_backend()?, self.noise_schedule()?, self.caches, self.filter)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CfgArg {
    None,
    Full,
}

/// Flags shared by every subcommand. Each one overrides the matching
/// configuration value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Configuration file (TOML).
    #[arg(long, env = CONFIG_ENV, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Model server address for the remote backend.
    #[arg(long, value_name = "ADDR")]
    pub remote: Option<String>,
    /// Skip-gate similarity threshold in [0, 1).
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Denoising steps per round.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long, value_enum)]
    pub cfg: Option<CfgArg>,
    #[arg(long)]
    pub sigma_s: Option<f64>,
    #[arg(long)]
    pub sigma_r: Option<f64>,
    #[arg(long)]
    pub iterations: Option<u32>,
}

impl Overrides {
    /// Loads the configuration file (if any) and applies the flags.
    pub fn resolve(&self) -> Result<ServiceConfig> {
        let mut config = ServiceConfig::load_or_default(self.config.as_deref())?;
        self.apply(&mut config);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&self, c: &mut ServiceConfig) {
        if let Some(b) = self.backend {
            c.backend.kind = match b {
                BackendArg::Synthetic => BackendKind::Synthetic,
                BackendArg::Remote => BackendKind::Remote,
            };
        }
        if let Some(addr) = &self.remote {
            c.remote.addr = addr.clone();
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.steps {
            c.pipeline.steps = v;
        }
        if let Some(v) = self.guidance_scale {
            c.pipeline.guidance.scale = v;
        }
        if let Some(m) = self.cfg {
            c.pipeline.guidance.mode = match m {
                CfgArg::None => CfgMode::None,
                CfgArg::Full => CfgMode::Full,
            };
        }
        if let Some(v) = self.sigma_s {
            c.filter.sigma_s = v;
        }
        if let Some(v) = self.sigma_r {
            c.filter.sigma_r = v;
        }
        if let Some(v) = self.iterations {
            c.filter.iterations = v;
        }
    }
}

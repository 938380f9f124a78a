//! Headless batch runs: each input is fed to a session as a finished
//! stroke, exactly as the interactive service would see it.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sketchguide::gate::GateDecision;
use sketchguide::pipeline::GenerationRound;
use sketchguide::session::{Effect, Event, SessionState};
use sketchguide::GrayImage;

use crate::config::ServiceConfig;

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub inputs: Vec<PathBuf>,
    pub prompt: String,
    pub style: Option<String>,
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum Outcome {
    Generated(Box<GenerationRound>),
    Skipped { round_id: u64, decision: GateDecision },
}

#[derive(Debug)]
pub struct InputReport {
    pub input: PathBuf,
    /// Directory the outputs went to; `None` for skipped inputs.
    pub dir: Option<PathBuf>,
    pub outcome: Outcome,
}

impl fmt::Display for InputReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input={} ", self.input.display())?;
        match &self.outcome {
            Outcome::Generated(round) => write!(f, "status=generated {}", round.metrics()),
            Outcome::Skipped { round_id, decision } => write!(
                f,
                "status=skipped round_id={round_id} similarity={:.6} probability={:.6}",
                decision.similarity, decision.probability
            ),
        }
    }
}

/// Reads a sketch and brings it to the working resolution.
pub fn load_sketch(path: &Path, resolution: usize) -> Result<GrayImage> {
    let img = GrayImage::load_png(path).with_context(|| format!("reading {}", path.display()))?;
    if img.dims() == (resolution, resolution) {
        Ok(img)
    } else {
        Ok(img.resize_bilinear(resolution, resolution)?)
    }
}

fn output_dir(out: &Path, index: usize, total: usize) -> PathBuf {
    if total == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("input_{index}"))
    }
}

/// Runs every input, then writes all outputs. Nothing is written unless
/// every input loads and every round succeeds.
pub fn run(config: &ServiceConfig, args: &GenerateArgs) -> Result<Vec<InputReport>> {
    if args.inputs.is_empty() {
        bail!("no input sketches given");
    }
    let mut session_config = config.session_config();
    session_config.prompt = args.prompt.clone();
    if let Some(style) = &args.style {
        session_config.style = style.clone();
    }
    session_config.validate()?;
    let resolution = session_config.resolution;
    let sketches = args
        .inputs
        .iter()
        .map(|p| load_sketch(p, resolution))
        .collect::<Result<Vec<_>>>()?;

    let pipeline = config.build_pipeline()?;
    let mut session = SessionState::new(session_config)?;
    let mut reports = Vec::with_capacity(sketches.len());
    for (i, (input, sketch)) in args.inputs.iter().zip(sketches).enumerate() {
        let effects = session.handle(&Event::StrokeEnd { canvas: sketch });
        let outcome = match effects.into_iter().next() {
            Some(Effect::Generate(req)) => {
                let round = pipeline
                    .run_round(&req)
                    .with_context(|| format!("generating from {}", input.display()))?;
                session.handle(&Event::RoundCompleted {
                    round_id: req.round_id,
                    sketches: round.guidance_sketches.clone(),
                });
                Outcome::Generated(Box::new(round))
            }
            Some(Effect::Skipped { round_id, decision }) => Outcome::Skipped { round_id, decision },
            other => bail!("unexpected session response for {}: {other:?}", input.display()),
        };
        let dir = matches!(outcome, Outcome::Generated(_)).then(|| output_dir(&args.out, i, args.inputs.len()));
        reports.push(InputReport {
            input: input.clone(),
            dir,
            outcome,
        });
    }

    for report in &reports {
        if let (Some(dir), Outcome::Generated(round)) = (&report.dir, &report.outcome) {
            write_round(dir, round)?;
        }
    }
    Ok(reports)
}

pub fn write_round(dir: &Path, round: &GenerationRound) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, img) in round.rgb_candidates.iter().enumerate() {
        img.save_png(dir.join(format!("candidate_{i}.png")))?;
    }
    for (i, img) in round.guidance_sketches.iter().enumerate() {
        img.save_png(dir.join(format!("guidance_{i}.png")))?;
    }
    Ok(())
}

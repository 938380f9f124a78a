//! Interaction automaton for one drawing session.
//!
//! ```text
//!             select_guidance                 clear_background
//!   ACTIVE ----------------------> PAUSED_BG -------------------> PAUSED_CLEARED
//!     ^  ^                          |     ^ select_guidance            |
//!     |  +--------------------------+     +----------------------------+
//!     |        continue_drawing                                        |
//!     +----------------------------------------------------------------+
//!                              continue_drawing
//! ```
//!
//! Only a stroke end (or a prompt/style change) in `ACTIVE` can request a
//! generation round. Every transition is a pure function of the state and
//! the event, so a recorded event log replays to the same state.

mod log;

pub use log::{read_log, replay, EventLog, LogRecord};

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;
use crate::error::{Error, Result};
use crate::gate::{skip_probability, GateDecision, GateState, DEFAULT_TAU};
use crate::imaging::GrayImage;
use crate::pipeline::{GenerationRequest, PipelineConfig};

/// Guidance thumbnails shown next to the canvas.
pub const MAX_SLOTS: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Active,
    /// Paused with a selected guidance sketch on the background layer.
    PausedBg,
    /// Paused after the background was cleared.
    PausedCleared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    /// Canvas side length in pixels.
    pub resolution: usize,
    pub styles: Vec<String>,
    pub prompt: String,
    pub style: String,
    pub tau: f64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            resolution: 512,
            styles: vec!["anime".into(), "realistic".into()],
            prompt: String::new(),
            style: "anime".into(),
            tau: DEFAULT_TAU,
            seed: 0,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl SessionConfig {
    /// Defaults matched to a backend's resolution and style list.
    pub fn for_backend(desc: &BackendDescriptor) -> Self {
        Self {
            resolution: desc.working_resolution,
            styles: desc.styles.clone(),
            style: desc.styles.first().cloned().unwrap_or_default(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::contract("resolution must be positive"));
        }
        if !self.styles.iter().any(|s| *s == self.style) {
            return Err(Error::UnknownStyle(self.style.clone()));
        }
        skip_probability(0.0, self.tau)?;
        self.pipeline.validate()?;
        if self.pipeline.num_candidates > MAX_SLOTS {
            return Err(Error::contract(format!(
                "at most {MAX_SLOTS} candidates fit the guidance panel, got {}",
                self.pipeline.num_candidates
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSlot {
    pub index: usize,
    pub round_id: u64,
    pub sketch: GrayImage,
}

/// Inputs to the automaton: client actions and round outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "payload", rename_all = "snake_case")]
pub enum Event {
    StrokeBegin,
    StrokePoint {
        x: f64,
        y: f64,
        pressure: f64,
    },
    StrokeEnd {
        #[serde(with = "log::image")]
        canvas: GrayImage,
    },
    SetPrompt {
        text: String,
    },
    SetStyle {
        id: String,
    },
    SelectGuidance {
        index: usize,
    },
    ClearBackground,
    ContinueDrawing,
    RoundCompleted {
        round_id: u64,
        #[serde(with = "log::images")]
        sketches: Vec<GrayImage>,
    },
    RoundFailed {
        round_id: u64,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    EmptySlot,
    UnknownStyle,
    BadCanvas,
    BadStroke,
    InvalidRound,
    RoundFailed,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::EmptySlot => "empty_slot",
            ErrorCode::UnknownStyle => "unknown_style",
            ErrorCode::BadCanvas => "bad_canvas",
            ErrorCode::BadStroke => "bad_stroke",
            ErrorCode::InvalidRound => "invalid_round",
            ErrorCode::RoundFailed => "round_failed",
        }
    }
}

/// Outputs of a transition, for the caller to carry out.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Generate(GenerationRequest),
    Skipped {
        round_id: u64,
        decision: GateDecision,
    },
    GuidanceSet {
        round_id: u64,
        sketches: Vec<GrayImage>,
    },
    StateChanged {
        mode: Mode,
        background: Option<GrayImage>,
    },
    StaleRoundDiscarded {
        round_id: u64,
    },
    Rejected {
        code: ErrorCode,
        message: String,
    },
}

impl Effect {
    fn rejected(code: ErrorCode, message: impl Into<String>) -> Self {
        Effect::Rejected {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    config: SessionConfig,
    mode: Mode,
    canvas: Option<GrayImage>,
    background: Option<GrayImage>,
    slots: Vec<GuidanceSlot>,
    prompt: String,
    style: String,
    pending_prompt: Option<String>,
    pending_style: Option<String>,
    gate: GateState,
    next_round_id: u64,
    latest_requested: Option<u64>,
}

fn gate_key(prompt: &str, style: &str) -> String {
    format!("{style}\n{prompt}")
}

impl SessionState {
    pub fn new(config: SessionConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            mode: Mode::Active,
            canvas: None,
            background: None,
            slots: Vec::new(),
            prompt: config.prompt.clone(),
            style: config.style.clone(),
            pending_prompt: None,
            pending_style: None,
            gate: GateState::new(config.tau, config.seed)?,
            next_round_id: 1,
            latest_requested: None,
            config,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn canvas(&self) -> Option<&GrayImage> {
        self.canvas.as_ref()
    }

    pub fn background(&self) -> Option<&GrayImage> {
        self.background.as_ref()
    }

    pub fn slots(&self) -> &[GuidanceSlot] {
        &self.slots
    }

    /// Prompt currently in force; a change made while paused is not
    /// reflected until the session resumes.
    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn style(&self) -> &str {
        &self.style
    }

    pub fn pending_prompt(&self) -> Option<&str> {
        self.pending_prompt.as_deref()
    }

    pub fn pending_style(&self) -> Option<&str> {
        self.pending_style.as_deref()
    }

    pub fn gate(&self) -> &GateState {
        &self.gate
    }

    pub fn latest_requested(&self) -> Option<u64> {
        self.latest_requested
    }

    /// Checks the structural invariants, describing the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if (self.mode == Mode::PausedBg) != self.background.is_some() {
            return Err(format!(
                "mode {:?} with background present = {}",
                self.mode,
                self.background.is_some()
            ));
        }
        if self.slots.len() > MAX_SLOTS {
            return Err(format!("{} slots", self.slots.len()));
        }
        for (i, slot) in self.slots.iter().enumerate() {
            if slot.index != i {
                return Err(format!("slot at position {i} has index {}", slot.index));
            }
            if Some(slot.round_id) != self.slots.first().map(|s| s.round_id) {
                return Err("slots come from different rounds".into());
            }
        }
        if self.mode == Mode::Active && (self.pending_prompt.is_some() || self.pending_style.is_some()) {
            return Err("pending changes while active".into());
        }
        Ok(())
    }

    /// Pure transition.
    pub fn apply(mut self, event: &Event) -> (Self, Vec<Effect>) {
        let effects = self.handle(event);
        (self, effects)
    }

    /// In-place form of [`apply`](Self::apply).
    pub fn handle(&mut self, event: &Event) -> Vec<Effect> {
        match event {
            Event::StrokeBegin => Vec::new(),
            Event::StrokePoint { x, y, pressure } => {
                if x.is_finite() && y.is_finite() && (0.0..=1.0).contains(pressure) {
                    Vec::new()
                } else {
                    vec![Effect::rejected(ErrorCode::BadStroke, "stroke point must be finite with pressure in [0, 1]")]
                }
            }
            Event::StrokeEnd { canvas } => self.on_stroke_end(canvas),
            Event::SetPrompt { text } => self.on_set_prompt(text),
            Event::SetStyle { id } => self.on_set_style(id),
            Event::SelectGuidance { index } => self.on_select(*index),
            Event::ClearBackground => self.on_clear_background(),
            Event::ContinueDrawing => self.on_continue(),
            Event::RoundCompleted { round_id, sketches } => self.on_round_completed(*round_id, sketches),
            Event::RoundFailed { round_id, message } => match self.round_status(*round_id) {
                RoundStatus::Current => vec![Effect::rejected(ErrorCode::RoundFailed, message.clone())],
                RoundStatus::Stale => vec![Effect::StaleRoundDiscarded { round_id: *round_id }],
                RoundStatus::Unknown => vec![Effect::rejected(
                    ErrorCode::InvalidRound,
                    format!("round {round_id} was never requested"),
                )],
            },
        }
    }

    fn state_changed(&self) -> Effect {
        Effect::StateChanged {
            mode: self.mode,
            background: self.background.clone(),
        }
    }

    fn request(&mut self, canvas: GrayImage) -> Effect {
        let round_id = self.next_round_id;
        self.next_round_id += 1;
        self.latest_requested = Some(round_id);
        Effect::Generate(GenerationRequest {
            round_id,
            sketch: canvas,
            prompt: self.prompt.clone(),
            style: self.style.clone(),
            seed: self.config.seed,
            config: self.config.pipeline,
        })
    }

    /// Runs the gate on the current canvas and turns the decision into a
    /// request or a skip report.
    fn gate_round(&mut self) -> Vec<Effect> {
        let Some(canvas) = self.canvas.clone() else {
            return Vec::new();
        };
        let decision = match self.gate.evaluate(&canvas, &gate_key(&self.prompt, &self.style)) {
            Ok(d) => d,
            Err(e) => return vec![Effect::rejected(ErrorCode::BadCanvas, e.to_string())],
        };
        if self.mode != Mode::Active {
            return Vec::new();
        }
        if decision.is_skip() {
            let round_id = self.next_round_id;
            self.next_round_id += 1;
            vec![Effect::Skipped { round_id, decision }]
        } else {
            vec![self.request(canvas)]
        }
    }

    fn on_stroke_end(&mut self, canvas: &GrayImage) -> Vec<Effect> {
        let r = self.config.resolution;
        if canvas.dims() != (r, r) {
            return vec![Effect::rejected(
                ErrorCode::BadCanvas,
                format!("canvas must be {r}x{r}, got {}x{}", canvas.width(), canvas.height()),
            )];
        }
        self.canvas = Some(canvas.clone());
        self.gate_round()
    }

    fn on_set_prompt(&mut self, text: &str) -> Vec<Effect> {
        if self.mode != Mode::Active {
            self.pending_prompt = (text != self.prompt).then(|| text.to_owned());
            return Vec::new();
        }
        if text == self.prompt {
            return Vec::new();
        }
        self.prompt = text.to_owned();
        self.gate_round()
    }

    fn on_set_style(&mut self, id: &str) -> Vec<Effect> {
        if !self.config.styles.iter().any(|s| s == id) {
            return vec![Effect::rejected(ErrorCode::UnknownStyle, format!("unknown style `{id}`"))];
        }
        if self.mode != Mode::Active {
            self.pending_style = (id != self.style).then(|| id.to_owned());
            return Vec::new();
        }
        if id == self.style {
            return Vec::new();
        }
        self.style = id.to_owned();
        self.gate_round()
    }

    fn on_select(&mut self, index: usize) -> Vec<Effect> {
        let Some(slot) = self.slots.get(index) else {
            return vec![Effect::rejected(ErrorCode::EmptySlot, format!("guidance slot {index} is empty"))];
        };
        if self.mode == Mode::PausedBg && self.background.as_ref() == Some(&slot.sketch) {
            return Vec::new();
        }
        self.background = Some(slot.sketch.clone());
        self.mode = Mode::PausedBg;
        vec![self.state_changed()]
    }

    fn on_clear_background(&mut self) -> Vec<Effect> {
        if self.mode != Mode::PausedBg {
            return Vec::new();
        }
        self.background = None;
        self.mode = Mode::PausedCleared;
        vec![self.state_changed()]
    }

    fn on_continue(&mut self) -> Vec<Effect> {
        if self.mode == Mode::Active {
            return Vec::new();
        }
        self.mode = Mode::Active;
        self.background = None;
        let mut effects = vec![self.state_changed()];
        let prompt = self.pending_prompt.take();
        let style = self.pending_style.take();
        if prompt.is_some() || style.is_some() {
            if let Some(p) = prompt {
                self.prompt = p;
            }
            if let Some(s) = style {
                self.style = s;
            }
            effects.extend(self.gate_round());
        }
        effects
    }

    fn round_status(&self, round_id: u64) -> RoundStatus {
        match self.latest_requested {
            Some(latest) if round_id == latest => RoundStatus::Current,
            Some(latest) if round_id < latest => RoundStatus::Stale,
            _ => RoundStatus::Unknown,
        }
    }

    fn on_round_completed(&mut self, round_id: u64, sketches: &[GrayImage]) -> Vec<Effect> {
        match self.round_status(round_id) {
            RoundStatus::Current => {}
            RoundStatus::Stale => return vec![Effect::StaleRoundDiscarded { round_id }],
            RoundStatus::Unknown => {
                return vec![Effect::rejected(
                    ErrorCode::InvalidRound,
                    format!("round {round_id} was never requested"),
                )]
            }
        }
        let r = self.config.resolution;
        if sketches.is_empty() || sketches.len() > MAX_SLOTS || sketches.iter().any(|s| s.dims() != (r, r)) {
            return vec![Effect::rejected(
                ErrorCode::InvalidRound,
                format!("round {round_id} must carry 1..={MAX_SLOTS} sketches of {r}x{r}"),
            )];
        }
        self.slots = sketches
            .iter()
            .enumerate()
            .map(|(index, sketch)| GuidanceSlot {
                index,
                round_id,
                sketch: sketch.clone(),
            })
            .collect();
        vec![Effect::GuidanceSet {
            round_id,
            sketches: sketches.to_vec(),
        }]
    }
}

enum RoundStatus {
    Current,
    Stale,
    Unknown,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::GateReason;

    fn config() -> SessionConfig {
        SessionConfig {
            resolution: 8,
            ..SessionConfig::default()
        }
    }

    fn canvas(seed: usize) -> GrayImage {
        GrayImage::from_fn(8, 8, |x, y| if (x * 3 + y * 5 + seed) % 7 == 0 { 0.0 } else { 1.0 }).unwrap()
    }

    fn stroke(seed: usize) -> Event {
        Event::StrokeEnd { canvas: canvas(seed) }
    }

    fn sketches(n: usize) -> Vec<GrayImage> {
        (0..n).map(|i| GrayImage::filled(8, 8, 0.1 * i as f32).unwrap()).collect()
    }

    fn generated(effects: &[Effect]) -> Option<&GenerationRequest> {
        effects.iter().find_map(|e| match e {
            Effect::Generate(r) => Some(r),
            _ => None,
        })
    }

    /// Session with one completed round of four slots.
    fn with_slots() -> SessionState {
        let mut s = SessionState::new(config()).unwrap();
        let fx = s.handle(&stroke(0));
        let id = generated(&fx).unwrap().round_id;
        s.handle(&Event::RoundCompleted {
            round_id: id,
            sketches: sketches(4),
        });
        s
    }

    #[test]
    fn first_stroke_requests_round() {
        let mut s = SessionState::new(config()).unwrap();
        let fx = s.handle(&stroke(0));
        let req = generated(&fx).unwrap();
        assert_eq!(req.round_id, 1);
        assert_eq!(req.sketch, canvas(0));
        assert_eq!(s.canvas(), Some(&canvas(0)));
    }

    #[test]
    fn identical_restroke_is_skipped() {
        let mut s = SessionState::new(config()).unwrap();
        s.handle(&stroke(0));
        let fx = s.handle(&stroke(0));
        assert!(matches!(&fx[..], [Effect::Skipped { decision, .. }] if decision.probability == 1.0));
    }

    #[test]
    fn paused_stroke_updates_canvas_and_gate_only() {
        let mut s = with_slots();
        s.handle(&Event::SelectGuidance { index: 0 });
        let fx = s.handle(&stroke(3));
        assert!(fx.is_empty());
        assert_eq!(s.canvas(), Some(&canvas(3)));
        assert_eq!(s.gate().reference(), Some(&canvas(3)));
        assert_eq!(s.mode(), Mode::PausedBg);
    }

    #[test]
    fn select_clear_continue() {
        let mut s = with_slots();
        let fx = s.handle(&Event::SelectGuidance { index: 2 });
        assert_eq!(s.mode(), Mode::PausedBg);
        assert_eq!(s.background(), Some(&sketches(4)[2]));
        assert!(matches!(&fx[..], [Effect::StateChanged { mode: Mode::PausedBg, background: Some(_) }]));

        s.handle(&Event::SelectGuidance { index: 1 });
        assert_eq!((s.mode(), s.background()), (Mode::PausedBg, Some(&sketches(4)[1])));

        s.handle(&Event::ClearBackground);
        assert_eq!((s.mode(), s.background()), (Mode::PausedCleared, None));
        let before = s.clone();
        assert!(s.handle(&Event::ClearBackground).is_empty());
        assert_eq!(s, before);

        s.handle(&Event::ContinueDrawing);
        assert_eq!((s.mode(), s.background()), (Mode::Active, None));
        assert!(s.handle(&Event::ContinueDrawing).is_empty());
    }

    #[test]
    fn continue_from_background_drops_it() {
        let mut s = with_slots();
        s.handle(&Event::SelectGuidance { index: 0 });
        s.handle(&Event::ContinueDrawing);
        assert_eq!((s.mode(), s.background()), (Mode::Active, None));
    }

    #[test]
    fn clear_in_active_is_noop() {
        let mut s = with_slots();
        let before = s.clone();
        assert!(s.handle(&Event::ClearBackground).is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn empty_slot_rejected_without_change() {
        let mut s = SessionState::new(config()).unwrap();
        let before = s.clone();
        let fx = s.handle(&Event::SelectGuidance { index: 2 });
        assert!(matches!(&fx[..], [Effect::Rejected { code: ErrorCode::EmptySlot, .. }]));
        assert_eq!(s, before);
    }

    #[test]
    fn prompt_change_in_active_bypasses_gate() {
        let mut s = SessionState::new(config()).unwrap();
        s.handle(&stroke(0));
        let fx = s.handle(&Event::SetPrompt { text: "a cat".into() });
        let req = generated(&fx).unwrap();
        assert_eq!(req.prompt, "a cat");
        assert!(s.handle(&Event::SetPrompt { text: "a cat".into() }).is_empty());
        let fx = s.handle(&Event::SetStyle { id: "realistic".into() });
        assert_eq!(generated(&fx).unwrap().style, "realistic");
    }

    #[test]
    fn prompt_change_while_paused_is_deferred() {
        let mut s = with_slots();
        s.handle(&Event::SelectGuidance { index: 0 });
        s.handle(&Event::ClearBackground);
        assert!(s.handle(&Event::SetPrompt { text: "first".into() }).is_empty());
        assert!(s.handle(&Event::SetPrompt { text: "second".into() }).is_empty());
        assert_eq!(s.pending_prompt(), Some("second"));
        assert_eq!(s.prompt(), "");

        let fx = s.handle(&Event::ContinueDrawing);
        let req = generated(&fx).unwrap();
        assert_eq!(req.prompt, "second");
        let replayed = s.gate().last_prompt();
        assert_eq!(replayed, gate_key("second", "anime"));
    }

    #[test]
    fn resetting_prompt_while_paused_cancels_pending() {
        let mut s = with_slots();
        s.handle(&Event::SelectGuidance { index: 0 });
        s.handle(&Event::SetPrompt { text: "x".into() });
        s.handle(&Event::SetPrompt { text: String::new() });
        let fx = s.handle(&Event::ContinueDrawing);
        assert!(generated(&fx).is_none());
    }

    #[test]
    fn unknown_style_rejected() {
        let mut s = SessionState::new(config()).unwrap();
        let fx = s.handle(&Event::SetStyle { id: "cubist".into() });
        assert!(matches!(&fx[..], [Effect::Rejected { code: ErrorCode::UnknownStyle, .. }]));
    }

    #[test]
    fn stale_round_discarded() {
        let mut s = SessionState::new(config()).unwrap();
        let first = generated(&s.handle(&stroke(0))).unwrap().round_id;
        let second = generated(&s.handle(&stroke(4))).unwrap().round_id;
        assert!(second > first);
        let fx = s.handle(&Event::RoundCompleted {
            round_id: first,
            sketches: sketches(4),
        });
        assert_eq!(fx, vec![Effect::StaleRoundDiscarded { round_id: first }]);
        assert!(s.slots().is_empty());
        s.handle(&Event::RoundCompleted {
            round_id: second,
            sketches: sketches(4),
        });
        assert!(s.slots().iter().all(|slot| slot.round_id == second));
    }

    #[test]
    fn unrequested_round_rejected() {
        let mut s = SessionState::new(config()).unwrap();
        let fx = s.handle(&Event::RoundCompleted {
            round_id: 7,
            sketches: sketches(4),
        });
        assert!(matches!(&fx[..], [Effect::Rejected { code: ErrorCode::InvalidRound, .. }]));
    }

    #[test]
    fn wrong_canvas_size_rejected() {
        let mut s = SessionState::new(config()).unwrap();
        let fx = s.handle(&Event::StrokeEnd {
            canvas: GrayImage::filled(4, 4, 1.0).unwrap(),
        });
        assert!(matches!(&fx[..], [Effect::Rejected { code: ErrorCode::BadCanvas, .. }]));
        assert!(s.canvas().is_none());
    }

    #[test]
    fn first_input_reason_is_reported_by_gate() {
        let mut g = GateState::new(0.5, 0).unwrap();
        assert_eq!(g.evaluate(&canvas(0), "k").unwrap().reason, GateReason::FirstInput);
    }

    #[test]
    fn config_validation() {
        assert!(SessionConfig { style: "x".into(), ..config() }.validate().is_err());
        assert!(SessionConfig { tau: 1.0, ..config() }.validate().is_err());
        let mut c = config();
        c.pipeline.num_candidates = 5;
        assert!(c.validate().is_err());
    }
}

//! Real-time drawing guidance.
//!
//! A rough sketch goes in after every stroke; four cleaned-up line drawings
//! come out, ready to be traced. The stages:
//!
//! - [`gate`] decides whether a stroke changed the canvas enough to bother.
//! - [`pipeline`] runs a few-step latent diffusion round for all candidates
//!   at once, using the arithmetic in [`scheduler`].
//! - [`backend`] provides the neural operations, in process or over TCP.
//! - [`sketch`] turns each generated image into a clean line drawing.
//! - [`session`] is the pause/continue automaton around all of it.

pub mod backend;
pub mod error;
pub mod gate;
pub mod imaging;
pub mod pipeline;
pub mod scheduler;
pub mod session;
pub mod sketch;
#[doc(hidden)]
pub mod testing;

pub use backend::{BackendDescriptor, BackendKind, ModelBackend, RemoteBackend, RemoteConfig, SyntheticBackend};
pub use error::{Error, Result};
pub use gate::{GateDecision, GateState};
pub use imaging::{GrayImage, Latent, RgbImage};
pub use pipeline::{GenerationRequest, GenerationRound, Pipeline, PipelineConfig};
pub use session::{Effect, Event, Mode, SessionConfig, SessionState};
pub use sketch::FilterParams;

//! JSON messages exchanged over the WebSocket. Every message is an object
//! with a `type` field; images travel as base64-encoded PNG.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sketchguide::session::{Event, Mode, SessionConfig};
use sketchguide::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    OpenSession {
        #[serde(default)]
        session_id: Option<String>,
    },
    StrokeBegin,
    StrokePoint {
        x: f64,
        y: f64,
        pressure: f64,
    },
    StrokeEnd {
        canvas_png: String,
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
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    SessionOpened {
        session_id: String,
        config: SessionConfig,
    },
    GuidanceSet {
        round_id: u64,
        images: Vec<String>,
    },
    StateChanged {
        mode: Mode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        background: Option<String>,
    },
    RoundSkipped {
        round_id: u64,
        similarity: f64,
        probability: f64,
    },
    Error {
        code: String,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(code: impl Into<String>, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code: code.into(),
            message: message.into(),
        }
    }
}

pub fn encode_png(img: &GrayImage) -> sketchguide::Result<String> {
    Ok(STANDARD.encode(img.to_png_bytes()?))
}

pub fn decode_png(data: &str) -> Result<GrayImage, String> {
    let bytes = STANDARD.decode(data).map_err(|e| format!("invalid base64: {e}"))?;
    GrayImage::from_png_bytes(&bytes).map_err(|e| format!("invalid PNG: {e}"))
}

/// Session event for a client message; `None` for `open_session`, which
/// the connection handles itself.
pub fn to_event(msg: ClientMessage) -> Option<Result<Event, ServerMessage>> {
    Some(Ok(match msg {
        ClientMessage::OpenSession { .. } => return None,
        ClientMessage::StrokeBegin => Event::StrokeBegin,
        ClientMessage::StrokePoint { x, y, pressure } => Event::StrokePoint { x, y, pressure },
        ClientMessage::StrokeEnd { canvas_png } => match decode_png(&canvas_png) {
            Ok(canvas) => Event::StrokeEnd { canvas },
            Err(e) => return Some(Err(ServerMessage::error("bad_canvas", e))),
        },
        ClientMessage::SetPrompt { text } => Event::SetPrompt { text },
        ClientMessage::SetStyle { id } => Event::SetStyle { id },
        ClientMessage::SelectGuidance { index } => Event::SelectGuidance { index },
        ClientMessage::ClearBackground => Event::ClearBackground,
        ClientMessage::ContinueDrawing => Event::ContinueDrawing,
    }))
}

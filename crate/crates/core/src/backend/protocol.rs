//! Length-prefixed tensor frames for remote backends.
//!
//! ```text
//! frame   = u32 LE payload length, payload
//! payload = JSON header, raw LE f32 tensor bytes (header `shapes` order)
//! ```
//!
//! The JSON header is self-delimiting, so the tensor bytes start right where
//! the JSON value ends. Responses echo `request_id`; failures are reported
//! as a header carrying `error` and no tensors.

use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{ModelBackend, NoiseQuery, PromptEmbedding};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Latent, RgbImage};

/// Upper bound on a single frame; larger length prefixes are rejected
/// before allocating.
pub const MAX_FRAME_BYTES: u32 = 256 << 20;

pub const DTYPE_F32: &str = "f32";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    EncodePrompt,
    VaeEncode,
    VaeDecode,
    PredictNoise,
    ExtractLines,
}

impl Op {
    pub fn as_str(self) -> &'static str {
        match self {
            Op::EncodePrompt => "encode_prompt",
            Op::VaeEncode => "vae_encode",
            Op::VaeDecode => "vae_decode",
            Op::PredictNoise => "predict_noise",
            Op::ExtractLines => "extract_lines",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        [
            Op::EncodePrompt,
            Op::VaeEncode,
            Op::VaeDecode,
            Op::PredictNoise,
            Op::ExtractLines,
        ]
        .into_iter()
        .find(|op| op.as_str() == s)
    }
}

/// Frame header. `op` stays a string so that unknown operations can be
/// answered with an error frame instead of a parse failure.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op: Option<String>,
    pub request_id: u64,
    #[serde(default)]
    pub shapes: Vec<Vec<usize>>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timesteps: Option<Vec<usize>>,
    /// For `predict_noise`: which of the trailing embedding tensors each
    /// latent uses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_index: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn default_dtype() -> String {
    DTYPE_F32.to_owned()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Message {
    pub header: Header,
    pub tensors: Vec<Vec<f32>>,
}

impl Message {
    pub fn request(op: Op, request_id: u64) -> Self {
        Self {
            header: Header {
                op: Some(op.as_str().to_owned()),
                request_id,
                dtype: default_dtype(),
                ..Header::default()
            },
            tensors: Vec::new(),
        }
    }

    pub fn error(op: Option<String>, request_id: u64, message: impl Into<String>) -> Self {
        Self {
            header: Header {
                op,
                request_id,
                dtype: default_dtype(),
                error: Some(message.into()),
                ..Header::default()
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header.shapes.push(shape);
        self.tensors.push(data);
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>> {
        if self.header.shapes.len() != self.tensors.len() {
            return Err(Error::Protocol("shape count does not match tensor count".into()));
        }
        let mut out = serde_json::to_vec(&self.header)?;
        for (shape, t) in self.header.shapes.iter().zip(&self.tensors) {
            if shape.iter().product::<usize>() != t.len() {
                return Err(Error::Protocol(format!("tensor of {} values declared as {shape:?}", t.len())));
            }
            out.reserve(4 * t.len());
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode_payload(payload: &[u8]) -> Result<Message> {
        let mut stream = serde_json::Deserializer::from_slice(payload).into_iter::<Header>();
        let header = match stream.next() {
            Some(h) => h?,
            None => return Err(Error::Protocol("empty payload".into())),
        };
        if header.dtype != DTYPE_F32 {
            return Err(Error::Protocol(format!("unsupported dtype `{}`", header.dtype)));
        }
        let mut rest = &payload[stream.byte_offset()..];
        let expected: usize = header.shapes.iter().map(|s| 4 * s.iter().product::<usize>()).sum();
        if rest.len() != expected {
            return Err(Error::Protocol(format!(
                "header declares {expected} tensor bytes, payload carries {}",
                rest.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in &header.shapes {
            let n: usize = shape.iter().product();
            let (bytes, tail) = rest.split_at(4 * n);
            tensors.push(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
            rest = tail;
        }
        Ok(Message { header, tensors })
    }

    pub fn encode_frame(&self) -> Result<Vec<u8>> {
        let payload = self.encode_payload()?;
        let len = u32::try_from(payload.len())
            .ok()
            .filter(|&n| n <= MAX_FRAME_BYTES)
            .ok_or_else(|| Error::Protocol(format!("payload of {} bytes is too large", payload.len())))?;
        let mut frame = Vec::with_capacity(4 + payload.len());
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&payload);
        Ok(frame)
    }
}

pub fn write_message(w: &mut impl Write, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode_frame()?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)?;
    Message::decode_payload(&payload).map(Some)
}

// Tensor layouts on the wire:
//   image       [h, w, 3]
//   line map    [h, w]
//   latent      [4, h, w]
//   embedding   [tokens, dim]

pub fn rgb_tensor(img: &RgbImage) -> (Vec<usize>, Vec<f32>) {
    (vec![img.height(), img.width(), 3], img.data().to_vec())
}

pub fn gray_tensor(img: &GrayImage) -> (Vec<usize>, Vec<f32>) {
    (vec![img.height(), img.width()], img.data().to_vec())
}

pub fn latent_tensor(latent: &Latent) -> (Vec<usize>, Vec<f32>) {
    (
        latent.shape().to_vec(),
        latent.data().iter().map(|&v| v as f32).collect(),
    )
}

pub fn embed_tensor(embed: &PromptEmbedding) -> (Vec<usize>, Vec<f32>) {
    (vec![embed.tokens(), embed.dim()], embed.data().to_vec())
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::Protocol(format!("{what} tensor has shape {shape:?}")));
    }
    Ok(())
}

/// Wire values are clamped into range: f32 intensities from a remote model
/// may overshoot `[0, 1]` by rounding.
pub fn rgb_from_tensor(shape: &[usize], data: Vec<f32>) -> Result<RgbImage> {
    expect_rank(shape, 3, "image")?;
    if shape[2] != 3 {
        return Err(Error::Protocol(format!("image tensor has {} channels", shape[2])));
    }
    RgbImage::new(shape[1], shape[0], clamp_unit(data)?)
}

pub fn gray_from_tensor(shape: &[usize], data: Vec<f32>) -> Result<GrayImage> {
    expect_rank(shape, 2, "line map")?;
    GrayImage::new(shape[1], shape[0], clamp_unit(data)?)
}

fn clamp_unit(mut data: Vec<f32>) -> Result<Vec<f32>> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Protocol("image tensor contains non-finite values".into()));
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(data)
}

pub fn latent_from_tensor(shape: &[usize], data: Vec<f32>) -> Result<Latent> {
    expect_rank(shape, 3, "latent")?;
    if shape[0] != crate::imaging::LATENT_CHANNELS {
        return Err(Error::Protocol(format!("latent tensor has {} channels", shape[0])));
    }
    Latent::new(shape[1], shape[2], data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Protocol(e.to_string()))
}

pub fn embed_from_tensor(shape: &[usize], data: Vec<f32>) -> Result<PromptEmbedding> {
    expect_rank(shape, 2, "embedding")?;
    PromptEmbedding::new(shape[0], shape[1], data).map_err(|e| Error::Protocol(e.to_string()))
}

/// Builds the `predict_noise` request: latents first, then each distinct
/// embedding once, referenced through `embed_index`.
pub fn noise_request(request_id: u64, batch: &[NoiseQuery<'_>]) -> Message {
    let mut msg = Message::request(Op::PredictNoise, request_id);
    let mut unique: Vec<&PromptEmbedding> = Vec::new();
    let mut index = Vec::with_capacity(batch.len());
    for q in batch {
        let i = match unique.iter().position(|e| std::ptr::eq(*e, q.embed) || *e == q.embed) {
            Some(i) => i,
            None => {
                unique.push(q.embed);
                unique.len() - 1
            }
        };
        index.push(i);
        let (shape, data) = latent_tensor(q.latent);
        msg.push(shape, data);
    }
    for e in unique {
        let (shape, data) = embed_tensor(e);
        msg.push(shape, data);
    }
    msg.header.timesteps = Some(batch.iter().map(|q| q.timestep).collect());
    msg.header.embed_index = Some(index);
    msg
}

/// Answers one request with `backend`. Failures become error frames.
pub fn handle_request(backend: &dyn ModelBackend, req: Message) -> Message {
    let id = req.header.request_id;
    let op_name = req.header.op.clone();
    match dispatch(backend, req) {
        Ok(mut resp) => {
            resp.header.request_id = id;
            resp.header.op = op_name;
            resp
        }
        Err(e) => Message::error(op_name, id, e.to_string()),
    }
}

fn dispatch(backend: &dyn ModelBackend, req: Message) -> Result<Message> {
    let name = req.header.op.clone().unwrap_or_default();
    let op = Op::parse(&name).ok_or_else(|| Error::Protocol(format!("unknown op `{name}`")))?;
    let Message { header, mut tensors } = req;
    let mut resp = Message::request(op, header.request_id);
    let single = |tensors: &mut Vec<Vec<f32>>| -> Result<(Vec<usize>, Vec<f32>)> {
        if tensors.len() != 1 {
            return Err(Error::Protocol(format!("{name} expects one tensor, got {}", tensors.len())));
        }
        Ok((header.shapes[0].clone(), tensors.pop().unwrap()))
    };
    match op {
        Op::EncodePrompt => {
            let text = header.text.as_deref().unwrap_or("");
            let style = header
                .style
                .as_deref()
                .ok_or_else(|| Error::Protocol("encode_prompt requires `style`".into()))?;
            let (shape, data) = embed_tensor(&backend.encode_prompt(text, style)?);
            resp.push(shape, data);
        }
        Op::VaeEncode => {
            let (shape, data) = single(&mut tensors)?;
            let (shape, data) = latent_tensor(&backend.vae_encode(&rgb_from_tensor(&shape, data)?)?);
            resp.push(shape, data);
        }
        Op::VaeDecode => {
            let (shape, data) = single(&mut tensors)?;
            let (shape, data) = rgb_tensor(&backend.vae_decode(&latent_from_tensor(&shape, data)?)?);
            resp.push(shape, data);
        }
        Op::ExtractLines => {
            let (shape, data) = single(&mut tensors)?;
            let (shape, data) = gray_tensor(&backend.extract_lines(&rgb_from_tensor(&shape, data)?)?);
            resp.push(shape, data);
        }
        Op::PredictNoise => {
            let timesteps = header
                .timesteps
                .ok_or_else(|| Error::Protocol("predict_noise requires `timesteps`".into()))?;
            let index = header
                .embed_index
                .ok_or_else(|| Error::Protocol("predict_noise requires `embed_index`".into()))?;
            let n = timesteps.len();
            if index.len() != n || tensors.len() < n {
                return Err(Error::Protocol("predict_noise batch fields disagree".into()));
            }
            let embeds_raw = tensors.split_off(n);
            let latents = header.shapes[..n]
                .iter()
                .zip(tensors)
                .map(|(s, d)| latent_from_tensor(s, d))
                .collect::<Result<Vec<_>>>()?;
            let embeds = header.shapes[n..]
                .iter()
                .zip(embeds_raw)
                .map(|(s, d)| embed_from_tensor(s, d))
                .collect::<Result<Vec<_>>>()?;
            let mut batch = Vec::with_capacity(n);
            for ((latent, &timestep), &i) in latents.iter().zip(&timesteps).zip(&index) {
                let embed = embeds
                    .get(i)
                    .ok_or_else(|| Error::Protocol(format!("embed_index {i} out of range")))?;
                batch.push(NoiseQuery { latent, timestep, embed });
            }
            for eps in backend.predict_noise(&batch)? {
                let (shape, data) = latent_tensor(&eps);
                resp.push(shape, data);
            }
        }
    }
    Ok(resp)
}

/// Serves requests on one connection until the peer disconnects. A frame
/// that cannot be decoded is answered with an error frame; the connection
/// is kept open.
pub fn serve_connection(mut stream: impl Read + Write, backend: &dyn ModelBackend) -> Result<()> {
    loop {
        let mut len = [0u8; 4];
        match stream.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_FRAME_BYTES {
            write_message(&mut stream, &Message::error(None, 0, "frame too large"))?;
            return Ok(());
        }
        let mut payload = vec![0u8; len as usize];
        stream.read_exact(&mut payload)?;
        let resp = match Message::decode_payload(&payload) {
            Ok(req) => handle_request(backend, req),
            Err(e) => Message::error(None, 0, e.to_string()),
        };
        write_message(&mut stream, &resp)?;
    }
}

/// Accepts connections forever, one thread each. Meant for loopback
/// testing and for fronting an in-process backend.
pub fn serve_listener(listener: TcpListener, backend: Arc<dyn ModelBackend>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let backend = Arc::clone(&backend);
            thread::spawn(move || {
                let _ = stream.set_nodelay(true);
                if let Err(e) = serve_connection(&stream, backend.as_ref()) {
                    log::debug!("protocol connection closed: {e}");
                }
            });
        }
    })
}

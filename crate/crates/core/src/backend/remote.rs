use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::{self, Message, Op};
use super::{check_noise_outputs, BackendDescriptor, BackendKind, ModelBackend, NoiseQuery, PromptEmbedding};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Latent, RgbImage};
use crate::sketch;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    pub addr: String,
    pub timeout_ms: u64,
    /// Extra attempts on a fresh connection after a transport failure.
    pub reconnect_attempts: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7860".into(),
            timeout_ms: 30_000,
            reconnect_attempts: 2,
            max_in_flight: 4,
        }
    }
}

/// Client for a model server speaking the [`protocol`] frames.
///
/// Connections are pooled; at most `max_in_flight` requests are
/// outstanding at once, each on its own connection.
#[derive(Debug)]
pub struct RemoteBackend {
    config: RemoteConfig,
    descriptor: BackendDescriptor,
    idle: Mutex<Vec<TcpStream>>,
    in_flight: Mutex<usize>,
    slot_freed: Condvar,
    next_id: AtomicU64,
}

impl RemoteBackend {
    /// Creates the client and verifies the server is reachable.
    pub fn connect(config: RemoteConfig, mut descriptor: BackendDescriptor) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::contract("max_in_flight must be at least 1"));
        }
        descriptor.kind = BackendKind::Remote;
        descriptor.validate()?;
        let backend = Self {
            config,
            descriptor,
            idle: Mutex::new(Vec::new()),
            in_flight: Mutex::new(0),
            slot_freed: Condvar::new(),
            next_id: AtomicU64::new(1),
        };
        let probe = backend.open()?;
        backend.idle.lock().unwrap().push(probe);
        Ok(backend)
    }

    fn open(&self) -> Result<TcpStream> {
        let timeout = Duration::from_millis(self.config.timeout_ms.max(1));
        let mut last = None;
        for addr in self.config.addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(stream);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .map(Error::from)
            .unwrap_or_else(|| Error::Protocol(format!("`{}` resolved to no address", self.config.addr))))
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.config.max_in_flight {
            n = self.slot_freed.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().unwrap() -= 1;
        self.slot_freed.notify_one();
    }

    fn exchange(&self, stream: &mut TcpStream, req: &Message) -> Result<Message> {
        protocol::write_message(stream, req)?;
        protocol::read_message(stream)?
            .ok_or_else(|| Error::Protocol("server closed the connection".into()))
    }

    /// Sends `req` and returns the matching response, retrying transport
    /// failures on fresh connections.
    fn call(&self, mut req: Message) -> Result<Message> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        req.header.request_id = id;
        self.acquire();
        let result = (|| {
            let mut attempt = 0;
            loop {
                let pooled = self.idle.lock().unwrap().pop();
                let mut stream = match pooled {
                    Some(s) => s,
                    None => self.open()?,
                };
                match self.exchange(&mut stream, &req) {
                    Ok(resp) => {
                        if resp.header.request_id != id {
                            return Err(Error::Protocol(format!(
                                "response id {} does not match request {id}",
                                resp.header.request_id
                            )));
                        }
                        self.idle.lock().unwrap().push(stream);
                        return match resp.header.error {
                            Some(msg) => Err(Error::Remote(msg)),
                            None => Ok(resp),
                        };
                    }
                    Err(Error::Transport(e)) if attempt < self.config.reconnect_attempts => {
                        log::warn!("remote backend transport failure, reconnecting: {e}");
                        attempt += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
        })();
        self.release();
        result
    }

    fn single(resp: Message) -> Result<(Vec<usize>, Vec<f32>)> {
        let Message { mut header, mut tensors } = resp;
        if tensors.len() != 1 {
            return Err(Error::Protocol(format!("expected one tensor, got {}", tensors.len())));
        }
        Ok((header.shapes.remove(0), tensors.remove(0)))
    }

    fn remote_lines(&self, img: &RgbImage) -> Result<GrayImage> {
        let mut req = Message::request(Op::ExtractLines, 0);
        let (shape, data) = protocol::rgb_tensor(img);
        req.push(shape, data);
        let (shape, data) = Self::single(self.call(req)?)?;
        let lines = protocol::gray_from_tensor(&shape, data)?;
        if lines.dims() != img.dims() {
            return Err(Error::Protocol("extract_lines changed the image size".into()));
        }
        Ok(lines)
    }
}

impl ModelBackend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode_prompt(&self, text: &str, style: &str) -> Result<PromptEmbedding> {
        self.descriptor.check_style(style)?;
        let mut req = Message::request(Op::EncodePrompt, 0);
        req.header.text = Some(text.to_owned());
        req.header.style = Some(style.to_owned());
        let (shape, data) = Self::single(self.call(req)?)?;
        protocol::embed_from_tensor(&shape, data)
    }

    fn vae_encode(&self, img: &RgbImage) -> Result<Latent> {
        let (h, w) = Latent::shape_for_image(img.width(), img.height())?;
        let mut req = Message::request(Op::VaeEncode, 0);
        let (shape, data) = protocol::rgb_tensor(img);
        req.push(shape, data);
        let (shape, data) = Self::single(self.call(req)?)?;
        let latent = protocol::latent_from_tensor(&shape, data)?;
        if (latent.height(), latent.width()) != (h, w) {
            return Err(Error::Protocol(format!("vae_encode returned shape {:?}", latent.shape())));
        }
        Ok(latent)
    }

    fn vae_decode(&self, latent: &Latent) -> Result<RgbImage> {
        let mut req = Message::request(Op::VaeDecode, 0);
        let (shape, data) = protocol::latent_tensor(latent);
        req.push(shape, data);
        let (shape, data) = Self::single(self.call(req)?)?;
        protocol::rgb_from_tensor(&shape, data)
    }

    fn predict_noise(&self, batch: &[NoiseQuery<'_>]) -> Result<Vec<Latent>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let resp = self.call(protocol::noise_request(0, batch))?;
        let out = resp
            .header
            .shapes
            .iter()
            .zip(resp.tensors)
            .map(|(s, d)| protocol::latent_from_tensor(s, d))
            .collect::<Result<Vec<_>>>()?;
        check_noise_outputs(batch, &out)?;
        Ok(out)
    }

    /// Falls back to the classical extractor when the server fails.
    fn extract_lines(&self, img: &RgbImage) -> Result<GrayImage> {
        match self.remote_lines(img) {
            Ok(lines) => Ok(lines),
            Err(e) => {
                log::warn!("remote line extraction failed, using classical extractor: {e}");
                Ok(sketch::classical_lines(img))
            }
        }
    }
}

//! Newline-delimited JSON event log.
//!
//! Each line is `{"seq", "timestamp", "event", "payload"}`; `timestamp` is
//! milliseconds since the Unix epoch. Record 0 is always `session_opened`
//! carrying the [`SessionConfig`], so a log replays on its own.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Event, SessionConfig, SessionState};
use crate::error::{Error, Result};

const OPENED: &str = "session_opened";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub timestamp: u64,
    pub event: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub payload: Value,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl LogRecord {
    fn from_event(seq: u64, event: &Event) -> Result<Self> {
        let Value::Object(mut obj) = serde_json::to_value(event)? else {
            unreachable!("events serialize to objects");
        };
        let name = match obj.remove("event") {
            Some(Value::String(s)) => s,
            _ => unreachable!("events carry a string tag"),
        };
        Ok(Self {
            seq,
            timestamp: now_ms(),
            event: name,
            payload: obj.remove("payload").unwrap_or(Value::Null),
        })
    }

    pub fn to_event(&self) -> Result<Event> {
        let mut obj = Map::new();
        obj.insert("event".into(), Value::String(self.event.clone()));
        if !self.payload.is_null() {
            obj.insert("payload".into(), self.payload.clone());
        }
        Ok(serde_json::from_value(Value::Object(obj))?)
    }
}

/// Append-only writer.
#[derive(Debug)]
pub struct EventLog<W: Write> {
    out: W,
    next_seq: u64,
}

impl EventLog<BufWriter<File>> {
    /// Creates a new log file; fails if one already exists.
    pub fn create(path: impl AsRef<Path>, config: &SessionConfig) -> Result<Self> {
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Self::new(BufWriter::new(file), config)
    }

    /// Reopens an existing log for appending, returning the replayed state.
    pub fn resume(path: impl AsRef<Path>) -> Result<(Self, SessionState)> {
        let path = path.as_ref();
        let (config, events) = read_log(BufReader::new(File::open(path)?))?;
        let mut state = SessionState::new(config)?;
        for event in &events {
            state.handle(event);
        }
        let file = OpenOptions::new().append(true).open(path)?;
        let log = Self {
            out: BufWriter::new(file),
            next_seq: events.len() as u64 + 1,
        };
        Ok((log, state))
    }
}

impl<W: Write> EventLog<W> {
    /// Starts a log by writing the `session_opened` record.
    pub fn new(out: W, config: &SessionConfig) -> Result<Self> {
        let mut log = Self { out, next_seq: 0 };
        log.write(&LogRecord {
            seq: 0,
            timestamp: now_ms(),
            event: OPENED.into(),
            payload: serde_json::to_value(config)?,
        })?;
        Ok(log)
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.next_seq = record.seq + 1;
        Ok(())
    }

    /// Appends one event and returns its sequence number.
    pub fn append(&mut self, event: &Event) -> Result<u64> {
        let seq = self.next_seq;
        self.write(&LogRecord::from_event(seq, event)?)?;
        Ok(seq)
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.flush()?;
        Ok(self.out)
    }
}

/// Parses a log. An unterminated, unparsable final line (a torn write) is
/// ignored; any other malformed line is an error.
pub fn read_log(reader: impl BufRead) -> Result<(SessionConfig, Vec<Event>)> {
    let mut lines = Vec::new();
    let mut reader = reader;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        lines.push(line);
    }
    let mut config = None;
    let mut events = Vec::new();
    let count = lines.len();
    for (i, line) in lines.iter().enumerate() {
        let torn = i + 1 == count && !line.ends_with('\n');
        let record: LogRecord = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(_) if torn => break,
            Err(e) => return Err(e.into()),
        };
        if record.seq != i as u64 {
            return Err(Error::Protocol(format!("log record {i} has seq {}", record.seq)));
        }
        if i == 0 {
            if record.event != OPENED {
                return Err(Error::Protocol(format!("log starts with `{}`", record.event)));
            }
            config = Some(serde_json::from_value(record.payload)?);
        } else {
            events.push(record.to_event()?);
        }
    }
    let config = config.ok_or_else(|| Error::Protocol("empty event log".into()))?;
    Ok((config, events))
}

/// Rebuilds the final session state from a log.
pub fn replay(reader: impl BufRead) -> Result<SessionState> {
    let (config, events) = read_log(reader)?;
    let mut state = SessionState::new(config)?;
    for event in &events {
        state.handle(event);
    }
    Ok(state)
}

/// Lossless image encoding for log records: 8-bit PNG when the image is
/// exactly representable that way, raw little-endian `f32` otherwise.
pub(super) mod image {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::de::Error as _;
    use serde::ser::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::imaging::GrayImage;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub(super) struct Repr {
        width: usize,
        height: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        png: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        f32: Option<String>,
    }

    pub(super) fn to_repr(img: &GrayImage) -> crate::error::Result<Repr> {
        let (width, height) = img.dims();
        let mut repr = Repr {
            width,
            height,
            png: None,
            f32: None,
        };
        if img.quantized() == *img {
            repr.png = Some(STANDARD.encode(img.to_png_bytes()?));
        } else {
            let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            repr.f32 = Some(STANDARD.encode(bytes));
        }
        Ok(repr)
    }

    pub(super) fn from_repr(repr: Repr) -> Result<GrayImage, String> {
        let img = match (repr.png, repr.f32) {
            (Some(png), None) => {
                let bytes = STANDARD.decode(png).map_err(|e| e.to_string())?;
                GrayImage::from_png_bytes(&bytes).map_err(|e| e.to_string())?
            }
            (None, Some(raw)) => {
                let bytes = STANDARD.decode(raw).map_err(|e| e.to_string())?;
                if bytes.len() % 4 != 0 {
                    return Err("raw image length is not a multiple of 4".into());
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                GrayImage::new(repr.width, repr.height, data).map_err(|e| e.to_string())?
            }
            _ => return Err("image needs exactly one of `png` or `f32`".into()),
        };
        if img.dims() != (repr.width, repr.height) {
            return Err(format!(
                "image is {}x{}, record says {}x{}",
                img.width(),
                img.height(),
                repr.width,
                repr.height
            ));
        }
        Ok(img)
    }

    pub fn serialize<S: Serializer>(img: &GrayImage, s: S) -> Result<S::Ok, S::Error> {
        to_repr(img).map_err(S::Error::custom)?.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GrayImage, D::Error> {
        from_repr(Repr::deserialize(d)?).map_err(D::Error::custom)
    }
}

pub(super) mod images {
    use serde::de::Error as _;
    use serde::ser::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::image::{from_repr, to_repr, Repr};
    use crate::imaging::GrayImage;

    pub fn serialize<S: Serializer>(imgs: &[GrayImage], s: S) -> Result<S::Ok, S::Error> {
        imgs.iter()
            .map(to_repr)
            .collect::<crate::error::Result<Vec<_>>>()
            .map_err(S::Error::custom)?
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<GrayImage>, D::Error> {
        Vec::<Repr>::deserialize(d)?
            .into_iter()
            .map(|r| from_repr(r).map_err(D::Error::custom))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::GrayImage;

    fn config() -> SessionConfig {
        SessionConfig {
            resolution: 8,
            ..SessionConfig::default()
        }
    }

    #[test]
    fn record_layout() {
        let rec = LogRecord::from_event(3, &Event::SetPrompt { text: "owl".into() }).unwrap();
        let json: Value = serde_json::to_value(&rec).unwrap();
        assert_eq!(json["seq"], 3);
        assert_eq!(json["event"], "set_prompt");
        assert_eq!(json["payload"]["text"], "owl");
        assert!(json["timestamp"].is_u64());

        let unit = LogRecord::from_event(4, &Event::ClearBackground).unwrap();
        assert_eq!(unit.to_event().unwrap(), Event::ClearBackground);
    }

    #[test]
    fn images_round_trip_exactly() {
        let quantized = GrayImage::from_fn(8, 8, |x, y| ((x * 8 + y) as f32 * 4.0).round() / 255.0).unwrap();
        let arbitrary = GrayImage::from_fn(8, 8, |x, y| (x as f32 * 0.1234 + y as f32 * 0.0071).min(1.0)).unwrap();
        for img in [quantized, arbitrary] {
            let ev = Event::RoundCompleted {
                round_id: 1,
                sketches: vec![img.clone(), img.clone()],
            };
            let rec = LogRecord::from_event(1, &ev).unwrap();
            let back = LogRecord::to_event(&serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap());
            assert_eq!(back.unwrap(), ev);
        }
    }

    #[test]
    fn write_then_replay() {
        let events = vec![
            Event::StrokeBegin,
            Event::StrokeEnd {
                canvas: GrayImage::filled(8, 8, 0.0).unwrap(),
            },
            Event::SetPrompt { text: "bird".into() },
            Event::RoundCompleted {
                round_id: 2,
                sketches: vec![GrayImage::filled(8, 8, 0.5).unwrap(); 4],
            },
            Event::SelectGuidance { index: 1 },
        ];
        let mut log = EventLog::new(Vec::new(), &config()).unwrap();
        let mut live = SessionState::new(config()).unwrap();
        for ev in &events {
            log.append(ev).unwrap();
            live.handle(ev);
        }
        let bytes = log.into_inner().unwrap();
        let (cfg, parsed) = read_log(&bytes[..]).unwrap();
        assert_eq!(cfg, config());
        assert_eq!(parsed, events);
        assert_eq!(replay(&bytes[..]).unwrap(), live);
    }

    #[test]
    fn torn_tail_is_ignored_but_corruption_is_not() {
        let mut log = EventLog::new(Vec::new(), &config()).unwrap();
        log.append(&Event::StrokeBegin).unwrap();
        let mut bytes = log.into_inner().unwrap();
        let good = bytes.clone();
        bytes.extend_from_slice(b"{\"seq\":2,\"timest");
        assert_eq!(read_log(&bytes[..]).unwrap().1, vec![Event::StrokeBegin]);

        let mut corrupt = good.clone();
        corrupt.extend_from_slice(b"garbage\n");
        assert!(read_log(&corrupt[..]).is_err());
        assert!(read_log(&b""[..]).is_err());
    }

    #[test]
    fn file_log_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.ndjson");
        let mut log = EventLog::create(&path, &config()).unwrap();
        log.append(&Event::SetPrompt { text: "a".into() }).unwrap();
        log.flush().unwrap();
        drop(log);
        assert!(EventLog::create(&path, &config()).is_err());

        let (mut log, state) = EventLog::resume(&path).unwrap();
        assert_eq!(state.prompt(), "a");
        assert_eq!(log.next_seq(), 2);
        log.append(&Event::SetPrompt { text: "b".into() }).unwrap();
        log.flush().unwrap();
        let replayed = replay(BufReader::new(File::open(&path).unwrap())).unwrap();
        assert_eq!(replayed.prompt(), "b");
    }
}

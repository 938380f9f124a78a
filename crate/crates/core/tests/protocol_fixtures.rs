//! Frames produced by an independent encoder must decode to the listed
//! contents and re-encode byte for byte.

use std::path::PathBuf;

use serde::Deserialize;
use sketchguide::backend::protocol::{self, Header, Message};
use sketchguide::backend::SyntheticBackend;

#[derive(Deserialize)]
struct Vector {
    name: String,
    header: Header,
    tensors: Vec<Vec<f64>>,
}

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/protocol")
}

fn vectors() -> Vec<Vector> {
    serde_json::from_str(&std::fs::read_to_string(dir().join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn fixtures_decode_and_reencode_exactly() {
    let vectors = vectors();
    assert!(vectors.len() >= 7);
    for v in vectors {
        let bytes = std::fs::read(dir().join(format!("{}.bin", v.name))).unwrap();
        let msg = protocol::read_message(&mut &bytes[..]).unwrap().unwrap();
        assert_eq!(msg.header, v.header, "{}", v.name);
        let expected: Vec<Vec<f32>> = v.tensors.iter().map(|t| t.iter().map(|&x| x as f32).collect()).collect();
        let bits = |ts: &[Vec<f32>]| ts.iter().map(|t| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
        assert_eq!(bits(&msg.tensors), bits(&expected), "{}", v.name);
        assert_eq!(msg.encode_frame().unwrap(), bytes, "{}", v.name);
    }
}

#[test]
fn fixture_requests_are_served() {
    let backend = SyntheticBackend::new(3);
    for name in ["encode_prompt_request", "vae_encode_request", "vae_decode_request", "predict_noise_request"] {
        let bytes = std::fs::read(dir().join(format!("{name}.bin"))).unwrap();
        let req = protocol::read_message(&mut &bytes[..]).unwrap().unwrap();
        let id = req.header.request_id;
        let resp = protocol::handle_request(&backend, req.clone());
        assert_eq!(resp.header.error, None, "{name}");
        assert_eq!(resp.header.request_id, id);
        assert_eq!(resp.header.op, req.header.op);
        match name {
            "vae_encode_request" => assert_eq!(resp.header.shapes, vec![vec![4, 1, 1]]),
            "vae_decode_request" => assert_eq!(resp.header.shapes, vec![vec![8, 16, 3]]),
            "predict_noise_request" => assert_eq!(resp.header.shapes, vec![vec![4, 1, 1]; 3]),
            _ => assert_eq!(resp.header.shapes.len(), 1),
        }
    }
}

#[test]
fn error_fixture_is_an_error() {
    let bytes = std::fs::read(dir().join("error_response.bin")).unwrap();
    let msg: Message = protocol::read_message(&mut &bytes[..]).unwrap().unwrap();
    assert_eq!(msg.header.error.as_deref(), Some("out of memory"));
    assert!(msg.tensors.is_empty());
}

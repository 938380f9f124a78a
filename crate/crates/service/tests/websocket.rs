use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use sketchguide::session::{read_log, replay};
use sketchguide::{Effect, Event, GrayImage, Mode, SessionState};
use sketchguide_service::config::ServiceConfig;
use sketchguide_service::messages::{decode_png, encode_png, ServerMessage};
use sketchguide_service::server::Server;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const RES: usize = 64;

fn config(data_dir: &Path, tau: f64) -> ServiceConfig {
    let mut c = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        data_dir: data_dir.to_path_buf(),
        tau,
        seed: 5,
        workers: 1,
        ..ServiceConfig::default()
    };
    c.backend.working_resolution = RES;
    c
}

struct Running {
    addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: JoinHandle<anyhow::Result<()>>,
}

impl Running {
    async fn start(config: ServiceConfig) -> Self {
        let server = Server::bind(config).await.unwrap();
        let addr = server.local_addr().unwrap();
        let (stop, stopped) = oneshot::channel::<()>();
        let task = tokio::spawn(server.run(async {
            let _ = stopped.await;
        }));
        Self { addr, stop, task }
    }

    async fn connect(&self) -> Ws {
        tokio_tungstenite::connect_async(format!("ws://{}/ws", self.addr)).await.unwrap().0
    }

    async fn shutdown(self) {
        self.stop.send(()).unwrap();
        tokio::time::timeout(Duration::from_secs(30), self.task).await.unwrap().unwrap().unwrap();
    }
}

fn sketch(variant: usize) -> GrayImage {
    GrayImage::from_fn(RES, RES, |x, y| {
        let r = (x as f64 - 32.0).hypot(y as f64 - 30.0);
        if (r - 12.0 - 3.0 * variant as f64).abs() < 1.0 || x == y {
            0.0
        } else {
            1.0
        }
    })
    .unwrap()
}

async fn send(ws: &mut Ws, value: Value) {
    ws.send(Message::Text(value.to_string().into())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> ServerMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(30), ws.next())
            .await
            .expect("timed out waiting for a message")
            .expect("connection closed")
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn open(ws: &mut Ws, id: &str) -> Vec<ServerMessage> {
    send(ws, json!({"type": "open_session", "session_id": id})).await;
    let first = recv(ws).await;
    assert!(matches!(&first, ServerMessage::SessionOpened { session_id, .. } if session_id == id), "{first:?}");
    let second = recv(ws).await;
    assert!(matches!(second, ServerMessage::StateChanged { .. }), "{second:?}");
    vec![first, second]
}

async fn stroke(ws: &mut Ws, img: &GrayImage) {
    send(ws, json!({"type": "stroke_end", "canvas_png": encode_png(img).unwrap()})).await;
}

fn images(msg: &ServerMessage) -> Vec<GrayImage> {
    match msg {
        ServerMessage::GuidanceSet { images, .. } => images.iter().map(|i| decode_png(i).unwrap()).collect(),
        other => panic!("expected guidance_set, got {other:?}"),
    }
}

#[tokio::test]
async fn round_over_websocket_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), 0.95);
    let server = Running::start(cfg.clone()).await;
    let mut ws = server.connect().await;
    let opened = open(&mut ws, "smoke").await;
    match &opened[..] {
        [ServerMessage::SessionOpened { config, .. }, ServerMessage::StateChanged { mode: Mode::Active, background: None }] => {
            assert_eq!(config, &cfg.session_config());
        }
        other => panic!("{other:?}"),
    }

    stroke(&mut ws, &sketch(0)).await;
    let set = recv(&mut ws).await;
    assert!(matches!(set, ServerMessage::GuidanceSet { round_id: 1, .. }));
    let got = images(&set);

    let mut session = SessionState::new(cfg.session_config()).unwrap();
    let effects = session.handle(&Event::StrokeEnd { canvas: sketch(0) });
    let Some(Effect::Generate(req)) = effects.into_iter().next() else { panic!() };
    let round = cfg.build_pipeline().unwrap().run_round(&req).unwrap();
    let expected: Vec<GrayImage> = round.guidance_sketches.iter().map(GrayImage::quantized).collect();
    assert_eq!(got, expected);

    let round_dir = tmp.path().join("smoke/1");
    for i in 0..4 {
        assert!(round_dir.join(format!("guidance_{i}.png")).exists());
        assert!(round_dir.join(format!("candidate_{i}.png")).exists());
    }

    send(&mut ws, json!({"type": "select_guidance", "index": 2})).await;
    match recv(&mut ws).await {
        ServerMessage::StateChanged { mode: Mode::PausedBg, background: Some(bg) } => {
            assert_eq!(decode_png(&bg).unwrap(), expected[2]);
        }
        other => panic!("{other:?}"),
    }
    send(&mut ws, json!({"type": "clear_background"})).await;
    assert_eq!(recv(&mut ws).await, ServerMessage::StateChanged { mode: Mode::PausedCleared, background: None });
    send(&mut ws, json!({"type": "continue_drawing"})).await;
    assert_eq!(recv(&mut ws).await, ServerMessage::StateChanged { mode: Mode::Active, background: None });
    server.shutdown().await;

    let log = std::fs::read(tmp.path().join("smoke/events.ndjson")).unwrap();
    let state = replay(&log[..]).unwrap();
    assert_eq!(state.mode(), Mode::Active);
    assert_eq!(state.slots().len(), 4);
}

#[tokio::test]
async fn bad_messages_get_errors_and_keep_the_connection() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Running::start(config(tmp.path(), 0.95)).await;
    let mut ws = server.connect().await;
    let code = |m: ServerMessage| match m {
        ServerMessage::Error { code, .. } => code,
        other => panic!("expected error, got {other:?}"),
    };

    ws.send(Message::Text("{not json".into())).await.unwrap();
    assert_eq!(code(recv(&mut ws).await), "bad_message");
    send(&mut ws, json!({"type": "paint"})).await;
    assert_eq!(code(recv(&mut ws).await), "bad_message");
    send(&mut ws, json!({"type": "stroke_begin"})).await;
    assert_eq!(code(recv(&mut ws).await), "no_session");
    send(&mut ws, json!({"type": "open_session", "session_id": "../etc"})).await;
    assert_eq!(code(recv(&mut ws).await), "bad_session_id");

    open(&mut ws, "errs").await;
    send(&mut ws, json!({"type": "stroke_end", "canvas_png": "AAAA"})).await;
    assert_eq!(code(recv(&mut ws).await), "bad_canvas");
    stroke(&mut ws, &GrayImage::filled(10, 10, 1.0).unwrap()).await;
    assert_eq!(code(recv(&mut ws).await), "bad_canvas");
    send(&mut ws, json!({"type": "select_guidance", "index": 0})).await;
    assert_eq!(code(recv(&mut ws).await), "empty_slot");
    send(&mut ws, json!({"type": "set_style", "id": "cubist"})).await;
    assert_eq!(code(recv(&mut ws).await), "unknown_style");

    stroke(&mut ws, &sketch(1)).await;
    assert_eq!(images(&recv(&mut ws).await).len(), 4);
    server.shutdown().await;
}

#[tokio::test]
async fn identical_strokes_are_skipped_at_zero_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Running::start(config(tmp.path(), 0.0)).await;
    let mut ws = server.connect().await;
    open(&mut ws, "skip").await;
    stroke(&mut ws, &sketch(2)).await;
    images(&recv(&mut ws).await);
    stroke(&mut ws, &sketch(2)).await;
    assert_eq!(
        recv(&mut ws).await,
        ServerMessage::RoundSkipped { round_id: 2, similarity: 1.0, probability: 1.0 }
    );
    server.shutdown().await;
}

#[tokio::test]
async fn sessions_survive_reconnects_and_restarts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), 0.95);
    let server = Running::start(cfg.clone()).await;
    let mut ws = server.connect().await;
    open(&mut ws, "keep").await;
    stroke(&mut ws, &sketch(0)).await;
    let first = images(&recv(&mut ws).await);
    send(&mut ws, json!({"type": "select_guidance", "index": 1})).await;
    recv(&mut ws).await;
    drop(ws);

    let mut ws = server.connect().await;
    let opened = open(&mut ws, "keep").await;
    assert!(matches!(&opened[1], ServerMessage::StateChanged { mode: Mode::PausedBg, background: Some(_) }));
    assert_eq!(images(&recv(&mut ws).await), first);
    server.shutdown().await;

    let server = Running::start(cfg).await;
    let mut ws = server.connect().await;
    let opened = open(&mut ws, "keep").await;
    assert!(matches!(&opened[1], ServerMessage::StateChanged { mode: Mode::PausedBg, background: Some(_) }));
    assert_eq!(images(&recv(&mut ws).await), first);
    send(&mut ws, json!({"type": "continue_drawing"})).await;
    assert_eq!(recv(&mut ws).await, ServerMessage::StateChanged { mode: Mode::Active, background: None });
    stroke(&mut ws, &sketch(3)).await;
    assert!(matches!(recv(&mut ws).await, ServerMessage::GuidanceSet { round_id: 2, .. }));
    server.shutdown().await;
}

#[tokio::test]
async fn shutdown_mid_round_leaves_a_replayable_log() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path(), 0.95);
    cfg.backend.working_resolution = 256;
    let big = sketch(0).resize_bilinear(256, 256).unwrap().quantized();
    let server = Running::start(cfg).await;
    let mut ws = server.connect().await;
    open(&mut ws, "cut").await;
    send(&mut ws, json!({"type": "stroke_begin"})).await;
    send(&mut ws, json!({"type": "stroke_point", "x": 3.0, "y": 4.0, "pressure": 0.5})).await;
    stroke(&mut ws, &big).await;
    send(&mut ws, json!({"type": "set_prompt", "text": "a tree"})).await;
    send(&mut ws, json!({"type": "set_style", "id": "cubist"})).await;
    while !matches!(recv(&mut ws).await, ServerMessage::Error { .. }) {}
    server.shutdown().await;

    let bytes = std::fs::read(tmp.path().join("cut/events.ndjson")).unwrap();
    let (_, events) = read_log(&bytes[..]).unwrap();
    assert!(events.len() >= 4, "{events:?}");
    assert!(matches!(events[0], Event::StrokeBegin));
    let state = replay(&bytes[..]).unwrap();
    assert_eq!(state.prompt(), "a tree");
    assert!(state.canvas() == Some(&big));
}

#[tokio::test]
async fn health_endpoint_answers() {
    let tmp = tempfile::tempdir().unwrap();
    let server = Running::start(config(tmp.path(), 0.95)).await;
    let mut stream = TcpStream::connect(server.addr).await.unwrap();
    stream
        .write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).await.unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.ends_with("ok"));
    server.shutdown().await;
}

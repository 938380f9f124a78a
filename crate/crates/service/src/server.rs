//! WebSocket service.
//!
//! Each session is an actor task owning its [`SessionState`] and event log;
//! client messages and round results reach it through one channel, so
//! events are applied in a single order. A per-session worker takes
//! requests from a latest-wins [`RoundQueue`] and runs them on the blocking
//! pool, bounded by a semaphore shared by all sessions.

use std::collections::HashMap;
use std::fs::File;
use std::future::Future;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use sketchguide::pipeline::{CancelToken, Pipeline, RoundQueue};
use sketchguide::session::{Effect, Event, EventLog, SessionState};
use sketchguide::Error as CoreError;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot, watch, Semaphore};
use tokio::task::JoinHandle;

use crate::config::ServiceConfig;
use crate::generate::write_round;
use crate::messages::{encode_png, to_event, ClientMessage, ServerMessage};

const EVENTS_FILE: &str = "events.ndjson";

type Reply = mpsc::UnboundedSender<ServerMessage>;

enum Input {
    Event { event: Event, reply: Option<Reply> },
    Attach(oneshot::Sender<Vec<ServerMessage>>),
    Close,
}

struct SessionHandle {
    inbox: mpsc::UnboundedSender<Input>,
    updates: broadcast::Sender<ServerMessage>,
    queue: Arc<RoundQueue>,
    running: Arc<Mutex<Option<CancelToken>>>,
}

struct App {
    config: ServiceConfig,
    pipeline: Arc<Pipeline>,
    pool: Arc<Semaphore>,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
    tasks: Mutex<Vec<JoinHandle<()>>>,
    shutdown: watch::Receiver<bool>,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl App {
    fn session_dir(&self, id: &str) -> PathBuf {
        self.config.data_dir.join(id)
    }

    /// Finds a live session, resumes one from its log, or starts a new one.
    fn open_session(self: &Arc<Self>, requested: Option<String>) -> Result<(String, Arc<SessionHandle>), ServerMessage> {
        let id = match requested {
            Some(id) if !valid_session_id(&id) => {
                return Err(ServerMessage::error("bad_session_id", "session ids are 1-64 chars of [A-Za-z0-9_-]"))
            }
            Some(id) => id,
            None => uuid::Uuid::new_v4().simple().to_string(),
        };
        let mut sessions = self.sessions.lock().unwrap();
        if let Some(handle) = sessions.get(&id) {
            return Ok((id, Arc::clone(handle)));
        }
        let dir = self.session_dir(&id);
        let path = dir.join(EVENTS_FILE);
        let opened = if path.exists() {
            EventLog::resume(&path).map_err(|e| e.to_string())
        } else {
            std::fs::create_dir_all(&dir)
                .map_err(|e| e.to_string())
                .and_then(|()| SessionState::new(self.config.session_config()).map_err(|e| e.to_string()))
                .and_then(|state| {
                    EventLog::create(&path, state.config())
                        .map(|log| (log, state))
                        .map_err(|e| e.to_string())
                })
        };
        let (log, state) = opened.map_err(|e| ServerMessage::error("session_unavailable", e))?;
        let handle = self.spawn_session(id.clone(), state, log);
        sessions.insert(id.clone(), Arc::clone(&handle));
        Ok((id, handle))
    }

    fn spawn_session(self: &Arc<Self>, id: String, state: SessionState, log: EventLog<BufWriter<File>>) -> Arc<SessionHandle> {
        let (inbox, rx) = mpsc::unbounded_channel();
        let (updates, _) = broadcast::channel(64);
        let handle = Arc::new(SessionHandle {
            inbox,
            updates,
            queue: Arc::new(RoundQueue::new()),
            running: Arc::new(Mutex::new(None)),
        });
        let actor = tokio::spawn(run_actor(id.clone(), state, log, rx, Arc::clone(&handle), Arc::clone(self)));
        let worker = tokio::spawn(run_worker(id, Arc::clone(&handle), Arc::clone(self)));
        self.tasks.lock().unwrap().extend([actor, worker]);
        handle
    }
}

fn effect_messages(effects: Vec<Effect>, reply: Option<&Reply>, handle: &SessionHandle) {
    for effect in effects {
        let msg = match effect {
            Effect::Generate(req) => {
                let id = req.round_id;
                match handle.queue.enqueue(req) {
                    Ok(sketchguide::pipeline::Enqueued::Coalesced { replaced }) => {
                        log::debug!("round {replaced} replaced by {id} before starting");
                    }
                    Ok(_) => {}
                    Err(e) => log::warn!("round {id} not queued: {e}"),
                }
                continue;
            }
            Effect::Skipped { round_id, decision } => ServerMessage::RoundSkipped {
                round_id,
                similarity: decision.similarity,
                probability: decision.probability,
            },
            Effect::GuidanceSet { round_id, sketches } => match sketches.iter().map(encode_png).collect() {
                Ok(images) => ServerMessage::GuidanceSet { round_id, images },
                Err(e) => ServerMessage::error("encode_failed", e.to_string()),
            },
            Effect::StateChanged { mode, background } => ServerMessage::StateChanged {
                mode,
                background: background.as_ref().and_then(|b| encode_png(b).ok()),
            },
            Effect::StaleRoundDiscarded { round_id } => {
                log::debug!("discarding stale round {round_id}");
                continue;
            }
            Effect::Rejected { code, message } => {
                let msg = ServerMessage::error(code.as_str(), message);
                match reply {
                    Some(r) => {
                        let _ = r.send(msg);
                        continue;
                    }
                    None => msg,
                }
            }
        };
        let _ = handle.updates.send(msg);
    }
}

fn snapshot(id: &str, state: &SessionState) -> Vec<ServerMessage> {
    let mut out = vec![
        ServerMessage::SessionOpened {
            session_id: id.to_owned(),
            config: state.config().clone(),
        },
        ServerMessage::StateChanged {
            mode: state.mode(),
            background: state.background().and_then(|b| encode_png(b).ok()),
        },
    ];
    if let Some(first) = state.slots().first() {
        if let Ok(images) = state.slots().iter().map(|s| encode_png(&s.sketch)).collect() {
            out.push(ServerMessage::GuidanceSet {
                round_id: first.round_id,
                images,
            });
        }
    }
    out
}

async fn run_actor(
    id: String,
    mut state: SessionState,
    mut log: EventLog<BufWriter<File>>,
    mut inbox: mpsc::UnboundedReceiver<Input>,
    handle: Arc<SessionHandle>,
    app: Arc<App>,
) {
    let mut shutdown = app.shutdown.clone();
    loop {
        let input = tokio::select! {
            biased;
            input = inbox.recv() => input,
            _ = async { let _ = shutdown.wait_for(|&s| s).await; } => None,
        };
        match input {
            Some(Input::Event { event, reply }) => {
                if let Err(e) = log.append(&event).and_then(|_| log.flush()) {
                    log::error!("session {id}: cannot write event log: {e}");
                }
                let effects = state.handle(&event);
                effect_messages(effects, reply.as_ref(), &handle);
            }
            Some(Input::Attach(tx)) => {
                let _ = tx.send(snapshot(&id, &state));
            }
            Some(Input::Close) | None => break,
        }
    }
    handle.queue.close();
    if let Some(token) = handle.running.lock().unwrap().as_ref() {
        token.cancel();
    }
    if let Err(e) = log.flush() {
        log::error!("session {id}: final log flush failed: {e}");
    }
}

async fn run_worker(id: String, handle: Arc<SessionHandle>, app: Arc<App>) {
    loop {
        let queue = Arc::clone(&handle.queue);
        let Ok(Some(item)) = tokio::task::spawn_blocking(move || queue.next()).await else {
            break;
        };
        let Ok(permit) = Arc::clone(&app.pool).acquire_owned().await else {
            break;
        };
        let token = CancelToken::new();
        *handle.running.lock().unwrap() = Some(token.clone());
        if *app.shutdown.borrow() {
            token.cancel();
        }
        let pipeline = Arc::clone(&app.pipeline);
        let dir = app.session_dir(&id);
        let request = item.request;
        let round_id = request.round_id;
        let result = tokio::task::spawn_blocking(move || {
            let mut round = pipeline.run_round_with(&request, &token)?;
            round.timings.queue_wait = item.queue_wait;
            write_round(&dir.join(round_id.to_string()), &round).map_err(|e| CoreError::Contract(e.to_string()))?;
            Ok::<_, CoreError>(round)
        })
        .await;
        drop(permit);
        *handle.running.lock().unwrap() = None;
        handle.queue.finish();
        let event = match result {
            Ok(Ok(round)) => {
                log::info!("session={id} {}", round.metrics());
                Event::RoundCompleted {
                    round_id,
                    sketches: round.guidance_sketches.iter().map(|g| g.quantized()).collect(),
                }
            }
            Ok(Err(CoreError::Cancelled)) => {
                log::info!("session={id} round {round_id} cancelled");
                continue;
            }
            Ok(Err(e)) => Event::RoundFailed {
                round_id,
                message: e.to_string(),
            },
            Err(e) => Event::RoundFailed {
                round_id,
                message: format!("worker panicked: {e}"),
            },
        };
        if handle.inbox.send(Input::Event { event, reply: None }).is_err() {
            break;
        }
    }
}

async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => true,
    }
}

async fn connection(mut socket: WebSocket, app: Arc<App>) {
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<ServerMessage>();
    let mut bound: Option<(Arc<SessionHandle>, broadcast::Receiver<ServerMessage>)> = None;
    let mut shutdown = app.shutdown.clone();
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let _ = reply_tx.send(ServerMessage::error("bad_message", "binary frames are not supported"));
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                    Some(Ok(_)) => continue,
                };
                let msg: ClientMessage = match serde_json::from_str(text.as_str()) {
                    Ok(m) => m,
                    Err(e) => {
                        let _ = reply_tx.send(ServerMessage::error("bad_message", e.to_string()));
                        continue;
                    }
                };
                if let ClientMessage::OpenSession { session_id } = msg {
                    match app.open_session(session_id) {
                        Ok((_, handle)) => {
                            let updates = handle.updates.subscribe();
                            let (tx, rx) = oneshot::channel();
                            let _ = handle.inbox.send(Input::Attach(tx));
                            if let Ok(sync) = rx.await {
                                for m in sync {
                                    let _ = reply_tx.send(m);
                                }
                            }
                            bound = Some((handle, updates));
                        }
                        Err(e) => {
                            let _ = reply_tx.send(e);
                        }
                    }
                    continue;
                }
                let Some((handle, _)) = &bound else {
                    let _ = reply_tx.send(ServerMessage::error("no_session", "send open_session first"));
                    continue;
                };
                match to_event(msg) {
                    Some(Ok(event)) => {
                        let _ = handle.inbox.send(Input::Event { event, reply: Some(reply_tx.clone()) });
                    }
                    Some(Err(e)) => {
                        let _ = reply_tx.send(e);
                    }
                    None => {}
                }
            }
            Some(msg) = replies.recv() => {
                if !send(&mut socket, &msg).await {
                    break;
                }
            }
            update = async {
                match &mut bound {
                    Some((_, rx)) => rx.recv().await,
                    None => std::future::pending().await,
                }
            } => match update {
                Ok(msg) => {
                    if !send(&mut socket, &msg).await {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("client lagged by {n} updates"),
                Err(broadcast::error::RecvError::Closed) => bound = None,
            },
            _ = async { let _ = shutdown.wait_for(|&s| s).await; } => {
                let _ = socket.send(Message::Close(None)).await;
                break;
            }
        }
    }
}

async fn ws_route(ws: WebSocketUpgrade, State(app): State<Arc<App>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, app))
}

/// A bound, not yet running service.
pub struct Server {
    listener: TcpListener,
    app: Arc<App>,
    stop: watch::Sender<bool>,
}

impl Server {
    pub async fn bind(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.data_dir)
            .with_context(|| format!("creating data directory {}", config.data_dir.display()))?;
        let pipeline = Arc::new(config.build_pipeline()?);
        let listener = TcpListener::bind(&config.listen)
            .await
            .with_context(|| format!("binding {}", config.listen))?;
        let (stop, shutdown) = watch::channel(false);
        let app = Arc::new(App {
            pool: Arc::new(Semaphore::new(config.worker_count())),
            config,
            pipeline,
            sessions: Mutex::new(HashMap::new()),
            tasks: Mutex::new(Vec::new()),
            shutdown,
        });
        Ok(Self { listener, app, stop })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `signal` resolves, then cancels running rounds and
    /// flushes every session log before returning.
    pub async fn run(self, signal: impl Future<Output = ()> + Send + 'static) -> Result<()> {
        let router = Router::new()
            .route("/ws", get(ws_route))
            .route("/health", get(|| async { "ok" }))
            .with_state(Arc::clone(&self.app));
        let stop = self.stop;
        let mut stopped = stop.subscribe();
        tokio::spawn(async move {
            signal.await;
            let _ = stop.send(true);
        });
        axum::serve(self.listener, router)
            .with_graceful_shutdown(async move {
                let _ = stopped.wait_for(|&s| s).await;
            })
            .await?;

        for handle in self.app.sessions.lock().unwrap().values() {
            let _ = handle.inbox.send(Input::Close);
        }
        let tasks = std::mem::take(&mut *self.app.tasks.lock().unwrap());
        for task in tasks {
            let _ = task.await;
        }
        Ok(())
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<()> {
    let server = Server::bind(config).await?;
    log::info!("listening on ws://{}/ws", server.local_addr()?);
    server
        .run(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

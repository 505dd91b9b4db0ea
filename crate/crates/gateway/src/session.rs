//! One live session: an engine on its own thread, fed by a command queue
//! and drained only between ticks.

use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use ergoswarm_core::engine::{Engine, RunSummary};
use ergoswarm_core::runlog::{EventRecord, JsonlWriter, Record, RecordSink};
use ergoswarm_core::scenario::{Event, ScenarioScript, TimedEvent};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot, watch};

use crate::protocol::{AgentView, ErrorCode, FrameError, GridFrame, MetricPoint, Mode, ServerFrame, Snapshot, HISTORY_TAIL};
use crate::{Error, Result};

pub const DEFAULT_DECIMATION: u64 = 5;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub script: ScenarioScript,
    /// Ticks per wall-clock second; 0 runs as fast as possible.
    pub pace: f64,
    /// Default state/metric frame decimation for new clients.
    pub decimation: u64,
    /// Stop before the script's own duration.
    pub max_ticks: Option<u64>,
    /// Where to write the run log, if anywhere.
    pub log_path: Option<PathBuf>,
    pub session_id: Option<String>,
}

impl SessionConfig {
    pub fn new(script: ScenarioScript) -> Self {
        Self {
            script,
            pace: 10.0,
            decimation: DEFAULT_DECIMATION,
            max_ticks: None,
            log_path: None,
            session_id: None,
        }
    }
}

/// Everything needed to reproduce a live session headlessly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandLog {
    pub scenario: ScenarioScript,
    /// Ticks the session advanced.
    pub ticks: u64,
    /// World-changing commands in the order they were applied.
    pub commands: Vec<TimedEvent>,
}

impl CommandLog {
    /// The session as a plain script: live commands merged after the
    /// scripted events of the same tick, which is the order the session
    /// applied them in.
    pub fn to_script(&self) -> ScenarioScript {
        let mut s = self.scenario.clone();
        s.events.extend(self.commands.iter().cloned());
        s.events.sort_by_key(|e| e.tick);
        s
    }

    /// Re-run the session. Returns the same records the live session
    /// wrote, so digests compare directly.
    pub fn replay(&self, sink: &mut dyn RecordSink) -> Result<RunSummary> {
        let mut engine = Engine::new(self.to_script())?;
        engine.start(sink)?;
        while engine.tick() < self.ticks {
            engine.boundary(&[], sink)?;
            engine.advance(sink)?;
        }
        Ok(engine.summary())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }
}

/// Final state handed back by [`Session::shutdown`].
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub command_log: CommandLog,
    pub digest: String,
    pub summary: RunSummary,
}

/// Cheap status for the health endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub session_id: String,
    pub scenario: String,
    pub mode: Mode,
    pub tick: u64,
    pub stop_tick: u64,
    pub pace: f64,
    pub revision: u64,
    pub connected_clients: usize,
}

/// A frame on the broadcast bus, serialized once for every client.
#[derive(Debug, Clone)]
pub struct Outbound {
    pub tick: u64,
    /// State and metric frames, subject to per-client decimation.
    pub decimated: bool,
    pub text: Arc<str>,
}

type Reply<T> = oneshot::Sender<T>;

enum Request {
    World {
        id: Option<u64>,
        event: Event,
        received_tick: u64,
        reply: Reply<ServerFrame>,
    },
    Mode {
        id: Option<u64>,
        pause: bool,
        received_tick: u64,
        reply: Reply<ServerFrame>,
    },
    SetPace {
        id: Option<u64>,
        pace: f64,
        received_tick: u64,
        reply: Reply<ServerFrame>,
    },
    Snapshot {
        decimation: u64,
        reply: Reply<Snapshot>,
    },
    Shutdown {
        reply: Reply<Result<SessionOutcome>>,
    },
}

pub struct Session {
    requests: Mutex<mpsc::Sender<Request>>,
    frames: broadcast::Sender<Outbound>,
    status: watch::Receiver<Status>,
    tick: Arc<AtomicU64>,
    clients: AtomicUsize,
    decimation: u64,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Session {
    /// Validate the script and start the engine thread.
    pub fn spawn(config: SessionConfig) -> Result<Arc<Self>> {
        let engine = Engine::new(config.script.clone())?;
        if config.decimation == 0 {
            return Err(Error::Config("decimation must be at least 1".into()));
        }
        if !(config.pace.is_finite() && config.pace >= 0.0) {
            return Err(Error::Config("pace must be finite and >= 0".into()));
        }
        let out: Box<dyn Write + Send> = match &config.log_path {
            Some(p) => Box::new(BufWriter::new(
                std::fs::File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
            )),
            None => Box::new(std::io::sink()),
        };
        let session_id = config.session_id.clone().unwrap_or_else(new_session_id);
        let stop_tick = config
            .max_ticks
            .unwrap_or(config.script.duration_ticks)
            .min(config.script.duration_ticks);
        let status = Status {
            session_id: session_id.clone(),
            scenario: config.script.name.clone(),
            mode: Mode::Running,
            tick: 0,
            stop_tick,
            pace: config.pace,
            revision: 0,
            connected_clients: 0,
        };
        let (status_tx, status_rx) = watch::channel(status);
        let (frames, _) = broadcast::channel(4096);
        let (tx, rx) = mpsc::channel();
        let tick = Arc::new(AtomicU64::new(0));
        let worker = Worker {
            engine,
            sink: SessionSink {
                writer: Some(JsonlWriter::new(out)),
                events: Vec::new(),
            },
            script: config.script,
            session_id,
            stop_tick,
            mode: Mode::Running,
            pace: config.pace,
            history: VecDeque::new(),
            commands: Vec::new(),
            frames: frames.clone(),
            status: status_tx,
            tick: tick.clone(),
            anchor: (Instant::now(), 0),
        };
        let thread = std::thread::Builder::new()
            .name("ergoswarm-engine".into())
            .spawn(move || worker.run(rx))
            .map_err(|e| Error::Io(e.to_string()))?;
        Ok(Arc::new(Self {
            requests: Mutex::new(tx),
            frames,
            status: status_rx,
            tick,
            clients: AtomicUsize::new(0),
            decimation: config.decimation,
            thread: Mutex::new(Some(thread)),
        }))
    }

    pub fn default_decimation(&self) -> u64 {
        self.decimation
    }

    pub fn current_tick(&self) -> u64 {
        self.tick.load(Ordering::Acquire)
    }

    pub fn status(&self) -> Status {
        let mut s = self.status.borrow().clone();
        s.connected_clients = self.clients.load(Ordering::Relaxed);
        s
    }

    /// Resolves once the session has reached its last tick.
    pub async fn finished(&self) {
        let mut rx = self.status.clone();
        let _ = rx.wait_for(|s| s.mode == Mode::Finished).await;
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Outbound> {
        self.frames.subscribe()
    }

    pub(crate) fn client_connected(&self) {
        self.clients.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn client_disconnected(&self) {
        self.clients.fetch_sub(1, Ordering::Relaxed);
    }

    fn send(&self, r: Request) -> bool {
        self.requests.lock().map(|tx| tx.send(r).is_ok()).unwrap_or(false)
    }

    async fn ask(&self, id: Option<u64>, make: impl FnOnce(Reply<ServerFrame>) -> Request) -> ServerFrame {
        let (tx, rx) = oneshot::channel();
        if self.send(make(tx)) {
            if let Ok(f) = rx.await {
                return f;
            }
        }
        closed(id)
    }

    /// Queue a world event; resolves to its ack or error frame.
    pub async fn world(&self, id: Option<u64>, event: Event) -> ServerFrame {
        let received_tick = self.current_tick();
        self.ask(id, |reply| Request::World {
            id,
            event,
            received_tick,
            reply,
        })
        .await
    }

    pub async fn set_paused(&self, id: Option<u64>, pause: bool) -> ServerFrame {
        let received_tick = self.current_tick();
        self.ask(id, |reply| Request::Mode {
            id,
            pause,
            received_tick,
            reply,
        })
        .await
    }

    pub async fn set_pace(&self, id: Option<u64>, pace: f64) -> ServerFrame {
        let received_tick = self.current_tick();
        self.ask(id, |reply| Request::SetPace {
            id,
            pace,
            received_tick,
            reply,
        })
        .await
    }

    pub async fn snapshot(&self, decimation: u64) -> Result<Snapshot> {
        let (tx, rx) = oneshot::channel();
        if !self.send(Request::Snapshot { decimation, reply: tx }) {
            return Err(Error::Closed);
        }
        rx.await.map_err(|_| Error::Closed)
    }

    /// Stop the engine thread and collect the command log and digest.
    pub async fn shutdown(&self) -> Result<SessionOutcome> {
        let (tx, rx) = oneshot::channel();
        if !self.send(Request::Shutdown { reply: tx }) {
            return Err(Error::Closed);
        }
        let out = rx.await.map_err(|_| Error::Closed)?;
        let handle = self.thread.lock().ok().and_then(|mut t| t.take());
        if let Some(h) = handle {
            let _ = tokio::task::spawn_blocking(move || h.join()).await;
        }
        out
    }
}

fn closed(id: Option<u64>) -> ServerFrame {
    ServerFrame::error(FrameError {
        id,
        code: ErrorCode::SessionClosed,
        message: "the session has shut down".into(),
    })
}

fn new_session_id() -> String {
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    format!("{:x}-{:x}", nanos, std::process::id())
}

/// Writes the run log and keeps event records for frame generation.
struct SessionSink {
    writer: Option<JsonlWriter<Box<dyn Write + Send>>>,
    events: Vec<EventRecord>,
}

impl RecordSink for SessionSink {
    fn record(&mut self, r: &Record) -> ergoswarm_core::error::Result<()> {
        if let Record::Event(e) = r {
            self.events.push(e.clone());
        }
        match self.writer.as_mut() {
            Some(w) => w.record(r),
            None => Ok(()),
        }
    }
}

struct Worker {
    engine: Engine,
    sink: SessionSink,
    script: ScenarioScript,
    session_id: String,
    stop_tick: u64,
    mode: Mode,
    pace: f64,
    history: VecDeque<MetricPoint>,
    commands: Vec<TimedEvent>,
    frames: broadcast::Sender<Outbound>,
    status: watch::Sender<Status>,
    tick: Arc<AtomicU64>,
    /// Pacing reference: wall time and tick it was taken at.
    anchor: (Instant, u64),
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Request>) {
        if let Err(e) = self.begin() {
            tracing::error!("session failed to start: {e}");
            self.mode = Mode::Finished;
        }
        self.publish_status();
        loop {
            let req = match self.deadline() {
                None => match rx.recv() {
                    Ok(r) => Some(r),
                    Err(_) => return,
                },
                Some(d) => {
                    let now = Instant::now();
                    let got = if now >= d {
                        rx.try_recv().map_err(|e| matches!(e, TryRecvError::Disconnected))
                    } else {
                        rx.recv_timeout(d - now).map_err(|e| matches!(e, RecvTimeoutError::Disconnected))
                    };
                    match got {
                        Ok(r) => Some(r),
                        Err(true) => return,
                        Err(false) => None,
                    }
                }
            };
            match req {
                Some(Request::Shutdown { reply }) => {
                    let _ = reply.send(self.finish());
                    return;
                }
                Some(r) => self.handle(r),
                None => {
                    if let Err(e) = self.step() {
                        tracing::error!("engine stopped at tick {}: {e}", self.engine.tick());
                        self.mode = Mode::Finished;
                    }
                    self.publish_status();
                }
            }
        }
    }

    /// When the next tick is due, or `None` if the engine is not running.
    fn deadline(&self) -> Option<Instant> {
        if self.mode != Mode::Running {
            return None;
        }
        if self.pace <= 0.0 {
            return Some(Instant::now());
        }
        let (t0, k0) = self.anchor;
        let ahead = (self.engine.tick() + 1 - k0) as f64 / self.pace;
        Some(t0 + Duration::from_secs_f64(ahead))
    }

    fn reanchor(&mut self) {
        self.anchor = (Instant::now(), self.engine.tick());
    }

    fn begin(&mut self) -> Result<()> {
        self.engine.start(&mut self.sink)?;
        if let Some(s) = self.engine.last_sample() {
            self.history.push_back(s.into());
        }
        if self.engine.tick() >= self.stop_tick {
            self.mode = Mode::Finished;
        }
        self.reanchor();
        Ok(())
    }

    /// Scripted events due now, then one tick.
    fn step(&mut self) -> Result<()> {
        self.engine.boundary(&[], &mut self.sink)?;
        self.flush_events();
        let sample = self.engine.advance(&mut self.sink)?;
        self.tick.store(self.engine.tick(), Ordering::Release);
        self.history.push_back(sample.into());
        while self.history.len() > HISTORY_TAIL {
            self.history.pop_front();
        }
        if self.engine.tick() >= self.stop_tick {
            self.mode = Mode::Finished;
        }
        if self.frames.receiver_count() > 0 {
            let state = ServerFrame::State {
                tick: sample.tick,
                mode: self.mode,
                agents: self.agent_views(),
                detections: sample.detections,
            };
            self.emit(sample.tick, true, &state);
            let metric = ServerFrame::Metric {
                tick: sample.tick,
                raw: sample.raw,
                normalized: sample.normalized,
                revision: sample.revision,
            };
            self.emit(sample.tick, true, &metric);
        }
        // fall back to the wall clock after a long stall instead of bursting
        if let Some(d) = self.deadline() {
            if Instant::now().saturating_duration_since(d) > Duration::from_secs(1) {
                self.reanchor();
            }
        }
        Ok(())
    }

    fn handle(&mut self, r: Request) {
        let tick = self.engine.tick();
        match r {
            Request::World {
                id,
                event,
                received_tick,
                reply,
            } => {
                let frame = if self.mode == Mode::Finished {
                    ServerFrame::error(FrameError {
                        id,
                        code: ErrorCode::Finished,
                        message: format!("session finished at tick {tick}"),
                    })
                } else {
                    self.commands.push(TimedEvent {
                        tick,
                        event: event.clone(),
                    });
                    let applied = self.engine.boundary(std::slice::from_ref(&event), &mut self.sink);
                    self.flush_events();
                    match applied.map(|mut v| v.pop()) {
                        Ok(Some(a)) if a.accepted => ServerFrame::Ack {
                            id,
                            command: a.event,
                            received_tick,
                            applied_tick: a.tick,
                            revision: a.revision,
                            note: a.note,
                        },
                        Ok(Some(a)) => ServerFrame::error(FrameError {
                            id,
                            code: ErrorCode::Rejected,
                            message: a.note.unwrap_or_else(|| "rejected".into()),
                        }),
                        Ok(None) => closed(id),
                        Err(e) => ServerFrame::error(FrameError {
                            id,
                            code: ErrorCode::Rejected,
                            message: e.to_string(),
                        }),
                    }
                };
                let _ = reply.send(frame);
            }
            Request::Mode {
                id,
                pause,
                received_tick,
                reply,
            } => {
                if self.mode != Mode::Finished {
                    self.mode = if pause { Mode::Paused } else { Mode::Running };
                    self.reanchor();
                }
                let _ = reply.send(ServerFrame::Ack {
                    id,
                    command: if pause { "pause" } else { "resume" }.into(),
                    received_tick,
                    applied_tick: tick,
                    revision: self.engine.revision(),
                    note: None,
                });
            }
            Request::SetPace {
                id,
                pace,
                received_tick,
                reply,
            } => {
                self.pace = pace;
                self.reanchor();
                let _ = reply.send(ServerFrame::Ack {
                    id,
                    command: "set_pace".into(),
                    received_tick,
                    applied_tick: tick,
                    revision: self.engine.revision(),
                    note: None,
                });
            }
            Request::Snapshot { decimation, reply } => {
                let _ = reply.send(self.snapshot(decimation));
            }
            Request::Shutdown { .. } => unreachable!("handled by the run loop"),
        }
        self.publish_status();
    }

    /// Turn event records written since the last call into frames.
    fn flush_events(&mut self) {
        let events = std::mem::take(&mut self.sink.events);
        for e in events {
            let changed = e.accepted && e.phi.is_some();
            self.emit(
                e.tick,
                false,
                &ServerFrame::EventLog {
                    tick: e.tick,
                    event: e.event,
                    accepted: e.accepted,
                    revision: e.revision,
                    note: e.note,
                },
            );
            if changed {
                let grid = GridFrame::encode(self.engine.standard_target().grid());
                self.emit(
                    e.tick,
                    false,
                    &ServerFrame::TargetUpdated {
                        tick: e.tick,
                        revision: e.revision,
                        grid,
                    },
                );
            }
        }
    }

    fn emit(&self, tick: u64, decimated: bool, frame: &ServerFrame) {
        if self.frames.receiver_count() == 0 {
            return;
        }
        let _ = self.frames.send(Outbound {
            tick,
            decimated,
            text: frame.to_text().into(),
        });
    }

    fn agent_views(&self) -> Vec<AgentView> {
        self.engine
            .agents()
            .iter()
            .map(|a| AgentView {
                id: a.id,
                position: a.position(),
                alive: a.alive,
                capability: a.capability,
            })
            .collect()
    }

    fn snapshot(&self, decimation: u64) -> Snapshot {
        let target = GridFrame::encode(self.engine.standard_target().grid());
        let basis = self.engine.basis();
        let reconstruction = self
            .engine
            .centralized_coeffs()
            .ok()
            .flatten()
            .and_then(|c| basis.reconstruct_clamped(&c, target.width, target.height).ok())
            .map(|g| GridFrame::encode(&g))
            .unwrap_or_else(|| GridFrame::encode(&ergoswarm_core::spectral::GridDistribution::uniform(target.width, target.height)));
        Snapshot {
            session_id: self.session_id.clone(),
            tick: self.engine.tick(),
            mode: self.mode,
            pace: self.pace,
            decimation,
            revision: self.engine.revision(),
            agents: self.agent_views(),
            target,
            reconstruction,
            metric_history: self.history.iter().copied().collect(),
        }
    }

    fn publish_status(&self) {
        let (mode, tick, pace, revision) = (self.mode, self.engine.tick(), self.pace, self.engine.revision());
        self.status.send_modify(|s| {
            s.mode = mode;
            s.tick = tick;
            s.pace = pace;
            s.revision = revision;
        });
    }

    fn finish(&mut self) -> Result<SessionOutcome> {
        let digest = match self.sink.writer.take() {
            Some(w) => w.finish()?,
            None => return Err(Error::Closed),
        };
        self.mode = Mode::Finished;
        self.publish_status();
        Ok(SessionOutcome {
            command_log: CommandLog {
                scenario: self.script.clone(),
                ticks: self.engine.tick(),
                commands: self.commands.clone(),
            },
            digest,
            summary: self.engine.summary(),
        })
    }
}

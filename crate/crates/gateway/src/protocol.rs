//! Wire protocol. Every websocket text frame carries one JSON object with a
//! `"type"` field. See `docs/protocol.md` for the field-by-field reference.

use ergoswarm_core::engine::MetricSample;
use ergoswarm_core::runlog::grid_to_base64;
use ergoswarm_core::scenario::Event;
use ergoswarm_core::spectral::GridDistribution;
use ergoswarm_core::target::Capability;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Largest grid side sent on the wire; bigger grids are downsampled.
pub const MAX_WIRE_SIDE: usize = 64;

/// A grid as `(width, height, base64(little-endian f32, row-major))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFrame {
    pub width: usize,
    pub height: usize,
    pub data: String,
}

impl GridFrame {
    pub fn encode(grid: &GridDistribution) -> Self {
        let g = if grid.width() > MAX_WIRE_SIDE || grid.height() > MAX_WIRE_SIDE {
            let w = grid.width().min(MAX_WIRE_SIDE);
            let h = grid.height().min(MAX_WIRE_SIDE);
            // resample only fails on a zero size, which cannot happen here
            grid.resample(w, h).unwrap_or_else(|_| grid.clone())
        } else {
            grid.clone()
        };
        Self {
            width: g.width(),
            height: g.height(),
            data: grid_to_base64(g.values()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Running,
    Paused,
    /// The scenario reached its last tick; snapshots still work.
    Finished,
}

/// What a client asked for.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientCommand {
    /// Anything that changes the world; forwarded to the engine.
    World(Event),
    Pause,
    Resume,
    SetPace(f64),
    Subscribe { decimation: Option<u64> },
}

/// A parsed client frame with its optional correlation id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientFrame {
    pub id: Option<u64>,
    pub command: ClientCommand,
}

/// Why a client frame was refused.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameError {
    pub id: Option<u64>,
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, not an object, or missing/ill-typed fields.
    Malformed,
    UnknownType,
    /// Well-formed but refused by the engine.
    Rejected,
    /// The session has run to its last tick.
    Finished,
    /// The engine thread is gone.
    SessionClosed,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetPace {
    pace: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Subscribe {
    #[serde(default)]
    decimation: Option<u64>,
}

const WORLD_TYPES: [&str; 6] = ["deploy_drawing", "deploy_mixture", "invert", "emp", "discover_ee", "discover_dd"];

/// Parse one text frame.
pub fn parse_client_frame(text: &str) -> Result<ClientFrame, FrameError> {
    let malformed = |id, message: String| FrameError {
        id,
        code: ErrorCode::Malformed,
        message,
    };
    let mut value: Value = serde_json::from_str(text).map_err(|e| malformed(None, format!("not JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| malformed(None, "frame must be a JSON object".into()))?;
    let id = match obj.remove("id") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or_else(|| malformed(None, "id: expected a nonnegative integer".into()))?),
    };
    let kind = match obj.get("type") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(malformed(id, "type: missing or not a string".into())),
    };
    let fields = |mut v: Value| {
        if let Some(o) = v.as_object_mut() {
            o.remove("type");
        }
        v
    };
    let bad = |e: serde_json::Error| malformed(id, format!("{kind}: {e}"));
    let command = match kind.as_str() {
        "pause" | "resume" => {
            if obj.len() > 1 {
                return Err(malformed(id, format!("{kind}: takes no fields")));
            }
            if kind == "pause" {
                ClientCommand::Pause
            } else {
                ClientCommand::Resume
            }
        }
        "set_pace" => {
            let p: SetPace = serde_json::from_value(fields(value)).map_err(bad)?;
            if !(p.pace.is_finite() && p.pace >= 0.0) {
                return Err(malformed(id, "set_pace.pace: must be finite and >= 0".into()));
            }
            ClientCommand::SetPace(p.pace)
        }
        "subscribe" => {
            let s: Subscribe = serde_json::from_value(fields(value)).map_err(bad)?;
            if s.decimation == Some(0) {
                return Err(malformed(id, "subscribe.decimation: must be at least 1".into()));
            }
            ClientCommand::Subscribe { decimation: s.decimation }
        }
        k if WORLD_TYPES.contains(&k) => ClientCommand::World(serde_json::from_value(value).map_err(bad)?),
        other => {
            return Err(FrameError {
                id,
                code: ErrorCode::UnknownType,
                message: format!("unknown message type {other:?}"),
            })
        }
    };
    Ok(ClientFrame { id, command })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub id: usize,
    pub position: [f64; 2],
    pub alive: bool,
    pub capability: Capability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub tick: u64,
    pub raw: f64,
    pub normalized: f64,
    pub revision: u64,
}

impl From<MetricSample> for MetricPoint {
    fn from(s: MetricSample) -> Self {
        Self {
            tick: s.tick,
            raw: s.raw,
            normalized: s.normalized,
            revision: s.revision,
        }
    }
}

/// Everything the server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Ack {
        id: Option<u64>,
        command: String,
        /// Engine tick when the frame was received.
        received_tick: u64,
        /// Tick boundary at which it took effect.
        applied_tick: u64,
        revision: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        note: Option<String>,
    },
    Error {
        id: Option<u64>,
        code: ErrorCode,
        message: String,
    },
    State {
        tick: u64,
        mode: Mode,
        agents: Vec<AgentView>,
        detections: usize,
    },
    Metric {
        tick: u64,
        raw: f64,
        normalized: f64,
        revision: u64,
    },
    TargetUpdated {
        tick: u64,
        revision: u64,
        grid: GridFrame,
    },
    EventLog {
        tick: u64,
        event: String,
        accepted: bool,
        revision: u64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        note: Option<String>,
    },
    Snapshot(Box<Snapshot>),
}

impl ServerFrame {
    pub fn error(e: FrameError) -> Self {
        ServerFrame::Error {
            id: e.id,
            code: e.code,
            message: e.message,
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("server frames always serialize")
    }

    /// The tick a frame refers to, for ordering checks. Errors carry none.
    pub fn tick(&self) -> Option<u64> {
        match self {
            ServerFrame::Ack { applied_tick, .. } => Some(*applied_tick),
            ServerFrame::Error { .. } => None,
            ServerFrame::State { tick, .. }
            | ServerFrame::Metric { tick, .. }
            | ServerFrame::TargetUpdated { tick, .. }
            | ServerFrame::EventLog { tick, .. } => Some(*tick),
            ServerFrame::Snapshot(s) => Some(s.tick),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub tick: u64,
    pub mode: Mode,
    pub pace: f64,
    pub decimation: u64,
    pub revision: u64,
    pub agents: Vec<AgentView>,
    pub target: GridFrame,
    pub reconstruction: GridFrame,
    /// Most recent samples, oldest first; at most [`HISTORY_TAIL`].
    pub metric_history: Vec<MetricPoint>,
}

pub const HISTORY_TAIL: usize = 500;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_world_events_with_ids() {
        let f = parse_client_frame(r#"{"type":"invert","id":4}"#).unwrap();
        assert_eq!(f.id, Some(4));
        assert_eq!(f.command, ClientCommand::World(Event::Invert));
        let f = parse_client_frame(r#"{"type":"emp","target":{"agents":[1,2]}}"#).unwrap();
        assert!(matches!(f.command, ClientCommand::World(Event::Emp { .. })));
    }

    #[test]
    fn session_controls() {
        assert_eq!(parse_client_frame(r#"{"type":"pause"}"#).unwrap().command, ClientCommand::Pause);
        assert_eq!(
            parse_client_frame(r#"{"type":"set_pace","pace":20}"#).unwrap().command,
            ClientCommand::SetPace(20.0)
        );
        assert_eq!(
            parse_client_frame(r#"{"type":"subscribe"}"#).unwrap().command,
            ClientCommand::Subscribe { decimation: None }
        );
    }

    #[test]
    fn errors_are_classified() {
        assert_eq!(parse_client_frame("{").unwrap_err().code, ErrorCode::Malformed);
        assert_eq!(parse_client_frame("[1]").unwrap_err().code, ErrorCode::Malformed);
        assert_eq!(parse_client_frame(r#"{"id":1}"#).unwrap_err().code, ErrorCode::Malformed);
        let e = parse_client_frame(r#"{"type":"warp","id":9}"#).unwrap_err();
        assert_eq!((e.code, e.id), (ErrorCode::UnknownType, Some(9)));
        let e = parse_client_frame(r#"{"type":"set_pace","pace":-1}"#).unwrap_err();
        assert_eq!(e.code, ErrorCode::Malformed);
        let e = parse_client_frame(r#"{"type":"discover_ee"}"#).unwrap_err();
        assert!(e.message.starts_with("discover_ee:"), "{}", e.message);
        assert_eq!(parse_client_frame(r#"{"type":"subscribe","decimation":0}"#).unwrap_err().code, ErrorCode::Malformed);
    }

    #[test]
    fn frames_round_trip() {
        let f = ServerFrame::Metric {
            tick: 3,
            raw: 0.5,
            normalized: 1.0,
            revision: 1,
        };
        let text = f.to_text();
        assert!(text.contains(r#""type":"metric""#));
        assert_eq!(serde_json::from_str::<ServerFrame>(&text).unwrap(), f);
    }

    #[test]
    fn large_grids_are_downsampled() {
        let g = GridDistribution::uniform(100, 80);
        let f = GridFrame::encode(&g);
        assert_eq!((f.width, f.height), (64, 64));
        let g = GridDistribution::uniform(10, 20);
        let f = GridFrame::encode(&g);
        assert_eq!((f.width, f.height), (10, 20));
        assert_eq!(ergoswarm_core::runlog::grid_from_base64(&f.data).unwrap().len(), 200);
    }
}

//! Line-delimited run logs and the analyses that read them back.
//!
//! Every line is one JSON object with a `type` field:
//!
//! | type        | fields |
//! |-------------|--------|
//! | `meta`      | `schema`, `scenario`, `seed`, `num_agents`, `dt`, `memory`, `q`, `coeffs_per_dim`, `grid`, `duration_ticks`, `capabilities`, `tags`, `phi` |
//! | `tick`      | `tick`, `raw`, `normalized`, `revision`, `paused`, `alive`, `positions`, `detections`, `net` |
//! | `event`     | `tick`, `event`, `accepted`, `revision`, `phi` (target changes only), `note` |
//! | `death`     | `tick`, `agent`, `cause` (`emp` or `fault`) |
//! | `detection` | `tick`, `tag_id`, `agent` |
//!
//! `positions` are `[x, y]` pairs snapped to multiples of 1e-6, so the text
//! form round-trips exactly. `phi` is the target coefficient vector the
//! metric is measured against from that point on.

use std::io::{BufRead, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scenario::GridSize;
use crate::spectral::{CoeffVector, GridDistribution, SpectralBasis};
use crate::swarmnet::{AgentId, NetStats};
use crate::target::Capability;

pub const LOG_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub schema: u32,
    pub scenario: String,
    pub seed: u64,
    pub num_agents: usize,
    pub dt: f64,
    pub memory: f64,
    pub q: f64,
    pub coeffs_per_dim: usize,
    pub grid: GridSize,
    pub duration_ticks: u64,
    pub capabilities: Vec<Capability>,
    pub tags: usize,
    pub phi: Vec<f64>,
}

/// One agent's `(tick, position)` samples.
pub type Trace = Vec<(u64, [f64; 2])>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub raw: f64,
    pub normalized: f64,
    pub revision: u64,
    /// Agents held still during the step that produced this sample.
    pub paused: bool,
    pub alive: Vec<bool>,
    pub positions: Vec<[f64; 2]>,
    /// Cumulative tag detections.
    pub detections: usize,
    pub net: NetStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: u64,
    pub event: String,
    pub accepted: bool,
    pub revision: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathCause {
    Emp,
    Fault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeathRecord {
    pub tick: u64,
    pub agent: AgentId,
    pub cause: DeathCause,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub tick: u64,
    pub tag_id: u32,
    pub agent: AgentId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Meta(MetaRecord),
    Tick(TickRecord),
    Event(EventRecord),
    Death(DeathRecord),
    Detection(DetectionRecord),
}

impl Record {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("bad log record: {e}")))
    }
}

/// Anything that accepts records as the engine produces them.
pub trait RecordSink {
    fn record(&mut self, r: &Record) -> Result<()>;
}

impl<F: FnMut(&Record) -> Result<()>> RecordSink for F {
    fn record(&mut self, r: &Record) -> Result<()> {
        self(r)
    }
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl RecordSink for NullSink {
    fn record(&mut self, _: &Record) -> Result<()> {
        Ok(())
    }
}

/// Streams records as JSON lines and keeps a running digest.
pub struct JsonlWriter<W: Write> {
    out: W,
    hasher: Sha256,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W) -> Self {
        Self {
            out,
            hasher: Sha256::new(),
        }
    }

    /// Flush and return the hex digest of everything written.
    pub fn finish(mut self) -> Result<String> {
        self.out.flush()?;
        Ok(hex(&self.hasher.finalize()))
    }
}

impl<W: Write> RecordSink for JsonlWriter<W> {
    fn record(&mut self, r: &Record) -> Result<()> {
        let mut line = r.to_line();
        line.push('\n');
        self.hasher.update(line.as_bytes());
        self.out.write_all(line.as_bytes())?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// An in-memory run log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<Record>,
}

impl RecordSink for RunLog {
    fn record(&mut self, r: &Record) -> Result<()> {
        self.records.push(r.clone());
        Ok(())
    }
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the JSONL text, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.to_line().as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(Record::from_line(line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(Record::from_line(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?);
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let f = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut w = JsonlWriter::new(std::io::BufWriter::new(f));
        for r in &self.records {
            w.record(r)?;
        }
        w.finish()
    }

    pub fn meta(&self) -> Result<&MetaRecord> {
        match self.records.first() {
            Some(Record::Meta(m)) => Ok(m),
            _ => Err(Error::Parse("log does not start with a meta record".into())),
        }
    }

    pub fn ticks(&self) -> impl Iterator<Item = &TickRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Tick(t) => Some(t),
            _ => None,
        })
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Event(e) => Some(e),
            _ => None,
        })
    }

    pub fn deaths(&self) -> impl Iterator<Item = &DeathRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Death(d) => Some(d),
            _ => None,
        })
    }

    pub fn detections(&self) -> impl Iterator<Item = &DetectionRecord> {
        self.records.iter().filter_map(|r| match r {
            Record::Detection(d) => Some(d),
            _ => None,
        })
    }

    /// `(tick, raw, normalized)` for every tick sample.
    pub fn metric_series(&self) -> Vec<(u64, f64, f64)> {
        self.ticks().map(|t| (t.tick, t.raw, t.normalized)).collect()
    }

    /// Per-agent `(tick, position)` traces, ending at the last tick each
    /// agent was alive.
    pub fn trajectories(&self) -> Result<Vec<Trace>> {
        let n = self.meta()?.num_agents;
        let mut out = vec![Vec::new(); n];
        for t in self.ticks() {
            for (i, trace) in out.iter_mut().enumerate() {
                if t.alive[i] {
                    trace.push((t.tick, t.positions[i]));
                }
            }
        }
        Ok(out)
    }

    /// Rebuild each agent's memory window from the logged positions at every
    /// tick, average over the living agents and measure against the logged
    /// target. Independent of the engine's incremental bookkeeping.
    pub fn recompute_metric(&self) -> Result<Vec<(u64, f64)>> {
        let mut out = Vec::new();
        self.replay_windows(|tick, basis, c, phi, q| {
            let raw = match c {
                Some(c) => basis.ergodic_metric(&c, phi, q)?,
                None => f64::NAN,
            };
            out.push((tick, raw));
            Ok(())
        })?;
        Ok(out)
    }

    /// Centralized coefficients of the living swarm at `tick`, reconstructed
    /// onto a `width x height` grid.
    pub fn reconstruction_at(&self, tick: u64, width: usize, height: usize) -> Result<GridDistribution> {
        let last = self.ticks().last().map(|t| t.tick);
        match last {
            Some(l) if tick <= l => {}
            _ => {
                return Err(Error::Range(format!(
                    "tick {tick} is past the end of the log ({})",
                    last.map_or("empty".to_string(), |l| format!("last tick {l}"))
                )))
            }
        }
        let mut found = None;
        self.replay_windows(|t, basis, c, _, _| {
            if t == tick {
                if let Some(c) = c {
                    found = Some(basis.reconstruct(&c, width, height)?);
                }
            }
            Ok(())
        })?;
        found.ok_or_else(|| Error::Range(format!("no living agents at tick {tick}")))
    }

    /// Walk the tick samples, handing `visit` the centralized coefficients
    /// of the living agents (from prefix sums over each agent's logged
    /// positions) and the target in force.
    fn replay_windows<F>(&self, mut visit: F) -> Result<()>
    where
        F: FnMut(u64, &SpectralBasis, Option<CoeffVector>, &CoeffVector, f64) -> Result<()>,
    {
        let meta = self.meta()?;
        let basis = SpectralBasis::unit_square(meta.coeffs_per_dim)?;
        let k = basis.len();
        let mut phi = basis.coeffs(meta.phi.clone())?;
        let capacity = ((meta.memory + 1e-9) / meta.dt).floor().max(1.0) as usize;
        // prefix[i][j*k..(j+1)*k] is the sum of F over agent i's first j samples.
        let mut prefix: Vec<Vec<f64>> = vec![vec![0.0; k]; meta.num_agents];
        let mut first = true;
        for r in &self.records {
            match r {
                Record::Event(e) => {
                    if let Some(p) = &e.phi {
                        phi = basis.coeffs(p.clone())?;
                    }
                }
                Record::Tick(t) => {
                    for (i, pre) in prefix.iter_mut().enumerate() {
                        if first || (t.alive[i] && !t.paused) {
                            let f = basis.eval_all(&t.positions[i]);
                            let base = pre.len() - k;
                            for (j, fk) in f.iter().enumerate() {
                                let v = pre[base + j] + fk;
                                pre.push(v);
                            }
                        }
                    }
                    first = false;
                    let windows: Vec<CoeffVector> = prefix
                        .iter()
                        .zip(&t.alive)
                        .filter(|(_, a)| **a)
                        .map(|(pre, _)| {
                            let count = pre.len() / k - 1;
                            let from = count.saturating_sub(capacity);
                            let n = (count - from) as f64;
                            let v = (0..k).map(|j| (pre[count * k + j] - pre[from * k + j]) / n).collect();
                            basis.coeffs(v)
                        })
                        .collect::<Result<_>>()?;
                    let c = if windows.is_empty() {
                        None
                    } else {
                        Some(CoeffVector::mean(windows.iter())?)
                    };
                    visit(t.tick, &basis, c, &phi, meta.q)?;
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Encode grid values as base64 of little-endian `f32`, row-major.
pub fn grid_to_base64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn grid_from_base64(text: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Parse(format!("grid is not base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!("grid payload of {} bytes is not whole f32s", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lines_round_trip() {
        let r = Record::Tick(TickRecord {
            tick: 3,
            raw: 0.125,
            normalized: 0.5,
            revision: 1,
            paused: false,
            alive: vec![true, false],
            positions: vec![[0.123456, 0.5], [0.999999, 0.000001]],
            detections: 2,
            net: NetStats {
                sent: 2,
                dropped: 1,
                delivered: 1,
            },
        });
        let line = r.to_line();
        assert!(line.starts_with(r#"{"type":"tick""#), "{line}");
        assert_eq!(Record::from_line(&line).unwrap(), r);
    }

    #[test]
    fn digest_matches_streamed_digest() {
        let log = RunLog {
            records: vec![
                Record::Death(DeathRecord {
                    tick: 1,
                    agent: 0,
                    cause: DeathCause::Emp,
                }),
                Record::Detection(DetectionRecord {
                    tick: 2,
                    tag_id: 7,
                    agent: 1,
                }),
            ],
        };
        let mut w = JsonlWriter::new(Vec::new());
        for r in &log.records {
            w.record(r).unwrap();
        }
        assert_eq!(w.finish().unwrap(), log.digest());
        assert_eq!(RunLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
    }

    #[test]
    fn f32_grid_codec() {
        let v = [0.0, 1.5, -2.25, 1e-3];
        let back = grid_from_base64(&grid_to_base64(&v)).unwrap();
        assert_eq!(back, vec![0.0f32, 1.5, -2.25, 1e-3]);
        // 1.5f32 little-endian is 00 00 c0 3f.
        assert_eq!(grid_to_base64(&[1.5]), "AADAPw==");
        assert!(grid_from_base64("AAA=").is_err());
    }

    #[test]
    fn bad_line_reports_line_number() {
        let err = RunLog::from_jsonl("{\"type\":\"death\",\"tick\":1,\"agent\":0,\"cause\":\"emp\"}\nnot json\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}

//! Scenario scripts: world setup plus a timed list of events.
//!
//! Scripts are JSON documents. Parsing goes through `serde_path_to_error`
//! so a bad field is reported by its path (`events[3].event.elements[0]`),
//! and [`ScenarioScript::validate`] adds semantic checks with the same path
//! style.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::agent::{ControllerConfig, DynamicsModel};
use crate::error::{Error, Result};
use crate::localplanner::{Circle, ObstacleMap};
use crate::swarmnet::{AgentId, NetworkModel};
use crate::target::{ComposeMode, DrawingGrid, GaussianElement, Mark};

pub const DEFAULT_TAG_RADIUS: f64 = 0.02;

fn default_name() -> String {
    "unnamed".into()
}

fn default_coeffs() -> usize {
    10
}

fn default_ee_weight() -> f64 {
    1.0
}

fn default_tag_radius() -> f64 {
    DEFAULT_TAG_RADIUS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSize {
    pub width: usize,
    pub height: usize,
}

impl Default for GridSize {
    fn default() -> Self {
        Self { width: 64, height: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Uniform over `[0.05, 0.95]^2`, rejecting obstacle interiors.
    #[default]
    UniformRandom,
    /// Evenly spaced along `x = 0.05`.
    LeftEdge,
    List { positions: Vec<[f64; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tag {
    pub id: u32,
    pub position: [f64; 2],
    #[serde(default = "default_tag_kind")]
    pub kind: String,
}

fn default_tag_kind() -> String {
    "april".into()
}

/// A shape painted onto a drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Disk { center: [f64; 2], radius: f64, mark: Mark },
    Ring { center: [f64; 2], inner: f64, outer: f64, mark: Mark },
    Rect { min: [f64; 2], max: [f64; 2], mark: Mark },
}

/// The ways a drawing can be written down in a script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DrawingSpec {
    /// Shapes painted in order onto a blank canvas; later shapes win.
    Shapes { width: usize, height: usize, shapes: Vec<Shape> },
    /// One string per row, top row last; `.` unmarked, `a` attraction,
    /// `r` repulsion.
    Rows { rows: Vec<String> },
    /// Base64 of one byte per cell (0, 1, 2), row-major. This is what the
    /// gateway receives and records.
    Codes { width: usize, height: usize, marks: String },
}

impl DrawingSpec {
    pub fn from_grid(d: &DrawingGrid) -> Self {
        let bytes: Vec<u8> = d.marks.iter().map(|m| *m as u8).collect();
        DrawingSpec::Codes {
            width: d.width,
            height: d.height,
            marks: B64.encode(bytes),
        }
    }

    pub fn to_grid(&self) -> Result<DrawingGrid> {
        let grid = match self {
            DrawingSpec::Shapes { width, height, shapes } => {
                if *width == 0 || *height == 0 {
                    return Err(Error::Contract("drawing must be at least 1x1".into()));
                }
                let mut d = DrawingGrid::blank(*width, *height);
                for s in shapes {
                    match *s {
                        Shape::Disk { center, radius, mark } => d.paint_disk(center, radius, mark),
                        Shape::Ring { center, inner, outer, mark } => d.paint_ring(center, inner, outer, mark),
                        Shape::Rect { min, max, mark } => d.paint_rect(min, max, mark),
                    }
                }
                d
            }
            DrawingSpec::Rows { rows } => {
                let height = rows.len();
                let width = rows.first().map_or(0, |r| r.chars().count());
                if width == 0 {
                    return Err(Error::Contract("drawing rows are empty".into()));
                }
                let mut d = DrawingGrid::blank(width, height);
                for (i, r) in rows.iter().enumerate() {
                    // Rows are written top-down; grid row 0 is the bottom.
                    let row = height - 1 - i;
                    if r.chars().count() != width {
                        return Err(Error::Shape(format!("row {i} has {} cells, expected {width}", r.chars().count())));
                    }
                    for (col, c) in r.chars().enumerate() {
                        let m = match c {
                            '.' => Mark::Unmarked,
                            'a' => Mark::Attraction,
                            'r' => Mark::Repulsion,
                            other => return Err(Error::Parse(format!("row {i}: unknown mark {other:?}"))),
                        };
                        d.set(col, row, m);
                    }
                }
                d
            }
            DrawingSpec::Codes { width, height, marks } => {
                let bytes = B64
                    .decode(marks)
                    .map_err(|e| Error::Parse(format!("marks are not base64: {e}")))?;
                let marks = bytes
                    .iter()
                    .map(|&b| Mark::from_code(b).ok_or_else(|| Error::Parse(format!("unknown mark code {b}"))))
                    .collect::<Result<Vec<_>>>()?;
                DrawingGrid {
                    width: *width,
                    height: *height,
                    marks,
                    brush_radius: 1.0,
                }
            }
        };
        grid.validate()?;
        Ok(grid)
    }
}

/// EMP footprint: everything inside a circle, or an explicit id list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EmpTarget {
    Region(Circle),
    Agents(Vec<AgentId>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    DeployDrawing {
        drawing: DrawingSpec,
        #[serde(default)]
        mode: ComposeMode,
    },
    DeployMixture {
        elements: Vec<GaussianElement>,
        #[serde(default)]
        mode: ComposeMode,
    },
    Invert,
    Emp {
        target: EmpTarget,
    },
    DiscoverEe {
        position: [f64; 2],
        #[serde(default = "default_ee_weight")]
        weight: f64,
    },
    DiscoverDd {
        position: [f64; 2],
        #[serde(default = "default_ee_weight")]
        weight: f64,
    },
    Pause,
    Resume,
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::DeployDrawing { .. } => "deploy_drawing",
            Event::DeployMixture { .. } => "deploy_mixture",
            Event::Invert => "invert",
            Event::Emp { .. } => "emp",
            Event::DiscoverEe { .. } => "discover_ee",
            Event::DiscoverDd { .. } => "discover_dd",
            Event::Pause => "pause",
            Event::Resume => "resume",
        }
    }

    /// True if applying this event can change what agents are tracking.
    pub fn changes_target(&self) -> bool {
        matches!(
            self,
            Event::DeployDrawing { .. }
                | Event::DeployMixture { .. }
                | Event::Invert
                | Event::DiscoverEe { .. }
                | Event::DiscoverDd { .. }
        )
    }

    pub fn validate(&self, num_agents: usize, path: &str) -> Vec<String> {
        let mut errs = Vec::new();
        let in_box = |p: [f64; 2]| p.iter().all(|c| (0.0..=1.0).contains(c));
        match self {
            Event::DeployDrawing { drawing, .. } => {
                if let Err(e) = drawing.to_grid() {
                    errs.push(format!("{path}.drawing: {e}"));
                }
            }
            Event::DeployMixture { elements, .. } => {
                if elements.is_empty() {
                    errs.push(format!("{path}.elements: need at least one element"));
                }
                for (i, e) in elements.iter().enumerate() {
                    if let Err(err) = e.validate() {
                        errs.push(format!("{path}.elements[{i}]: {err}"));
                    }
                }
            }
            Event::Emp { target } => match target {
                EmpTarget::Region(c) => {
                    if !(c.radius.is_finite() && c.radius > 0.0) {
                        errs.push(format!("{path}.target.region.radius: must be positive"));
                    }
                }
                EmpTarget::Agents(ids) => {
                    for (i, id) in ids.iter().enumerate() {
                        if *id >= num_agents {
                            errs.push(format!("{path}.target.agents[{i}]: no agent {id} in a swarm of {num_agents}"));
                        }
                    }
                }
            },
            Event::DiscoverEe { position, weight } | Event::DiscoverDd { position, weight } => {
                if !in_box(*position) {
                    errs.push(format!("{path}.position: outside the unit square"));
                }
                if !(weight.is_finite() && *weight > 0.0) {
                    errs.push(format!("{path}.weight: must be positive"));
                }
            }
            Event::Invert | Event::Pause | Event::Resume => {}
        }
        errs
    }

    pub(crate) fn discovered_element(&self) -> Option<GaussianElement> {
        match *self {
            Event::DiscoverEe { position, weight } => Some(GaussianElement::ee(position, weight)),
            Event::DiscoverDd { position, weight } => Some(GaussianElement::dd(position, weight)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedEvent {
    pub tick: u64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub num_agents: usize,
    pub duration_ticks: u64,
    #[serde(default)]
    pub dynamics: DynamicsModel,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default = "default_coeffs")]
    pub coeffs_per_dim: usize,
    #[serde(default)]
    pub grid: GridSize,
    #[serde(default)]
    pub network: NetworkModel,
    #[serde(default)]
    pub obstacles: ObstacleMap,
    #[serde(default)]
    pub placement: Placement,
    /// Agents that seek DDs instead of avoiding them.
    #[serde(default)]
    pub dd_blockers: Vec<AgentId>,
    /// Mass of discovered EEs relative to the operator's target.
    #[serde(default = "default_ee_weight")]
    pub ee_weight: f64,
    #[serde(default)]
    pub tags: Vec<Tag>,
    #[serde(default = "default_tag_radius")]
    pub tag_detect_radius: f64,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
}

impl ScenarioScript {
    /// A script with defaults everywhere and no events.
    pub fn new(seed: u64, num_agents: usize, duration_ticks: u64) -> Self {
        Self {
            name: default_name(),
            seed,
            num_agents,
            duration_ticks,
            dynamics: DynamicsModel::default(),
            controller: ControllerConfig::default(),
            coeffs_per_dim: default_coeffs(),
            grid: GridSize::default(),
            network: NetworkModel::default(),
            obstacles: ObstacleMap::default(),
            placement: Placement::default(),
            dd_blockers: Vec::new(),
            ee_weight: default_ee_weight(),
            tags: Vec::new(),
            tag_detect_radius: default_tag_radius(),
            events: Vec::new(),
        }
    }

    pub fn with_event(mut self, tick: u64, event: Event) -> Self {
        self.events.push(TimedEvent { tick, event });
        self
    }

    /// Parse JSON text. Syntax and type errors name the field path and the
    /// line/column; semantic errors come from [`validate`](Self::validate).
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let script: ScenarioScript = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Parse(format!("{path}: {inner}"))
        })?;
        Ok(script)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scripts always serialize")
    }

    /// Every problem found, each prefixed with its field path.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_agents == 0 {
            errs.push("num_agents: must be at least 1".into());
        }
        if self.coeffs_per_dim == 0 {
            errs.push("coeffs_per_dim: must be at least 1".into());
        }
        if self.grid.width == 0 || self.grid.height == 0 {
            errs.push("grid: width and height must be positive".into());
        }
        errs.extend(self.dynamics.validate("dynamics"));
        errs.extend(self.controller.validate("controller"));
        errs.extend(self.network.validate(self.num_agents, "network"));
        errs.extend(self.obstacles.validate("obstacles"));
        match &self.placement {
            Placement::List { positions } => {
                if positions.len() != self.num_agents {
                    errs.push(format!(
                        "placement.positions: {} positions for {} agents",
                        positions.len(),
                        self.num_agents
                    ));
                }
                for (i, p) in positions.iter().enumerate() {
                    if !p.iter().all(|c| (0.0..=1.0).contains(c)) {
                        errs.push(format!("placement.positions[{i}]: outside the unit square"));
                    } else if self.obstacles.contains(*p) {
                        errs.push(format!("placement.positions[{i}]: inside an obstacle"));
                    }
                }
            }
            Placement::LeftEdge => {
                for i in 0..self.num_agents {
                    if self.obstacles.contains(left_edge(i, self.num_agents)) {
                        errs.push(format!("placement: left-edge slot {i} is inside an obstacle"));
                    }
                }
            }
            Placement::UniformRandom => {}
        }
        for (i, id) in self.dd_blockers.iter().enumerate() {
            if *id >= self.num_agents {
                errs.push(format!("dd_blockers[{i}]: no agent {id}"));
            }
        }
        if !(self.ee_weight.is_finite() && self.ee_weight >= 0.0) {
            errs.push("ee_weight: must be nonnegative".into());
        }
        if !(self.tag_detect_radius.is_finite() && self.tag_detect_radius > 0.0) {
            errs.push("tag_detect_radius: must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, t) in self.tags.iter().enumerate() {
            if !seen.insert(t.id) {
                errs.push(format!("tags[{i}].id: duplicate tag id {}", t.id));
            }
            if !t.position.iter().all(|c| (0.0..=1.0).contains(c)) {
                errs.push(format!("tags[{i}].position: outside the unit square"));
            }
        }
        let mut last = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.tick < last {
                errs.push(format!("events[{i}].tick: ticks must be nondecreasing ({} after {last})", e.tick));
            }
            last = last.max(e.tick);
            errs.extend(e.event.validate(self.num_agents, &format!("events[{i}].event")));
        }
        errs
    }

    pub fn check(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub(crate) fn is_blocker(&self, id: AgentId) -> bool {
        self.dd_blockers.contains(&id)
    }
}

pub(crate) fn left_edge(i: usize, n: usize) -> [f64; 2] {
    [0.05, (i as f64 + 0.5) / n as f64]
}

//! Deterministic tick loop.
//!
//! One tick, from boundary `b` to `b + 1`:
//!
//! 1. events due at `b` are applied, scripted ones first, then live commands
//!    in arrival order;
//! 2. every living agent broadcasts its committed coefficients and the
//!    network delivers whatever is due into the inboxes;
//! 3. agents step, possibly in parallel, each reading only its own state,
//!    its inbox and the shared context;
//! 4. deaths and tag detections are committed and a tick sample is written.
//!
//! Step 3 is the only parallel phase and agents share nothing mutable in it,
//! so the log is bitwise identical with or without the thread pool.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, StepContext, StepReport};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::runlog::{
    DeathCause, DeathRecord, DetectionRecord, EventRecord, MetaRecord, Record, RecordSink, TickRecord, LOG_SCHEMA,
};
use crate::scenario::{left_edge, EmpTarget, Event, Placement, ScenarioScript, Tag};
use crate::spectral::{CoeffVector, GridDistribution, SpectralBasis};
use crate::swarmnet::{AgentId, Inbox, NetStats, Network};
use crate::target::{
    drawing_to_grid, heterogeneous_view, invert_grid, mixture_to_grid, multiply_grids, weighted_sum, Capability,
    ComposeMode, ElementKind, GaussianElement, TargetDistribution, TargetSource,
};

/// Positions are snapped to this lattice after every step.
pub const POSITION_QUANTUM: f64 = 1e-6;

/// Placement box for random starts.
const PLACEMENT_MIN: f64 = 0.05;
const PLACEMENT_MAX: f64 = 0.95;

/// The operator's target plus everything discovered since.
#[derive(Debug, Clone)]
struct TargetBook {
    user: GridDistribution,
    user_source: TargetSource,
    ees: Vec<GaussianElement>,
    dds: Vec<GaussianElement>,
    ee_weight: f64,
    revision: u64,
}

impl TargetBook {
    fn base(&self) -> Result<(GridDistribution, TargetSource)> {
        if self.ees.is_empty() {
            return Ok((self.user.clone(), self.user_source));
        }
        let ee = mixture_to_grid(&self.ees, self.user.width(), self.user.height())?;
        Ok((weighted_sum(&self.user, &ee, self.ee_weight)?, TargetSource::Composed))
    }
}

/// Targets handed to each capability class.
#[derive(Debug, Clone)]
struct Views {
    standard: Arc<TargetDistribution>,
    blocker: Arc<TargetDistribution>,
}

impl Views {
    fn build(basis: &SpectralBasis, book: &TargetBook) -> Result<Self> {
        let (grid, source) = book.base()?;
        let base = TargetDistribution::new(basis, grid, book.revision, source)?;
        let standard = heterogeneous_view(basis, &base, Capability::Standard, &book.dds)?;
        let blocker = heterogeneous_view(basis, &base, Capability::DdBlocker, &book.dds)?;
        Ok(Self {
            standard: Arc::new(standard),
            blocker: Arc::new(blocker),
        })
    }

    fn for_capability(&self, c: Capability) -> Arc<TargetDistribution> {
        match c {
            Capability::Standard => self.standard.clone(),
            Capability::DdBlocker => self.blocker.clone(),
        }
    }
}

/// Outcome of applying one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedEvent {
    pub tick: u64,
    pub event: String,
    pub accepted: bool,
    pub revision: u64,
    pub note: Option<String>,
    pub target_changed: bool,
}

/// One metric sample, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub tick: u64,
    pub raw: f64,
    pub normalized: f64,
    pub revision: u64,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub final_raw: f64,
    pub final_normalized: f64,
    pub detections: usize,
    pub deaths: usize,
    pub alive: usize,
    pub revision: u64,
}

pub struct Engine {
    script: ScenarioScript,
    basis: SpectralBasis,
    exec: Execution,
    network: Network,
    agents: Vec<AgentState>,
    inboxes: Vec<Inbox>,
    book: TargetBook,
    views: Views,
    detected: BTreeSet<u32>,
    detections: usize,
    deaths: usize,
    tick: u64,
    paused: bool,
    baseline: f64,
    last: Option<MetricSample>,
    next_event: usize,
    staleness: u64,
    started: bool,
}

impl Engine {
    pub fn new(script: ScenarioScript) -> Result<Self> {
        script.check()?;
        let basis = SpectralBasis::unit_square(script.coeffs_per_dim)?;
        let network = Network::new(script.network.clone(), script.num_agents, script.seed)?;
        let (w, h) = (script.grid.width, script.grid.height);
        let book = TargetBook {
            user: GridDistribution::uniform(w, h),
            user_source: TargetSource::Uniform,
            ees: Vec::new(),
            dds: Vec::new(),
            ee_weight: script.ee_weight,
            revision: 0,
        };
        let views = Views::build(&basis, &book)?;
        let positions = place(&script)?;
        let agents: Vec<AgentState> = positions
            .into_iter()
            .enumerate()
            .map(|(id, p)| {
                let cap = if script.is_blocker(id) {
                    Capability::DdBlocker
                } else {
                    Capability::Standard
                };
                AgentState::new(
                    id,
                    &basis,
                    &script.dynamics,
                    &script.controller,
                    p,
                    cap,
                    views.for_capability(cap),
                )
            })
            .collect();
        let staleness = script
            .network
            .staleness_limit_ticks
            .unwrap_or_else(|| (5.0 * script.controller.memory / script.controller.dt).round() as u64);
        let inboxes = vec![Inbox::new(); script.num_agents];
        let mut engine = Self {
            basis,
            exec: Execution::default(),
            network,
            agents,
            inboxes,
            book,
            views,
            detected: BTreeSet::new(),
            detections: 0,
            deaths: 0,
            tick: 0,
            paused: false,
            baseline: 1.0,
            last: None,
            next_event: 0,
            staleness,
            started: false,
            script,
        };
        engine.baseline = engine.raw_metric()?.max(f64::MIN_POSITIVE);
        Ok(engine)
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn revision(&self) -> u64 {
        self.book.revision
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn inboxes(&self) -> &[Inbox] {
        &self.inboxes
    }

    /// The target standard agents track; the metric is measured against it.
    pub fn standard_target(&self) -> &Arc<TargetDistribution> {
        &self.views.standard
    }

    pub fn last_sample(&self) -> Option<MetricSample> {
        self.last
    }

    pub fn detections(&self) -> usize {
        self.detections
    }

    /// Average of the living agents' own coefficients, in id order. `None`
    /// once every agent is dead.
    pub fn centralized_coeffs(&self) -> Result<Option<CoeffVector>> {
        let alive: Vec<&CoeffVector> = self.agents.iter().filter(|a| a.alive).map(|a| a.own_ck.as_ref()).collect();
        if alive.is_empty() {
            return Ok(None);
        }
        CoeffVector::mean(alive).map(Some)
    }

    fn raw_metric(&self) -> Result<f64> {
        match self.centralized_coeffs()? {
            Some(c) => self
                .basis
                .ergodic_metric(&c, self.views.standard.coeffs(), self.script.controller.q),
            None => Ok(self.last.map_or(0.0, |s| s.raw)),
        }
    }

    /// Write the meta record and the tick-0 sample. Idempotent.
    pub fn start(&mut self, sink: &mut dyn RecordSink) -> Result<()> {
        if self.started {
            return Ok(());
        }
        self.started = true;
        let s = &self.script;
        sink.record(&Record::Meta(MetaRecord {
            schema: LOG_SCHEMA,
            scenario: s.name.clone(),
            seed: s.seed,
            num_agents: s.num_agents,
            dt: s.controller.dt,
            memory: s.controller.memory,
            q: s.controller.q,
            coeffs_per_dim: s.coeffs_per_dim,
            grid: s.grid,
            duration_ticks: s.duration_ticks,
            capabilities: self.agents.iter().map(|a| a.capability).collect(),
            tags: s.tags.len(),
            phi: self.views.standard.coeffs().values().to_vec(),
        }))?;
        self.emit_sample(NetStats::default(), false, sink)
    }

    /// Apply everything due at the current boundary: scripted events, then
    /// `live` in order. Returns the outcome of each live event.
    pub fn boundary(&mut self, live: &[Event], sink: &mut dyn RecordSink) -> Result<Vec<AppliedEvent>> {
        self.start(sink)?;
        while let Some(te) = self.script.events.get(self.next_event) {
            if te.tick > self.tick {
                break;
            }
            let e = te.event.clone();
            self.next_event += 1;
            self.apply_event(&e, sink)?;
        }
        live.iter().map(|e| self.apply_event(e, sink)).collect()
    }

    /// Apply one event now and log it. A payload that cannot be turned into
    /// a target is rejected and logged as such; the world is left untouched.
    pub fn apply_event(&mut self, e: &Event, sink: &mut dyn RecordSink) -> Result<AppliedEvent> {
        let errs = e.validate(self.agents.len(), "event");
        let outcome = if errs.is_empty() {
            self.try_apply(e, sink)
        } else {
            Err(Error::Validation(errs))
        };
        let (accepted, note, changed) = match outcome {
            Ok((note, changed)) => (true, note, changed),
            Err(err) => (false, Some(format!("rejected: {err}")), false),
        };
        if changed {
            self.baseline = self.raw_metric()?.max(f64::MIN_POSITIVE);
        }
        let applied = AppliedEvent {
            tick: self.tick,
            event: e.name().to_string(),
            accepted,
            revision: self.book.revision,
            note: note.clone(),
            target_changed: changed,
        };
        sink.record(&Record::Event(EventRecord {
            tick: self.tick,
            event: applied.event.clone(),
            accepted,
            revision: self.book.revision,
            phi: changed.then(|| self.views.standard.coeffs().values().to_vec()),
            note,
        }))?;
        Ok(applied)
    }

    fn try_apply(&mut self, e: &Event, sink: &mut dyn RecordSink) -> Result<(Option<String>, bool)> {
        let (w, h) = (self.script.grid.width, self.script.grid.height);
        let mut book = self.book.clone();
        let mut note = None;
        match e {
            Event::DeployDrawing { drawing, mode } => {
                let d = drawing.to_grid()?;
                let seed = self.script.seed.wrapping_add(book.revision + 1);
                let mut g = drawing_to_grid(&d, seed)?;
                if (g.width(), g.height()) != (w, h) {
                    g = g.resample(w, h)?.normalize()?;
                }
                book.user = combine(&book.user, g, *mode)?;
                book.user_source = TargetSource::Drawing;
            }
            Event::DeployMixture { elements, mode } => {
                let g = mixture_to_grid(elements, w, h)?;
                book.user = combine(&book.user, g, *mode)?;
                book.user_source = TargetSource::Mixture;
            }
            Event::Invert => match invert_grid(&book.user) {
                Ok(g) => book.user = g,
                Err(Error::DegenerateTarget(_)) => {
                    tracing::warn!(tick = self.tick, "inverting a flat target; keeping it uniform");
                    note = Some("flat target has no complement; replaced by uniform".into());
                    book.user = GridDistribution::uniform(w, h);
                    book.user_source = TargetSource::Uniform;
                }
                Err(err) => return Err(err),
            },
            Event::DiscoverEe { .. } | Event::DiscoverDd { .. } => {
                let el = e.discovered_element().expect("discovery events carry an element");
                match el.kind {
                    ElementKind::Ee => book.ees.push(el),
                    ElementKind::Dd => book.dds.push(el),
                }
            }
            Event::Emp { target } => {
                let victims: Vec<AgentId> = self
                    .agents
                    .iter()
                    .filter(|a| a.alive)
                    .filter(|a| match target {
                        EmpTarget::Region(c) => {
                            let p = a.position();
                            (p[0] - c.center[0]).hypot(p[1] - c.center[1]) <= c.radius
                        }
                        EmpTarget::Agents(ids) => ids.contains(&a.id),
                    })
                    .map(|a| a.id)
                    .collect();
                for id in &victims {
                    self.kill(*id, DeathCause::Emp, sink)?;
                }
                return Ok((Some(format!("{} agents disabled", victims.len())), false));
            }
            Event::Pause => {
                self.paused = true;
                return Ok((None, false));
            }
            Event::Resume => {
                self.paused = false;
                return Ok((None, false));
            }
        }
        book.revision += 1;
        let views = Views::build(&self.basis, &book)?;
        for a in &mut self.agents {
            a.target = views.for_capability(a.capability);
        }
        self.book = book;
        self.views = views;
        Ok((note, true))
    }

    fn kill(&mut self, id: AgentId, cause: DeathCause, sink: &mut dyn RecordSink) -> Result<()> {
        self.agents[id].alive = false;
        self.network.purge_sender(id);
        for inbox in &mut self.inboxes {
            inbox.forget(id);
        }
        self.deaths += 1;
        sink.record(&Record::Death(DeathRecord {
            tick: self.tick,
            agent: id,
            cause,
        }))
    }

    /// Run one tick from the current boundary and write its records.
    pub fn advance(&mut self, sink: &mut dyn RecordSink) -> Result<MetricSample> {
        self.start(sink)?;
        let tick = self.tick;
        let mut net = NetStats::default();
        let mut faults = Vec::new();
        if !self.paused {
            let messages: Vec<_> = self.agents.iter().filter(|a| a.alive).map(|a| a.message(tick)).collect();
            let plan = self.network.broadcast(tick, &messages);
            net.sent = plan.attempted;
            net.dropped = plan.dropped;
            for d in self.network.deliver(tick) {
                if self.agents[d.receiver].alive && self.agents[d.message.sender].alive {
                    self.inboxes[d.receiver].receive(d.message);
                    net.delivered += 1;
                }
            }

            let ctx = StepContext {
                basis: &self.basis,
                model: &self.script.dynamics,
                config: &self.script.controller,
                obstacles: &self.script.obstacles,
                staleness_limit_ticks: self.staleness,
                tick,
                position_quantum: POSITION_QUANTUM,
            };
            let inboxes = &self.inboxes;
            let mut slots: Vec<(&mut AgentState, Option<Result<Option<StepReport>>>)> =
                self.agents.iter_mut().map(|a| (a, None)).collect();
            par::for_each_mut(self.exec, &mut slots, |i, (agent, out)| {
                *out = Some(agent.step(&ctx, &inboxes[i]));
            });
            for (agent, out) in slots {
                if let Some(Err(e)) = out {
                    tracing::warn!(agent = agent.id, tick, error = %e, "agent faulted");
                    faults.push(agent.id);
                }
            }
        }
        self.tick += 1;
        for id in faults {
            // The step already marked the agent dead.
            self.kill(id, DeathCause::Fault, sink)?;
        }
        self.detect_tags(sink)?;
        let paused = self.paused;
        self.emit_sample(net, paused, sink)?;
        Ok(self.last.expect("sample just emitted"))
    }

    /// Mark tags that a living agent is now close enough to see.
    fn detect_tags(&mut self, sink: &mut dyn RecordSink) -> Result<()> {
        let r = self.script.tag_detect_radius;
        let mut tags: Vec<&Tag> = self.script.tags.iter().filter(|t| !self.detected.contains(&t.id)).collect();
        tags.sort_by_key(|t| t.id);
        let mut found = Vec::new();
        for t in tags {
            let seer = self.agents.iter().filter(|a| a.alive).find(|a| {
                let p = a.position();
                (p[0] - t.position[0]).hypot(p[1] - t.position[1]) <= r
            });
            if let Some(a) = seer {
                found.push((t.id, a.id));
            }
        }
        for (tag_id, agent) in found {
            self.detected.insert(tag_id);
            self.detections += 1;
            sink.record(&Record::Detection(DetectionRecord {
                tick: self.tick,
                tag_id,
                agent,
            }))?;
        }
        Ok(())
    }

    fn emit_sample(&mut self, net: NetStats, paused: bool, sink: &mut dyn RecordSink) -> Result<()> {
        let raw = self.raw_metric()?;
        let sample = MetricSample {
            tick: self.tick,
            raw,
            normalized: raw / self.baseline,
            revision: self.book.revision,
            detections: self.detections,
        };
        self.last = Some(sample);
        sink.record(&Record::Tick(TickRecord {
            tick: self.tick,
            raw,
            normalized: sample.normalized,
            revision: sample.revision,
            paused,
            alive: self.agents.iter().map(|a| a.alive).collect(),
            positions: self.agents.iter().map(|a| a.position()).collect(),
            detections: self.detections,
            net,
        }))
    }

    pub fn summary(&self) -> RunSummary {
        let last = self.last.unwrap_or(MetricSample {
            tick: self.tick,
            raw: 0.0,
            normalized: 1.0,
            revision: self.book.revision,
            detections: self.detections,
        });
        RunSummary {
            scenario: self.script.name.clone(),
            seed: self.script.seed,
            ticks: self.tick,
            final_raw: last.raw,
            final_normalized: last.normalized,
            detections: self.detections,
            deaths: self.deaths,
            alive: self.agents.iter().filter(|a| a.alive).count(),
            revision: self.book.revision,
        }
    }

    /// Run the script to its last tick.
    pub fn run_to_end(&mut self, sink: &mut dyn RecordSink) -> Result<RunSummary> {
        self.start(sink)?;
        while self.tick < self.script.duration_ticks {
            self.boundary(&[], sink)?;
            self.advance(sink)?;
        }
        Ok(self.summary())
    }
}

fn combine(current: &GridDistribution, update: GridDistribution, mode: ComposeMode) -> Result<GridDistribution> {
    match mode {
        ComposeMode::Replace => Ok(update),
        ComposeMode::Multiply => multiply_grids(current, &update),
    }
}

fn quantize(p: [f64; 2]) -> [f64; 2] {
    p.map(|v| (v / POSITION_QUANTUM).round() * POSITION_QUANTUM)
}

/// Starting positions for every agent.
fn place(script: &ScenarioScript) -> Result<Vec<[f64; 2]>> {
    let n = script.num_agents;
    let positions: Vec<[f64; 2]> = match &script.placement {
        Placement::List { positions } => positions.clone(),
        Placement::LeftEdge => (0..n).map(|i| left_edge(i, n)).collect(),
        Placement::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
            rng.set_stream(1);
            let mut out = Vec::with_capacity(n);
            let mut tries = 0u32;
            while out.len() < n {
                tries += 1;
                if tries > 100_000 {
                    return Err(Error::Contract("could not place agents clear of obstacles".into()));
                }
                let p = [
                    rng.gen_range(PLACEMENT_MIN..PLACEMENT_MAX),
                    rng.gen_range(PLACEMENT_MIN..PLACEMENT_MAX),
                ];
                if !script.obstacles.contains(quantize(p)) {
                    out.push(p);
                }
            }
            out
        }
    };
    Ok(positions.into_iter().map(quantize).collect())
}

/// Run a script start to finish into `sink`.
pub fn run(script: &ScenarioScript, sink: &mut dyn RecordSink) -> Result<RunSummary> {
    Engine::new(script.clone())?.run_to_end(sink)
}

/// Run several independent scripts, in parallel when allowed. Each gets
/// its own in-memory log; results are in input order.
pub fn run_batch(
    scripts: &[ScenarioScript],
    exec: Execution,
) -> Vec<Result<(RunSummary, crate::runlog::RunLog)>> {
    par::map_slice(exec, scripts, |s| {
        let mut log = crate::runlog::RunLog::default();
        // Scripts already run side by side; keep each one on its own thread.
        let summary = Engine::new(s.clone())?
            .with_execution(Execution::Sequential)
            .run_to_end(&mut log)?;
        Ok((summary, log))
    })
}

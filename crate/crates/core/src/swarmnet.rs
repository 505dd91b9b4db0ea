//! Simulated lossy network for exchanging time-averaged coefficients, and
//! the consensus blend each agent runs over what it has received.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::CoeffVector;

pub type AgentId = usize;

/// One agent's broadcast of its own time-averaged coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CkMessage {
    pub sender: AgentId,
    /// Target revision the sender was tracking.
    pub revision: u64,
    pub ck: Arc<CoeffVector>,
    pub window_duration: f64,
    pub sent_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    #[default]
    FullBroadcast,
    /// Each agent talks to its two neighbors in id order.
    Ring,
    /// Static Erdos-Renyi graph drawn once from the network seed.
    RandomGraph { p: f64 },
}

/// Agents split into groups that cannot hear each other for `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub start: u64,
    pub end: u64,
    pub groups: Vec<Vec<AgentId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default)]
    pub latency_ticks: u64,
    #[serde(default)]
    pub partitions: Vec<Partition>,
    /// Defaults to the scenario seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Messages older than this are ignored by the blend. Defaults to
    /// `5 * memory / dt` ticks.
    #[serde(default)]
    pub staleness_limit_ticks: Option<u64>,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            topology: Topology::FullBroadcast,
            drop_probability: 0.0,
            latency_ticks: 0,
            partitions: Vec::new(),
            seed: None,
            staleness_limit_ticks: None,
        }
    }
}

impl NetworkModel {
    pub fn lossless() -> Self {
        Self::default()
    }

    /// Validation messages, each prefixed with its field path.
    pub fn validate(&self, num_agents: usize, path: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.drop_probability) {
            errs.push(format!("{path}.drop_probability: must be in [0, 1]"));
        }
        if let Topology::RandomGraph { p } = self.topology {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("{path}.topology.p: must be in [0, 1]"));
            }
        }
        for (i, part) in self.partitions.iter().enumerate() {
            let at = format!("{path}.partitions[{i}]");
            if part.end < part.start {
                errs.push(format!("{at}: end before start"));
            }
            let mut seen = BTreeSet::new();
            for id in part.groups.iter().flatten() {
                if *id >= num_agents {
                    errs.push(format!("{at}.groups: agent {id} does not exist"));
                } else if !seen.insert(*id) {
                    errs.push(format!("{at}.groups: agent {id} appears twice"));
                }
            }
            if seen.len() != num_agents && errs.is_empty() {
                errs.push(format!("{at}.groups: must cover all {num_agents} agents"));
            }
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
}

/// A message bound for one receiver at a given tick.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub receiver: AgentId,
    pub deliver_tick: u64,
    pub message: CkMessage,
}

/// Outcome of one broadcast round.
#[derive(Debug, Clone, Default)]
pub struct DeliveryPlan {
    pub deliveries: Vec<Delivery>,
    pub attempted: u64,
    pub dropped: u64,
}

/// Network state: link structure, pending in-flight messages and the drop
/// generator.
#[derive(Debug, Clone)]
pub struct Network {
    model: NetworkModel,
    num_agents: usize,
    adjacency: Vec<BTreeSet<AgentId>>,
    rng: ChaCha8Rng,
    pending: BTreeMap<u64, Vec<Delivery>>,
}

impl Network {
    pub fn new(model: NetworkModel, num_agents: usize, default_seed: u64) -> Result<Self> {
        let errs = model.validate(num_agents, "network");
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let seed = model.seed.unwrap_or(default_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adjacency = vec![BTreeSet::new(); num_agents];
        match model.topology {
            Topology::FullBroadcast => {
                for (i, adj) in adjacency.iter_mut().enumerate() {
                    adj.extend((0..num_agents).filter(|&j| j != i));
                }
            }
            Topology::Ring => {
                if num_agents > 1 {
                    for i in 0..num_agents {
                        let next = (i + 1) % num_agents;
                        adjacency[i].insert(next);
                        adjacency[next].insert(i);
                    }
                }
            }
            Topology::RandomGraph { p } => {
                for i in 0..num_agents {
                    for j in (i + 1)..num_agents {
                        if rng.gen_bool(p) {
                            adjacency[i].insert(j);
                            adjacency[j].insert(i);
                        }
                    }
                }
            }
        }
        Ok(Self {
            model,
            num_agents,
            adjacency,
            rng,
            pending: BTreeMap::new(),
        })
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn neighbors(&self, id: AgentId) -> impl Iterator<Item = AgentId> + '_ {
        self.adjacency[id].iter().copied()
    }

    fn partitioned(&self, tick: u64, a: AgentId, b: AgentId) -> bool {
        self.model.partitions.iter().any(|p| {
            tick >= p.start
                && tick < p.end
                && p.groups.iter().position(|g| g.contains(&a)) != p.groups.iter().position(|g| g.contains(&b))
        })
    }

    /// Plan deliveries for every message sent at `tick` and queue them.
    ///
    /// Links are visited in (sender, receiver) order and each surviving
    /// topology/partition check consumes one Bernoulli draw, so the plan is a
    /// pure function of the seed and the message sequence.
    pub fn broadcast(&mut self, tick: u64, messages: &[CkMessage]) -> DeliveryPlan {
        let mut plan = DeliveryPlan::default();
        let mut order: Vec<&CkMessage> = messages.iter().collect();
        order.sort_by_key(|m| m.sender);
        let p = self.model.drop_probability;
        for msg in order {
            if msg.sender >= self.num_agents {
                continue;
            }
            let receivers: Vec<AgentId> = self.adjacency[msg.sender].iter().copied().collect();
            for receiver in receivers {
                if self.partitioned(tick, msg.sender, receiver) {
                    continue;
                }
                plan.attempted += 1;
                let dropped = if p <= 0.0 {
                    false
                } else if p >= 1.0 {
                    true
                } else {
                    self.rng.gen_bool(p)
                };
                if dropped {
                    plan.dropped += 1;
                    continue;
                }
                plan.deliveries.push(Delivery {
                    receiver,
                    deliver_tick: tick + self.model.latency_ticks,
                    message: msg.clone(),
                });
            }
        }
        for d in &plan.deliveries {
            self.pending.entry(d.deliver_tick).or_default().push(d.clone());
        }
        plan
    }

    /// Remove and return everything due at or before `tick`.
    pub fn deliver(&mut self, tick: u64) -> Vec<Delivery> {
        let later = self.pending.split_off(&(tick + 1));
        let due = std::mem::replace(&mut self.pending, later);
        due.into_values().flatten().collect()
    }

    /// Forget in-flight messages from a sender (used when it dies).
    pub fn purge_sender(&mut self, sender: AgentId) {
        for v in self.pending.values_mut() {
            v.retain(|d| d.message.sender != sender);
        }
    }
}

/// Latest message per sender, as seen by one agent.
#[derive(Debug, Clone, Default)]
pub struct Inbox {
    latest: BTreeMap<AgentId, CkMessage>,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keep `msg` if it is at least as fresh as what we hold for its sender.
    pub fn receive(&mut self, msg: CkMessage) {
        match self.latest.get(&msg.sender) {
            Some(old) if old.sent_tick > msg.sent_tick => {}
            _ => {
                self.latest.insert(msg.sender, msg);
            }
        }
    }

    pub fn forget(&mut self, sender: AgentId) {
        self.latest.remove(&sender);
    }

    pub fn messages(&self) -> impl Iterator<Item = &CkMessage> {
        self.latest.values()
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }
}

/// Consensus estimate of the swarm's time-averaged coefficients.
///
/// Keeps the freshest message per sender not older than
/// `staleness_limit_ticks`, adds the agent's own vector and returns the
/// uniform average, summing in ascending sender id. With nothing usable in
/// the inbox this is just `own.ck`.
pub fn blend<'a, I>(own: &CkMessage, inbox: I, staleness_limit_ticks: u64, now_tick: u64) -> Result<CoeffVector>
where
    I: IntoIterator<Item = &'a CkMessage>,
{
    let mut freshest: BTreeMap<AgentId, &CkMessage> = BTreeMap::new();
    for m in inbox {
        if m.sender == own.sender || now_tick.saturating_sub(m.sent_tick) > staleness_limit_ticks {
            continue;
        }
        match freshest.get(&m.sender) {
            Some(old) if old.sent_tick >= m.sent_tick => {}
            _ => {
                freshest.insert(m.sender, m);
            }
        }
    }
    freshest.insert(own.sender, own);
    CoeffVector::mean(freshest.values().map(|m| m.ck.as_ref()))
}

//! Per-agent control stack: dynamics, receding-horizon ergodic controller
//! and the trajectory memory behind the agent's own coefficients.
//!
//! Every step the agent
//! 1. blends its own coefficients with whatever peers it has heard from,
//! 2. rolls the default policy forward over the horizon,
//! 3. integrates the costate backward from zero along that rollout,
//! 4. turns the costate at the current time into a control,
//! 5. hands the control to the local planner, and
//! 6. integrates one step and appends the new position to its memory.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localplanner::{self, ObstacleMap};
use crate::spectral::{CoeffVector, SpectralBasis};
use crate::swarmnet::{self, AgentId, CkMessage, Inbox};
use crate::target::{Capability, TargetDistribution};

/// Samples between full recomputations of the window sums, bounding
/// round-off drift from the incremental update.
const WINDOW_REFRESH_STEPS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsKind {
    /// State is position; control is velocity.
    #[default]
    SingleIntegrator,
    /// State is `[position, velocity]`; control is acceleration.
    DoubleIntegrator,
}

/// Control-affine dynamics `x' = g(x) + h(x) u` on the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsModel {
    #[serde(default)]
    pub kind: DynamicsKind,
    /// Per-channel control bound.
    #[serde(default = "default_u_max")]
    pub u_max: [f64; 2],
}

fn default_u_max() -> [f64; 2] {
    [0.5, 0.5]
}

impl Default for DynamicsModel {
    fn default() -> Self {
        Self {
            kind: DynamicsKind::SingleIntegrator,
            u_max: default_u_max(),
        }
    }
}

impl DynamicsModel {
    pub fn single_integrator(u_max: f64) -> Self {
        Self {
            kind: DynamicsKind::SingleIntegrator,
            u_max: [u_max, u_max],
        }
    }

    pub fn double_integrator(u_max: f64) -> Self {
        Self {
            kind: DynamicsKind::DoubleIntegrator,
            u_max: [u_max, u_max],
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            DynamicsKind::SingleIntegrator => 2,
            DynamicsKind::DoubleIntegrator => 4,
        }
    }

    pub fn control_dim(&self) -> usize {
        2
    }

    /// Indices of the state components that live in the exploration space.
    pub fn exploration_dims(&self) -> [usize; 2] {
        [0, 1]
    }

    /// Indices of the state components driven directly by the control.
    fn actuated_dims(&self) -> [usize; 2] {
        match self.kind {
            DynamicsKind::SingleIntegrator => [0, 1],
            DynamicsKind::DoubleIntegrator => [2, 3],
        }
    }

    pub fn validate(&self, path: &str) -> Vec<String> {
        if self.u_max.iter().all(|u| u.is_finite() && *u > 0.0) {
            Vec::new()
        } else {
            vec![format!("{path}.u_max: bounds must be positive")]
        }
    }

    pub fn saturate(&self, u: &[f64]) -> [f64; 2] {
        [
            u[0].clamp(-self.u_max[0], self.u_max[0]),
            u[1].clamp(-self.u_max[1], self.u_max[1]),
        ]
    }

    pub fn position(&self, x: &[f64]) -> [f64; 2] {
        [x[0], x[1]]
    }

    fn derivative(&self, x: &[f64], u: [f64; 2]) -> Vec<f64> {
        match self.kind {
            DynamicsKind::SingleIntegrator => vec![u[0], u[1]],
            DynamicsKind::DoubleIntegrator => vec![x[2], x[3], u[0], u[1]],
        }
    }

    /// `(df/dx)^T rho`.
    fn jacobian_transpose_times(&self, rho: &[f64]) -> Vec<f64> {
        match self.kind {
            DynamicsKind::SingleIntegrator => vec![0.0, 0.0],
            // d(position')/d(velocity) = I; everything else zero.
            DynamicsKind::DoubleIntegrator => vec![0.0, 0.0, rho[0], rho[1]],
        }
    }
}

/// One explicit Euler step with the control saturated first.
pub fn step_dynamics(model: &DynamicsModel, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
    if x.len() != model.state_dim() || u.len() != model.control_dim() {
        return Err(Error::Shape(format!(
            "state/control of length {}/{} for a model with {}/{}",
            x.len(),
            u.len(),
            model.state_dim(),
            model.control_dim()
        )));
    }
    let u = model.saturate(u);
    let f = model.derivative(x, u);
    let next: Vec<f64> = x.iter().zip(&f).map(|(xi, fi)| xi + fi * dt).collect();
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFault(format!("non-finite state {next:?}")));
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DefaultPolicy {
    #[default]
    Zero,
    HoldLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    /// Planning horizon in seconds.
    pub horizon: f64,
    pub dt: f64,
    /// How far back the agent remembers its own trajectory, in seconds.
    pub memory: f64,
    /// Scalar metric weight.
    pub q: f64,
    pub r_diag: [f64; 2],
    pub u_def: DefaultPolicy,
    pub barrier_weight: f64,
    pub barrier_margin: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            horizon: 1.5,
            dt: 0.1,
            memory: 40.0,
            q: 1.0,
            r_diag: [0.01, 0.01],
            u_def: DefaultPolicy::Zero,
            barrier_weight: 100.0,
            barrier_margin: 0.01,
        }
    }
}

impl ControllerConfig {
    /// Steps in the planning horizon, `round(T / dt)`.
    pub fn horizon_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// `T + memory`, the normalizing duration of the time average.
    pub fn t_total(&self) -> f64 {
        self.horizon + self.memory
    }

    pub fn validate(&self, path: &str) -> Vec<String> {
        let mut errs = Vec::new();
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.dt) {
            errs.push(format!("{path}.dt: must be positive"));
        }
        if !pos(self.horizon) {
            errs.push(format!("{path}.horizon: must be positive"));
        } else if self.horizon < self.dt {
            errs.push(format!("{path}.horizon: must be at least dt"));
        }
        if !pos(self.memory) {
            errs.push(format!("{path}.memory: must be positive"));
        }
        if !pos(self.q) {
            errs.push(format!("{path}.q: must be positive"));
        }
        if !self.r_diag.iter().all(|r| pos(*r)) {
            errs.push(format!("{path}.r_diag: entries must be positive"));
        }
        if !pos(self.barrier_weight) {
            errs.push(format!("{path}.barrier_weight: must be positive"));
        }
        if !(self.barrier_margin.is_finite() && self.barrier_margin >= 0.0 && self.barrier_margin < 0.5) {
            errs.push(format!("{path}.barrier_margin: must be in [0, 0.5)"));
        }
        errs
    }
}

/// Boundary barrier
/// `w * sum_i [max(0, x_i - (1 - m))^2 + max(0, m - x_i)^2]`
/// over the exploration coordinates.
pub fn barrier_cost(model: &DynamicsModel, x: &[f64], config: &ControllerConfig) -> f64 {
    let m = config.barrier_margin;
    model
        .exploration_dims()
        .iter()
        .map(|&i| {
            let hi = (x[i] - (1.0 - m)).max(0.0);
            let lo = (m - x[i]).max(0.0);
            hi * hi + lo * lo
        })
        .sum::<f64>()
        * config.barrier_weight
}

/// Gradient of [`barrier_cost`], in full state coordinates.
pub fn barrier_gradient(model: &DynamicsModel, x: &[f64], config: &ControllerConfig) -> Vec<f64> {
    let m = config.barrier_margin;
    let mut g = vec![0.0; x.len()];
    for &i in &model.exploration_dims() {
        let hi = (x[i] - (1.0 - m)).max(0.0);
        let lo = (m - x[i]).max(0.0);
        g[i] = 2.0 * config.barrier_weight * (hi - lo);
    }
    g
}

/// One rollout sample: the state and the control applied from it.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub state: Vec<f64>,
    pub control: [f64; 2],
}

fn default_control(config: &ControllerConfig, last_control: [f64; 2]) -> [f64; 2] {
    match config.u_def {
        DefaultPolicy::Zero => [0.0, 0.0],
        DefaultPolicy::HoldLast => last_control,
    }
}

/// Predict `H = round(T / dt)` steps under the default policy.
pub fn forward_rollout(
    model: &DynamicsModel,
    x0: &[f64],
    config: &ControllerConfig,
    last_control: [f64; 2],
) -> Result<Vec<RolloutStep>> {
    let steps = config.horizon_steps();
    if steps == 0 {
        return Err(Error::Contract("horizon shorter than one step".into()));
    }
    let u = model.saturate(&default_control(config, last_control));
    let mut out = Vec::with_capacity(steps);
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let next = step_dynamics(model, &x, &u, config.dt)?;
        out.push(RolloutStep { state: x, control: u });
        x = next;
    }
    Ok(out)
}

/// Costate samples along a rollout; `rho[H]` is the terminal zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    pub rho: Vec<Vec<f64>>,
}

impl CostateTrajectory {
    pub fn initial(&self) -> &[f64] {
        &self.rho[0]
    }
}

/// Per-coefficient weights `(2q / T_total) * Lambda_k * (c_k - phi_k)` of
/// the metric gradient.
fn metric_weights(basis: &SpectralBasis, c: &CoeffVector, phi: &CoeffVector, config: &ControllerConfig) -> Result<Vec<f64>> {
    if c.shape() != basis.shape() || phi.shape() != basis.shape() {
        return Err(Error::Contract("coefficient vectors do not match the basis".into()));
    }
    let scale = 2.0 * config.q / config.t_total();
    Ok(basis
        .lambda()
        .iter()
        .zip(c.values().iter().zip(phi.values()))
        .map(|(l, (ck, pk))| scale * l * (ck - pk))
        .collect())
}

/// Running-cost gradient at one rollout state: metric term mapped onto
/// the exploration coordinates plus the barrier.
fn source_term(model: &DynamicsModel, basis: &SpectralBasis, weights: &[f64], x: &[f64], config: &ControllerConfig) -> Vec<f64> {
    let mut s = barrier_gradient(model, x, config);
    let p = model.position(x);
    let g = basis.weighted_gradient(&p, weights);
    for (axis, &i) in model.exploration_dims().iter().enumerate() {
        s[i] += g[axis];
    }
    s
}

/// Integrate the costate backward from zero along `rollout`:
/// `rho_t = rho_{t+1} + dt * (source(x_t) + (df/dx)^T rho_{t+1})`.
///
/// This is exactly the gradient of [`horizon_cost`] with respect to the
/// initial state under the explicit Euler rollout.
pub fn costate_backward(
    basis: &SpectralBasis,
    model: &DynamicsModel,
    rollout: &[RolloutStep],
    blended_ck: &CoeffVector,
    phi: &CoeffVector,
    config: &ControllerConfig,
) -> Result<CostateTrajectory> {
    let weights = metric_weights(basis, blended_ck, phi, config)?;
    let n = model.state_dim();
    if rollout.iter().any(|s| s.state.len() != n) {
        return Err(Error::Contract("rollout state length does not match the model".into()));
    }
    let mut rho = vec![vec![0.0; n]; rollout.len() + 1];
    for t in (0..rollout.len()).rev() {
        let src = source_term(model, basis, &weights, &rollout[t].state, config);
        let prop = model.jacobian_transpose_times(&rho[t + 1]);
        rho[t] = (0..n)
            .map(|i| rho[t + 1][i] + config.dt * (src[i] + prop[i]))
            .collect();
    }
    Ok(CostateTrajectory { rho })
}

/// The cost functional whose gradient the costate carries: the metric
/// linearized about the blended coefficients plus the barrier, summed
/// over the rollout:
///
/// `J = sum_t dt * [ sum_k w_k F_k(x_t) + Phi(x_t) ]`,
/// `w_k = (2q / T_total) Lambda_k (c_k - phi_k)`.
pub fn horizon_cost(
    basis: &SpectralBasis,
    model: &DynamicsModel,
    rollout: &[RolloutStep],
    blended_ck: &CoeffVector,
    phi: &CoeffVector,
    config: &ControllerConfig,
) -> Result<f64> {
    let weights = metric_weights(basis, blended_ck, phi, config)?;
    Ok(rollout
        .iter()
        .map(|s| {
            let f = basis.eval_all(&model.position(&s.state));
            let m: f64 = f.iter().zip(&weights).map(|(a, b)| a * b).sum();
            config.dt * (m + barrier_cost(model, &s.state, config))
        })
        .sum())
}

/// `u = u_def - R^-1 h^T rho`, saturated per channel.
pub fn extract_control(model: &DynamicsModel, rho0: &[f64], config: &ControllerConfig, u_def: [f64; 2]) -> [f64; 2] {
    let act = model.actuated_dims();
    let raw = [
        u_def[0] - rho0[act[0]] / config.r_diag[0],
        u_def[1] - rho0[act[1]] / config.r_diag[1],
    ];
    model.saturate(&raw)
}

/// Ring buffer of recent positions with running coefficient sums.
#[derive(Debug, Clone)]
pub struct TrajectoryWindow {
    samples: VecDeque<([f64; 2], f64)>,
    sums: Vec<f64>,
    duration: f64,
    capacity: f64,
    since_refresh: usize,
}

impl TrajectoryWindow {
    /// Window seeded with a single sample.
    pub fn new(basis: &SpectralBasis, capacity: f64, first: [f64; 2], dt: f64) -> Self {
        let mut w = Self {
            samples: VecDeque::new(),
            sums: vec![0.0; basis.len()],
            duration: 0.0,
            capacity,
            since_refresh: 0,
        };
        w.push(basis, first, dt);
        w
    }

    /// Append a sample and evict the oldest until the covered duration is
    /// within capacity. Returns the change in the window's coefficients.
    pub fn push(&mut self, basis: &SpectralBasis, p: [f64; 2], dt: f64) -> Vec<f64> {
        let before = self.coeff_values();
        let f = basis.eval_all(&p);
        for (s, fk) in self.sums.iter_mut().zip(&f) {
            *s += fk * dt;
        }
        self.samples.push_back((p, dt));
        self.duration += dt;
        while self.samples.len() > 1 && self.duration > self.capacity + 1e-9 {
            let (old, odt) = self.samples.pop_front().expect("nonempty");
            let f = basis.eval_all(&old);
            for (s, fk) in self.sums.iter_mut().zip(&f) {
                *s -= fk * odt;
            }
            self.duration -= odt;
        }
        self.since_refresh += 1;
        if self.since_refresh >= WINDOW_REFRESH_STEPS {
            self.refresh(basis);
        }
        let after = self.coeff_values();
        if before.is_empty() {
            return after;
        }
        after.iter().zip(&before).map(|(a, b)| a - b).collect()
    }

    fn refresh(&mut self, basis: &SpectralBasis) {
        let mut sums = vec![0.0; basis.len()];
        let mut duration = 0.0;
        for (p, dt) in &self.samples {
            let f = basis.eval_all(p);
            for (s, fk) in sums.iter_mut().zip(&f) {
                *s += fk * dt;
            }
            duration += dt;
        }
        self.sums = sums;
        self.duration = duration;
        self.since_refresh = 0;
    }

    fn coeff_values(&self) -> Vec<f64> {
        if self.duration <= 0.0 {
            return Vec::new();
        }
        self.sums.iter().map(|s| s / self.duration).collect()
    }

    pub fn coeffs(&self, basis: &SpectralBasis) -> CoeffVector {
        basis.coeffs(self.coeff_values()).expect("window sums match basis")
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> impl Iterator<Item = &([f64; 2], f64)> {
        self.samples.iter()
    }
}

/// Shared, read-only inputs to every agent step within a tick.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub basis: &'a SpectralBasis,
    pub model: &'a DynamicsModel,
    pub config: &'a ControllerConfig,
    pub obstacles: &'a ObstacleMap,
    pub staleness_limit_ticks: u64,
    pub tick: u64,
    /// Positions are snapped to multiples of this after each step; 0 disables.
    pub position_quantum: f64,
}

/// What one agent did in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Control requested by the ergodic controller, saturated.
    pub ergodic_control: [f64; 2],
    /// Control after the local planner; the one actually applied.
    pub applied_control: [f64; 2],
    /// Change in the agent's own coefficients.
    pub ck_delta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub id: AgentId,
    pub state: Vec<f64>,
    pub alive: bool,
    pub capability: Capability,
    pub window: TrajectoryWindow,
    pub own_ck: Arc<CoeffVector>,
    pub consensus_ck: Arc<CoeffVector>,
    pub target: Arc<TargetDistribution>,
    pub last_control: [f64; 2],
}

impl AgentState {
    pub fn new(
        id: AgentId,
        basis: &SpectralBasis,
        model: &DynamicsModel,
        config: &ControllerConfig,
        position: [f64; 2],
        capability: Capability,
        target: Arc<TargetDistribution>,
    ) -> Self {
        let mut state = vec![0.0; model.state_dim()];
        state[0] = position[0];
        state[1] = position[1];
        let window = TrajectoryWindow::new(basis, config.memory, position, config.dt);
        let own = Arc::new(window.coeffs(basis));
        Self {
            id,
            state,
            alive: true,
            capability,
            window,
            consensus_ck: own.clone(),
            own_ck: own,
            target,
            last_control: [0.0, 0.0],
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }

    /// The message this agent would broadcast right now.
    pub fn message(&self, tick: u64) -> CkMessage {
        CkMessage {
            sender: self.id,
            revision: self.target.revision(),
            ck: self.own_ck.clone(),
            window_duration: self.window.duration(),
            sent_tick: tick,
        }
    }

    /// Advance one step. Reads only this agent's state, its inbox and the
    /// shared context. A dead agent is left untouched and returns `None`.
    ///
    /// A numerical fault marks the agent dead and is returned as an error.
    pub fn step(&mut self, ctx: &StepContext<'_>, inbox: &Inbox) -> Result<Option<StepReport>> {
        if !self.alive {
            return Ok(None);
        }
        let result = self.try_step(ctx, inbox);
        if result.is_err() {
            self.alive = false;
        }
        result.map(Some)
    }

    fn try_step(&mut self, ctx: &StepContext<'_>, inbox: &Inbox) -> Result<StepReport> {
        let (basis, model, config) = (ctx.basis, ctx.model, ctx.config);
        let own = self.message(ctx.tick);
        let blended = swarmnet::blend(&own, inbox.messages(), ctx.staleness_limit_ticks, ctx.tick)?;

        let rollout = forward_rollout(model, &self.state, config, self.last_control)?;
        let costate = costate_backward(basis, model, &rollout, &blended, self.target.coeffs(), config)?;
        let u_def = model.saturate(&default_control(config, self.last_control));
        let ergodic = extract_control(model, costate.initial(), config, u_def);

        let pos = self.position();
        let applied = match model.kind {
            DynamicsKind::SingleIntegrator => {
                localplanner::adjust_control(pos, ergodic, ctx.obstacles, config.dt, model.u_max)
            }
            DynamicsKind::DoubleIntegrator => {
                // Plan on the velocity the acceleration would produce, then
                // map back to an acceleration.
                let v = [self.state[2], self.state[3]];
                let v_next = [v[0] + ergodic[0] * config.dt, v[1] + ergodic[1] * config.dt];
                let big = [f64::MAX, f64::MAX];
                let safe = localplanner::adjust_control(pos, v_next, ctx.obstacles, config.dt, big);
                model.saturate(&[(safe[0] - v[0]) / config.dt, (safe[1] - v[1]) / config.dt])
            }
        };

        let mut next = step_dynamics(model, &self.state, &applied, config.dt)?;
        if ctx.position_quantum > 0.0 {
            for v in &mut next[..2] {
                *v = (*v / ctx.position_quantum).round() * ctx.position_quantum;
            }
        }
        if ctx.obstacles.contains([next[0], next[1]]) {
            // Only reachable for second-order dynamics: stop short.
            next = self.state.clone();
            if model.kind == DynamicsKind::DoubleIntegrator {
                next[2] = 0.0;
                next[3] = 0.0;
            }
        }
        self.state = next;
        self.last_control = applied;
        let delta = self.window.push(basis, self.position(), config.dt);
        self.own_ck = Arc::new(self.window.coeffs(basis));
        self.consensus_ck = Arc::new(blended);
        Ok(StepReport {
            ergodic_control: ergodic,
            applied_control: applied,
            ck_delta: delta,
        })
    }
}

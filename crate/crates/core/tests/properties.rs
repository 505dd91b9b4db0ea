//! Whole-system properties: symmetry, lossy consensus, obstacle safety and
//! reachability behind obstacles.

use std::path::PathBuf;
use std::sync::Arc;

use ergoswarm_core::agent::{AgentState, ControllerConfig, DynamicsModel, StepContext};
use ergoswarm_core::engine::Engine;
use ergoswarm_core::localplanner::ObstacleMap;
use ergoswarm_core::runlog::NullSink;
use ergoswarm_core::scenario::ScenarioScript;
use ergoswarm_core::spectral::SpectralBasis;
use ergoswarm_core::swarmnet::Inbox;
use ergoswarm_core::target::{mixture_to_grid, Capability, GaussianElement, TargetDistribution, TargetSource};

fn scenario(name: &str) -> ScenarioScript {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"));
    ScenarioScript::from_path(&path).unwrap()
}

#[test]
fn mirrored_start_gives_mirrored_trajectories() {
    let basis = SpectralBasis::unit_square(10).unwrap();
    let model = DynamicsModel::default();
    let config = ControllerConfig::default();
    let grid = mixture_to_grid(&[GaussianElement::ee([0.25, 0.6], 1.0), GaussianElement::ee([0.75, 0.6], 1.0)], 64, 64).unwrap();
    let target = Arc::new(TargetDistribution::new(&basis, grid, 1, TargetSource::Mixture).unwrap());
    let mut agents = [
        AgentState::new(0, &basis, &model, &config, [0.3, 0.4], Capability::Standard, target.clone()),
        AgentState::new(1, &basis, &model, &config, [0.7, 0.4], Capability::Standard, target),
    ];
    let obstacles = ObstacleMap::default();
    for tick in 0..300 {
        let ctx = StepContext {
            basis: &basis,
            model: &model,
            config: &config,
            obstacles: &obstacles,
            staleness_limit_ticks: 2000,
            tick,
            position_quantum: 0.0,
        };
        let msgs = [agents[0].message(tick), agents[1].message(tick)];
        for (i, a) in agents.iter_mut().enumerate() {
            let mut inbox = Inbox::new();
            inbox.receive(msgs[1 - i].clone());
            a.step(&ctx, &inbox).unwrap();
        }
        let (p, q) = (agents[0].position(), agents[1].position());
        assert!((p[0] - (1.0 - q[0])).abs() < 1e-6, "tick {tick}: {p:?} vs {q:?}");
        assert!((p[1] - q[1]).abs() < 1e-6, "tick {tick}: {p:?} vs {q:?}");
    }
}

/// Per tick, the worst sup-norm gap between any living agent's blend and
/// the centralized average of the coefficients it was blending.
fn mean_consensus_gap(seed: u64, drop: f64, ticks: u64) -> f64 {
    let mut s = scenario("multimodal");
    s.seed = seed;
    s.duration_ticks = ticks;
    s.network.drop_probability = drop;
    let mut engine = Engine::new(s).unwrap();
    let mut sink = NullSink;
    engine.start(&mut sink).unwrap();
    let mut total = 0.0;
    for _ in 0..ticks {
        engine.boundary(&[], &mut sink).unwrap();
        let central = engine.centralized_coeffs().unwrap().unwrap();
        engine.advance(&mut sink).unwrap();
        total += engine
            .agents()
            .iter()
            .filter(|a| a.alive)
            .map(|a| a.consensus_ck.sup_distance(&central).unwrap())
            .fold(0.0, f64::max);
    }
    total / ticks as f64
}

#[test]
fn consensus_gap_is_bounded_and_grows_with_loss() {
    let drops = [0.1, 0.3, 0.5];
    let gaps: Vec<Vec<f64>> = (0..20u64)
        .map(|seed| drops.iter().map(|&d| mean_consensus_gap(100 + seed, d, 200)).collect())
        .collect();
    for g in &gaps {
        assert!(g.iter().all(|x| x.is_finite() && *x < 0.5), "{g:?}");
    }
    let mean = |j: usize| gaps.iter().map(|g| g[j]).sum::<f64>() / gaps.len() as f64;
    assert!(mean(0) < mean(1) && mean(1) < mean(2), "{} {} {}", mean(0), mean(1), mean(2));
    let ordered = gaps.iter().filter(|g| g[0] < g[2]).count();
    assert!(ordered >= 16, "only {ordered}/20 seeds ordered");
    assert_eq!(mean_consensus_gap(7, 0.0, 50), 0.0);
}

#[derive(Debug, PartialEq)]
enum Reach {
    Entered(u64),
    NotWithin(u64),
}

/// Step a single-agent scenario until agent 0 is within `radius` of
/// `center` or `budget` ticks pass.
fn eventually_reaches(mut script: ScenarioScript, center: [f64; 2], radius: f64, budget: u64) -> Reach {
    script.duration_ticks = budget;
    let mut engine = Engine::new(script).unwrap();
    let mut sink = NullSink;
    engine.start(&mut sink).unwrap();
    while engine.tick() < budget {
        engine.boundary(&[], &mut sink).unwrap();
        engine.advance(&mut sink).unwrap();
        let p = engine.agents()[0].position();
        if (p[0] - center[0]).hypot(p[1] - center[1]) <= radius {
            return Reach::Entered(engine.tick());
        }
    }
    Reach::NotWithin(budget)
}

#[test]
fn open_field_target_is_reached() {
    let r = eventually_reaches(scenario("obstacle_none"), [0.8, 0.5], 0.05, 1000);
    assert!(matches!(r, Reach::Entered(_)), "{r:?}");
}

#[test]
fn target_behind_an_arc_is_reached() {
    let r = eventually_reaches(scenario("obstacle_arc"), [0.8, 0.5], 0.05, 5000);
    assert!(matches!(r, Reach::Entered(_)), "{r:?}");
}

#[test]
fn enclosed_target_is_reported_unreachable() {
    let r = eventually_reaches(scenario("obstacle_ring"), [0.8, 0.5], 0.05, 3000);
    assert_eq!(r, Reach::NotWithin(3000));
}

#[test]
fn no_agent_ever_inside_an_obstacle() {
    for name in ["obstacle_arc", "obstacle_ring"] {
        let mut s = scenario(name);
        s.num_agents = 6;
        s.placement = Default::default();
        s.duration_ticks = 1500;
        let obstacles = s.obstacles.clone();
        let mut engine = Engine::new(s).unwrap();
        let mut sink = NullSink;
        engine.start(&mut sink).unwrap();
        while engine.tick() < 1500 {
            engine.boundary(&[], &mut sink).unwrap();
            engine.advance(&mut sink).unwrap();
            for a in engine.agents().iter().filter(|a| a.alive) {
                assert!(!obstacles.contains(a.position()), "{name} tick {}: {:?}", engine.tick(), a.position());
            }
        }
    }
}

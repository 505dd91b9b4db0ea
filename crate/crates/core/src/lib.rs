//! Decentralized ergodic coverage for robot swarms.
//!
//! An operator describes *where the swarm should spend its time* as a
//! spatial distribution over the unit square. Each agent projects that
//! distribution onto a cosine basis, keeps a time-averaged record of where
//! it has been in the same basis, exchanges those coefficients with its
//! peers over a lossy network, and steers to shrink the weighted gap
//! between the two (the ergodic metric) with a receding-horizon costate
//! controller. Nothing in the per-agent computation depends on the swarm
//! size.
//!
//! Modules:
//! - [`spectral`]: basis, projections and the ergodic metric.
//! - [`target`]: targets from drawings and EE/DD mixtures.
//! - [`agent`]: dynamics and the receding-horizon controller.
//! - [`swarmnet`]: lossy coefficient exchange and consensus blending.
//! - [`localplanner`]: post-controller obstacle avoidance.
//! - [`scenario`]: scenario scripts and events.
//! - [`engine`]: deterministic tick loop, events and metrics.
//! - [`runlog`]: line-delimited run logs and post-hoc analysis.

pub mod agent;
pub mod engine;
pub mod error;
pub mod localplanner;
pub mod par;
pub mod runlog;
pub mod scenario;
pub mod spectral;
pub mod swarmnet;
pub mod target;

pub use error::{Error, Result};
pub use par::Execution;

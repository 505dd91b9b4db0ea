//! Safety layer applied after the ergodic controller: velocity limits and
//! circular-obstacle avoidance by tangent deflection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleMap {
    #[serde(default)]
    pub circles: Vec<Circle>,
    #[serde(default = "default_inflation")]
    pub inflation: f64,
}

fn default_inflation() -> f64 {
    0.01
}

impl Default for ObstacleMap {
    fn default() -> Self {
        Self {
            circles: Vec::new(),
            inflation: default_inflation(),
        }
    }
}

impl ObstacleMap {
    pub fn new(circles: Vec<Circle>, inflation: f64) -> Result<Self> {
        let map = Self { circles, inflation };
        let errs = map.validate("obstacles");
        if errs.is_empty() {
            Ok(map)
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn validate(&self, path: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.inflation.is_finite() && self.inflation >= 0.0) {
            errs.push(format!("{path}.inflation: must be nonnegative"));
        }
        for (i, c) in self.circles.iter().enumerate() {
            if !(c.radius.is_finite() && c.radius > 0.0) {
                errs.push(format!("{path}.circles[{i}].radius: must be positive"));
            }
        }
        errs
    }

    pub fn is_empty(&self) -> bool {
        self.circles.is_empty()
    }

    /// True if `p` is strictly inside any inflated circle.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.circles
            .iter()
            .any(|c| dist(p, c.center) < c.radius + self.inflation)
    }

    /// Nearest inflated circle that `p` is strictly inside, by signed
    /// penetration depth.
    fn deepest_containing(&self, p: [f64; 2]) -> Option<&Circle> {
        self.circles
            .iter()
            .filter(|c| dist(p, c.center) < c.radius + self.inflation)
            .min_by(|a, b| {
                let da = dist(p, a.center) - a.radius;
                let db = dist(p, b.center) - b.radius;
                da.total_cmp(&db)
            })
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_per_channel(u: [f64; 2], u_max: [f64; 2]) -> [f64; 2] {
    [u[0].clamp(-u_max[0], u_max[0]), u[1].clamp(-u_max[1], u_max[1])]
}

/// A pluggable post-controller planner.
pub trait LocalPlanner: Send + Sync {
    fn adjust_control(&self, x: [f64; 2], u: [f64; 2], obstacles: &ObstacleMap, dt: f64, u_max: [f64; 2]) -> [f64; 2];
}

/// Deflect along the tangent of the first circle the straight step would
/// enter; stop if no tangent is safe.
#[derive(Debug, Clone, Copy, Default)]
pub struct TangentPlanner;

impl LocalPlanner for TangentPlanner {
    fn adjust_control(&self, x: [f64; 2], u: [f64; 2], obstacles: &ObstacleMap, dt: f64, u_max: [f64; 2]) -> [f64; 2] {
        adjust_control(x, u, obstacles, dt, u_max)
    }
}

/// Make `u` safe for one step of length `dt` from `x`.
///
/// The result is saturated per channel and never carries `x` strictly inside
/// an inflated circle. If `x` is already inside one (a circle spawned on the
/// agent), the result is the outward radial escape at full speed.
pub fn adjust_control(x: [f64; 2], u: [f64; 2], obstacles: &ObstacleMap, dt: f64, u_max: [f64; 2]) -> [f64; 2] {
    let u = clamp_per_channel(u, u_max);
    if obstacles.is_empty() {
        return u;
    }
    if let Some(c) = obstacles.deepest_containing(x) {
        let (mut nx, mut ny) = (x[0] - c.center[0], x[1] - c.center[1]);
        let n = nx.hypot(ny);
        if n > 0.0 {
            nx /= n;
            ny /= n;
        } else {
            (nx, ny) = (1.0, 0.0);
        }
        return clamp_per_channel([nx * u_max[0], ny * u_max[1]], u_max);
    }
    let step = |v: [f64; 2]| [x[0] + v[0] * dt, x[1] + v[1] * dt];
    let next = step(u);
    let Some(hit) = obstacles
        .circles
        .iter()
        .filter(|c| dist(next, c.center) < c.radius + obstacles.inflation)
        .min_by(|a, b| (dist(x, a.center) - a.radius).total_cmp(&(dist(x, b.center) - b.radius)))
    else {
        return u;
    };

    let (rx, ry) = (x[0] - hit.center[0], x[1] - hit.center[1]);
    let rn = rx.hypot(ry);
    let (rx, ry) = (rx / rn, ry / rn);
    let ccw = [-ry, rx];
    let cw = [ry, -rx];
    let speed = u[0].hypot(u[1]).min(u_max[0].min(u_max[1]));
    let dot = |t: [f64; 2]| t[0] * u[0] + t[1] * u[1];
    let (first, second) = if dot(cw) > dot(ccw) { (cw, ccw) } else { (ccw, cw) };
    for t in [first, second] {
        // |t| = 1 and speed <= min(u_max), so per-channel clamping is a no-op
        // and the direction is exact.
        let v = [t[0] * speed, t[1] * speed];
        if !obstacles.contains(step(v)) {
            return v;
        }
    }
    [0.0, 0.0]
}

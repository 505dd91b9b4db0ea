//! Target distributions built from operator drawings and from EE/DD
//! Gaussian mixtures, plus the rules for combining them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{CoeffVector, GridDistribution, SpectralBasis};

/// Noise ceiling for cells the operator did not draw on.
pub const NOISE_CEILING: f64 = 0.001;
/// Raw value of undrawn cells when both attraction and repulsion are present.
pub const MEDIUM_CONTENT: f64 = 0.5;
/// Default diagonal covariance of EE/DD bumps.
pub const DEFAULT_SIGMA: [f64; 2] = [0.01, 0.01];

/// Minimum product mass accepted by [`compose`] in multiply mode.
const MIN_PRODUCT_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Mark {
    Unmarked = 0,
    Attraction = 1,
    Repulsion = 2,
}

impl Mark {
    pub fn from_code(code: u8) -> Option<Mark> {
        match code {
            0 => Some(Mark::Unmarked),
            1 => Some(Mark::Attraction),
            2 => Some(Mark::Repulsion),
            _ => None,
        }
    }
}

/// A rasterized operator drawing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawingGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major, rows along `y`.
    pub marks: Vec<Mark>,
    /// Brush radius in cell units. Informational; strokes arrive rasterized.
    #[serde(default = "default_brush")]
    pub brush_radius: f64,
}

fn default_brush() -> f64 {
    1.0
}

impl DrawingGrid {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            marks: vec![Mark::Unmarked; width * height],
            brush_radius: default_brush(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Contract("drawing dimensions must be positive".into()));
        }
        if self.marks.len() != self.width * self.height {
            return Err(Error::Shape(format!(
                "{}x{} drawing needs {} marks, got {}",
                self.width,
                self.height,
                self.width * self.height,
                self.marks.len()
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, col: usize, row: usize, mark: Mark) {
        self.marks[row * self.width + col] = mark;
    }

    /// Mark every cell whose center lies inside the disk. Later paints win.
    pub fn paint_disk(&mut self, center: [f64; 2], radius: f64, mark: Mark) {
        self.paint_where(mark, |p| dist(p, center) <= radius);
    }

    /// Mark every cell whose center lies in the annulus `inner <= r <= outer`.
    pub fn paint_ring(&mut self, center: [f64; 2], inner: f64, outer: f64, mark: Mark) {
        self.paint_where(mark, |p| {
            let d = dist(p, center);
            d >= inner && d <= outer
        });
    }

    pub fn paint_rect(&mut self, min: [f64; 2], max: [f64; 2], mark: Mark) {
        self.paint_where(mark, |p| {
            p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1]
        });
    }

    fn paint_where(&mut self, mark: Mark, inside: impl Fn([f64; 2]) -> bool) {
        for row in 0..self.height {
            for col in 0..self.width {
                let p = [
                    (col as f64 + 0.5) / self.width as f64,
                    (row as f64 + 0.5) / self.height as f64,
                ];
                if inside(p) {
                    self.marks[row * self.width + col] = mark;
                }
            }
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    /// Easter egg: attraction bump.
    Ee,
    /// Disabling device: repulsion well.
    Dd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianElement {
    pub kind: ElementKind,
    pub center: [f64; 2],
    #[serde(default = "default_weight")]
    pub weight: f64,
    /// Diagonal of the covariance.
    #[serde(default = "default_sigma")]
    pub sigma: [f64; 2],
}

fn default_weight() -> f64 {
    1.0
}

fn default_sigma() -> [f64; 2] {
    DEFAULT_SIGMA
}

impl GaussianElement {
    pub fn ee(center: [f64; 2], weight: f64) -> Self {
        Self {
            kind: ElementKind::Ee,
            center,
            weight,
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn dd(center: [f64; 2], weight: f64) -> Self {
        Self {
            kind: ElementKind::Dd,
            center,
            weight,
            sigma: DEFAULT_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(Error::Contract(format!("element weight must be positive, got {}", self.weight)));
        }
        if self.sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Contract("element sigma entries must be positive".into()));
        }
        if self.center.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Contract(format!("element center {:?} outside unit box", self.center)));
        }
        Ok(())
    }

    /// `exp(-0.5 * ||p - center||^2_{Sigma^-1})`.
    fn bump(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        (-0.5 * (dx * dx / self.sigma[0] + dy * dy / self.sigma[1])).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    Uniform,
    Drawing,
    Mixture,
    Composed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComposeMode {
    #[default]
    Replace,
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    #[default]
    Standard,
    DdBlocker,
}

/// A normalized grid together with its spectral coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    grid: GridDistribution,
    coeffs: CoeffVector,
    revision: u64,
    source: TargetSource,
}

impl TargetDistribution {
    pub fn new(basis: &SpectralBasis, grid: GridDistribution, revision: u64, source: TargetSource) -> Result<Self> {
        let grid = if grid.is_normalized() { grid } else { grid.normalize()? };
        let coeffs = basis.project_distribution(&grid)?;
        Ok(Self {
            grid,
            coeffs,
            revision,
            source,
        })
    }

    pub fn uniform(basis: &SpectralBasis, width: usize, height: usize) -> Result<Self> {
        Self::new(basis, GridDistribution::uniform(width, height), 0, TargetSource::Uniform)
    }

    pub fn grid(&self) -> &GridDistribution {
        &self.grid
    }

    pub fn coeffs(&self) -> &CoeffVector {
        &self.coeffs
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn source(&self) -> TargetSource {
        self.source
    }

    pub fn with_revision(mut self, revision: u64) -> Self {
        self.revision = revision;
        self
    }
}

/// Convert an operator drawing to a normalized grid.
///
/// Attraction cells get 1 and repulsion cells 0. Undrawn cells get 0.5 when
/// both kinds of mark are present, otherwise fresh noise in `[0, 0.001)`
/// from a generator seeded with `rng_seed`.
pub fn drawing_to_grid(d: &DrawingGrid, rng_seed: u64) -> Result<GridDistribution> {
    d.validate()?;
    let has_attr = d.marks.contains(&Mark::Attraction);
    let has_rep = d.marks.contains(&Mark::Repulsion);
    let has_unmarked = d.marks.contains(&Mark::Unmarked);
    if has_rep && !has_attr && !has_unmarked {
        return Err(Error::DegenerateTarget("drawing is entirely repulsion".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let values = d
        .marks
        .iter()
        .map(|m| match m {
            Mark::Attraction => 1.0,
            Mark::Repulsion => 0.0,
            Mark::Unmarked if has_attr && has_rep => MEDIUM_CONTENT,
            Mark::Unmarked => rng.gen_range(0.0..NOISE_CEILING),
        })
        .collect();
    GridDistribution::new(d.width, d.height, values)?.normalize()
}

/// Weights renormalized to sum to one within each element kind.
fn normalized_weights(elements: &[GaussianElement]) -> Vec<f64> {
    let total = |kind| -> f64 {
        elements.iter().filter(|e| e.kind == kind).map(|e| e.weight).sum()
    };
    let (ee, dd) = (total(ElementKind::Ee), total(ElementKind::Dd));
    elements
        .iter()
        .map(|e| match e.kind {
            ElementKind::Ee => e.weight / ee,
            ElementKind::Dd => e.weight / dd,
        })
        .collect()
}

/// Evaluate the EE/DD mixture at cell centers, before normalization.
pub fn mixture_raw(elements: &[GaussianElement], width: usize, height: usize) -> Result<GridDistribution> {
    if elements.is_empty() {
        return Err(Error::Contract("mixture needs at least one element".into()));
    }
    for e in elements {
        e.validate()?;
    }
    let weights = normalized_weights(elements);
    let mut values = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let p = [(col as f64 + 0.5) / width as f64, (row as f64 + 0.5) / height as f64];
            let v: f64 = elements
                .iter()
                .zip(&weights)
                .map(|(e, w)| match e.kind {
                    ElementKind::Ee => w * e.bump(p),
                    ElementKind::Dd => w * (1.0 - e.bump(p)),
                })
                .sum();
            values.push(v);
        }
    }
    GridDistribution::new(width, height, values)
}

/// The normalized EE/DD mixture on a grid.
pub fn mixture_to_grid(elements: &[GaussianElement], width: usize, height: usize) -> Result<GridDistribution> {
    mixture_raw(elements, width, height)?.normalize()
}

/// Combine a new target with the current one.
///
/// `Replace` keeps `update`'s grid. `Multiply` takes the normalized cellwise
/// product, so a zero in either factor stays zero. Either way the revision
/// becomes `current.revision + 1`.
pub fn compose(
    basis: &SpectralBasis,
    current: &TargetDistribution,
    update: &TargetDistribution,
    mode: ComposeMode,
) -> Result<TargetDistribution> {
    let revision = current.revision + 1;
    match mode {
        ComposeMode::Replace => Ok(update.clone().with_revision(revision)),
        ComposeMode::Multiply => {
            let grid = multiply_grids(current.grid(), update.grid())?;
            TargetDistribution::new(basis, grid, revision, TargetSource::Composed)
        }
    }
}

/// Normalized cellwise product of two equally shaped grids.
pub fn multiply_grids(a: &GridDistribution, b: &GridDistribution) -> Result<GridDistribution> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape(format!(
            "cannot combine {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let values: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect();
    let g = GridDistribution::new(a.width(), a.height(), values)?;
    if g.mass() < MIN_PRODUCT_MASS {
        return Err(Error::DegenerateTarget("combined target has no mass".into()));
    }
    g.normalize()
}

/// Mass-weighted sum `(a + w * b) / (1 + w)` of two normalized grids.
pub fn weighted_sum(a: &GridDistribution, b: &GridDistribution, b_weight: f64) -> Result<GridDistribution> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::Shape("grids differ in size".into()));
    }
    if !(b_weight.is_finite() && b_weight >= 0.0) {
        return Err(Error::Contract("mixing weight must be nonnegative".into()));
    }
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x + b_weight * y) / (1.0 + b_weight))
        .collect();
    GridDistribution::new(a.width(), a.height(), values)?.normalize()
}

/// The target as seen by an agent of the given capability.
///
/// Standard agents see `base` with every DD multiplied in as a repulsion
/// well. DD blockers see an attraction mixture centered on the DDs instead.
/// Without DDs both see `base`.
pub fn heterogeneous_view(
    basis: &SpectralBasis,
    base: &TargetDistribution,
    capability: Capability,
    dd_elements: &[GaussianElement],
) -> Result<TargetDistribution> {
    if dd_elements.iter().any(|e| e.kind != ElementKind::Dd) {
        return Err(Error::Contract("heterogeneous view expects DD elements only".into()));
    }
    if dd_elements.is_empty() {
        return Ok(base.clone());
    }
    let (w, h) = (base.grid().width(), base.grid().height());
    match capability {
        Capability::Standard => {
            let dd = mixture_to_grid(dd_elements, w, h)?;
            let grid = multiply_grids(base.grid(), &dd)?;
            TargetDistribution::new(basis, grid, base.revision(), TargetSource::Composed)
        }
        Capability::DdBlocker => {
            let inverted: Vec<GaussianElement> = dd_elements
                .iter()
                .map(|e| GaussianElement {
                    kind: ElementKind::Ee,
                    ..*e
                })
                .collect();
            let grid = mixture_to_grid(&inverted, w, h)?;
            TargetDistribution::new(basis, grid, base.revision(), TargetSource::Mixture)
        }
    }
}

/// Complement `max - cell`, renormalized. Attraction peaks become wells.
pub fn invert_grid(g: &GridDistribution) -> Result<GridDistribution> {
    let max = g.max_value();
    let values = g.values().iter().map(|v| (max - v).max(0.0)).collect();
    GridDistribution::new(g.width(), g.height(), values)?.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis() -> SpectralBasis {
        SpectralBasis::unit_square(10).unwrap()
    }

    fn attraction_only() -> DrawingGrid {
        let mut d = DrawingGrid::blank(32, 32);
        d.paint_disk([0.3, 0.3], 0.1, Mark::Attraction);
        d
    }

    #[test]
    fn attraction_only_rules() {
        let d = attraction_only();
        let g = drawing_to_grid(&d, 7).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-9);
        // Undo normalization using the attraction value.
        let (i, _) = d.marks.iter().enumerate().find(|(_, m)| **m == Mark::Attraction).unwrap();
        let scale = g.values()[i];
        for (m, v) in d.marks.iter().zip(g.values()) {
            let raw = v / scale;
            match m {
                Mark::Attraction => assert!((raw - 1.0).abs() < 1e-12),
                Mark::Unmarked => assert!((0.0..NOISE_CEILING).contains(&raw)),
                Mark::Repulsion => unreachable!(),
            }
        }
    }

    #[test]
    fn mixed_marks_make_undrawn_medium() {
        let mut d = attraction_only();
        d.paint_disk([0.7, 0.7], 0.1, Mark::Repulsion);
        let g = drawing_to_grid(&d, 1).unwrap();
        let (ia, _) = d.marks.iter().enumerate().find(|(_, m)| **m == Mark::Attraction).unwrap();
        let scale = g.values()[ia];
        for (m, v) in d.marks.iter().zip(g.values()) {
            let raw = v / scale;
            let expect = match m {
                Mark::Attraction => 1.0,
                Mark::Repulsion => 0.0,
                Mark::Unmarked => 0.5,
            };
            assert!((raw - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn repulsion_only_gets_noise_elsewhere() {
        let mut d = DrawingGrid::blank(16, 16);
        d.paint_disk([0.5, 0.5], 0.2, Mark::Repulsion);
        let g = drawing_to_grid(&d, 3).unwrap();
        for (m, v) in d.marks.iter().zip(g.values()) {
            if *m == Mark::Repulsion {
                assert_eq!(*v, 0.0);
            }
        }
        assert!((g.mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn all_repulsion_is_degenerate() {
        let mut d = DrawingGrid::blank(4, 4);
        d.paint_rect([0.0, 0.0], [1.0, 1.0], Mark::Repulsion);
        assert!(matches!(drawing_to_grid(&d, 0), Err(Error::DegenerateTarget(_))));
    }

    #[test]
    fn empty_drawing_is_noise_only() {
        let g = drawing_to_grid(&DrawingGrid::blank(64, 64), 11).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-9);
        // Every raw value is in [0, 0.001), so after normalization each cell is
        // bounded by 0.001 / mean(raw). With ~uniform noise the mean is about
        // 0.0005, which puts values in [0, ~2): mean 1, spread about 100%.
        let mean = g.values().iter().sum::<f64>() / g.values().len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
        assert!(g.min_value() >= 0.0);
        assert!(g.max_value() < 2.2);
        let spread = g.max_value() - g.min_value();
        assert!(spread > 1.5, "noise spread {spread}");
    }

    #[test]
    fn drawing_is_deterministic_per_seed() {
        let d = attraction_only();
        assert_eq!(drawing_to_grid(&d, 5).unwrap(), drawing_to_grid(&d, 5).unwrap());
        assert_ne!(drawing_to_grid(&d, 5).unwrap(), drawing_to_grid(&d, 6).unwrap());
    }

    #[test]
    fn single_ee_values() {
        let n = 20;
        let e = GaussianElement::ee([0.525, 0.525], 3.0);
        let raw = mixture_raw(&[e], n, n).unwrap();
        // Cell (10, 10) has center (0.525, 0.525).
        assert!((raw.get(10, 10) - 1.0).abs() < 1e-15);
        // Cell (16, 10) is 0.3 away along x.
        let expect = (-0.5f64 * 0.09 / 0.01).exp();
        assert!((raw.get(16, 10) - expect).abs() < 1e-12);
        assert!((expect - 0.011109).abs() < 1e-6);
    }

    #[test]
    fn single_dd_is_zero_at_center() {
        let n = 20;
        let raw = mixture_raw(&[GaussianElement::dd([0.525, 0.525], 1.0)], n, n).unwrap();
        assert_eq!(raw.get(10, 10), 0.0);
    }

    #[test]
    fn ee_and_dd_extremes() {
        let n = 40;
        let ee = GaussianElement::ee([0.2125, 0.2125], 1.0);
        let dd = GaussianElement::dd([0.7875, 0.7875], 1.0);
        let g = mixture_to_grid(&[ee, dd], n, n).unwrap();
        assert_eq!(g.argmax(), (8, 8));
        assert_eq!(g.argmin(), (31, 31));
        assert!((g.mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_mixture_rejected() {
        assert!(matches!(mixture_to_grid(&[], 8, 8), Err(Error::Contract(_))));
    }

    #[test]
    fn compose_examples() {
        let b = basis();
        let n = 32;
        let uniform = TargetDistribution::uniform(&b, n, n).unwrap();
        let x = TargetDistribution::new(&b, drawing_to_grid(&attraction_only(), 2).unwrap(), 4, TargetSource::Drawing)
            .unwrap();
        let prod = compose(&b, &uniform, &x, ComposeMode::Multiply).unwrap();
        for (a, c) in prod.grid().values().iter().zip(x.grid().values()) {
            assert!((a - c).abs() < 1e-12);
        }
        assert_eq!(prod.revision(), 1);

        let rep = compose(&b, &x, &uniform, ComposeMode::Replace).unwrap();
        assert_eq!(rep.grid(), uniform.grid());
        assert_eq!(rep.revision(), 5);

        // DD at the attraction center vetoes it.
        // 0.296875 is the center of cell 9 on a 32-cell axis.
        let dd = TargetDistribution::new(
            &b,
            mixture_to_grid(&[GaussianElement::dd([0.296875, 0.296875], 1.0)], n, n).unwrap(),
            0,
            TargetSource::Mixture,
        )
        .unwrap();
        let vetoed = compose(&b, &x, &dd, ComposeMode::Multiply).unwrap();
        let center = vetoed.grid().get(9, 9);
        assert!(x.grid().get(9, 9) > 0.5 * x.grid().max_value());
        assert!(center < 1e-6 * vetoed.grid().max_value());
    }

    #[test]
    fn multiply_degenerate_rejected() {
        let a = GridDistribution::new(2, 1, vec![1.0, 0.0]).unwrap().normalize().unwrap();
        let b = GridDistribution::new(2, 1, vec![0.0, 1.0]).unwrap().normalize().unwrap();
        assert!(matches!(multiply_grids(&a, &b), Err(Error::DegenerateTarget(_))));
    }

    #[test]
    fn heterogeneous_single_dd() {
        let b = basis();
        let n = 40;
        let base = TargetDistribution::uniform(&b, n, n).unwrap();
        let dd = [GaussianElement::dd([0.8125, 0.8125], 1.0)];
        let blocker = heterogeneous_view(&b, &base, Capability::DdBlocker, &dd).unwrap();
        let standard = heterogeneous_view(&b, &base, Capability::Standard, &dd).unwrap();
        assert_eq!(blocker.grid().argmax(), (32, 32));
        assert_eq!(standard.grid().argmin(), (32, 32));
        assert!((blocker.grid().mass() - 1.0).abs() < 1e-9);
        assert!((standard.grid().mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn heterogeneous_without_dds_is_base() {
        let b = basis();
        let base = TargetDistribution::new(&b, drawing_to_grid(&attraction_only(), 9).unwrap(), 3, TargetSource::Drawing)
            .unwrap();
        for cap in [Capability::Standard, Capability::DdBlocker] {
            assert_eq!(heterogeneous_view(&b, &base, cap, &[]).unwrap(), base);
        }
        let ee = [GaussianElement::ee([0.5, 0.5], 1.0)];
        assert!(heterogeneous_view(&b, &base, Capability::Standard, &ee).is_err());
    }

    #[test]
    fn blocker_two_dds_split_mass() {
        let b = basis();
        let n = 64;
        let base = TargetDistribution::uniform(&b, n, n).unwrap();
        let dds = [GaussianElement::dd([0.3, 0.3], 1.0), GaussianElement::dd([0.7, 0.7], 5.0)];
        let view = heterogeneous_view(&b, &base, Capability::DdBlocker, &dds).unwrap();
        let g = view.grid();
        let mass_near = |c: [f64; 2]| {
            let mut m = 0.0;
            for row in 0..n {
                for col in 0..n {
                    if dist(g.cell_center(col, row), c) < 0.2 {
                        m += g.get(col, row) * g.cell_area();
                    }
                }
            }
            m
        };
        let (m1, m2) = (mass_near([0.3, 0.3]), mass_near([0.7, 0.7]));
        // Weights of DD elements are renormalized per kind (5/6 vs 1/6), so the
        // blocker mass follows the DD weights.
        assert!((m1 / (m1 + m2) - 1.0 / 6.0).abs() < 0.02, "{m1} {m2}");

        let equal = [GaussianElement::dd([0.3, 0.3], 1.0), GaussianElement::dd([0.7, 0.7], 1.0)];
        let view = heterogeneous_view(&b, &base, Capability::DdBlocker, &equal).unwrap();
        let g = view.grid();
        let mut halves = [0.0; 2];
        for row in 0..n {
            for col in 0..n {
                // Cells on the anti-diagonal belong to neither side.
                if col + row != n - 1 {
                    halves[usize::from(col + row > n - 1)] += g.get(col, row) * g.cell_area();
                }
            }
        }
        assert!((halves[0] - halves[1]).abs() < 1e-9);
        assert!(halves[0] < 0.5 && halves[0] > 0.45);
    }

    #[test]
    fn invert_twice_restores_zero_floor_grid() {
        let mut d = attraction_only();
        d.paint_disk([0.8, 0.8], 0.1, Mark::Repulsion);
        let g = drawing_to_grid(&d, 0).unwrap();
        assert_eq!(g.min_value(), 0.0);
        let back = invert_grid(&invert_grid(&g).unwrap()).unwrap();
        for (a, b) in g.values().iter().zip(back.values()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(
            invert_grid(&GridDistribution::uniform(4, 4)),
            Err(Error::DegenerateTarget(_))
        ));
    }

    proptest! {
        #[test]
        fn mixture_weight_scale_invariance(scale in 0.01f64..100.0, cx in 0.1f64..0.9, cy in 0.1f64..0.9) {
            let els = [
                GaussianElement::ee([cx, cy], 0.3),
                GaussianElement::ee([1.0 - cx, cy], 0.7),
                GaussianElement::dd([cy, cx], 1.0),
            ];
            let scaled: Vec<_> = els.iter().map(|e| GaussianElement { weight: e.weight * scale, ..*e }).collect();
            let a = mixture_to_grid(&els, 24, 24).unwrap();
            let b = mixture_to_grid(&scaled, 24, 24).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
            }
            prop_assert!((a.mass() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn multiply_commutes(seed_a in 0u64..50, seed_b in 0u64..50) {
            use rand::Rng as _;
            let mut rng = ChaCha8Rng::seed_from_u64(seed_a);
            let a: Vec<f64> = (0..256).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed_b + 1000);
            let b: Vec<f64> = (0..256).map(|_| rng.gen_range(0.01..1.0)).collect();
            let ga = GridDistribution::new(16, 16, a).unwrap().normalize().unwrap();
            let gb = GridDistribution::new(16, 16, b).unwrap().normalize().unwrap();
            let ab = multiply_grids(&ga, &gb).unwrap();
            let ba = multiply_grids(&gb, &ga).unwrap();
            for (x, y) in ab.values().iter().zip(ba.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((ab.mass() - 1.0).abs() < 1e-9);
        }
    }
}

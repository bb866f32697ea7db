//! Scalar diagnostics of an ensemble and the per-step trackers a run keeps.

use rayon::prelude::*;

use crate::dynamics::{Ensemble, TrajectorySample, COLLAPSE_DISTANCE};
use crate::field::{momentum_flux_excluding, momentum_kernel_integral, PlasmaSources};
use crate::initial_data::{min_pair_distance, relative_energy_core, relative_energy_n_eps};
use crate::mollifier::ln_core;
use crate::scalar::ln_minus_unchecked;
use crate::summation::CompensatedSum;
use crate::{ChargeState, Error, Result, Vec2};

/// Default collision ladder.
pub const DEFAULT_DELTA_LADDER: [f64; 5] = [0.32, 0.16, 0.08, 0.04, 0.02];

/// Cells per side of the automatic density and probe grid.
pub const DEFAULT_GRID_CELLS: usize = 32;

/// The separate pieces of the total energy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyTerms {
    pub plasma_kinetic: f64,
    pub charge_kinetic: f64,
    /// `-1/2 sum_{j != k} w_j w_k ln_blob |x_j - x_k|`
    pub plasma_plasma: f64,
    /// `sum_i sum_j w_j ln_eps |x_j - xi_i|`
    pub charge_plasma: f64,
    /// `-sum_{i != j} ln |xi_i - xi_j|` over ordered pairs.
    pub charge_charge: f64,
}

impl EnergyTerms {
    pub fn kinetic(&self) -> f64 {
        self.plasma_kinetic + self.charge_kinetic
    }

    pub fn total(&self) -> f64 {
        [
            self.plasma_kinetic,
            self.charge_kinetic,
            self.plasma_plasma,
            self.charge_plasma,
            self.charge_charge,
        ]
        .into_iter()
        .collect::<CompensatedSum>()
        .value()
    }
}

/// One time sample of the monitored scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub time: f64,
    pub total_energy: f64,
    pub kinetic_energy: f64,
    /// Running supremum of `|h_eps|` over weighted particles.
    pub h_sup: f64,
    pub first_moment: f64,
    pub rho_l2: f64,
    /// Running minimum of the inter-charge distance; `None` for fewer than two charges.
    pub min_charge_dist: Option<f64>,
    pub field_sup: f64,
    /// Weight fraction whose distance to a charge has fallen below each ladder entry.
    pub frac_below: Vec<f64>,
    pub delta_star: Option<f64>,
    pub energy: EnergyTerms,
    /// Supremum over the probe grid of the speed-weighted inverse distance integral.
    pub momentum_kernel_sup: f64,
}

fn collapse_check(charges: &[ChargeState], time: f64) -> Result<()> {
    for i in 0..charges.len() {
        for j in i + 1..charges.len() {
            let d = (charges[i].xi - charges[j].xi).norm();
            if d < COLLAPSE_DISTANCE {
                return Err(Error::Collapse {
                    time,
                    first: i,
                    second: j,
                    distance: d,
                });
            }
        }
    }
    Ok(())
}

/// Energy split into kinetic and potential parts.
pub fn energy_terms(e: &Ensemble) -> Result<EnergyTerms> {
    collapse_check(&e.charges, e.time)?;
    let blob = e.field_model.blob_width();
    let eps = e.mollifier.epsilon();
    let weighted: Vec<(Vec2, Vec2, f64)> = e
        .particles
        .iter()
        .filter(|p| p.weight > 0.0)
        .map(|p| (p.x(), p.v(), p.weight))
        .collect();

    let plasma_kinetic = weighted
        .iter()
        .map(|&(_, v, w)| 0.5 * w * v.norm_squared())
        .collect::<CompensatedSum>()
        .value();
    let charge_kinetic = e
        .charges
        .iter()
        .map(|c| 0.5 * c.eta.norm_squared())
        .collect::<CompensatedSum>()
        .value();

    // Each unordered pair once, which equals half the ordered sum.
    let rows: Vec<Result<f64>> = (0..weighted.len())
        .into_par_iter()
        .map(|j| {
            let (xj, _, wj) = weighted[j];
            let mut acc = CompensatedSum::new();
            for &(xk, _, wk) in &weighted[j + 1..] {
                let r = (xj - xk).norm();
                if r == 0.0 && blob == 0.0 {
                    return Err(Error::Singularity(format!(
                        "coincident plasma particles at {xj:?} with zero blob width"
                    )));
                }
                acc.add(wj * wk * ln_core(r, blob));
            }
            Ok(acc.value())
        })
        .collect();
    let mut pp = CompensatedSum::new();
    for row in rows {
        pp.add(row?);
    }

    let mut cp = CompensatedSum::new();
    for c in &e.charges {
        for &(x, _, w) in &weighted {
            cp.add(w * ln_core((x - c.xi).norm(), eps));
        }
    }

    let mut cc = CompensatedSum::new();
    for (i, a) in e.charges.iter().enumerate() {
        for (j, b) in e.charges.iter().enumerate() {
            if i != j {
                cc.add(-(a.xi - b.xi).norm().ln());
            }
        }
    }

    Ok(EnergyTerms {
        plasma_kinetic,
        charge_kinetic,
        plasma_plasma: -pp.value(),
        charge_plasma: cp.value(),
        charge_charge: cc.value(),
    })
}

/// Total energy with additive constants omitted.
pub fn total_energy(e: &Ensemble) -> Result<f64> {
    Ok(energy_terms(e)?.total())
}

/// Kinetic energy of plasma and charges.
pub fn kinetic_energy(e: &Ensemble) -> f64 {
    let plasma = e
        .particles
        .iter()
        .map(|p| 0.5 * p.weight * p.v().norm_squared())
        .collect::<CompensatedSum>()
        .value();
    plasma + e.charges.iter().map(|c| 0.5 * c.eta.norm_squared()).sum::<f64>()
}

/// `sum_j w_j |x_j|`.
pub fn first_moment(e: &Ensemble) -> f64 {
    e.particles
        .iter()
        .map(|p| p.weight * p.x().norm())
        .collect::<CompensatedSum>()
        .value()
}

/// Current minimal inter-charge distance; `None` when fewer than two charges.
pub fn charge_separation(e: &Ensemble) -> Option<f64> {
    min_pair_distance(&e.charges)
}

/// Largest `|h_eps|` over weighted particles at the current time.
///
/// With several charges the relative energy is taken with respect to the
/// charge whose ball of radius `d/8` contains the particle (`d` the current
/// separation), or the largest one outside all balls.
pub fn h_current(e: &Ensemble) -> Result<f64> {
    let eps = e.mollifier.epsilon();
    match e.charges.len() {
        0 => Ok(0.0),
        1 => Ok(e
            .particles
            .iter()
            .filter(|p| p.weight > 0.0)
            .map(|p| relative_energy_core(&p.phase, &e.charges[0], eps).abs())
            .fold(0.0, f64::max)),
        _ => {
            let d = charge_separation(e).expect("two or more charges");
            let mut max = 0.0f64;
            for p in e.particles.iter().filter(|p| p.weight > 0.0) {
                max = max.max(relative_energy_n_eps(&p.phase, &e.charges, d / 8.0, &e.mollifier)?);
            }
            Ok(max)
        }
    }
}

/// Running supremum: `max(previous, h_current(e))`.
pub fn h_supremum(e: &Ensemble, previous: f64) -> Result<f64> {
    Ok(previous.max(h_current(e)?))
}

/// `d / (16 sqrt(3 H))`: the window within which a plasma particle can
/// approach at most one charge.
pub fn delta_star(h: f64, d: f64) -> Result<f64> {
    if !(h > 0.0) || !(d > 0.0) || !h.is_finite() || !d.is_finite() {
        return Err(Error::Domain(format!("delta_star needs H > 0 and d > 0, got H = {h}, d = {d}")));
    }
    Ok(d / (16.0 * (3.0 * h).sqrt()))
}

/// Uniform square-cell grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin: Vec2,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn new(origin: Vec2, cell_size: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() || nx == 0 || ny == 0 || !origin.is_finite() {
            return Err(Error::Config(format!(
                "degenerate grid: cell_size {cell_size}, {nx} x {ny} cells"
            )));
        }
        Ok(Self {
            origin,
            cell_size,
            nx,
            ny,
        })
    }

    /// Square grid of `cells` per side covering particles and charges with a
    /// quarter of the extent as margin on every side.
    pub fn covering(e: &Ensemble, cells: usize) -> Result<Self> {
        let points = e.particles.iter().map(|p| p.x()).chain(e.charges.iter().map(|c| c.xi));
        let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for p in points {
            lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !lo.is_finite() {
            lo = Vec2::new(-1.0, -1.0);
            hi = Vec2::new(1.0, 1.0);
        }
        let extent = (hi.x - lo.x).max(hi.y - lo.y).max(1e-3);
        let side = 1.5 * extent;
        let center = (lo + hi) * 0.5;
        Self::new(center - Vec2::new(side, side) * 0.5, side / cells as f64, cells, cells)
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vec2 {
        self.origin + Vec2::new((ix as f64 + 0.5) * self.cell_size, (iy as f64 + 0.5) * self.cell_size)
    }

    pub fn cell_of(&self, x: Vec2) -> Option<(usize, usize)> {
        let fx = ((x.x - self.origin.x) / self.cell_size).floor();
        let fy = ((x.y - self.origin.y) / self.cell_size).floor();
        if fx >= 0.0 && fy >= 0.0 && (fx as usize) < self.nx && (fy as usize) < self.ny {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    /// All cell centres, row by row.
    pub fn centers(&self) -> Vec<Vec2> {
        (0..self.ny)
            .flat_map(|iy| (0..self.nx).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| self.cell_center(ix, iy))
            .collect()
    }
}

/// Weight histogram on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    /// Weight per cell, row-major with `x` fastest.
    pub mass: Vec<f64>,
    /// Weight of particles outside the grid.
    pub outside: f64,
}

impl DensityGrid {
    pub fn density(&self, ix: usize, iy: usize) -> f64 {
        self.mass[iy * self.spec.nx + ix] / self.spec.cell_area()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().copied().collect::<CompensatedSum>().value() + self.outside
    }
}

pub fn density_grid(e: &Ensemble, spec: GridSpec) -> Result<DensityGrid> {
    let spec = GridSpec::new(spec.origin, spec.cell_size, spec.nx, spec.ny)?;
    let mut mass = vec![0.0; spec.nx * spec.ny];
    let mut outside = 0.0;
    for p in &e.particles {
        match spec.cell_of(p.x()) {
            Some((ix, iy)) => mass[iy * spec.nx + ix] += p.weight,
            None => outside += p.weight,
        }
    }
    Ok(DensityGrid { spec, mass, outside })
}

/// `sqrt(sum rho^2 area)` over the grid.
pub fn rho_l2(g: &DensityGrid) -> f64 {
    let area = g.spec.cell_area();
    g.mass
        .iter()
        .map(|m| m * m / area)
        .collect::<CompensatedSum>()
        .value()
        .sqrt()
}

/// Result of fitting `rho <= C (1 + max_i ln- dist(cell, xi_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityBound {
    pub c_fit: f64,
    pub violations: Vec<(usize, usize)>,
}

/// Least constant of the logarithmic density bound over all cells. Cell
/// distances are measured from the centre and floored at half a cell.
pub fn density_bound_check(g: &DensityGrid, charges: &[ChargeState]) -> Result<DensityBound> {
    let h = g.spec.cell_size;
    if !charges.is_empty() && 0.1 / h < 3.0 {
        return Err(Error::Precondition(format!(
            "cell size {h} does not resolve the near-charge region (need >= 3 cells inside r = 0.1)"
        )));
    }
    let profile = |ix: usize, iy: usize| -> f64 {
        let c = g.spec.cell_center(ix, iy);
        let lmax = charges
            .iter()
            .map(|q| ln_minus_unchecked((c - q.xi).norm().max(0.5 * h)))
            .fold(0.0, f64::max);
        1.0 + lmax
    };
    let mut c_fit = 0.0f64;
    for iy in 0..g.spec.ny {
        for ix in 0..g.spec.nx {
            c_fit = c_fit.max(g.density(ix, iy) / profile(ix, iy));
        }
    }
    let mut violations = Vec::new();
    for iy in 0..g.spec.ny {
        for ix in 0..g.spec.nx {
            if g.density(ix, iy) > c_fit * profile(ix, iy) * (1.0 + 1e-12) {
                violations.push((ix, iy));
            }
        }
    }
    Ok(DensityBound { c_fit, violations })
}

/// Largest plasma field magnitude over the probe points.
pub fn field_sup_norm(e: &Ensemble, probes: &[Vec2]) -> Result<f64> {
    let sources = PlasmaSources::from_particles(&e.particles, e.field_model);
    Ok(sources.field_batch(probes)?.into_iter().map(|f| f.norm()).fold(0.0, f64::max))
}

/// Running minimum of a lower bound on each particle's distance to any
/// charge, over continuous time.
///
/// Over a step from `d0` to `d1` with relative speed at most `u` the
/// distance cannot drop below `(d0 + d1 - h u) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionTracker {
    pub min_distance: Vec<f64>,
    /// Particles that came closer than the mollifier radius.
    pub entered_core: Vec<bool>,
    /// Largest step taken.
    pub max_step: f64,
    /// Largest endpoint relative speed over steps with a lower bound below
    /// the largest ladder entry.
    pub near_speed: f64,
    near_threshold: f64,
    epsilon: f64,
}

impl CollisionTracker {
    pub fn new(e: &Ensemble, ladder: &[f64]) -> Self {
        let min_distance = e
            .particles
            .iter()
            .map(|p| e.charges.iter().map(|c| (p.x() - c.xi).norm()).fold(f64::INFINITY, f64::min))
            .collect::<Vec<_>>();
        let epsilon = e.mollifier.epsilon();
        Self {
            entered_core: min_distance.iter().map(|&d| d < epsilon).collect(),
            min_distance,
            max_step: 0.0,
            near_speed: 0.0,
            near_threshold: ladder.iter().copied().fold(0.0, f64::max),
            epsilon,
        }
    }

    pub fn observe_step(&mut self, before: &Ensemble, after: &Ensemble) {
        let h = (after.time - before.time).abs();
        self.max_step = self.max_step.max(h);
        for (j, (p0, p1)) in before.particles.iter().zip(&after.particles).enumerate() {
            for (c0, c1) in before.charges.iter().zip(&after.charges) {
                let d0 = (p0.x() - c0.xi).norm();
                let d1 = (p1.x() - c1.xi).norm();
                let u = (p0.v() - c0.eta).norm().max((p1.v() - c1.eta).norm());
                let lb = d0.min(d1).min((0.5 * (d0 + d1 - h * u)).max(0.0));
                if lb < self.min_distance[j] {
                    self.min_distance[j] = lb;
                }
                if lb < self.near_threshold {
                    self.near_speed = self.near_speed.max(u);
                }
                if lb < self.epsilon {
                    self.entered_core[j] = true;
                }
            }
        }
    }

    /// Weight fractions below each ladder entry, without the cadence check.
    pub fn fractions(&self, weights: &[f64], ladder: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().copied().collect::<CompensatedSum>().value();
        ladder
            .iter()
            .map(|&delta| {
                if total == 0.0 {
                    return 0.0;
                }
                let below = weights
                    .iter()
                    .zip(&self.min_distance)
                    .filter(|(_, &d)| d < delta)
                    .map(|(&w, _)| w)
                    .collect::<CompensatedSum>()
                    .value();
                below / total
            })
            .collect()
    }

    pub fn core_entries(&self) -> usize {
        self.entered_core.iter().filter(|&&b| b).count()
    }
}

/// Weight fraction of particles whose tracked distance to a charge fell
/// below each `delta`. Fails when the step was too coarse for the smallest
/// positive `delta`: the lower bound may undershoot by `h u / 2`, which must
/// stay below `delta / 10`.
pub fn collision_measure(weights: &[f64], tracker: &CollisionTracker, ladder: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != tracker.min_distance.len() {
        return Err(Error::Pairing(format!(
            "{} weights for {} tracked particles",
            weights.len(),
            tracker.min_distance.len()
        )));
    }
    let smallest = ladder.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
    if smallest.is_finite() {
        let error = 0.5 * tracker.max_step * tracker.near_speed;
        if error >= smallest / 10.0 {
            return Err(Error::Precondition(format!(
                "step {} with near-charge speed {} resolves distances only to {error:.3e}, above delta/10 = {:.3e}",
                tracker.max_step,
                tracker.near_speed,
                smallest / 10.0
            )));
        }
    }
    Ok(tracker.fractions(weights, ladder))
}

/// Counts particles that, within one window, enter the `d/8` ball of a
/// charge and then the ball of a different charge.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleApproachTracker {
    last: Vec<Option<(usize, f64)>>,
    flagged: Vec<bool>,
}

impl SingleApproachTracker {
    pub fn new(particles: usize) -> Self {
        Self {
            last: vec![None; particles],
            flagged: vec![false; particles],
        }
    }

    pub fn observe(&mut self, time: f64, positions: &[Vec2], charges: &[ChargeState], d: f64, window: f64) {
        let radius = d / 8.0;
        for (j, &x) in positions.iter().enumerate() {
            let inside = charges.iter().position(|c| (x - c.xi).norm() < radius);
            if let Some(i) = inside {
                if let Some((prev, t_prev)) = self.last[j] {
                    if prev != i && time - t_prev <= window {
                        self.flagged[j] = true;
                    }
                }
                self.last[j] = Some((i, time));
            }
        }
    }

    pub fn violations(&self) -> usize {
        self.flagged.iter().filter(|&&b| b).count()
    }
}

/// Positions of particles and charges at a sequence of times.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSeries {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<Vec2>>,
    pub charges: Vec<Vec<ChargeState>>,
}

/// Single-approach violations over sampled trajectories. `max_gap` bounds
/// the admissible spacing of samples: a particle moving at the largest
/// recorded relative speed must not be able to cross a `d/8` ball between
/// samples.
pub fn single_approach_check(series: &TrackSeries, d: f64, window: f64) -> Result<usize> {
    let n = series.times.len();
    if series.positions.len() != n || series.charges.len() != n {
        return Err(Error::Pairing("time, position and charge series differ in length".into()));
    }
    if n == 0 || series.charges[0].len() < 2 {
        return Ok(0);
    }
    for k in 1..n {
        let gap = series.times[k] - series.times[k - 1];
        let speed = series.positions[k]
            .iter()
            .zip(&series.positions[k - 1])
            .map(|(a, b)| (*a - *b).norm() / gap)
            .fold(0.0, f64::max);
        if gap * speed >= d / 80.0 {
            return Err(Error::Precondition(format!(
                "sample spacing {gap} too coarse for balls of radius d/8 = {}",
                d / 8.0
            )));
        }
    }
    let mut tracker = SingleApproachTracker::new(series.positions[0].len());
    for k in 0..n {
        tracker.observe(series.times[k], &series.positions[k], &series.charges[k], d, window);
    }
    Ok(tracker.violations())
}

/// Running record of both sides of the potential/work identity for one
/// particle: `int v.E ds = Phi(x(t), t) - Phi(x(0), 0) + int sum_k w_k v_k.K(x - y_k) ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityTracker {
    pub particle_id: u64,
    index: usize,
    pub phi_initial: f64,
    pub phi_current: f64,
    /// `int v . E ds` by the trapezoid rule.
    pub work: f64,
    /// `int sum_k w_k v_k . K ds` by the trapezoid rule.
    pub flux: f64,
    rates: (f64, f64),
}

impl IdentityTracker {
    pub fn lhs(&self) -> f64 {
        self.work
    }

    pub fn rhs(&self) -> f64 {
        self.phi_current - self.phi_initial + self.flux
    }

    /// `|lhs - rhs|` relative to the size of the terms involved.
    pub fn relative_error(&self) -> f64 {
        let scale = self.work.abs().max((self.phi_current - self.phi_initial).abs() + self.flux.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.lhs() - self.rhs()).abs() / scale
        }
    }
}

fn identity_sample(e: &Ensemble, sources: &PlasmaSources, index: usize) -> Result<(f64, f64, f64)> {
    let p = &e.particles[index];
    let field = sources.field_at(p.x(), Some(index))?;
    let phi = sources.potential_at(p.x(), Some(index))?;
    let flux = momentum_flux_excluding(p.x(), &e.particles, &e.field_model, Some(index))?;
    Ok((phi, p.v().dot(field), flux))
}

/// What a run samples and tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsSchedule {
    /// Interval between diagnostic samples.
    pub cadence: f64,
    pub delta_ladder: Vec<f64>,
    /// Particle ids whose trajectories and identity sides are recorded.
    pub tagged: Vec<u64>,
    /// Density and probe grid; `None` covers the initial ensemble.
    pub grid: Option<GridSpec>,
    pub grid_cells: usize,
    /// Keep full snapshots at every sample (needed for Cauchy distances).
    pub keep_snapshots: bool,
}

impl DiagnosticsSchedule {
    pub fn new(cadence: f64) -> Self {
        Self {
            cadence,
            delta_ladder: DEFAULT_DELTA_LADDER.to_vec(),
            tagged: Vec::new(),
            grid: None,
            grid_cells: DEFAULT_GRID_CELLS,
            keep_snapshots: false,
        }
    }

    pub fn with_ladder(mut self, ladder: Vec<f64>) -> Self {
        self.delta_ladder = ladder;
        self
    }

    pub fn with_tagged(mut self, tagged: Vec<u64>) -> Self {
        self.tagged = tagged;
        self
    }

    pub fn with_snapshots(mut self, keep: bool) -> Self {
        self.keep_snapshots = keep;
        self
    }

    pub fn with_grid(mut self, grid: GridSpec) -> Self {
        self.grid = Some(grid);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cadence > 0.0) || !self.cadence.is_finite() {
            return Err(Error::Config(format!("cadence must be positive, got {}", self.cadence)));
        }
        if self.delta_ladder.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::Config("delta ladder entries must be finite and >= 0".into()));
        }
        if self.grid_cells == 0 {
            return Err(Error::Config("grid_cells must be positive".into()));
        }
        Ok(())
    }
}

/// Per-run tracking state fed by the integrator after every step.
pub(crate) struct RunContext {
    ladder: Vec<f64>,
    grid: GridSpec,
    probes: Vec<Vec2>,
    tagged: Vec<usize>,
    weights: Vec<f64>,
    pub(crate) collisions: CollisionTracker,
    pub(crate) identities: Vec<IdentityTracker>,
    pub(crate) single_approach: Option<SingleApproachTracker>,
    pub(crate) min_separation: Option<f64>,
    h_running: f64,
}

impl RunContext {
    pub(crate) fn new(e: &Ensemble, schedule: &DiagnosticsSchedule) -> Result<Self> {
        let grid = match schedule.grid {
            Some(g) => g,
            None => GridSpec::covering(e, schedule.grid_cells)?,
        };
        let mut tagged = Vec::new();
        for id in &schedule.tagged {
            let index = e
                .particles
                .iter()
                .position(|p| p.id == *id)
                .ok_or_else(|| Error::Config(format!("tagged particle id {id} not in the ensemble")))?;
            tagged.push(index);
        }
        let sources = PlasmaSources::from_particles(&e.particles, e.field_model);
        let mut identities = Vec::with_capacity(tagged.len());
        for &index in &tagged {
            let (phi, work_rate, flux_rate) = identity_sample(e, &sources, index)?;
            identities.push(IdentityTracker {
                particle_id: e.particles[index].id,
                index,
                phi_initial: phi,
                phi_current: phi,
                work: 0.0,
                flux: 0.0,
                rates: (work_rate, flux_rate),
            });
        }
        Ok(Self {
            ladder: schedule.delta_ladder.clone(),
            probes: grid.centers(),
            grid,
            tagged,
            weights: e.particles.iter().map(|p| p.weight).collect(),
            collisions: CollisionTracker::new(e, &schedule.delta_ladder),
            identities,
            single_approach: (e.charges.len() >= 2).then(|| SingleApproachTracker::new(e.particles.len())),
            min_separation: charge_separation(e),
            h_running: h_current(e)?,
        })
    }

    pub(crate) fn observe_step(&mut self, before: &Ensemble, after: &Ensemble) -> Result<()> {
        self.collisions.observe_step(before, after);
        self.h_running = h_supremum(after, self.h_running)?;
        if let Some(d) = charge_separation(after) {
            self.min_separation = Some(self.min_separation.map_or(d, |m| m.min(d)));
        }
        if !self.identities.is_empty() {
            let h = after.time - before.time;
            let sources = PlasmaSources::from_particles(&after.particles, after.field_model);
            for track in &mut self.identities {
                let (phi, work_rate, flux_rate) = identity_sample(after, &sources, track.index)?;
                track.work += 0.5 * h * (track.rates.0 + work_rate);
                track.flux += 0.5 * h * (track.rates.1 + flux_rate);
                track.rates = (work_rate, flux_rate);
                track.phi_current = phi;
            }
        }
        if let (Some(tracker), Some(d)) = (self.single_approach.as_mut(), self.min_separation) {
            if self.h_running > 0.0 {
                let window = delta_star(self.h_running, d)?;
                let positions: Vec<Vec2> = after.particles.iter().map(|p| p.x()).collect();
                tracker.observe(after.time, &positions, &after.charges, d, window);
            }
        }
        Ok(())
    }

    pub(crate) fn record(&self, e: &Ensemble) -> Result<DiagnosticsRecord> {
        let energy = match energy_terms(e) {
            Ok(terms) => terms,
            Err(Error::Collapse { .. }) => EnergyTerms {
                plasma_kinetic: f64::NAN,
                charge_kinetic: f64::NAN,
                plasma_plasma: f64::NAN,
                charge_plasma: f64::NAN,
                charge_charge: f64::NAN,
            },
            Err(err) => return Err(err),
        };
        let grid = density_grid(e, self.grid)?;
        let momentum_kernel_sup = self
            .probes
            .par_iter()
            .map(|&x| momentum_kernel_integral(x, &e.particles, &e.field_model))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let delta_star = match self.min_separation {
            Some(d) if self.h_running > 0.0 && d > 0.0 => Some(delta_star(self.h_running, d)?),
            _ => None,
        };
        Ok(DiagnosticsRecord {
            time: e.time,
            total_energy: energy.total(),
            kinetic_energy: kinetic_energy(e),
            h_sup: self.h_running,
            first_moment: first_moment(e),
            rho_l2: rho_l2(&grid),
            min_charge_dist: self.min_separation,
            field_sup: field_sup_norm(e, &self.probes)?,
            frac_below: self.collisions.fractions(&self.weights, &self.ladder),
            delta_star,
            energy,
            momentum_kernel_sup,
        })
    }

    pub(crate) fn push_trajectories(&self, e: &Ensemble, out: &mut Vec<TrajectorySample>) {
        let eps = e.mollifier.epsilon();
        for &index in &self.tagged {
            let p = &e.particles[index];
            let (h_eps, dist) = e
                .charges
                .iter()
                .map(|c| (relative_energy_core(&p.phase, c, eps), (p.x() - c.xi).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap_or((0.0, f64::INFINITY));
            out.push(TrajectorySample {
                time: e.time,
                particle_id: p.id,
                phase: p.phase,
                h_eps,
                min_dist_to_charge: dist,
            });
        }
    }
}

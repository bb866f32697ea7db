//! Time integration of the coupled plasma/charge system.
//!
//! Plasma characteristics feel the self-field minus the mollified charge
//! fields; each charge feels the mollified reaction of the plasma and the
//! exact repulsion of the other charges. The field is re-evaluated at every
//! integrator stage.

use rayon::prelude::*;

use crate::diagnostics::{
    self, CollisionTracker, DiagnosticsRecord, DiagnosticsSchedule, IdentityTracker, SingleApproachTracker,
};
use crate::field::{FieldModel, PlasmaSources};
use crate::mollifier::{kernel_core, MollifierParams};
use crate::summation::CompensatedVec2;
use crate::{ChargeState, Error, Particle, PhasePoint, Result, Vec2};

/// Charges closer than this abort the run.
pub const COLLAPSE_DISTANCE: f64 = 1e-12;

/// Most sub-steps a single RK4 step is split into at core crossings.
const MAX_SEAM_SPLITS: usize = 64;

/// Crossings closer than this fraction of a step to its start are ignored:
/// the step already begins on the seam.
const SEAM_GUARD: f64 = 1e-4;

/// The simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub particles: Vec<Particle>,
    pub charges: Vec<ChargeState>,
    pub time: f64,
    pub mollifier: MollifierParams,
    pub field_model: FieldModel,
}

impl Ensemble {
    pub fn new(particles: Vec<Particle>, charges: Vec<ChargeState>, mollifier: MollifierParams, field_model: FieldModel) -> Self {
        Self {
            particles,
            charges,
            time: 0.0,
            mollifier,
            field_model,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.particles.iter().map(|p| p.weight).sum()
    }

    /// Largest relative speed `|v - eta|` (or `|v|` without charges).
    pub fn max_relative_speed(&self) -> f64 {
        let mut max = 0.0f64;
        for p in &self.particles {
            if self.charges.is_empty() {
                max = max.max(p.v().norm());
            }
            for c in &self.charges {
                max = max.max((p.v() - c.eta).norm());
            }
        }
        max
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.particles.iter().all(|p| p.x().is_finite() && p.v().is_finite())
            && self.charges.iter().all(|c| c.xi.is_finite() && c.eta.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("ensemble state"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    VelocityVerlet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    /// Fixed step, or the initial step when adaptive.
    pub dt: f64,
    /// Absolute end time of a run.
    pub t_end: f64,
    /// Local error tolerance; `Some` switches to embedded Dormand–Prince 5(4)
    /// step control (RK scheme only).
    pub adaptive: Option<f64>,
}

impl IntegratorConfig {
    pub fn fixed(scheme: Scheme, dt: f64, t_end: f64) -> Self {
        Self {
            scheme,
            dt,
            t_end,
            adaptive: None,
        }
    }

    pub fn adaptive(dt: f64, t_end: f64, tolerance: f64) -> Self {
        Self {
            scheme: Scheme::Rk4,
            dt,
            t_end,
            adaptive: Some(tolerance),
        }
    }

    /// Largest fixed step that resolves the mollifier core:
    /// `epsilon / (10 max(v_rel, 1))`.
    pub fn step_cap(ensemble: &Ensemble) -> f64 {
        ensemble.mollifier.epsilon() / (10.0 * ensemble.max_relative_speed().max(1.0))
    }

    pub fn validate(&self, ensemble: &Ensemble) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0) || !self.t_end.is_finite() {
            return Err(Error::Config(format!("t_end must be >= 0, got {}", self.t_end)));
        }
        match self.adaptive {
            Some(tol) => {
                if self.scheme != Scheme::Rk4 {
                    return Err(Error::Config("adaptive stepping requires the rk4 scheme".into()));
                }
                if !(tol > 0.0) {
                    return Err(Error::Config(format!("adaptive tolerance must be positive, got {tol}")));
                }
            }
            None => {
                let cap = Self::step_cap(ensemble);
                if self.dt > cap * (1.0 + 1e-12) {
                    return Err(Error::Precondition(format!(
                        "dt = {} exceeds the core-resolving cap epsilon / (10 v_max) = {cap:.3e}",
                        self.dt
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Time derivative of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    pub dx: Vec<Vec2>,
    pub dv: Vec<Vec2>,
    pub dxi: Vec<Vec2>,
    pub deta: Vec<Vec2>,
}

/// Flat state `[x, v, xi, eta]` with two reals per vector.
#[derive(Debug, Clone)]
struct State(Vec<f64>);

/// Static data of the system: everything except positions and velocities.
struct System {
    weights: Vec<f64>,
    pinned: Vec<bool>,
    mollifier: MollifierParams,
    field_model: FieldModel,
    particles: usize,
    charges: usize,
}

impl System {
    fn of(e: &Ensemble) -> Self {
        Self {
            weights: e.particles.iter().map(|p| p.weight).collect(),
            pinned: e.charges.iter().map(|c| c.pinned).collect(),
            mollifier: e.mollifier,
            field_model: e.field_model,
            particles: e.particles.len(),
            charges: e.charges.len(),
        }
    }

    fn pack(&self, e: &Ensemble) -> State {
        let mut y = Vec::with_capacity(4 * (self.particles + self.charges));
        for p in &e.particles {
            y.extend([p.x().x, p.x().y]);
        }
        for p in &e.particles {
            y.extend([p.v().x, p.v().y]);
        }
        for c in &e.charges {
            y.extend([c.xi.x, c.xi.y]);
        }
        for c in &e.charges {
            y.extend([c.eta.x, c.eta.y]);
        }
        State(y)
    }

    fn unpack_into(&self, y: &State, e: &mut Ensemble) {
        let (x, v, xi, eta) = self.split(&y.0);
        for (k, p) in e.particles.iter_mut().enumerate() {
            p.phase = PhasePoint { x: x[k], v: v[k] };
        }
        for (k, c) in e.charges.iter_mut().enumerate() {
            c.xi = xi[k];
            c.eta = eta[k];
        }
    }

    fn split(&self, y: &[f64]) -> (Vec<Vec2>, Vec<Vec2>, Vec<Vec2>, Vec<Vec2>) {
        let m = self.particles;
        let n = self.charges;
        let read = |from: usize, count: usize| -> Vec<Vec2> {
            y[2 * from..2 * (from + count)].chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
        };
        (read(0, m), read(m, m), read(2 * m, n), read(2 * m + n, n))
    }

    fn positions(&self, y: &[f64]) -> (Vec<Vec2>, Vec<Vec2>) {
        let m = self.particles;
        let n = self.charges;
        let read = |from: usize, count: usize| -> Vec<Vec2> {
            y[2 * from..2 * (from + count)].chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect()
        };
        (read(0, m), read(2 * m, n))
    }

    fn check_charges(&self, xi: &[Vec2], time: f64) -> Result<()> {
        for i in 0..xi.len() {
            for j in i + 1..xi.len() {
                let d = (xi[i] - xi[j]).norm();
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

    /// Plasma and charge accelerations at the given positions.
    fn accelerations(&self, x: &[Vec2], xi: &[Vec2], time: f64) -> Result<(Vec<Vec2>, Vec<Vec2>)> {
        self.check_charges(xi, time)?;
        let eps = self.mollifier.epsilon();
        let sources = PlasmaSources::new(x, &self.weights, self.field_model);
        let plasma: Vec<Vec2> = x
            .par_iter()
            .enumerate()
            .map(|(j, &xj)| {
                let mut a = sources.field_at(xj, Some(j))?;
                for &c in xi {
                    a -= kernel_core(xj - c, eps);
                }
                Ok(a)
            })
            .collect::<Result<_>>()?;
        let charges: Vec<Vec2> = (0..xi.len())
            .map(|i| {
                if self.pinned[i] {
                    return Vec2::ZERO;
                }
                let mut reaction = CompensatedVec2::new();
                for (j, &xj) in x.iter().enumerate() {
                    let w = self.weights[j];
                    if w != 0.0 {
                        reaction.add(kernel_core(xj - xi[i], eps) * w);
                    }
                }
                let mut a = reaction.value();
                for (k, &other) in xi.iter().enumerate() {
                    if k != i {
                        let z = xi[i] - other;
                        a += z / z.norm_squared();
                    }
                }
                a
            })
            .collect();
        Ok((plasma, charges))
    }

    /// Earliest fraction `s` of the step `h` from `y0` to `y1` at which some
    /// particle crosses the radius-epsilon circle of a charge, from cubic
    /// Hermite interpolation of the relative motion.
    fn first_core_crossing(&self, y0: &State, y1: &State, h: f64) -> Option<f64> {
        const SCAN: usize = 16;
        let eps2 = self.mollifier.epsilon().powi(2);
        let (x0, v0, xi0, eta0) = self.split(&y0.0);
        let (x1, v1, xi1, eta1) = self.split(&y1.0);
        let mut earliest: Option<f64> = None;
        for i in 0..self.charges {
            for j in 0..self.particles {
                let p0 = x0[j] - xi0[i];
                let p1 = x1[j] - xi1[i];
                let m0 = (v0[j] - eta0[i]) * h;
                let m1 = (v1[j] - eta1[i]) * h;
                let reach = p0.norm().min(p1.norm()) - m0.norm().max(m1.norm());
                if reach * reach > eps2 && reach > 0.0 {
                    continue;
                }
                let at = |s: f64| -> f64 {
                    let s2 = s * s;
                    let s3 = s2 * s;
                    let p = p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
                        + m0 * (s3 - 2.0 * s2 + s)
                        + p1 * (-2.0 * s3 + 3.0 * s2)
                        + m1 * (s3 - s2);
                    p.norm_squared() - eps2
                };
                let limit = earliest.unwrap_or(1.0);
                let mut lo = SEAM_GUARD;
                let mut f_lo = at(lo);
                for k in 1..=SCAN {
                    let hi = (SEAM_GUARD + (1.0 - SEAM_GUARD) * k as f64 / SCAN as f64).min(1.0);
                    if lo >= limit {
                        break;
                    }
                    let f_hi = at(hi);
                    if (f_lo < 0.0) != (f_hi < 0.0) {
                        let (mut a, mut b) = (lo, hi);
                        for _ in 0..60 {
                            let mid = 0.5 * (a + b);
                            if (at(mid) < 0.0) == (f_lo < 0.0) {
                                a = mid;
                            } else {
                                b = mid;
                            }
                        }
                        let root = 0.5 * (a + b);
                        if root < 1.0 - SEAM_GUARD && root < limit {
                            earliest = Some(root);
                        }
                        break;
                    }
                    lo = hi;
                    f_lo = f_hi;
                }
            }
        }
        earliest
    }

    fn derivative(&self, y: &State, time: f64) -> Result<State> {
        let (x, v, _, eta) = self.split(&y.0);
        let (_, xi) = self.positions(&y.0);
        let (a, b) = self.accelerations(&x, &xi, time)?;
        let mut out = Vec::with_capacity(y.0.len());
        for w in &v {
            out.extend([w.x, w.y]);
        }
        for w in &a {
            out.extend([w.x, w.y]);
        }
        for (i, w) in eta.iter().enumerate() {
            let w = if self.pinned[i] { Vec2::ZERO } else { *w };
            out.extend([w.x, w.y]);
        }
        for w in &b {
            out.extend([w.x, w.y]);
        }
        Ok(State(out))
    }
}

fn combine(y: &State, terms: &[(f64, &State)]) -> State {
    let mut out = y.0.clone();
    for (c, k) in terms {
        if *c == 0.0 {
            continue;
        }
        for (o, d) in out.iter_mut().zip(&k.0) {
            *o += c * d;
        }
    }
    State(out)
}

/// Time derivative of the ensemble.
pub fn rhs(e: &Ensemble) -> Result<Derivative> {
    let sys = System::of(e);
    let y = sys.pack(e);
    let d = sys.derivative(&y, e.time)?;
    let (dx, dv, dxi, deta) = sys.split(&d.0);
    Ok(Derivative { dx, dv, dxi, deta })
}

/// Advances the ensemble by one step of `cfg.dt`.
pub fn step(e: &Ensemble, cfg: &IntegratorConfig) -> Result<Ensemble> {
    let mut next = e.clone();
    let mut stepper = Stepper::new(e, cfg.scheme);
    stepper.advance(&mut next, cfg.dt)?;
    Ok(next)
}

/// Advances by a signed step `h` with a fixed-step scheme; negative `h`
/// integrates backwards.
pub fn step_by(e: &Ensemble, scheme: Scheme, h: f64) -> Result<Ensemble> {
    let mut next = e.clone();
    Stepper::new(e, scheme).advance(&mut next, h)?;
    Ok(next)
}

/// Fixed-step or adaptive stepper over one ensemble. Caches the
/// acceleration between velocity Verlet steps.
pub struct Stepper {
    sys: System,
    scheme: Scheme,
    cached: Option<(f64, Vec<Vec2>, Vec<Vec2>)>,
}

impl Stepper {
    pub fn new(e: &Ensemble, scheme: Scheme) -> Self {
        Self {
            sys: System::of(e),
            scheme,
            cached: None,
        }
    }

    /// One fixed step of size `h`.
    pub fn advance(&mut self, e: &mut Ensemble, h: f64) -> Result<()> {
        match self.scheme {
            Scheme::Rk4 => self.rk4(e, h),
            Scheme::VelocityVerlet => self.verlet(e, h),
        }
    }

    fn rk4_raw(&self, y: &State, t: f64, h: f64) -> Result<State> {
        let k1 = self.sys.derivative(y, t)?;
        let k2 = self.sys.derivative(&combine(y, &[(0.5 * h, &k1)]), t + 0.5 * h)?;
        let k3 = self.sys.derivative(&combine(y, &[(0.5 * h, &k2)]), t + 0.5 * h)?;
        let k4 = self.sys.derivative(&combine(y, &[(h, &k3)]), t + h)?;
        Ok(combine(y, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]))
    }

    /// RK4 step split at every crossing of a mollifier core boundary, so
    /// that no stage straddles the seam where the force is only continuous.
    fn rk4(&mut self, e: &mut Ensemble, h: f64) -> Result<()> {
        let mut t = e.time;
        let mut y = self.sys.pack(e);
        let mut remaining = h;
        for _ in 0..MAX_SEAM_SPLITS {
            let trial = self.rk4_raw(&y, t, remaining)?;
            match self.sys.first_core_crossing(&y, &trial, remaining) {
                Some(s) => {
                    let h1 = s * remaining;
                    y = self.rk4_raw(&y, t, h1)?;
                    t += h1;
                    remaining -= h1;
                }
                None => {
                    y = trial;
                    remaining = 0.0;
                    break;
                }
            }
        }
        if remaining != 0.0 {
            y = self.rk4_raw(&y, t, remaining)?;
        }
        self.sys.unpack_into(&y, e);
        e.time += h;
        e.check_finite()
    }

    fn verlet(&mut self, e: &mut Ensemble, h: f64) -> Result<()> {
        let t = e.time;
        let (a, b) = match self.cached.take() {
            Some((tc, a, b)) if tc == t => (a, b),
            _ => {
                let x: Vec<Vec2> = e.particles.iter().map(|p| p.x()).collect();
                let xi: Vec<Vec2> = e.charges.iter().map(|c| c.xi).collect();
                self.sys.accelerations(&x, &xi, t)?
            }
        };
        for (p, acc) in e.particles.iter_mut().zip(&a) {
            p.phase.v += *acc * (0.5 * h);
            p.phase.x += p.phase.v * h;
        }
        for (c, acc) in e.charges.iter_mut().zip(&b) {
            if !c.pinned {
                c.eta += *acc * (0.5 * h);
                c.xi += c.eta * h;
            }
        }
        let x: Vec<Vec2> = e.particles.iter().map(|p| p.x()).collect();
        let xi: Vec<Vec2> = e.charges.iter().map(|c| c.xi).collect();
        let (a, b) = self.sys.accelerations(&x, &xi, t + h)?;
        for (p, acc) in e.particles.iter_mut().zip(&a) {
            p.phase.v += *acc * (0.5 * h);
        }
        for (c, acc) in e.charges.iter_mut().zip(&b) {
            if !c.pinned {
                c.eta += *acc * (0.5 * h);
            }
        }
        e.time = t + h;
        self.cached = Some((e.time, a, b));
        e.check_finite()
    }

    /// One attempted Dormand–Prince 5(4) step. Returns the scaled error
    /// norm; the ensemble is updated only when the norm is at most 1.
    fn dopri_attempt(&mut self, e: &mut Ensemble, h: f64, tol: f64) -> Result<f64> {
        const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
        const A: [[f64; 6]; 7] = [
            [0.0; 6],
            [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        const B4: [f64; 7] = [
            5179.0 / 57600.0,
            0.0,
            7571.0 / 16695.0,
            393.0 / 640.0,
            -92097.0 / 339200.0,
            187.0 / 2100.0,
            1.0 / 40.0,
        ];
        let t = e.time;
        let y = self.sys.pack(e);
        let mut k: Vec<State> = Vec::with_capacity(7);
        for s in 0..7 {
            let terms: Vec<(f64, &State)> = (0..s).map(|j| (h * A[s][j], &k[j])).collect();
            let ys = combine(&y, &terms);
            k.push(self.sys.derivative(&ys, t + C[s] * h)?);
        }
        let high = combine(&y, &(0..7).map(|j| (h * B5[j], &k[j])).collect::<Vec<_>>());
        let mut err = 0.0f64;
        for i in 0..y.0.len() {
            let mut diff = 0.0;
            for j in 0..7 {
                diff += (B5[j] - B4[j]) * k[j].0[i];
            }
            let scale = tol * (1.0 + y.0[i].abs().max(high.0[i].abs()));
            err = err.max((h * diff).abs() / scale);
        }
        if err <= 1.0 {
            self.sys.unpack_into(&high, e);
            e.time = t + h;
            e.check_finite()?;
        }
        Ok(err)
    }
}

/// One Dormand–Prince step with rejection; returns the accepted step, a
/// proposal for the next one and the number of rejected attempts.
fn adaptive_step(stepper: &mut Stepper, e: &mut Ensemble, mut h: f64, max_h: f64, tol: f64) -> Result<(f64, f64, usize)> {
    let min_h = 1e-14 * (1.0 + e.time.abs());
    let mut rejected = 0;
    loop {
        let h_try = h.min(max_h);
        let err = stepper.dopri_attempt(e, h_try, tol)?;
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            return Ok((h_try, h_try * factor, rejected));
        }
        rejected += 1;
        h = h_try * factor;
        if h < min_h {
            return Err(Error::Precondition(format!(
                "adaptive step underflow at t = {}: tolerance {tol} unattainable",
                e.time
            )));
        }
    }
}

/// Status of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Two charges collided; the run stopped at `time`.
    Collapsed { time: f64, error: Error },
}

/// Positions and velocities of everything at one sample time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub particles: Vec<PhasePoint>,
    pub charges: Vec<ChargeState>,
}

impl Snapshot {
    pub fn of(e: &Ensemble) -> Self {
        Self {
            time: e.time,
            particles: e.particles.iter().map(|p| p.phase).collect(),
            charges: e.charges.clone(),
        }
    }
}

/// Particle identities and weights with the sampled trajectories of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRun {
    pub ids: Vec<u64>,
    pub weights: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

/// One tagged-particle trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub time: f64,
    pub particle_id: u64,
    pub phase: PhasePoint,
    pub h_eps: f64,
    pub min_dist_to_charge: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub status: RunStatus,
    pub records: Vec<DiagnosticsRecord>,
    pub final_state: Ensemble,
    /// Snapshots at every sample when requested by the schedule.
    pub samples: SampledRun,
    pub trajectories: Vec<TrajectorySample>,
    pub collisions: CollisionTracker,
    pub identities: Vec<IdentityTracker>,
    pub single_approach_violations: Option<usize>,
    pub min_charge_separation: Option<f64>,
    pub steps: usize,
    pub rejected_steps: usize,
}

impl RunOutput {
    /// Largest relative drift `|E(t) - E(0)| / |E(0)|` of the total energy.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.records[0].total_energy;
        self.records
            .iter()
            .map(|r| (r.total_energy - e0).abs())
            .fold(0.0, f64::max)
            / e0.abs()
    }

    pub fn final_record(&self) -> &DiagnosticsRecord {
        self.records.last().expect("a run always records t = 0")
    }
}

/// Integrates from `e.time` to `cfg.t_end`, sampling diagnostics every
/// `schedule.cadence` and tracking collision, identity and single-approach
/// statistics at every step.
pub fn run(e: &Ensemble, cfg: &IntegratorConfig, schedule: &DiagnosticsSchedule) -> Result<RunOutput> {
    cfg.validate(e)?;
    schedule.validate()?;
    let mut state = e.clone();
    let t0 = state.time;
    if cfg.t_end < t0 {
        return Err(Error::Config(format!("t_end {} precedes the start time {t0}", cfg.t_end)));
    }
    let mut stepper = Stepper::new(&state, cfg.scheme);
    let mut ctx = diagnostics::RunContext::new(&state, schedule)?;
    let mut records = vec![ctx.record(&state)?];
    let mut snapshots = Vec::new();
    let mut trajectories = Vec::new();
    if schedule.keep_snapshots {
        snapshots.push(Snapshot::of(&state));
    }
    ctx.push_trajectories(&state, &mut trajectories);

    let mut status = RunStatus::Completed;
    let mut steps = 0usize;
    let mut rejected = 0usize;
    let samples = ((cfg.t_end - t0) / schedule.cadence - 1e-9).ceil().max(0.0) as usize;
    let mut h_next = cfg.dt;
    'outer: for k in 1..=samples {
        let target = (t0 + k as f64 * schedule.cadence).min(cfg.t_end);
        let target = if k == samples { cfg.t_end } else { target };
        match cfg.adaptive {
            None => {
                let span = target - state.time;
                let n = ((span / cfg.dt) - 1e-9).ceil().max(1.0) as usize;
                let h = span / n as f64;
                for s in 0..n {
                    let before = state.clone();
                    if let Err(err) = stepper.advance(&mut state, h) {
                        if let Error::Collapse { time, .. } = err {
                            status = RunStatus::Collapsed { time, error: err };
                            state = before;
                            break 'outer;
                        }
                        return Err(err);
                    }
                    if s + 1 == n {
                        state.time = target;
                    }
                    steps += 1;
                    ctx.observe_step(&before, &state)?;
                }
            }
            Some(tol) => {
                while state.time < target {
                    let before = state.clone();
                    let remaining = target - state.time;
                    match adaptive_step(&mut stepper, &mut state, h_next, remaining, tol) {
                        Ok((taken, proposal, retries)) => {
                            rejected += retries;
                            if taken >= remaining {
                                state.time = target;
                            } else {
                                h_next = proposal;
                            }
                        }
                        Err(err @ Error::Collapse { time, .. }) => {
                            status = RunStatus::Collapsed { time, error: err };
                            state = before;
                            break 'outer;
                        }
                        Err(err) => return Err(err),
                    }
                    steps += 1;
                    ctx.observe_step(&before, &state)?;
                }
            }
        }
        records.push(ctx.record(&state)?);
        if schedule.keep_snapshots {
            snapshots.push(Snapshot::of(&state));
        }
        ctx.push_trajectories(&state, &mut trajectories);
    }
    if matches!(status, RunStatus::Collapsed { .. }) {
        records.push(ctx.record(&state)?);
    }

    Ok(RunOutput {
        status,
        records,
        samples: SampledRun {
            ids: state.particles.iter().map(|p| p.id).collect(),
            weights: state.particles.iter().map(|p| p.weight).collect(),
            snapshots,
        },
        final_state: state,
        trajectories,
        collisions: ctx.collisions.clone(),
        identities: ctx.identities.clone(),
        single_approach_violations: ctx.single_approach.as_ref().map(SingleApproachTracker::violations),
        min_charge_separation: ctx.min_separation,
        steps,
        rejected_steps: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnostics::DiagnosticsSchedule;
    use crate::initial_data::{sample_support, SupportSpec};

    fn at(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    fn ensemble(particles: Vec<Particle>, charges: Vec<ChargeState>, eps: f64) -> Ensemble {
        Ensemble::new(
            particles,
            charges,
            MollifierParams::new(eps, 2.0 * eps).unwrap(),
            FieldModel::direct(0.05).unwrap(),
        )
    }

    fn plasma(count: usize, seed: u64) -> (Vec<Particle>, Vec<ChargeState>) {
        let charges = vec![ChargeState::new(Vec2::ZERO, Vec2::ZERO).unwrap()];
        let spec = SupportSpec::new(1.0, 0.2, charges.clone()).unwrap();
        (sample_support(&spec, count, seed).unwrap(), charges)
    }

    #[test]
    fn rhs_examples() {
        let lone = ensemble(vec![], vec![ChargeState::new(at(0.3, 0.1), Vec2::ZERO).unwrap()], 0.1);
        let d = rhs(&lone).unwrap();
        assert_eq!(d.dxi, vec![Vec2::ZERO]);
        assert_eq!(d.deta, vec![Vec2::ZERO]);

        let r = 0.8;
        let tracer = Particle::tracer(at(r, 0.0), at(0.0, 0.3), 0).unwrap();
        let e = ensemble(vec![tracer], vec![ChargeState::new(Vec2::ZERO, Vec2::ZERO).unwrap()], 0.1);
        let d = rhs(&e).unwrap();
        assert!((d.dv[0].x + 1.0 / r).abs() < 1e-15 && d.dv[0].y == 0.0);
        assert_eq!(d.dx[0], at(0.0, 0.3));
        assert_eq!(d.deta[0], Vec2::ZERO);

        let pair = ensemble(
            vec![],
            vec![
                ChargeState::new(at(-1.0, 0.0), Vec2::ZERO).unwrap(),
                ChargeState::new(at(1.0, 0.0), Vec2::ZERO).unwrap(),
            ],
            0.1,
        );
        let d = rhs(&pair).unwrap();
        assert_eq!(d.deta, vec![at(-0.5, 0.0), at(0.5, 0.0)]);
    }

    #[test]
    fn charge_feels_mollified_plasma_reaction() {
        let p = Particle::new(PhasePoint::new(at(0.0, 0.5), Vec2::ZERO).unwrap(), 0.25, 0).unwrap();
        let e = ensemble(vec![p], vec![ChargeState::new(Vec2::ZERO, Vec2::ZERO).unwrap()], 0.1);
        let d = rhs(&e).unwrap();
        assert!((d.deta[0].y - 0.5).abs() < 1e-15 && d.deta[0].x == 0.0);
        assert!((d.dv[0].y + 2.0).abs() < 1e-15);
    }

    #[test]
    fn coincident_charges_collapse() {
        let e = ensemble(
            vec![],
            vec![
                ChargeState::new(Vec2::ZERO, Vec2::ZERO).unwrap(),
                ChargeState::new(at(1e-13, 0.0), Vec2::ZERO).unwrap(),
            ],
            0.1,
        );
        assert!(matches!(rhs(&e), Err(Error::Collapse { first: 0, second: 1, .. })));
    }

    #[test]
    fn free_tracer_moves_in_a_straight_line() {
        let x = at(0.3, -1.2);
        let v = at(0.7, 0.4);
        let e = ensemble(vec![Particle::tracer(x, v, 0).unwrap()], vec![], 0.1);
        let cfg = IntegratorConfig::fixed(Scheme::Rk4, 1e-3, 1.0);
        let next = step(&e, &cfg).unwrap();
        let expected = x + v * 1e-3;
        assert!((next.particles[0].x() - expected).norm() < 1e-15);
        assert_eq!(next.particles[0].v(), v);
        assert_eq!(next.time, 1e-3);
    }

    #[test]
    fn circular_orbits_keep_their_radius() {
        for r in [0.5, 1.0, 2.0] {
            let tracer = Particle::tracer(at(r, 0.0), at(0.0, 1.0), 0).unwrap();
            let mut e = ensemble(vec![tracer], vec![ChargeState::pinned_at(Vec2::ZERO).unwrap()], 0.05);
            let period = std::f64::consts::TAU * r;
            let n = (period / 1e-3).ceil() as usize;
            let h = period / n as f64;
            let mut stepper = Stepper::new(&e, Scheme::Rk4);
            let mut drift = 0.0f64;
            for _ in 0..n {
                stepper.advance(&mut e, h).unwrap();
                drift = drift.max((e.particles[0].x().norm() - r).abs());
            }
            assert!(drift <= 1e-6, "r = {r}: drift {drift}");
            assert_eq!(e.charges[0].xi, Vec2::ZERO);
        }
    }

    #[test]
    fn velocity_verlet_is_reversible() {
        let (particles, charges) = plasma(40, 3);
        let mut e = ensemble(particles, charges, 0.1);
        e.charges[0].eta = at(0.2, -0.1);
        let start = e.clone();
        let h = 1e-3;
        for _ in 0..200 {
            e = step_by(&e, Scheme::VelocityVerlet, h).unwrap();
        }
        for _ in 0..200 {
            e = step_by(&e, Scheme::VelocityVerlet, -h).unwrap();
        }
        for (a, b) in e.particles.iter().zip(&start.particles) {
            assert!((a.x() - b.x()).norm() < 1e-9 && (a.v() - b.v()).norm() < 1e-9);
        }
        assert!((e.charges[0].xi - start.charges[0].xi).norm() < 1e-9);
        assert!(e.time.abs() < 1e-12);
    }

    #[test]
    fn verlet_step_preserves_phase_volume_in_the_core() {
        // Inside the core of a pinned charge the force is linear and frozen.
        let eps = 0.5;
        let base = [0.1, 0.05, 0.3, -0.2];
        let map = |s: [f64; 4]| -> [f64; 4] {
            let tracer = Particle::tracer(at(s[0], s[1]), at(s[2], s[3]), 0).unwrap();
            let e = ensemble(vec![tracer], vec![ChargeState::pinned_at(Vec2::ZERO).unwrap()], eps);
            let n = step_by(&e, Scheme::VelocityVerlet, 0.01).unwrap();
            let p = n.particles[0];
            [p.x().x, p.x().y, p.v().x, p.v().y]
        };
        let delta = 1e-3;
        let mut jac = [[0.0; 4]; 4];
        for k in 0..4 {
            let mut plus = base;
            let mut minus = base;
            plus[k] += delta;
            minus[k] -= delta;
            let (fp, fm) = (map(plus), map(minus));
            for i in 0..4 {
                jac[i][k] = (fp[i] - fm[i]) / (2.0 * delta);
            }
        }
        let det = determinant4(jac);
        assert!((det - 1.0).abs() < 1e-12, "det = {det}");
    }

    fn determinant4(m: [[f64; 4]; 4]) -> f64 {
        let mut a = m;
        let mut det = 1.0;
        for c in 0..4 {
            let p = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            if p != c {
                a.swap(p, c);
                det = -det;
            }
            det *= a[c][c];
            for r in c + 1..4 {
                let f = a[r][c] / a[c][c];
                for k in c..4 {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        det
    }

    #[test]
    fn rk4_resolves_core_crossings() {
        // A radial tracer through a pinned core: energy of the tracer is
        // conserved to fourth order only if steps are split at the seam.
        let drift = |h: f64| {
            let tracer = Particle::tracer(at(0.2, 0.013), at(-1.5, 0.0), 0).unwrap();
            let mut e = ensemble(vec![tracer], vec![ChargeState::pinned_at(Vec2::ZERO).unwrap()], 0.05);
            let eps = e.mollifier.epsilon();
            let energy = |e: &Ensemble| {
                let p = e.particles[0];
                0.5 * p.v().norm_squared() + crate::mollifier::ln_eps(p.x().norm(), &e.mollifier)
            };
            let e0 = energy(&e);
            let mut stepper = Stepper::new(&e, Scheme::Rk4);
            let mut worst = 0.0f64;
            let n = (0.3 / h).round() as usize;
            let mut entered = false;
            for _ in 0..n {
                stepper.advance(&mut e, h).unwrap();
                entered |= e.particles[0].x().norm() < eps;
                worst = worst.max((energy(&e) - e0).abs());
            }
            assert!(entered);
            worst
        };
        let coarse = drift(2e-3);
        let fine = drift(1e-3);
        assert!(coarse / fine > 12.0, "{coarse:e} -> {fine:e}");
    }

    #[test]
    fn weights_are_conserved_bitwise() {
        let (particles, charges) = plasma(50, 5);
        let e = ensemble(particles, charges, 0.1);
        let cfg = IntegratorConfig::fixed(Scheme::Rk4, 2e-3, 0.1);
        let out = run(&e, &cfg, &DiagnosticsSchedule::new(0.05)).unwrap();
        for (a, b) in out.final_state.particles.iter().zip(&e.particles) {
            assert_eq!(a.weight.to_bits(), b.weight.to_bits());
            assert_eq!(a.id, b.id);
        }
        assert_eq!(out.status, RunStatus::Completed);
        assert_eq!(out.records.len(), 3);
        assert!((out.final_state.time - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_duration_run_only_samples_the_start() {
        let (particles, charges) = plasma(30, 1);
        let e = ensemble(particles, charges, 0.1);
        let cfg = IntegratorConfig::fixed(Scheme::Rk4, 1e-3, 0.0);
        let out = run(&e, &cfg, &DiagnosticsSchedule::new(0.05)).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].time, 0.0);
        assert_eq!(out.final_state, e);
        assert_eq!(out.steps, 0);
    }

    #[test]
    fn runs_replay_bitwise() {
        let (particles, charges) = plasma(60, 9);
        let e = ensemble(particles, charges, 0.1);
        let cfg = IntegratorConfig::fixed(Scheme::Rk4, 2e-3, 0.1);
        let schedule = DiagnosticsSchedule::new(0.02).with_tagged(vec![1, 2]);
        let a = run(&e, &cfg, &schedule).unwrap();
        let b = run(&e, &cfg, &schedule).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn collapse_stops_the_run_with_a_record() {
        let e = ensemble(
            vec![],
            vec![
                ChargeState::new(Vec2::ZERO, Vec2::ZERO).unwrap(),
                ChargeState::new(at(1e-13, 0.0), Vec2::ZERO).unwrap(),
            ],
            0.1,
        );
        let cfg = IntegratorConfig::fixed(Scheme::Rk4, 1e-3, 0.1);
        let out = run(&e, &cfg, &DiagnosticsSchedule::new(0.05)).unwrap();
        assert!(matches!(out.status, RunStatus::Collapsed { .. }));
        assert_eq!(out.records.len(), 2);
        assert!(out.records[1].total_energy.is_nan());
    }

    #[test]
    fn step_cap_is_enforced_without_adaptivity() {
        let tracer = Particle::tracer(at(1.0, 0.0), at(0.0, 2.0), 0).unwrap();
        let e = ensemble(vec![tracer], vec![ChargeState::pinned_at(Vec2::ZERO).unwrap()], 0.1);
        assert!((IntegratorConfig::step_cap(&e) - 0.005).abs() < 1e-15);
        let too_big = IntegratorConfig::fixed(Scheme::Rk4, 0.006, 1.0);
        assert!(matches!(too_big.validate(&e), Err(Error::Precondition(_))));
        assert!(IntegratorConfig::fixed(Scheme::Rk4, 0.005, 1.0).validate(&e).is_ok());
        assert!(IntegratorConfig::adaptive(0.1, 1.0, 1e-10).validate(&e).is_ok());
        let verlet = IntegratorConfig {
            scheme: Scheme::VelocityVerlet,
            ..IntegratorConfig::adaptive(0.1, 1.0, 1e-10)
        };
        assert!(matches!(verlet.validate(&e), Err(Error::Config(_))));
    }

    #[test]
    fn adaptive_run_lands_on_sample_times() {
        let tracer = Particle::tracer(at(0.3, 0.0), at(0.0, 1.0), 0).unwrap();
        let e = ensemble(vec![tracer], vec![ChargeState::pinned_at(Vec2::ZERO).unwrap()], 0.05);
        let cfg = IntegratorConfig::adaptive(1e-3, 0.5, 1e-10);
        let out = run(&e, &cfg, &DiagnosticsSchedule::new(0.1)).unwrap();
        let times: Vec<f64> = out.records.iter().map(|r| r.time).collect();
        assert_eq!(times.len(), 6);
        for (k, t) in times.iter().enumerate() {
            assert!((t - 0.1 * k as f64).abs() < 1e-12, "{times:?}");
        }
        assert!((out.final_state.particles[0].x().norm() - 0.3).abs() < 1e-8);
    }

    #[test]
    fn core_entries_are_flagged() {
        let tracer = Particle::tracer(at(0.2, 0.01), at(-2.0, 0.0), 0).unwrap();
        let e = ensemble(vec![tracer], vec![ChargeState::pinned_at(Vec2::ZERO).unwrap()], 0.05);
        let cfg = IntegratorConfig::fixed(Scheme::Rk4, 1e-3, 0.2);
        let out = run(&e, &cfg, &DiagnosticsSchedule::new(0.1)).unwrap();
        assert_eq!(out.collisions.core_entries(), 1);
        assert!(out.collisions.min_distance[0] < 0.05);
    }
}

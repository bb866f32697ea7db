//! Admissible initial supports and their sampling.
//!
//! A phase point is admissible when its relative energy with respect to the
//! charges lies in the band `|h_0| <= c0` and it sits farther than `beta`
//! from every charge. With several charges, `h_0` is the relative energy to
//! the charge whose ball of radius `d0/4` contains the point, or the largest
//! one when no ball does.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mollifier::{ln_core, MollifierParams};
use crate::scalar::ln_minus_unchecked;
use crate::{ChargeState, Error, Particle, PhasePoint, Result, Vec2};

/// Attempts allowed per requested sample before giving up.
pub const ATTEMPTS_PER_SAMPLE: u64 = 1000;

/// Lower clamp on the hollow radius when bounding speeds.
const BETA_FLOOR: f64 = 1e-6;

/// Shape of `f_0` on the admissible set.
#[derive(Clone, Default)]
pub enum DensityProfile {
    /// Constant on the admissible set.
    #[default]
    Uniform,
    /// Relative density in `[0, 1]` on the admissible set, used as an
    /// acceptance probability; values outside are clamped.
    Custom(Arc<dyn Fn(&PhasePoint) -> f64 + Send + Sync>),
}

impl fmt::Debug for DensityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityProfile::Uniform => f.write_str("Uniform"),
            DensityProfile::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// Description of the initial support.
#[derive(Debug, Clone)]
pub struct SupportSpec {
    c0: f64,
    beta: f64,
    charges: Vec<ChargeState>,
    profile: DensityProfile,
}

impl SupportSpec {
    pub fn new(c0: f64, beta: f64, charges: Vec<ChargeState>) -> Result<Self> {
        if !(c0 > 0.0) || !c0.is_finite() {
            return Err(Error::Config(format!("c0 > 0 required, got {c0}")));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("beta >= 0 required, got {beta}")));
        }
        if charges.is_empty() {
            return Err(Error::Config("at least one charge required".into()));
        }
        if let Some(d0) = min_pair_distance(&charges) {
            if !(d0 > 0.0) {
                return Err(Error::Config("d0 > 0 required: two charges coincide".into()));
            }
        }
        Ok(Self {
            c0,
            beta,
            charges,
            profile: DensityProfile::Uniform,
        })
    }

    pub fn with_profile(mut self, profile: DensityProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn charges(&self) -> &[ChargeState] {
        &self.charges
    }

    pub fn profile(&self) -> &DensityProfile {
        &self.profile
    }

    /// Minimal initial inter-charge distance `d0`; `None` for one charge.
    pub fn d0(&self) -> Option<f64> {
        min_pair_distance(&self.charges)
    }

    /// Radius of the balls that decide which charge a point belongs to.
    pub fn ball_radius(&self) -> f64 {
        self.d0().map_or(f64::INFINITY, |d0| 0.25 * d0)
    }

    /// The admissibility test applied by the sampler.
    pub fn admits(&self, p: &PhasePoint) -> bool {
        if self.charges.iter().any(|c| (p.x - c.xi).norm() <= self.beta) {
            return false;
        }
        match relative_energy_n(p, &self.charges, self.ball_radius()) {
            Ok(h0) => h0 <= self.c0,
            Err(_) => false,
        }
    }

    /// Spatial reach of the support around each charge: `|x - xi| <= e^c0`.
    pub fn spatial_reach(&self) -> f64 {
        self.c0.exp()
    }

    /// Bound on `|v - eta|` over the support.
    pub fn speed_reach(&self) -> f64 {
        (2.0 * (self.c0 + ln_minus_unchecked(self.beta.max(BETA_FLOOR)))).sqrt()
    }
}

pub(crate) fn min_pair_distance(charges: &[ChargeState]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for (i, a) in charges.iter().enumerate() {
        for b in &charges[i + 1..] {
            let d = (a.xi - b.xi).norm();
            best = Some(best.map_or(d, |m: f64| m.min(d)));
        }
    }
    best
}

/// Relative energy `|v - eta|^2 / 2 + ln |x - xi|`.
pub fn relative_energy(p: &PhasePoint, charge: &ChargeState) -> Result<f64> {
    let r = (p.x - charge.xi).norm();
    if r == 0.0 {
        return Err(Error::Singularity(format!(
            "relative energy evaluated at the charge position {:?}",
            charge.xi
        )));
    }
    Ok(0.5 * (p.v - charge.eta).norm_squared() + r.ln())
}

/// Relative energy with the mollified logarithm; defined everywhere.
pub fn relative_energy_eps(p: &PhasePoint, charge: &ChargeState, params: &MollifierParams) -> f64 {
    relative_energy_core(p, charge, params.epsilon())
}

#[inline]
pub(crate) fn relative_energy_core(p: &PhasePoint, charge: &ChargeState, core: f64) -> f64 {
    0.5 * (p.v - charge.eta).norm_squared() + ln_core((p.x - charge.xi).norm(), core)
}

/// Multi-charge relative energy `h_0`: `|h^i|` inside the ball
/// `B(xi^i, d_ref)`, `max_i |h^i|` outside all balls.
pub fn relative_energy_n(p: &PhasePoint, charges: &[ChargeState], d_ref: f64) -> Result<f64> {
    relative_energy_n_with(p, charges, d_ref, relative_energy)
}

/// [`relative_energy_n`] with the mollified logarithm of core `epsilon`.
pub fn relative_energy_n_eps(p: &PhasePoint, charges: &[ChargeState], d_ref: f64, params: &MollifierParams) -> Result<f64> {
    relative_energy_n_with(p, charges, d_ref, |p, c| Ok(relative_energy_eps(p, c, params)))
}

fn relative_energy_n_with(
    p: &PhasePoint,
    charges: &[ChargeState],
    d_ref: f64,
    h: impl Fn(&PhasePoint, &ChargeState) -> Result<f64>,
) -> Result<f64> {
    if charges.len() == 1 {
        return Ok(h(p, &charges[0])?.abs());
    }
    let mut owner = None;
    for (i, c) in charges.iter().enumerate() {
        if (p.x - c.xi).norm() <= d_ref {
            if let Some(j) = owner {
                return Err(Error::Config(format!(
                    "point {:?} lies in the balls of charges {j} and {i}: d_ref = {d_ref} too large",
                    p.x
                )));
            }
            owner = Some(i);
        }
    }
    match owner {
        Some(i) => Ok(h(p, &charges[i])?.abs()),
        None => {
            let mut max = 0.0f64;
            for c in charges {
                max = max.max(h(p, c)?.abs());
            }
            Ok(max)
        }
    }
}

/// Draws `count` equally weighted particles from the admissible set by
/// rejection from the spatial box `xi^i ± e^c0` times the velocity box
/// `eta^i ± sqrt(2 (c0 + ln_- beta))`. Ids are `0..count`.
pub fn sample_support(spec: &SupportSpec, count: usize, seed: u64) -> Result<Vec<Particle>> {
    if count == 0 {
        return Err(Error::Config("particle count must be at least 1".into()));
    }
    let reach = spec.spatial_reach();
    let speed = spec.speed_reach();
    let (mut xlo, mut xhi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    let (mut vlo, mut vhi) = (xlo, xhi);
    for c in spec.charges() {
        xlo = Vec2::new(xlo.x.min(c.xi.x - reach), xlo.y.min(c.xi.y - reach));
        xhi = Vec2::new(xhi.x.max(c.xi.x + reach), xhi.y.max(c.xi.y + reach));
        vlo = Vec2::new(vlo.x.min(c.eta.x - speed), vlo.y.min(c.eta.y - speed));
        vhi = Vec2::new(vhi.x.max(c.eta.x + speed), vhi.y.max(c.eta.y + speed));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = ATTEMPTS_PER_SAMPLE * count as u64;
    let weight = 1.0 / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0u64;
    while out.len() < count {
        if attempts >= budget {
            return Err(Error::SamplingExhausted {
                requested: count,
                accepted: out.len(),
                attempts,
            });
        }
        attempts += 1;
        let x = Vec2::new(rng.random_range(xlo.x..xhi.x), rng.random_range(xlo.y..xhi.y));
        let v = Vec2::new(rng.random_range(vlo.x..vhi.x), rng.random_range(vlo.y..vhi.y));
        let p = PhasePoint { x, v };
        if !spec.admits(&p) {
            continue;
        }
        if let DensityProfile::Custom(f) = spec.profile() {
            let accept = f(&p).clamp(0.0, 1.0);
            if rng.random::<f64>() >= accept {
                continue;
            }
        }
        out.push(Particle {
            phase: p,
            weight,
            id: out.len() as u64,
        });
    }
    Ok(out)
}

/// Ids of particles that violate the support conditions.
pub fn support_violations(spec: &SupportSpec, particles: &[Particle]) -> Vec<u64> {
    particles
        .iter()
        .filter(|p| !spec.admits(&p.phase))
        .map(|p| p.id)
        .collect()
}

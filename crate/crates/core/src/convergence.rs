//! Comparison of runs across regularization levels and the Gronwall-type
//! bound behind the convergence argument.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{SampledRun, Snapshot};
use crate::field::{FieldModel, PlasmaSources};
use crate::mollifier::MollifierParams;
use crate::scalar::{gamma_modulus, ln_minus_unchecked, phi_modulus};
use crate::summation::CompensatedSum;
use crate::{Error, Particle, Result, Vec2};

/// A sequence of regularization levels sharing one seed and scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderSpec {
    epsilons: Vec<f64>,
    betas: Vec<f64>,
    seed: u64,
}

impl LadderSpec {
    pub fn new(epsilons: Vec<f64>, betas: Vec<f64>, seed: u64) -> Result<Self> {
        if epsilons.is_empty() {
            return Err(Error::Config("ladder needs at least one epsilon".into()));
        }
        if epsilons.len() != betas.len() {
            return Err(Error::Config(format!(
                "{} epsilons but {} betas",
                epsilons.len(),
                betas.len()
            )));
        }
        if epsilons.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config("ladder epsilons must be strictly decreasing".into()));
        }
        for (&eps, &beta) in epsilons.iter().zip(&betas) {
            MollifierParams::new(eps, beta)?;
        }
        Ok(Self { epsilons, betas, seed })
    }

    /// Ladder with `beta_n = 2 epsilon_n`.
    pub fn with_doubled_betas(epsilons: Vec<f64>, seed: u64) -> Result<Self> {
        let betas = epsilons.iter().map(|e| 2.0 * e).collect();
        Self::new(epsilons, betas, seed)
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.epsilons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilons.is_empty()
    }

    pub fn mollifiers(&self) -> Vec<MollifierParams> {
        self.epsilons
            .iter()
            .zip(&self.betas)
            .map(|(&e, &b)| MollifierParams::new(e, b).expect("validated at construction"))
            .collect()
    }
}

/// Weighted sup-in-time distances between two sampled runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CauchyDistance {
    /// Positions: `sum_j w_j sup_t (|x_j^a - x_j^b| + sum_i |xi_i^a - xi_i^b|)`.
    pub x: f64,
    /// Velocities, with `v` and `eta` in place of `x` and `xi`.
    pub v: f64,
    /// `x` plus the largest possible growth between samples, half the sample
    /// spacing times the sum of speeds; an upper bound of the continuous-time value.
    pub x_upper: f64,
}

fn check_pairing(a: &SampledRun, b: &SampledRun) -> Result<()> {
    if a.ids != b.ids {
        return Err(Error::Pairing("runs carry different particle ids".into()));
    }
    if a.weights != b.weights {
        return Err(Error::Pairing("runs carry different particle weights".into()));
    }
    if a.snapshots.len() != b.snapshots.len() || a.snapshots.is_empty() {
        return Err(Error::Pairing(format!(
            "runs have {} and {} snapshots",
            a.snapshots.len(),
            b.snapshots.len()
        )));
    }
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        if (sa.time - sb.time).abs() > 1e-9 * (1.0 + sa.time.abs()) {
            return Err(Error::Pairing(format!("sample times {} and {} differ", sa.time, sb.time)));
        }
        if sa.particles.len() != a.ids.len()
            || sb.particles.len() != a.ids.len()
            || sa.charges.len() != sb.charges.len()
        {
            return Err(Error::Pairing("snapshot sizes differ".into()));
        }
    }
    Ok(())
}

/// Cauchy distances between two runs from the same initial sample.
pub fn cauchy_distances(a: &SampledRun, b: &SampledRun) -> Result<CauchyDistance> {
    check_pairing(a, b)?;
    let m = a.ids.len();
    let mut sup_x = vec![0.0f64; m];
    let mut sup_v = vec![0.0f64; m];
    let mut sup_speed = vec![0.0f64; m];
    let mut max_gap = 0.0f64;
    let mut previous: Option<f64> = None;
    for (sa, sb) in a.snapshots.iter().zip(&b.snapshots) {
        if let Some(t) = previous {
            max_gap = max_gap.max(sa.time - t);
        }
        previous = Some(sa.time);
        let (dxi, d_eta, charge_speed) = charge_terms(sa, sb);
        for j in 0..m {
            let (pa, pb) = (&sa.particles[j], &sb.particles[j]);
            sup_x[j] = sup_x[j].max((pa.x - pb.x).norm() + dxi);
            sup_v[j] = sup_v[j].max((pa.v - pb.v).norm() + d_eta);
            sup_speed[j] = sup_speed[j].max(pa.v.norm() + pb.v.norm() + charge_speed);
        }
    }
    let weighted = |values: &[f64]| -> f64 {
        a.weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * v)
            .collect::<CompensatedSum>()
            .value()
    };
    let x = weighted(&sup_x);
    Ok(CauchyDistance {
        x,
        v: weighted(&sup_v),
        x_upper: x + 0.5 * max_gap * weighted(&sup_speed),
    })
}

fn charge_terms(sa: &Snapshot, sb: &Snapshot) -> (f64, f64, f64) {
    let mut dxi = 0.0;
    let mut d_eta = 0.0;
    let mut speed = 0.0;
    for (ca, cb) in sa.charges.iter().zip(&sb.charges) {
        dxi += (ca.xi - cb.xi).norm();
        d_eta += (ca.eta - cb.eta).norm();
        speed += ca.eta.norm() + cb.eta.norm();
    }
    (dxi, d_eta, speed)
}

/// Outcome of integrating `v'' = a gamma(v)`, `v(0) = b`, `v'(0) = 0` to `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GronwallCheck {
    pub v_t: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Steps used for the Gronwall ODE; `dt = T / GRONWALL_STEPS`.
pub const GRONWALL_STEPS: usize = 10_000;

/// Largest admissible `b` for given `a` and `T`: `exp(1 - e^{2 T sqrt(a)})`.
pub fn gronwall_b_max(a: f64, t: f64) -> f64 {
    (1.0 - (2.0 * t * a.sqrt()).exp()).exp()
}

/// Integrates the comparison ODE with fixed-step RK4 and compares `v(T)`
/// against `exp(1 - e^{-2T sqrt(a)}) b^{exp(-2T sqrt(a))}`.
pub fn gronwall_bound_check(a: f64, b: f64, t: f64) -> Result<GronwallCheck> {
    if !(a > 0.0) || !a.is_finite() || !(t > 0.0) || !t.is_finite() {
        return Err(Error::Precondition(format!("need a > 0 and T > 0, got a = {a}, T = {t}")));
    }
    let b_max = gronwall_b_max(a, t).min(1.0);
    if !(b > 0.0 && b < b_max) {
        return Err(Error::Precondition(format!(
            "b = {b} outside the admissible range (0, {b_max:e}) for a = {a}, T = {t}"
        )));
    }
    let h = t / GRONWALL_STEPS as f64;
    let f = |v: f64| a * gamma_modulus(v.max(0.0));
    let (mut v, mut w) = (b, 0.0f64);
    for _ in 0..GRONWALL_STEPS {
        let (k1v, k1w) = (w, f(v));
        let (k2v, k2w) = (w + 0.5 * h * k1w, f(v + 0.5 * h * k1v));
        let (k3v, k3w) = (w + 0.5 * h * k2w, f(v + 0.5 * h * k2v));
        let (k4v, k4w) = (w + h * k3w, f(v + h * k3v));
        v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        w += h / 6.0 * (k1w + 2.0 * k2w + 2.0 * k3w + k4w);
    }
    let decay = (-2.0 * t * a.sqrt()).exp();
    let bound = (1.0 - decay).exp() * b.powf(decay);
    Ok(GronwallCheck {
        v_t: v,
        bound,
        pass: v <= bound,
    })
}

/// The shipped `(a, b, T)` grid: ten log-spaced `a` in `[0.01, 4]`, `T` in
/// `{0.25, 0.5, 1}` and ten `b` log-spaced from `0.99 b_max` down to
/// `1e-12 b_max`.
pub fn gronwall_grid() -> Vec<(f64, f64, f64)> {
    let mut grid = Vec::with_capacity(300);
    let log_lo = 0.01f64.log10();
    let log_hi = 4.0f64.log10();
    for t in [0.25, 0.5, 1.0] {
        for ia in 0..10 {
            let a = 10f64.powf(log_lo + (log_hi - log_lo) * ia as f64 / 9.0);
            let b_max = gronwall_b_max(a, t).min(1.0);
            for ib in 0..10 {
                let exponent = 0.99f64.log10() + (-12.0 - 0.99f64.log10()) * ib as f64 / 9.0;
                grid.push((a, b_max * 10f64.powf(exponent), t));
            }
        }
    }
    grid
}

/// Fitted constants of the field modulus of continuity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulusFit {
    /// Least `C` with `|E(x) - E(y)| <= C gamma(|x - y|)` over the sampled pairs.
    pub c_gamma: f64,
    /// Least `C` with `|E(x) - E(y)| <= C phi(r) (H + ln- r)`, `r = |x - y|`.
    pub c_phi: f64,
    pub pairs: usize,
}

/// Samples `pair_count` point pairs per snapshot, `x` uniform over the
/// bounding box of the weighted particles and `y` at a log-uniform distance
/// in `[1e-4, 1]`, and fits both modulus constants. `h_values` holds the
/// running relative-energy supremum at each snapshot.
pub fn modulus_fit(
    run: &SampledRun,
    h_values: &[f64],
    model: &FieldModel,
    pair_count: usize,
    seed: u64,
) -> Result<ModulusFit> {
    if h_values.len() != run.snapshots.len() {
        return Err(Error::Pairing(format!(
            "{} H values for {} snapshots",
            h_values.len(),
            run.snapshots.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fit = ModulusFit {
        c_gamma: 0.0,
        c_phi: 0.0,
        pairs: 0,
    };
    for (snap, &h) in run.snapshots.iter().zip(h_values) {
        let particles: Vec<Particle> = snap
            .particles
            .iter()
            .zip(&run.weights)
            .zip(&run.ids)
            .map(|((p, &w), &id)| Particle::new(*p, w, id))
            .collect::<Result<_>>()?;
        let weighted: Vec<Vec2> = particles.iter().filter(|p| p.weight > 0.0).map(|p| p.x()).collect();
        if weighted.is_empty() {
            continue;
        }
        let (mut lo, mut hi) = (weighted[0], weighted[0]);
        for x in &weighted {
            lo = Vec2::new(lo.x.min(x.x), lo.y.min(x.y));
            hi = Vec2::new(hi.x.max(x.x), hi.y.max(x.y));
        }
        let sources = PlasmaSources::from_particles(&particles, *model);
        for _ in 0..pair_count {
            let x = Vec2::new(rng.random_range(lo.x..=hi.x), rng.random_range(lo.y..=hi.y));
            let r = 10f64.powf(rng.random_range(-4.0..=0.0));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let y = x + Vec2::new(angle.cos(), angle.sin()) * r;
            let r = (x - y).norm();
            if r == 0.0 {
                continue;
            }
            let diff = (sources.field_at(x, None)? - sources.field_at(y, None)?).norm();
            fit.c_gamma = fit.c_gamma.max(diff / gamma_modulus(r));
            let phi_form = phi_modulus(r) * (h + ln_minus_unchecked(r));
            if phi_form > 0.0 {
                fit.c_phi = fit.c_phi.max(diff / phi_form);
            }
            fit.pairs += 1;
        }
    }
    Ok(fit)
}

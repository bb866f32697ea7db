//! Single-scenario runs: sampling, integration, artifacts.

use std::path::{Path, PathBuf};

use vpcharge::diagnostics::{collision_measure, density_bound_check, density_grid, DiagnosticsSchedule, GridSpec};
use vpcharge::dynamics::{run, Ensemble, IntegratorConfig, RunOutput, RunStatus};
use vpcharge::field::default_blob_width;
use vpcharge::initial_data::sample_support;
use vpcharge::mollifier::MollifierParams;
use vpcharge::{Particle, Vec2};

use crate::output::{self, Summary};
use crate::scenario::{commented, BlobWidth, StepSize};
use crate::{CliError, Scenario, EXIT_COLLAPSE, EXIT_OK, EXIT_PRECONDITION};

/// Upper limit of the automatic step.
pub const AUTO_DT_MAX: f64 = 1e-3;

/// Cell size of the density-bound grid: three cells across `r = 0.1`.
pub const DENSITY_CELL: f64 = 0.1 / 3.0;

/// A scenario turned into an initial state and integrator settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub ensemble: Ensemble,
    pub config: IntegratorConfig,
    pub schedule: DiagnosticsSchedule,
    pub blob_width: f64,
    pub dt: f64,
}

impl Prepared {
    /// `#` lines with the echoed scenario and the resolved automatic values.
    pub fn metadata(&self, s: &Scenario) -> String {
        let mut meta = commented(&s.echo());
        meta.push_str(&format!("# effective blob_width = {}\n", output::real(self.blob_width)));
        meta.push_str(&format!("# effective dt = {}\n", output::real(self.dt)));
        meta
    }
}

/// Samples the initial plasma of `s`.
pub fn initial_particles(s: &Scenario) -> Result<Vec<Particle>, CliError> {
    Ok(sample_support(&s.support()?, s.count, s.seed)?)
}

/// Builds the run from already sampled particles. An explicit step above
/// the core-resolving cap is a precondition failure.
pub fn prepare_with(
    s: &Scenario,
    particles: Vec<Particle>,
    mollifier: MollifierParams,
    blob_width: Option<f64>,
    dt: Option<f64>,
) -> Result<Prepared, CliError> {
    let blob_width = blob_width.unwrap_or_else(|| match s.blob_width {
        BlobWidth::Auto => default_blob_width(&particles),
        BlobWidth::Fixed(w) => w,
    });
    let ensemble = Ensemble::new(particles, s.charge_states(), mollifier, s.field_model(blob_width)?);
    let dt = dt.unwrap_or_else(|| auto_dt(s, &ensemble));
    let config = match s.adaptive {
        Some(tol) => IntegratorConfig::adaptive(dt, s.t_end, tol),
        None => IntegratorConfig::fixed(s.scheme, dt, s.t_end),
    };
    config.validate(&ensemble)?;
    let schedule = DiagnosticsSchedule::new(s.cadence)
        .with_ladder(s.delta_ladder.clone())
        .with_tagged(s.tagged.clone());
    let schedule = DiagnosticsSchedule {
        grid_cells: s.grid_cells,
        ..schedule
    };
    schedule.validate()?;
    Ok(Prepared {
        ensemble,
        config,
        schedule,
        blob_width,
        dt,
    })
}

/// Step used when none is fixed by the caller: the scenario's own value, or
/// `min(1e-3, cap)` for `dt = auto`.
pub fn auto_dt(s: &Scenario, e: &Ensemble) -> f64 {
    match s.dt {
        StepSize::Fixed(h) => h,
        StepSize::Auto => AUTO_DT_MAX.min(IntegratorConfig::step_cap(e)),
    }
}

pub fn prepare(s: &Scenario) -> Result<Prepared, CliError> {
    prepare_with(s, initial_particles(s)?, s.mollifier()?, None, None)
}

/// `delta |ln delta|^{3/2}`, the collision-measure profile.
pub fn collision_profile(delta: f64) -> f64 {
    delta * delta.ln().abs().powf(1.5)
}

/// Least `C` with `fraction <= C delta |ln delta|^{3/2}` over ladder
/// entries in `(0, 1)`.
pub fn collision_fit(fractions: &[f64], ladder: &[f64]) -> f64 {
    fractions
        .iter()
        .zip(ladder)
        .filter(|(_, &d)| d > 0.0 && d < 1.0)
        .map(|(&f, &d)| f / collision_profile(d))
        .fold(0.0, f64::max)
}

/// Density grid with [`DENSITY_CELL`] cells over the weighted particles.
pub fn density_spec(e: &Ensemble) -> vpcharge::Result<GridSpec> {
    let weighted: Vec<Vec2> = e.particles.iter().filter(|p| p.weight > 0.0).map(|p| p.x()).collect();
    let Some(&first) = weighted.first() else {
        return GridSpec::new(Vec2::ZERO, DENSITY_CELL, 1, 1);
    };
    let (mut lo, mut hi) = (first, first);
    for x in &weighted {
        lo = Vec2::new(lo.x.min(x.x), lo.y.min(x.y));
        hi = Vec2::new(hi.x.max(x.x), hi.y.max(x.y));
    }
    let cells = |span: f64| ((span / DENSITY_CELL).floor() as usize) + 1;
    GridSpec::new(lo, DENSITY_CELL, cells(hi.x - lo.x), cells(hi.y - lo.y))
}

/// Derived quantities of a finished run, and the exit code they imply.
pub fn summarize(s: &Scenario, p: &Prepared, out: &RunOutput) -> (Summary, i32) {
    let mut sm = Summary::default();
    let mut code = EXIT_OK;
    sm.push("name", s.name.clone());
    sm.push("seed", s.seed.to_string());
    sm.push("particles", p.ensemble.particles.len().to_string());
    sm.push("charges", p.ensemble.charges.len().to_string());
    sm.real("epsilon", p.ensemble.mollifier.epsilon());
    sm.real("beta", p.ensemble.mollifier.beta());
    sm.real("blob_width", p.blob_width);
    sm.real("dt", p.dt);
    match &out.status {
        RunStatus::Completed => sm.push("status", "completed"),
        RunStatus::Collapsed { time, error } => {
            code = EXIT_COLLAPSE;
            sm.push("status", "collapsed");
            sm.real("collapse_time", *time);
            sm.push("collapse_error", error.to_string());
        }
    }
    sm.real("final_time", out.final_state.time);
    sm.push("steps", out.steps.to_string());
    sm.push("rejected_steps", out.rejected_steps.to_string());

    let first = &out.records[0];
    sm.real("energy_initial", first.total_energy);
    sm.real("energy_drift", out.energy_drift());
    let max_of = |f: &dyn Fn(&vpcharge::diagnostics::DiagnosticsRecord) -> f64| {
        out.records.iter().map(f).fold(0.0, f64::max)
    };
    let kinetic_max = max_of(&|r| r.kinetic_energy);
    sm.real("kinetic_energy_max", kinetic_max);
    if first.kinetic_energy > 0.0 {
        sm.real("kinetic_ratio_max", kinetic_max / first.kinetic_energy);
    }
    sm.real("first_moment_max", max_of(&|r| r.first_moment));
    sm.real("plasma_plasma_abs_max", max_of(&|r| r.energy.plasma_plasma.abs()));
    sm.real("charge_plasma_abs_max", max_of(&|r| r.energy.charge_plasma.abs()));
    sm.real("charge_charge_abs_max", max_of(&|r| r.energy.charge_charge.abs()));
    sm.real("field_sup_max", max_of(&|r| r.field_sup));
    sm.real("momentum_kernel_sup_max", max_of(&|r| r.momentum_kernel_sup));
    // Against sqrt(H ln H), only where H > 1 makes it positive.
    let ratios: Vec<f64> = out
        .records
        .iter()
        .filter(|r| r.h_sup > 1.0)
        .map(|r| r.momentum_kernel_sup / (r.h_sup * r.h_sup.ln()).sqrt())
        .collect();
    match ratios.iter().copied().reduce(f64::max) {
        Some(m) => sm.real("momentum_ratio_max", m),
        None => sm.push("momentum_ratio_max", output::NA),
    }
    sm.real("h_sup_initial", first.h_sup);
    sm.real("h_sup_final", out.final_record().h_sup);

    match out.min_charge_separation {
        Some(d) => sm.real("min_charge_separation", d),
        None => sm.push("min_charge_separation", output::NA),
    }
    if let (Some(threshold), Some(d)) = (s.separation_threshold, out.min_charge_separation) {
        sm.push("separation_above_threshold", (d > threshold).to_string());
    }
    match out.single_approach_violations {
        Some(n) => sm.push("single_approach_violations", n.to_string()),
        None => sm.push("single_approach_violations", output::NA),
    }

    sm.push("core_entries", out.collisions.core_entries().to_string());
    match collision_measure(&out.samples.weights, &out.collisions, &s.delta_ladder) {
        Ok(fractions) => {
            sm.push("collision_fractions", fractions.iter().map(|&f| output::real(f)).collect::<Vec<_>>().join(","));
            sm.real("collision_fit", collision_fit(&fractions, &s.delta_ladder));
        }
        Err(err) => {
            if code == EXIT_OK {
                code = EXIT_PRECONDITION;
            }
            sm.push("collision_fractions", output::NA);
            sm.push("collision_check", err.to_string());
        }
    }

    let identity_max = out.identities.iter().map(|t| t.relative_error()).fold(0.0, f64::max);
    sm.real("identity_max_relative_error", identity_max);

    let density = density_spec(&out.final_state)
        .and_then(|g| density_grid(&out.final_state, g))
        .and_then(|g| density_bound_check(&g, &out.final_state.charges));
    match density {
        Ok(b) => {
            sm.real("density_c_fit", b.c_fit);
            sm.push("density_violations", b.violations.len().to_string());
        }
        Err(err) => sm.push("density_c_fit", format!("{} ({err})", output::NA)),
    }
    (sm, code)
}

/// What [`cmd_run`] produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub exit_code: i32,
    pub prepared: Prepared,
    pub output: RunOutput,
    pub summary: Summary,
    pub files: Vec<PathBuf>,
}

/// Runs `s` and writes its artifacts into `out_dir`. Failures before the
/// first step, including an unresolvable step size, are returned as errors
/// and leave no files behind.
pub fn cmd_run(s: &Scenario, out_dir: &Path) -> Result<RunReport, CliError> {
    let prepared = prepare(s)?;
    execute(s, prepared, out_dir)
}

/// Integrates a prepared run and writes its artifacts.
pub fn execute(s: &Scenario, prepared: Prepared, out_dir: &Path) -> Result<RunReport, CliError> {
    let output = run(&prepared.ensemble, &prepared.config, &prepared.schedule)?;
    let (summary, exit_code) = summarize(s, &prepared, &output);
    let meta = prepared.metadata(s);
    let files = vec![
        output::write_atomic(
            out_dir,
            output::DIAGNOSTICS_FILE,
            &output::diagnostics_csv(&meta, s.delta_ladder.len(), &output.records),
        )?,
        output::write_atomic(out_dir, output::TRAJECTORIES_FILE, &output::trajectories_csv(&meta, &output.trajectories))?,
        output::write_atomic(out_dir, output::SUMMARY_FILE, summary.render(&meta).as_bytes())?,
    ];
    Ok(RunReport {
        exit_code,
        prepared,
        output,
        summary,
        files,
    })
}

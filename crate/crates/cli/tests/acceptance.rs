//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! fails. Runs at desk scale; expect several minutes on one core.

use std::f64::consts::{LN_2, TAU};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpcharge::convergence::{gronwall_bound_check, gronwall_grid};
use vpcharge::diagnostics::{collision_measure, DiagnosticsSchedule};
use vpcharge::dynamics::{run, Ensemble, IntegratorConfig, RunOutput, RunStatus, Scheme};
use vpcharge::field::{default_blob_width, plasma_field_at, plasma_potential_at, FieldModel};
use vpcharge::mollifier::MollifierParams;
use vpcharge::{ChargeState, Particle, PhasePoint, Vec2};
use vpcharge_cli::output::DIAGNOSTICS_FILE;
use vpcharge_cli::run::{collision_profile, prepare};
use vpcharge_cli::scenario::LadderConfig;
use vpcharge_cli::{cmd_ladder, Scenario, WORKERS_ENV};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn simulate(s: &Scenario) -> RunOutput {
    let p = prepare(s).expect("scenario prepares");
    run(&p.ensemble, &p.config, &p.schedule).expect("run finishes")
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn with_seed(s: Scenario, seed: u64) -> Scenario {
    Scenario { seed, ..s }
}

// 1
fn energy_conservation(default: &RunOutput, elapsed: Duration) -> Verdict {
    let halved = simulate(&Scenario {
        dt: vpcharge_cli::scenario::StepSize::Fixed(5e-4),
        ..Scenario::single_charge()
    });
    let drift = default.energy_drift();
    let drift_half = halved.energy_drift();
    let ratio = drift / drift_half;
    let secs = elapsed.as_secs_f64();
    verdict(
        drift <= 1e-5 && ratio >= 8.0 && secs <= 120.0,
        format!("drift {drift:.3e} (<= 1e-5), halved-step drift {drift_half:.3e}, ratio {ratio:.2} (>= 8), single-thread runtime {secs:.1} s (<= 120)"),
    )
}

// 2
fn reduced_h_conservation() -> Verdict {
    let eps = 0.05;
    let charge = ChargeState::pinned_at(Vec2::ZERO).unwrap();
    let tracers: Vec<Particle> = [0.02, 0.05, 0.1, 0.3, 0.7]
        .iter()
        .enumerate()
        .map(|(i, &vt)| Particle::tracer(Vec2::new(1.0, 0.0), Vec2::new(0.0, vt), i as u64).unwrap())
        .collect();
    let ids = tracers.iter().map(|p| p.id).collect();
    let e = Ensemble::new(
        tracers,
        vec![charge],
        MollifierParams::new(eps, 2.0 * eps).unwrap(),
        FieldModel::direct(0.0).unwrap(),
    );
    let schedule = DiagnosticsSchedule::new(0.01).with_tagged(ids);
    let out = run(&e, &IntegratorConfig::adaptive(1e-3, 5.0, 1e-12), &schedule).unwrap();
    let h0: Vec<f64> = out.trajectories.iter().take(e.particles.len()).map(|t| t.h_eps).collect();
    let dh = out
        .trajectories
        .iter()
        .map(|t| (t.h_eps - h0[t.particle_id as usize]).abs())
        .fold(0.0, f64::max);
    let dips = out.collisions.min_distance.iter().filter(|&&d| d < 2.0 * eps).count();
    let rmin = out.collisions.min_distance.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        out.status == RunStatus::Completed && dh <= 1e-8 && dips > 0,
        format!("max |h(t) - h(0)| {dh:.2e} (<= 1e-8) over T = 5; {dips} of 5 orbits inside r = 2 eps, closest {rmin:.3}"),
    )
}

// 3
fn circular_orbits() -> Verdict {
    let mut worst = 0.0f64;
    for r in [0.5, 1.0, 2.0] {
        let charge = ChargeState::pinned_at(Vec2::ZERO).unwrap();
        let tracer = Particle::tracer(Vec2::new(r, 0.0), Vec2::new(0.0, 1.0), 0).unwrap();
        let e = Ensemble::new(
            vec![tracer],
            vec![charge],
            MollifierParams::new(0.05, 0.1).unwrap(),
            FieldModel::direct(0.0).unwrap(),
        );
        let period = TAU * r;
        let schedule = DiagnosticsSchedule::new(period / 200.0).with_tagged(vec![0]);
        let out = run(&e, &IntegratorConfig::fixed(Scheme::Rk4, 1e-3, period), &schedule).unwrap();
        for t in &out.trajectories {
            worst = worst.max((t.phase.x.norm() - r).abs());
        }
    }
    verdict(worst <= 1e-6, format!("max radius drift over one period {worst:.2e} (<= 1e-6) at r = 0.5, 1, 2"))
}

// 4
fn radial_field() -> Verdict {
    let m = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut particles = Vec::with_capacity(m);
    while particles.len() < m {
        let x = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if x.norm_squared() <= 1.0 {
            let id = particles.len() as u64;
            particles.push(Particle::new(PhasePoint::new(x, Vec2::ZERO).unwrap(), 1.0 / m as f64, id).unwrap());
        }
    }
    let tol = 3.0 / (m as f64).sqrt();
    let blob = default_blob_width(&particles);
    let probe = Vec2::new(2.0, 0.0);
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, model) in [
        ("direct", FieldModel::direct(blob).unwrap()),
        ("tree", FieldModel::tree(blob, 0.5).unwrap()),
    ] {
        let field = plasma_field_at(probe, &particles, &model).unwrap().norm();
        let pot = plasma_potential_at(probe, &particles, &model).unwrap();
        pass &= (field - 0.5).abs() <= tol && (pot - LN_2).abs() <= tol;
        detail.push(format!("{name}: |E| {field:.4}, potential {pot:.4}"));
    }
    verdict(pass, format!("{} (targets 0.5 and ln 2 = {LN_2:.4}, tolerance {tol:.3})", detail.join("; ")))
}

// 5
fn potential_identity(default: &RunOutput) -> Verdict {
    let worst = default.identities.iter().map(|t| t.relative_error()).fold(0.0, f64::max);
    verdict(
        default.identities.len() == 10 && worst <= 1e-3,
        format!("{} tagged particles, max relative mismatch {worst:.2e} (<= 1e-3) at T = 1", default.identities.len()),
    )
}

// 6
fn h_supremum_across_eps(default: &RunOutput) -> Verdict {
    let mut values = Vec::new();
    for eps in [0.1, 0.05, 0.025] {
        let h = if eps == 0.05 {
            default.final_record().h_sup
        } else {
            simulate(&Scenario {
                epsilon: eps,
                ..Scenario::single_charge()
            })
            .final_record()
            .h_sup
        };
        values.push(h);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    verdict(
        values.iter().all(|h| h.is_finite()) && spread <= 0.2,
        format!("final h_sup {values:.4?} at eps = 0.1, 0.05, 0.025; spread (max - min)/min {spread:.4} (<= 0.2)"),
    )
}

// 7
fn collision_law(default: &RunOutput) -> Verdict {
    let s = Scenario::single_charge();
    let ladder = s.delta_ladder.clone();
    let mut per_seed = Vec::new();
    for seed in 1..=5u64 {
        let fresh;
        let out = if seed == s.seed {
            default
        } else {
            fresh = simulate(&with_seed(Scenario::single_charge(), seed));
            &fresh
        };
        match collision_measure(&out.samples.weights, &out.collisions, &ladder) {
            Ok(f) => per_seed.push(f),
            Err(err) => return verdict(false, format!("seed {seed}: {err}")),
        }
    }
    let n = per_seed.len() as f64;
    let mean: Vec<f64> = (0..ladder.len()).map(|k| per_seed.iter().map(|f| f[k]).sum::<f64>() / n).collect();
    let stderr: Vec<f64> = (0..ladder.len())
        .map(|k| {
            let var = per_seed.iter().map(|f| (f[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        })
        .collect();
    // Ladder entries are listed from the largest delta down.
    let order: Vec<usize> = {
        let mut idx: Vec<usize> = (0..ladder.len()).collect();
        idx.sort_by(|&a, &b| ladder[a].total_cmp(&ladder[b]));
        idx
    };
    let monotone = |f: &[f64]| order.windows(2).all(|w| f[w[0]] <= f[w[1]]);
    let nondecreasing = per_seed.iter().all(|f| monotone(f)) && monotone(&mean);
    let top = *order.last().unwrap();
    let c = mean[top] / collision_profile(ladder[top]);
    let within = (0..ladder.len()).all(|k| mean[k] <= c * collision_profile(ladder[k]) + 2.0 * stderr[k]);
    let rows: Vec<String> = (0..ladder.len())
        .map(|k| format!("d={}: {:.4}+-{:.4} vs {:.4}", ladder[k], mean[k], stderr[k], c * collision_profile(ladder[k])))
        .collect();
    verdict(
        nondecreasing && within,
        format!(
            "fractions nondecreasing in delta: {nondecreasing}; C = {c:.3} fitted at delta = {}; mean +- stderr (5 seeds) vs C delta |ln delta|^1.5: {}",
            ladder[top],
            rows.join(", ")
        ),
    )
}

// 8, 9
fn two_charge_runs() -> Vec<(u64, RunOutput)> {
    (1..=5).map(|seed| (seed, simulate(&with_seed(Scenario::two_charges(), seed)))).collect()
}

fn charge_separation(runs: &[(u64, RunOutput)]) -> Verdict {
    let d0 = 4.0;
    let collapses = runs.iter().filter(|(_, r)| r.status != RunStatus::Completed).count();
    let min = runs
        .iter()
        .map(|(_, r)| r.min_charge_separation.unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    verdict(
        collapses == 0 && min > 0.5 * d0,
        format!("5 seeds, {collapses} collapse aborts, running min separation {min:.4} (> {})", 0.5 * d0),
    )
}

fn single_approach(runs: &[(u64, RunOutput)]) -> Verdict {
    let counts: Vec<Option<usize>> = runs.iter().map(|(_, r)| r.single_approach_violations).collect();
    verdict(
        counts.iter().all(|c| *c == Some(0)),
        format!("violations per seed {counts:?} (all 0), windows of width delta_star"),
    )
}

// 10
fn gronwall() -> Verdict {
    let (checks, elapsed) = timed(|| {
        gronwall_grid()
            .into_iter()
            .map(|(a, b, t)| gronwall_bound_check(a, b, t))
            .collect::<Result<Vec<_>, _>>()
    });
    match checks {
        Ok(checks) => {
            let passed = checks.iter().filter(|c| c.pass).count();
            let secs = elapsed.as_secs_f64();
            verdict(
                checks.len() == 300 && passed == checks.len() && secs <= 30.0,
                format!("{passed} of {} grid points pass, runtime {secs:.2} s (<= 30)", checks.len()),
            )
        }
        Err(err) => verdict(false, err.to_string()),
    }
}

// 11
fn cauchy_contraction(dir: &Path) -> Verdict {
    let s = Scenario {
        ladder: Some(LadderConfig::default()),
        ..Scenario::single_charge()
    };
    let report = match cmd_ladder(&s, dir) {
        Ok(r) => r,
        Err(err) => return verdict(false, err.to_string()),
    };
    let adj = report.adjacent();
    if adj.len() != 2 {
        return verdict(false, format!("expected three completed runs, exit code {}", report.exit_code));
    }
    verdict(
        adj[1].x < adj[0].x && adj[1].v < adj[0].v,
        format!(
            "X(e1,e2) {:.4e} > X(e2,e3) {:.4e}; V(e1,e2) {:.4e} > V(e2,e3) {:.4e}",
            adj[0].x, adj[1].x, adj[0].v, adj[1].v
        ),
    )
}

// 12
fn determinism(dir: &Path) -> Verdict {
    let scn = dir.join("default.scn");
    std::fs::write(&scn, Scenario::single_charge().echo()).unwrap();
    let mut outputs = Vec::new();
    for (k, workers) in [1, 4, 4].into_iter().enumerate() {
        let out = dir.join(format!("run{k}"));
        let status = Command::new(env!("CARGO_BIN_EXE_vpcharge"))
            .args(["run", scn.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env(WORKERS_ENV, workers.to_string())
            .output()
            .unwrap()
            .status;
        if status.code() != Some(0) {
            return verdict(false, format!("run with {workers} workers exited with {status}"));
        }
        outputs.push(std::fs::read(out.join(DIAGNOSTICS_FILE)).unwrap());
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    verdict(
        same,
        format!("diagnostics.csv ({} bytes) identical across workers 1, 4 and a repeated run: {same}", outputs[0].len()),
    )
}

fn main() {
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n:2} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (default, elapsed) = timed(|| single.install(|| simulate(&Scenario::single_charge())));

    report(1, "energy conservation", energy_conservation(&default, elapsed));
    report(2, "reduced relative-energy conservation", reduced_h_conservation());
    report(3, "circular orbits", circular_orbits());
    report(4, "radial field of a uniform disk", radial_field());
    report(5, "potential work identity", potential_identity(&default));
    report(6, "h supremum across epsilon", h_supremum_across_eps(&default));
    report(7, "collision-measure law", collision_law(&default));
    let pairs = two_charge_runs();
    report(8, "charge separation", charge_separation(&pairs));
    report(9, "single approach", single_approach(&pairs));
    report(10, "Gronwall grid", gronwall());
    report(11, "Cauchy contraction", cauchy_contraction(&scratch.path().join("ladder")));
    report(12, "determinism", determinism(scratch.path()));

    let failed: Vec<usize> = results.iter().filter(|(_, _, v)| !v.pass).map(|(n, _, _)| *n).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

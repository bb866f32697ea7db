//! Runs of one scenario over a decreasing ladder of mollifier radii, all
//! started from the same sample, and the Cauchy distances between them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vpcharge::convergence::{cauchy_distances, modulus_fit, CauchyDistance, LadderSpec, ModulusFit};
use vpcharge::dynamics::RunStatus;

use crate::output::{self, Summary};
use crate::run::{auto_dt, execute, initial_particles, prepare_with, RunReport};
use crate::scenario::{commented, LadderConfig};
use crate::{CliError, Scenario, EXIT_COLLAPSE, EXIT_OK};

pub const CAUCHY_FILE: &str = "cauchy.csv";
pub const LADDER_SUMMARY_FILE: &str = "ladder_summary.txt";
/// Point pairs per snapshot in the modulus fits.
pub const MODULUS_PAIRS: usize = 64;

#[derive(Debug, Clone)]
pub struct LadderReport {
    pub exit_code: i32,
    pub spec: LadderSpec,
    pub runs: Vec<RunReport>,
    /// `matrix[n][m]` compares runs `n` and `m`; empty when a run collapsed.
    pub matrix: Vec<Vec<CauchyDistance>>,
    pub fits: Vec<ModulusFit>,
    pub summary: Summary,
}

impl LadderReport {
    /// Distances between neighbouring rungs, `(n, n+1)`.
    pub fn adjacent(&self) -> Vec<CauchyDistance> {
        (1..self.matrix.len()).map(|n| self.matrix[n - 1][n]).collect()
    }
}

/// Subdirectory of rung `n` (counted from 1).
pub fn rung_dir(out_dir: &Path, n: usize) -> PathBuf {
    out_dir.join(format!("eps_{n}"))
}

/// The initial plasma is sampled once with the largest hollow radius so it
/// is admissible for every rung; blob width and step are shared as well,
/// the step being the smallest any rung needs.
pub fn cmd_ladder(s: &Scenario, out_dir: &Path) -> Result<LadderReport, CliError> {
    let spec = s.ladder.clone().unwrap_or_default().spec(s.seed)?;
    let beta_max = spec.betas().iter().copied().fold(0.0, f64::max);
    let base = Scenario { beta: beta_max, ..s.clone() };
    let particles = initial_particles(&base)?;

    let rungs: Vec<Scenario> = spec
        .epsilons()
        .iter()
        .zip(spec.betas())
        .map(|(&epsilon, &beta)| Scenario {
            epsilon,
            beta,
            ladder: None,
            ..s.clone()
        })
        .collect();
    let mut prepared = Vec::with_capacity(rungs.len());
    for (rung, params) in rungs.iter().zip(spec.mollifiers()) {
        prepared.push(prepare_with(rung, particles.clone(), params, None, None)?);
    }
    let blob = prepared[0].blob_width;
    let dt = prepared
        .iter()
        .zip(&rungs)
        .map(|(p, r)| auto_dt(r, &p.ensemble))
        .fold(f64::INFINITY, f64::min);
    let prepared = rungs
        .iter()
        .zip(spec.mollifiers())
        .map(|(rung, params)| {
            let mut p = prepare_with(rung, particles.clone(), params, Some(blob), Some(dt))?;
            p.schedule.keep_snapshots = true;
            Ok(p)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let runs = rungs
        .par_iter()
        .zip(prepared)
        .enumerate()
        .map(|(n, (rung, p))| execute(rung, p, &rung_dir(out_dir, n + 1)))
        .collect::<Result<Vec<_>, _>>()?;

    let collapsed = runs.iter().any(|r| matches!(r.output.status, RunStatus::Collapsed { .. }));
    let mut matrix = Vec::new();
    if !collapsed {
        for a in &runs {
            let row = runs
                .iter()
                .map(|b| cauchy_distances(&a.output.samples, &b.output.samples))
                .collect::<vpcharge::Result<Vec<_>>>()?;
            matrix.push(row);
        }
    }
    let fits = runs
        .iter()
        .map(|r| {
            let h: Vec<f64> = r.output.records.iter().take(r.output.samples.snapshots.len()).map(|x| x.h_sup).collect();
            modulus_fit(&r.output.samples, &h, &r.prepared.ensemble.field_model, MODULUS_PAIRS, s.seed)
        })
        .collect::<vpcharge::Result<Vec<_>>>()?;

    let mut report = LadderReport {
        exit_code: if collapsed { EXIT_COLLAPSE } else { EXIT_OK },
        spec,
        runs,
        matrix,
        fits,
        summary: Summary::default(),
    };
    report.summary = ladder_summary(&report, blob, dt);

    let meta = ladder_metadata(s, &report.spec, blob, dt);
    let rows = report.matrix.iter().enumerate().flat_map(|(n, row)| {
        row.iter().enumerate().map(move |(m, d)| {
            vec![
                (n + 1).to_string(),
                (m + 1).to_string(),
                output::real(d.x),
                output::real(d.v),
                output::real(d.x_upper),
            ]
        })
    });
    let mut csv = meta.clone().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut csv);
        w.write_record(["n", "m", "X", "V", "X_upper"]).expect("in-memory write");
        for row in rows {
            w.write_record(&row).expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    output::write_atomic(out_dir, CAUCHY_FILE, &csv)?;
    output::write_atomic(out_dir, LADDER_SUMMARY_FILE, report.summary.render(&meta).as_bytes())?;
    Ok(report)
}

fn ladder_metadata(s: &Scenario, spec: &LadderSpec, blob: f64, dt: f64) -> String {
    let echoed = Scenario {
        ladder: Some(LadderConfig {
            epsilons: spec.epsilons().to_vec(),
            betas: Some(spec.betas().to_vec()),
        }),
        ..s.clone()
    };
    let mut meta = commented(&echoed.echo());
    meta.push_str(&format!("# effective blob_width = {}\n", output::real(blob)));
    meta.push_str(&format!("# effective dt = {}\n", output::real(dt)));
    meta
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(output::real).collect::<Vec<_>>().join(",")
}

fn ladder_summary(r: &LadderReport, blob: f64, dt: f64) -> Summary {
    let mut sm = Summary::default();
    sm.push("epsilons", join(r.spec.epsilons().iter().copied()));
    sm.push("betas", join(r.spec.betas().iter().copied()));
    sm.push("seed", r.spec.seed().to_string());
    sm.real("blob_width", blob);
    sm.real("dt", dt);
    sm.push(
        "status",
        r.runs
            .iter()
            .map(|run| match run.output.status {
                RunStatus::Completed => "completed",
                RunStatus::Collapsed { .. } => "collapsed",
            })
            .collect::<Vec<_>>()
            .join(","),
    );
    sm.push("h_sup_final", join(r.runs.iter().map(|run| run.output.final_record().h_sup)));
    sm.push("energy_drift", join(r.runs.iter().map(|run| run.output.energy_drift())));
    let adjacent = r.adjacent();
    if r.matrix.is_empty() {
        sm.push("cauchy", output::NA);
    } else {
        sm.push("x_adjacent", join(adjacent.iter().map(|d| d.x)));
        sm.push("v_adjacent", join(adjacent.iter().map(|d| d.v)));
        sm.push("x_upper_adjacent", join(adjacent.iter().map(|d| d.x_upper)));
        let contracts = |f: fn(&CauchyDistance) -> f64| adjacent.windows(2).all(|w| f(&w[1]) < f(&w[0]));
        sm.push("x_contracts", contracts(|d| d.x).to_string());
        sm.push("v_contracts", contracts(|d| d.v).to_string());
    }
    sm.push("modulus_c_gamma", join(r.fits.iter().map(|f| f.c_gamma)));
    sm.push("modulus_c_phi", join(r.fits.iter().map(|f| f.c_phi)));
    let (lo, hi) = r
        .fits
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), f| (lo.min(f.c_gamma), hi.max(f.c_gamma)));
    if lo > 0.0 && lo.is_finite() {
        sm.real("modulus_c_gamma_ratio", hi / lo);
    }
    sm
}

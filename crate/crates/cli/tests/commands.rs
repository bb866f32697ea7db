use std::path::Path;
use std::process::Command;

use vpcharge_cli::output::{read_csv, DIAGNOSTICS_FILE, SUMMARY_FILE, TRAJECTORIES_FILE};
use vpcharge_cli::{cmd_ladder, cmd_run, parse_scenario, CliError, EXIT_COLLAPSE, EXIT_OK, EXIT_PRECONDITION};

fn small(extra: &str) -> String {
    format!(
        "[scenario]\nseed = 3\n[support]\nc0 = 1.0\nbeta = 0.2\ncount = 60\n{extra}\n[mollifier]\nepsilon = 0.05\n[integrator]\nt_end = 0.1\n"
    )
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = match std::fs::read_dir(dir) {
        Ok(rd) => rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names
}

#[test]
fn zero_horizon_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let s = parse_scenario(&small("").replace("t_end = 0.1", "t_end = 0")).unwrap();
    let report = cmd_run(&s, dir.path()).unwrap();
    assert_eq!(report.exit_code, EXIT_OK);
    let text = std::fs::read_to_string(dir.path().join(DIAGNOSTICS_FILE)).unwrap();
    let (header, rows) = read_csv(&text).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(header.len(), 8 + 5 + 1);
    assert_eq!(rows[0][0].parse::<f64>().unwrap(), 0.0);
    assert_eq!(rows[0][6], "NA");
}

#[test]
fn artifacts_carry_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let s = parse_scenario(&small("")).unwrap();
    let report = cmd_run(&s, dir.path()).unwrap();
    assert_eq!(report.exit_code, EXIT_OK);
    assert_eq!(files_in(dir.path()), [DIAGNOSTICS_FILE, SUMMARY_FILE, TRAJECTORIES_FILE]);
    for name in [DIAGNOSTICS_FILE, SUMMARY_FILE, TRAJECTORIES_FILE] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        let meta: Vec<&str> = text.lines().take_while(|l| l.starts_with('#')).collect();
        assert!(meta.contains(&"# effective dt = 1e-3"), "{name}");
        assert!(meta.iter().any(|l| l.starts_with("# effective blob_width = ")), "{name}");
        let echoed: String = meta
            .iter()
            .filter(|l| !l.starts_with("# effective"))
            .map(|l| format!("{}\n", l.trim_start_matches("# ")))
            .collect();
        assert_eq!(parse_scenario(&echoed).unwrap(), s, "{name}");
    }
    let (header, rows) = read_csv(&std::fs::read_to_string(dir.path().join(TRAJECTORIES_FILE)).unwrap()).unwrap();
    assert_eq!(header, ["time", "particle_id", "x1", "x2", "v1", "v2", "h_eps", "min_dist_to_charge"]);
    // 10 tagged particles at t = 0, 0.05, 0.1.
    assert_eq!(rows.len(), 30);
    assert_eq!(report.summary.get("status"), Some("completed"));
}

#[test]
fn collapse_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let s = parse_scenario(&small("charges = 0,0,0,0 ; 1e-13,0,0,0")).unwrap();
    let report = cmd_run(&s, dir.path()).unwrap();
    assert_eq!(report.exit_code, EXIT_COLLAPSE);
    assert_eq!(report.summary.get("status"), Some("collapsed"));
    let (_, rows) = read_csv(&std::fs::read_to_string(dir.path().join(DIAGNOSTICS_FILE)).unwrap()).unwrap();
    assert_eq!(rows.last().unwrap()[1], "NaN");
}

#[test]
fn oversized_step_is_a_precondition_failure_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let s = parse_scenario(&small("").replace("t_end = 0.1", "t_end = 0.1\ndt = 0.1")).unwrap();
    let err = cmd_run(&s, &out).unwrap_err();
    assert!(matches!(err, CliError::Core(vpcharge::Error::Precondition(_))), "{err}");
    assert_eq!(err.exit_code(), EXIT_PRECONDITION);
    assert!(files_in(&out).is_empty());
}

#[test]
fn coarse_collision_tracking_exits_three() {
    // Adaptive steps grow large; the collision fractions at delta = 1e-4
    // cannot be resolved.
    let dir = tempfile::tempdir().unwrap();
    let s = parse_scenario(
        &small("").replace("t_end = 0.1", "t_end = 0.2\nadaptive = 1e-4\n[diagnostics]\ndelta_ladder = 0.3,1e-6"),
    )
    .unwrap();
    let report = cmd_run(&s, dir.path()).unwrap();
    assert_eq!(report.exit_code, EXIT_PRECONDITION);
    assert!(report.summary.get("collision_check").is_some());
    assert_eq!(files_in(dir.path()).len(), 3);
}

#[test]
fn single_entry_ladder_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let s = parse_scenario(&format!("{}[ladder]\nepsilons = 0.05\n", small(""))).unwrap();
    let report = cmd_ladder(&s, dir.path()).unwrap();
    assert_eq!(report.exit_code, EXIT_OK);
    assert_eq!(report.matrix.len(), 1);
    assert_eq!((report.matrix[0][0].x, report.matrix[0][0].v), (0.0, 0.0));
    assert!(dir.path().join("eps_1").join(DIAGNOSTICS_FILE).exists());
}

#[test]
fn ladder_matrix_is_symmetric_with_zero_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let s = parse_scenario(&format!("{}[ladder]\nepsilons = 0.1,0.05,0.025\n", small(""))).unwrap();
    let report = cmd_ladder(&s, dir.path()).unwrap();
    assert_eq!(report.exit_code, EXIT_OK);
    let m = &report.matrix;
    assert_eq!(m.len(), 3);
    for n in 0..3 {
        assert_eq!(m[n][n].x, 0.0);
        assert_eq!(m[n][n].v, 0.0);
        for k in 0..3 {
            assert_eq!(m[n][k], m[k][n]);
        }
    }
    assert!(m[0][1].x_upper >= m[0][1].x);
    let (header, rows) = read_csv(&std::fs::read_to_string(dir.path().join("cauchy.csv")).unwrap()).unwrap();
    assert_eq!(header, ["n", "m", "X", "V", "X_upper"]);
    assert_eq!(rows.len(), 9);
    for n in 1..=3 {
        assert!(dir.path().join(format!("eps_{n}")).join(SUMMARY_FILE).exists());
    }
    // All rungs start from the same sample.
    let first: Vec<_> = report.runs.iter().map(|r| r.output.samples.snapshots[0].particles.clone()).collect();
    assert!(first.windows(2).all(|w| w[0] == w[1]));
    let summary = std::fs::read_to_string(dir.path().join("ladder_summary.txt")).unwrap();
    assert!(summary.contains("x_contracts = "));
    assert!(summary.contains("modulus_c_gamma = "));
}

fn binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vpcharge")).args(args).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("s.scn");
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    std::fs::write(&scn, small("")).unwrap();
    let check = binary(&["check", scn.to_str().unwrap()]);
    assert_eq!(check.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&check.stdout).contains("[integrator]"));
    assert_eq!(binary(&["run", scn.to_str().unwrap(), "--out", out_s]).status.code(), Some(0));

    std::fs::write(&scn, small("charges = 0,0,0,0 ; 1e-13,0,0,0")).unwrap();
    assert_eq!(binary(&["run", scn.to_str().unwrap(), "--out", out_s]).status.code(), Some(2));

    std::fs::write(&scn, small("").replace("epsilon = 0.05", "epsilon = 0.3")).unwrap();
    let bad = binary(&["run", scn.to_str().unwrap(), "--out", out_s]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 5: support.beta"), "{}", String::from_utf8_lossy(&bad.stderr));
}

//! CSV and key = value writers. Every file starts with `#` lines carrying
//! the effective configuration and is written to a temporary file in the
//! target directory, then renamed, so it is either complete or absent.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;
use vpcharge::diagnostics::DiagnosticsRecord;
use vpcharge::dynamics::TrajectorySample;

use crate::CliError;

pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Written in place of an absent value.
pub const NA: &str = "NA";

/// Shortest text that parses back to the same `f64`.
pub fn real(v: f64) -> String {
    format!("{v:e}")
}

fn optional(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), real)
}

pub fn diagnostics_header(ladder_len: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "time",
        "total_energy",
        "kinetic_energy",
        "h_sup",
        "first_moment",
        "rho_l2",
        "min_charge_dist",
        "field_sup",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..=ladder_len).map(|k| format!("frac_below_delta_{k}")));
    cols.push("delta_star".into());
    cols
}

pub const TRAJECTORY_HEADER: [&str; 8] = ["time", "particle_id", "x1", "x2", "v1", "v2", "h_eps", "min_dist_to_charge"];

/// Writes `contents` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| CliError::io(&path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(&path, e))?;
    tmp.persist(&path).map_err(|e| CliError::io(&path, e.error))?;
    Ok(path)
}

fn csv_bytes(meta: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut buf = meta.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        // Writing to a Vec cannot fail.
        w.write_record(header).expect("in-memory write");
        for row in rows {
            w.write_record(&row).expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    buf
}

pub fn diagnostics_csv(meta: &str, ladder_len: usize, records: &[DiagnosticsRecord]) -> Vec<u8> {
    let rows = records.iter().map(|r| {
        let mut row = vec![
            real(r.time),
            real(r.total_energy),
            real(r.kinetic_energy),
            real(r.h_sup),
            real(r.first_moment),
            real(r.rho_l2),
            optional(r.min_charge_dist),
            real(r.field_sup),
        ];
        row.extend(r.frac_below.iter().map(|&f| real(f)));
        row.push(optional(r.delta_star));
        row
    });
    csv_bytes(meta, &diagnostics_header(ladder_len), rows)
}

pub fn trajectories_csv(meta: &str, samples: &[TrajectorySample]) -> Vec<u8> {
    let header: Vec<String> = TRAJECTORY_HEADER.iter().map(|s| s.to_string()).collect();
    let rows = samples.iter().map(|s| {
        vec![
            real(s.time),
            s.particle_id.to_string(),
            real(s.phase.x.x),
            real(s.phase.x.y),
            real(s.phase.v.x),
            real(s.phase.v.y),
            real(s.h_eps),
            real(s.min_dist_to_charge),
        ]
    });
    csv_bytes(meta, &header, rows)
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        self.entries.push((key.to_string(), value.into()));
    }

    pub fn real(&mut self, key: &str, value: f64) {
        self.push(key, real(value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self, meta: &str) -> String {
        let mut out = meta.to_string();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parses a CSV written by this module, skipping `#` lines. Returns the
/// header and the rows.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), csv::Error> {
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}

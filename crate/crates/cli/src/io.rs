//! CSV and JSON artifacts of a run directory.
//!
//! Every file is rendered in memory, written to a temporary sibling and
//! renamed into place, so readers never observe a partial file. Floats are
//! written in shortest round-trip form.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pcrlb_core::ensemble::{Trajectory, TrajectoryEnsemble};
use pcrlb_core::model::SsmModel;
use pcrlb_core::pcrlb::BoundSeries;
use pcrlb_core::rng::{self, Domain};
use pcrlb_core::smc::EstimateRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENSEMBLE_FILE: &str = "ensemble.csv";
pub const BOUND_FILE: &str = "bound.csv";
pub const BOUND_FULL_FILE: &str = "bound_full.csv";
pub const BOUND_SUMMARY_FILE: &str = "bound_summary.json";
pub const ESTIMATES_DIR: &str = "estimates";
pub const REFERENCE_DIR: &str = "reference";
pub const STAGE_KEY_FILE: &str = "stage_key";
pub const BIAS_FILE: &str = "bias.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const REPORT_SUMMARY_FILE: &str = "report_summary.json";

/// A file written by a stage, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Shortest round-trip text of `v`, switching to exponent form for very
/// large or small magnitudes.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn parse_f64(field: &str, path: &Path, line: u64) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| CliError::data(path, format!("line {line}: '{field}' is not a number")))
}

fn parse_usize(field: &str, path: &Path, line: u64) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| CliError::data(path, format!("line {line}: '{field}' is not an index")))
}

/// Writes `bytes` to `dir/rel` atomically and returns its record.
pub fn write_atomic(dir: &Path, rel: &str, bytes: &[u8]) -> Result<FileRecord> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
    Ok(FileRecord {
        path: rel.to_string(),
        sha256: sha256_hex(bytes),
        bytes: bytes.len() as u64,
    })
}

/// Record of an existing file.
pub fn record_existing(dir: &Path, rel: &str) -> Result<FileRecord> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(FileRecord {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

pub fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<FileRecord> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    write_atomic(dir, rel, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(path, e.to_string()))
}

struct Table {
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(header: &[String]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header).expect("in-memory write");
        Self { writer }
    }

    fn row(&mut self, fields: &[String]) {
        self.writer.write_record(fields).expect("in-memory write");
    }

    fn finish(self) -> Vec<u8> {
        self.writer.into_inner().expect("in-memory flush")
    }
}

fn numbered(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (1..=count).map(move |i| format!("{prefix}_{i}"))
}

/// Reads a CSV file, checks its header and returns `(line, record)` pairs.
fn read_table(path: &Path, expected: &[String]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::data(path, format!("{other:?}")),
    })?;
    let header = reader
        .headers()
        .map_err(|e| CliError::data(path, e.to_string()))?
        .clone();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(CliError::data(
            path,
            format!(
                "header is [{}], expected [{}]",
                header.iter().collect::<Vec<_>>().join(","),
                expected.join(",")
            ),
        ));
    }
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| CliError::data(path, e.to_string()))?;
            let line = r.position().map_or(0, |p| p.line());
            Ok((line, r))
        })
        .collect()
}

pub fn ensemble_header(model: &SsmModel) -> Vec<String> {
    let d = model.dims();
    let mut h = vec!["trajectory".to_string(), "t".to_string()];
    h.extend(numbered("x", d.state));
    h.extend(numbered("theta", d.param));
    h.extend(numbered("y", d.meas));
    h.extend(numbered("u", d.input));
    h
}

/// One row per `(trajectory, t)`, `t = 0..=T`; `y` is empty at `t = 0` and
/// `u` is empty at `t = T`.
pub fn ensemble_csv(model: &SsmModel, e: &TrajectoryEnsemble) -> Vec<u8> {
    let mut table = Table::new(&ensemble_header(model));
    for j in 0..e.count {
        for t in 0..=e.horizon {
            let mut row = vec![j.to_string(), t.to_string()];
            row.extend(e.state(j, t).iter().map(|v| fmt_f64(*v)));
            row.extend(e.params(j).iter().map(|v| fmt_f64(*v)));
            if t == 0 {
                row.extend(std::iter::repeat_n(String::new(), e.meas_dim));
            } else {
                row.extend(e.measurement(j, t).iter().map(|v| fmt_f64(*v)));
            }
            if t == e.horizon {
                row.extend(std::iter::repeat_n(String::new(), e.input_dim));
            } else {
                row.extend(e.input(t).iter().map(|v| fmt_f64(*v)));
            }
            table.row(&row);
        }
    }
    table.finish()
}

/// Parses `ensemble.csv`. Trajectory seeds are restored from `seed`.
pub fn read_ensemble(path: &Path, model: &SsmModel, seed: u64) -> Result<TrajectoryEnsemble> {
    let d = model.dims();
    let rows = read_table(path, &ensemble_header(model))?;
    let x0 = 2;
    let th0 = x0 + d.state;
    let y0 = th0 + d.param;
    let u0 = y0 + d.meas;
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut horizon = None;
    for (line, r) in &rows {
        let line = *line;
        let j = parse_usize(&r[0], path, line)?;
        let t = parse_usize(&r[1], path, line)?;
        let nums = |from: usize, len: usize| -> Result<Vec<f64>> {
            (from..from + len).map(|c| parse_f64(&r[c], path, line)).collect()
        };
        if j == 0 {
            if r.iter().skip(u0).all(|f| f.is_empty()) {
                horizon = Some(t);
            } else {
                inputs.push(nums(u0, d.input)?);
            }
        }
        if t == 0 {
            if j != trajectories.len() {
                return Err(CliError::data(path, format!("line {line}: trajectory {j} out of order")));
            }
            trajectories.push(Trajectory {
                states: nums(x0, d.state)?,
                params: nums(th0, d.param)?,
                measurements: Vec::new(),
                seed: rng::substream_seed(seed, Domain::Ensemble, j as u64),
            });
            continue;
        }
        let count = trajectories.len();
        let Some(tr) = trajectories.last_mut() else {
            return Err(CliError::data(path, format!("line {line}: trajectory starts at t={t}")));
        };
        if j + 1 != count || tr.states.len() != t * d.state {
            return Err(CliError::data(path, format!("line {line}: row (trajectory {j}, t={t}) out of order")));
        }
        tr.states.extend(nums(x0, d.state)?);
        tr.measurements.extend(nums(y0, d.meas)?);
    }
    let horizon = horizon.ok_or_else(|| CliError::data(path, "no complete trajectory"))?;
    TrajectoryEnsemble::from_trajectories(model, horizon, &inputs, trajectories)
        .map_err(|e| CliError::data(path, e.to_string()))
}

pub fn bound_header(q: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(numbered("L_diag", q));
    h.push("cond_Jx".into());
    h.push("regularization_events".into());
    h
}

pub fn bound_csv(b: &BoundSeries) -> Vec<u8> {
    let mut table = Table::new(&bound_header(b.param_dim()));
    for t in 0..b.len() {
        let mut row = vec![t.to_string()];
        row.extend(b.diagonal(t).iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(b.cond_jx[t]));
        row.push(b.regularization_events[t].to_string());
        table.row(&row);
    }
    table.finish()
}

pub fn bound_full_header(q: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for i in 1..=q {
        for j in i..=q {
            h.push(format!("L_{i}_{j}"));
        }
    }
    h
}

/// Upper triangle of every `L_t`, row-major.
pub fn bound_full_csv(b: &BoundSeries) -> Vec<u8> {
    let q = b.param_dim();
    let mut table = Table::new(&bound_full_header(q));
    for (t, m) in b.bounds.iter().enumerate() {
        let mut row = vec![t.to_string()];
        for i in 0..q {
            for j in i..q {
                row.push(fmt_f64(m[(i, j)]));
            }
        }
        table.row(&row);
    }
    table.finish()
}

/// Bound matrices from `bound_full.csv`; condition numbers are not restored.
pub fn read_bound_full(path: &Path, q: usize) -> Result<BoundSeries> {
    let rows = read_table(path, &bound_full_header(q))?;
    let mut out = BoundSeries::default();
    for (line, r) in rows {
        let t = parse_usize(&r[0], path, line)?;
        if t != out.bounds.len() {
            return Err(CliError::data(path, format!("line {line}: expected t={}", out.bounds.len())));
        }
        let mut m = DMatrix::zeros(q, q);
        let mut c = 1;
        for i in 0..q {
            for j in i..q {
                let v = parse_f64(&r[c], path, line)?;
                m[(i, j)] = v;
                m[(j, i)] = v;
                c += 1;
            }
        }
        out.bounds.push(m);
        out.cond_jx.push(f64::NAN);
        out.regularization_events.push(0);
    }
    Ok(out)
}

pub fn run_file(dir: &str, run: usize, ext: &str) -> String {
    format!("{dir}/run_{run:04}.{ext}")
}

pub fn estimate_header(q: usize) -> Vec<String> {
    let mut h = vec!["run_index".to_string(), "t".to_string()];
    h.extend(numbered("theta", q));
    h.push("ess".into());
    h.push("resampled_flag".into());
    h
}

pub fn estimate_csv(run: usize, q: usize, records: &[EstimateRecord]) -> Vec<u8> {
    let mut table = Table::new(&estimate_header(q));
    for r in records {
        let mut row = vec![run.to_string(), r.t.to_string()];
        row.extend(r.theta.iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(r.ess));
        row.push(u8::from(r.resampled).to_string());
        table.row(&row);
    }
    table.finish()
}

pub fn read_estimates(path: &Path, run: usize, q: usize, horizon: usize) -> Result<Vec<EstimateRecord>> {
    let rows = read_table(path, &estimate_header(q))?;
    if rows.len() != horizon {
        return Err(CliError::data(path, format!("{} rows, expected {horizon}", rows.len())));
    }
    rows.into_iter()
        .enumerate()
        .map(|(k, (line, r))| {
            if parse_usize(&r[0], path, line)? != run || parse_usize(&r[1], path, line)? != k + 1 {
                return Err(CliError::data(path, format!("line {line}: expected run {run}, t={}", k + 1)));
            }
            let theta = (2..2 + q).map(|c| parse_f64(&r[c], path, line)).collect::<Result<_>>()?;
            let flag = &r[2 + q + 1];
            Ok(EstimateRecord {
                t: k + 1,
                theta,
                ess: parse_f64(&r[2 + q], path, line)?,
                resampled: match flag {
                    "0" => false,
                    "1" => true,
                    other => return Err(CliError::data(path, format!("line {line}: bad flag '{other}'"))),
                },
            })
        })
        .collect()
}

pub fn reference_header(q: usize) -> Vec<String> {
    let mut h = vec!["run_index".to_string(), "t".to_string()];
    h.extend(numbered("theta_star", q));
    h
}

/// Reference posterior means for `t = 0..=T`.
pub fn reference_csv(run: usize, means: &[Vec<f64>]) -> Vec<u8> {
    let q = means.first().map_or(0, Vec::len);
    let mut table = Table::new(&reference_header(q));
    for (t, m) in means.iter().enumerate() {
        let mut row = vec![run.to_string(), t.to_string()];
        row.extend(m.iter().map(|v| fmt_f64(*v)));
        table.row(&row);
    }
    table.finish()
}

pub fn read_reference(path: &Path, run: usize, q: usize, horizon: usize) -> Result<Vec<Vec<f64>>> {
    let rows = read_table(path, &reference_header(q))?;
    if rows.len() != horizon + 1 {
        return Err(CliError::data(path, format!("{} rows, expected {}", rows.len(), horizon + 1)));
    }
    rows.into_iter()
        .enumerate()
        .map(|(t, (line, r))| {
            if parse_usize(&r[0], path, line)? != run || parse_usize(&r[1], path, line)? != t {
                return Err(CliError::data(path, format!("line {line}: expected run {run}, t={t}")));
            }
            (2..2 + q).map(|c| parse_f64(&r[c], path, line)).collect()
        })
        .collect()
}

pub fn bias_header(q: usize) -> Vec<String> {
    let mut h = vec!["run_index".to_string(), "t".to_string()];
    h.extend(numbered("bias", q));
    h
}

/// `B*` rows for each `(run, per-step biases)` pair.
pub fn bias_csv(q: usize, runs: &[(usize, &Vec<Vec<f64>>)]) -> Vec<u8> {
    let mut table = Table::new(&bias_header(q));
    for (run, seq) in runs {
        for (k, b) in seq.iter().enumerate() {
            let mut row = vec![run.to_string(), (k + 1).to_string()];
            row.extend(b.iter().map(|v| fmt_f64(*v)));
            table.row(&row);
        }
    }
    table.finish()
}

pub fn report_header(q: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "trace_P", "trace_L", "trace_gap", "min_eig_gap"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in [
        "mse",
        "bound",
        "frac_within_eps",
        "mean_bias",
        "abs_mean_bias",
        "eps_unbiased",
        "eps_mmse",
        "alpha_unbiased",
    ] {
        h.extend(numbered(prefix, q));
    }
    h.push("eps_efficient".into());
    h
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub t: usize,
    pub trace_p: f64,
    pub trace_l: f64,
    pub trace_gap: f64,
    pub min_eig_gap: f64,
    pub mse: Vec<f64>,
    pub bound: Vec<f64>,
    pub frac_within_eps: Vec<f64>,
    pub mean_bias: Vec<f64>,
    pub eps_unbiased: Vec<bool>,
    pub eps_mmse: Vec<bool>,
    pub alpha_unbiased: Vec<bool>,
    pub eps_efficient: bool,
}

pub fn report_csv(q: usize, rows: &[ReportRow]) -> Vec<u8> {
    let flag = |b: &bool| u8::from(*b).to_string();
    let mut table = Table::new(&report_header(q));
    for r in rows {
        let mut row = vec![
            r.t.to_string(),
            fmt_f64(r.trace_p),
            fmt_f64(r.trace_l),
            fmt_f64(r.trace_gap),
            fmt_f64(r.min_eig_gap),
        ];
        for v in [&r.mse, &r.bound, &r.frac_within_eps, &r.mean_bias] {
            row.extend(v.iter().map(|x| fmt_f64(*x)));
        }
        row.extend(r.mean_bias.iter().map(|x| fmt_f64(x.abs())));
        for v in [&r.eps_unbiased, &r.eps_mmse, &r.alpha_unbiased] {
            row.extend(v.iter().map(flag));
        }
        row.push(flag(&r.eps_efficient));
        table.row(&row);
    }
    table.finish()
}

/// Parses `report.csv` back into rows.
pub fn read_report(path: &Path, q: usize) -> Result<Vec<ReportRow>> {
    let rows = read_table(path, &report_header(q))?;
    rows.into_iter()
        .map(|(line, r)| {
            let f = |c: usize| parse_f64(&r[c], path, line);
            let block = |k: usize| -> Result<Vec<f64>> { (0..q).map(|i| f(5 + k * q + i)).collect() };
            let flags = |k: usize| -> Vec<bool> { (0..q).map(|i| &r[5 + k * q + i] == "1").collect() };
            Ok(ReportRow {
                t: parse_usize(&r[0], path, line)?,
                trace_p: f(1)?,
                trace_l: f(2)?,
                trace_gap: f(3)?,
                min_eig_gap: f(4)?,
                mse: block(0)?,
                bound: block(1)?,
                frac_within_eps: block(2)?,
                mean_bias: block(3)?,
                eps_unbiased: flags(5),
                eps_mmse: flags(6),
                alpha_unbiased: flags(7),
                eps_efficient: &r[5 + 8 * q] == "1",
            })
        })
        .collect()
}

/// Path of `rel` inside `dir`, for error messages.
pub fn at(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pcrlb_cli::commands::{self, analyze_runs, RunData, RunStatus};
use pcrlb_cli::config::{CliOverrides, FileConfig, OUTPUT_ROOT_ENV};
use pcrlb_cli::io;
use pcrlb_cli::manifest::RunManifest;
use pcrlb_cli::RunConfig;
use pcrlb_core::analysis::Tolerances;
use pcrlb_core::model::registry;
use pcrlb_core::pcrlb::{run_pcrlb, PcrlbOptions};

const SMALL: &str = r#"
model = "benchmark-eq13"
mc_runs = 10
horizon = 5
particles = 200
reference_multiplier = 2
reference_replicates = 2
"#;

fn config(text: &str, out: &Path) -> RunConfig {
    let cli = CliOverrides {
        out: Some(out.to_path_buf()),
        ..CliOverrides::default()
    };
    RunConfig::resolve(FileConfig::from_toml(text).unwrap(), &cli).unwrap()
}

fn pcrlb(args: &[&str], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pcrlb"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

/// Relative path to contents of every file below `dir`, except the manifest.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                if rel != io::MANIFEST_FILE {
                    out.insert(rel, fs::read(&path).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

#[test]
fn missing_model_exits_with_config_code_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "horizon = 5\n").unwrap();
    let out = pcrlb(&["bound", "--config", cfg.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("`model`"), "{stderr}");
}

#[test]
fn smoke_run_is_fast_and_twin_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let mut bound_files = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let clock = Instant::now();
        let out = pcrlb(
            &["bound", "--config", cfg.to_str().unwrap(), "--seed", "42", "--out", out_dir.to_str().unwrap()],
            &[],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(clock.elapsed().as_secs_f64() < 5.0);
        bound_files.push((
            fs::read(out_dir.join(io::BOUND_FILE)).unwrap(),
            fs::read(out_dir.join(io::BOUND_FULL_FILE)).unwrap(),
        ));
    }
    assert_eq!(bound_files[0], bound_files[1]);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = pcrlb(
        &["bound", "--model", "benchmark-eq13", "--mc-runs", "5", "--horizon", "3", "--seed", "9"],
        &[(OUTPUT_ROOT_ENV, dir.path())],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("benchmark-eq13-seed9").join(io::BOUND_FILE).exists());
}

#[test]
fn stage_failures_propagate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();

    // Analysis before identification: missing upstream files.
    let out = pcrlb(&["identify", "--model", "benchmark-eq13", "--out", run_s], &[]);
    assert_eq!(out.status.code(), Some(4));

    // A single trajectory makes the Schur complement singular for this seed.
    let base = ["--model", "benchmark-eq13", "--mc-runs", "1", "--horizon", "20", "--seed", "3", "--out", run_s];
    let mut args = vec!["all"];
    args.extend(base);
    let out = pcrlb(&args, &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.join(io::ESTIMATES_DIR).exists());

    // Output path occupied by a file.
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = pcrlb(
        &["bound", "--model", "benchmark-eq13", "--mc-runs", "5", "--horizon", "3", "--out", blocker.to_str().unwrap()],
        &[],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn staged_execution_equals_all_and_manifest_is_complete() {
    let dir = tempfile::tempdir().unwrap();
    let staged = config(SMALL, &dir.path().join("staged"));
    let all = config(SMALL, &dir.path().join("all"));
    commands::cmd_bound(&staged).unwrap();
    commands::cmd_identify(&staged).unwrap();
    commands::cmd_analyze(&staged).unwrap();
    commands::cmd_all(&all).unwrap();
    let a = snapshot(&staged.output);
    assert_eq!(a, snapshot(&all.output));
    for name in [io::REPORT_FILE, io::BIAS_FILE, io::ENSEMBLE_FILE, "estimates/run_0009.csv", "reference/run_0000.csv"] {
        assert!(a.contains_key(name), "{name}");
    }

    let manifest: RunManifest = io::read_json(&staged.output.join(io::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.config_hash, staged.hash());
    assert_eq!(manifest.stages.len(), 3);
    let listed: BTreeMap<&str, &str> = manifest.files().map(|f| (f.path.as_str(), f.sha256.as_str())).collect();
    assert_eq!(listed.len(), a.len());
    for (path, bytes) in &a {
        assert_eq!(listed.get(path.as_str()), Some(&io::sha256_hex(bytes).as_str()), "{path}");
    }
}

#[test]
fn identify_resumes_only_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL, dir.path());
    commands::cmd_bound(&cfg).unwrap();
    let first = commands::cmd_identify(&cfg).unwrap();
    assert_eq!(first.indices(RunStatus::Computed), (0..10).collect::<Vec<_>>());

    let victim = dir.path().join(io::run_file(io::ESTIMATES_DIR, 3, "csv"));
    let original = fs::read(&victim).unwrap();
    fs::remove_file(&victim).unwrap();
    let second = commands::cmd_identify(&cfg).unwrap();
    assert_eq!(second.indices(RunStatus::Computed), vec![3]);
    assert_eq!(second.indices(RunStatus::Reused).len(), 9);
    assert_eq!(fs::read(&victim).unwrap(), original);

    // A different particle count invalidates the cache.
    let mut more = cfg.clone();
    more.particles = 300;
    let third = commands::cmd_identify(&more).unwrap();
    assert_eq!(third.indices(RunStatus::Computed).len(), 10);
}

#[test]
fn analyze_skips_failed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL, dir.path());
    commands::cmd_bound(&cfg).unwrap();
    commands::cmd_identify(&cfg).unwrap();
    let rel = io::run_file(io::ESTIMATES_DIR, 4, "csv");
    fs::remove_file(dir.path().join(&rel)).unwrap();
    fs::write(dir.path().join(io::run_file(io::ESTIMATES_DIR, 4, "failed")), "degenerate\n").unwrap();
    let out = commands::cmd_analyze(&cfg).unwrap();
    assert_eq!(out.summary.runs_used, 9);
    assert_eq!(out.summary.runs_failed, vec![4]);
    let bias = fs::read_to_string(dir.path().join(io::BIAS_FILE)).unwrap();
    assert!(!bias.lines().any(|l| l.starts_with("4,")));
}

fn synthetic_runs(count: usize, horizon: usize, error: f64) -> Vec<RunData> {
    let m = registry::build(registry::BENCHMARK).unwrap();
    let e = pcrlb_core::ensemble::simulate_ensemble(&m, count, horizon, 5).unwrap();
    (0..count)
        .map(|j| {
            let truth = e.params(j).to_vec();
            let est: Vec<Vec<f64>> = (1..=horizon)
                .map(|t| truth.iter().map(|v| v + error * ((j * 7 + t) % 5) as f64).collect())
                .collect();
            RunData {
                index: j,
                truth: truth.clone(),
                reference: (1..=horizon).map(|_| truth.clone()).collect(),
                estimates: est,
            }
        })
        .collect()
}

#[test]
fn zero_error_inputs_pass_every_check() {
    let horizon = 6;
    let bound = run_pcrlb(&registry::build(registry::BENCHMARK).unwrap(), 50, horizon, 1, PcrlbOptions::default())
        .unwrap()
        .bounds;
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let runs = synthetic_runs(20, horizon, 0.0);
    let a = analyze_runs(&names, &bound, &runs, &Tolerances::defaults(4), "exact").unwrap();
    for row in &a.rows {
        assert!(row.eps_efficient);
        assert!(row.eps_unbiased.iter().chain(&row.alpha_unbiased).all(|v| *v));
        assert!(row.mse.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn shuffled_run_order_gives_identical_report() {
    let horizon = 6;
    let bound = run_pcrlb(&registry::build(registry::BENCHMARK).unwrap(), 50, horizon, 1, PcrlbOptions::default())
        .unwrap()
        .bounds;
    let names: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    let runs = synthetic_runs(37, horizon, 0.0123);
    let mut shuffled = runs.clone();
    shuffled.reverse();
    shuffled.rotate_left(11);
    let tol = Tolerances::defaults(4);
    let a = analyze_runs(&names, &bound, &runs, &tol, "x").unwrap();
    let b = analyze_runs(&names, &bound, &shuffled, &tol, "x").unwrap();
    assert_eq!(io::report_csv(4, &a.rows), io::report_csv(4, &b.rows));
    assert_eq!(a.summary, b.summary);
}

#[test]
fn report_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL, dir.path());
    let out = commands::cmd_all(&cfg).unwrap();
    let rows = io::read_report(&dir.path().join(io::REPORT_FILE), 4).unwrap();
    assert_eq!(rows.len(), 5);
    let last = rows.last().unwrap();
    for (i, p) in out.summary.parameters.iter().enumerate() {
        assert_eq!(p.mse, last.mse[i]);
        assert_eq!(p.eps_unbiased, last.eps_unbiased[i]);
    }
    let summary: PathBuf = dir.path().join(io::REPORT_SUMMARY_FILE);
    let parsed: commands::ReportSummary = io::read_json(&summary).unwrap();
    assert_eq!(parsed, out.summary);
}

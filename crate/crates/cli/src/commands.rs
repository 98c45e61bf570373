//! The `bound`, `identify` and `analyze` stages and their composition.

use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use pcrlb_core::analysis::{classify, mse_mc, reference_posterior_mean, BiasRecord, Tolerances};
use pcrlb_core::ensemble::{simulate_ensemble, TrajectoryEnsemble};
use pcrlb_core::model::{registry, SsmModel};
use pcrlb_core::pcrlb::{bound_from_ensemble, BoundSeries, PcrlbOptions};
use pcrlb_core::rng::{self, Domain};
use pcrlb_core::smc::identify;
use pcrlb_core::{par, Error as CoreError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{self, FileRecord, ReportRow};
use crate::manifest::{RunManifest, StageRecord};

/// Files and timing of a finished stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub files: Vec<FileRecord>,
    pub wall_clock_seconds: f64,
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    #[cfg(feature = "parallel")]
    {
        match workers {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::config("workers", e.to_string()))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        if workers.is_some_and(|n| n > 1) {
            log::warn!("built without the `parallel` feature; running on one thread");
        }
        Ok(f())
    }
}

fn current_workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Writes `config.toml`, executes a stage and records it in the manifest.
fn stage(
    config: &RunConfig,
    name: &'static str,
    body: impl FnOnce(&Path, &SsmModel) -> Result<Vec<FileRecord>> + Send,
) -> Result<StageOutcome> {
    let dir = config.output.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let config_file = io::write_atomic(dir, io::CONFIG_FILE, config.to_toml().as_bytes())?;
    let model = config.build_model()?;
    let started_unix = unix_now();
    let clock = Instant::now();
    log::info!("{name}: writing to {}", dir.display());
    let (files, workers) = with_workers(config.workers, || -> Result<_> {
        Ok((body(dir, &model)?, current_workers()))
    })??;
    let wall_clock_seconds = clock.elapsed().as_secs_f64();
    let mut manifest = RunManifest::open(dir, config, config_file);
    manifest.record(
        name,
        StageRecord {
            started_unix,
            wall_clock_seconds,
            workers,
            files: files.clone(),
        },
    );
    manifest.write(dir)?;
    log::info!("{name}: {} files in {wall_clock_seconds:.2} s", files.len());
    Ok(StageOutcome {
        stage: name,
        files,
        wall_clock_seconds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub mc_runs: usize,
    pub horizon: usize,
    pub parameters: Vec<String>,
    pub initial_diagonal: Vec<f64>,
    pub final_diagonal: Vec<f64>,
    pub max_cond_jx: f64,
    pub regularization_events: u64,
}

impl BoundSummary {
    fn new(model: &SsmModel, ensemble: &TrajectoryEnsemble, b: &BoundSeries) -> Self {
        Self {
            mc_runs: ensemble.count,
            horizon: ensemble.horizon,
            parameters: model.param_names(),
            initial_diagonal: b.diagonal(0),
            final_diagonal: b.diagonal(b.len() - 1),
            max_cond_jx: b.cond_jx.iter().copied().fold(0.0, f64::max),
            regularization_events: b.regularization_events.iter().map(|e| u64::from(*e)).sum(),
        }
    }
}

/// Module 1: simulates the ensemble and computes the bound.
pub fn cmd_bound(config: &RunConfig) -> Result<StageOutcome> {
    stage(config, "bound", |dir, model| {
        let ensemble = simulate_ensemble(model, config.mc_runs, config.horizon, config.seed)?;
        let mut files = vec![io::write_atomic(dir, io::ENSEMBLE_FILE, &io::ensemble_csv(model, &ensemble))?];
        let options = PcrlbOptions {
            hessian: config.hessian.into(),
        };
        let b = bound_from_ensemble(model, &ensemble, options)?.bounds;
        files.push(io::write_atomic(dir, io::BOUND_FILE, &io::bound_csv(&b))?);
        files.push(io::write_atomic(dir, io::BOUND_FULL_FILE, &io::bound_full_csv(&b))?);
        files.push(io::write_json(dir, io::BOUND_SUMMARY_FILE, &BoundSummary::new(model, &ensemble, &b))?);
        Ok(files)
    })
}

fn load_ensemble(dir: &Path, config: &RunConfig, model: &SsmModel) -> Result<(TrajectoryEnsemble, String)> {
    let path = dir.join(io::ENSEMBLE_FILE);
    if !path.exists() {
        return Err(CliError::data(&path, "missing; run the `bound` stage first"));
    }
    let ensemble = io::read_ensemble(&path, model, config.seed)?;
    if ensemble.count != config.mc_runs || ensemble.horizon != config.horizon {
        return Err(CliError::data(
            &path,
            format!(
                "holds M={}, T={} but the configuration asks for M={}, T={}",
                ensemble.count, ensemble.horizon, config.mc_runs, config.horizon
            ),
        ));
    }
    let checksum = io::record_existing(dir, io::ENSEMBLE_FILE)?.sha256;
    Ok((ensemble, checksum))
}

/// Makes `dir/sub` hold results for `key`, clearing it when the key changed.
fn sync_cache_dir(dir: &Path, sub: &str, key: &str) -> Result<FileRecord> {
    let path = dir.join(sub);
    let key_rel = format!("{sub}/{}", io::STAGE_KEY_FILE);
    let current = fs::read_to_string(dir.join(&key_rel)).ok();
    if current.as_deref().map(str::trim) != Some(key) {
        if path.exists() {
            log::warn!("{}: inputs changed, discarding cached results", path.display());
            fs::remove_dir_all(&path).map_err(|e| CliError::io(&path, e))?;
        }
        return io::write_atomic(dir, &key_rel, format!("{key}\n").as_bytes());
    }
    io::record_existing(dir, &key_rel)
}

fn cache_key(parts: &[String]) -> String {
    io::sha256_hex(parts.join("\n").as_bytes())
}

/// How an identification run was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Computed,
    Reused,
    Failed,
}

#[derive(Debug, Clone)]
pub struct IdentifyOutcome {
    pub stage: StageOutcome,
    /// Status of run `j` at index `j`.
    pub runs: Vec<RunStatus>,
}

impl IdentifyOutcome {
    pub fn indices(&self, status: RunStatus) -> Vec<usize> {
        (0..self.runs.len()).filter(|j| self.runs[*j] == status).collect()
    }
}

fn is_run_failure(e: &CoreError) -> bool {
    !matches!(e, CoreError::Config(_) | CoreError::Shape(_))
}

/// Module 2: runs the identifier on each measurement record. Existing
/// estimate files are kept, so an interrupted stage resumes where it stopped.
pub fn cmd_identify(config: &RunConfig) -> Result<IdentifyOutcome> {
    let mut statuses = Vec::new();
    let outcome = stage(config, "identify", |dir, model| {
        let (ensemble, checksum) = load_ensemble(dir, config, model)?;
        let schedule = config.schedule()?;
        let key = cache_key(&[checksum, config.particles.to_string(), schedule.describe()]);
        let key_file = sync_cache_dir(dir, io::ESTIMATES_DIR, &key)?;
        let q = model.dims().param;
        let us = ensemble.input_rows();
        let results = par::map_indexed(config.identify_runs, |j| -> Result<(RunStatus, FileRecord)> {
            let csv = io::run_file(io::ESTIMATES_DIR, j, "csv");
            let failed = io::run_file(io::ESTIMATES_DIR, j, "failed");
            for rel in [&csv, &failed] {
                if dir.join(rel).exists() {
                    let status = if rel == &csv { RunStatus::Reused } else { RunStatus::Failed };
                    return Ok((status, io::record_existing(dir, rel)?));
                }
            }
            let mut rng = rng::substream(config.seed, Domain::Identify, j as u64);
            match identify(model, &ensemble.measurement_rows(j), &us, config.particles, &schedule, &mut rng) {
                Ok(records) => Ok((
                    RunStatus::Computed,
                    io::write_atomic(dir, &csv, &io::estimate_csv(j, q, &records))?,
                )),
                Err(e) if is_run_failure(&e) => {
                    log::warn!("identification run {j} skipped: {e}");
                    Ok((RunStatus::Failed, io::write_atomic(dir, &failed, format!("{e}\n").as_bytes())?))
                }
                Err(e) => Err(e.into()),
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut files = vec![key_file];
        for (status, file) in results {
            statuses.push(status);
            files.push(file);
        }
        if statuses.iter().all(|s| *s == RunStatus::Failed) {
            return Err(CoreError::Degeneracy { t: 0 }.into());
        }
        Ok(files)
    })?;
    let failed = statuses.iter().filter(|s| **s == RunStatus::Failed).count();
    if failed > 0 {
        log::warn!("{failed} of {} identification runs failed", statuses.len());
    }
    Ok(IdentifyOutcome {
        stage: outcome,
        runs: statuses,
    })
}

/// Inputs of the analysis for one identification run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunData {
    pub index: usize,
    pub truth: Vec<f64>,
    /// `θ̂_t` for `t = 1..=T`.
    pub estimates: Vec<Vec<f64>>,
    /// `θ*_t` for `t = 1..=T`.
    pub reference: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVerdict {
    pub index: usize,
    pub name: String,
    pub mse: f64,
    pub bound: f64,
    pub fraction_within_eps: f64,
    pub mean_bias: f64,
    pub eps_unbiased: bool,
    pub eps_mmse: bool,
    pub alpha_unbiased: bool,
    /// Fraction of steps `t = 1..=T` with MSE at or above the bound.
    pub fraction_steps_mse_above_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub t_final: usize,
    pub runs_used: usize,
    pub runs_failed: Vec<usize>,
    pub reference_provenance: String,
    pub epsilon: Vec<f64>,
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub eps_efficient: bool,
    pub trace_gap: f64,
    pub min_eig_gap: f64,
    pub negative_gap_steps: usize,
    pub parameters: Vec<ParameterVerdict>,
}

/// Result of the pure analysis over aligned runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub rows: Vec<ReportRow>,
    pub biases: BiasRecord,
    pub summary: ReportSummary,
}

/// MSE, conditional biases, classification and gap diagnostics. The report
/// does not depend on the order of `runs`.
pub fn analyze_runs(
    names: &[String],
    bound: &BoundSeries,
    runs: &[RunData],
    tolerances: &Tolerances,
    provenance: &str,
) -> std::result::Result<Analysis, CoreError> {
    let truths: Vec<Vec<f64>> = runs.iter().map(|r| r.truth.clone()).collect();
    let estimates: Vec<Vec<Vec<f64>>> = runs.iter().map(|r| r.estimates.clone()).collect();
    let mse = mse_mc(&truths, &estimates)?;
    let per_run = runs
        .iter()
        .map(|r| pcrlb_core::analysis::conditional_bias(&r.reference, &r.estimates))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let biases = BiasRecord::new(per_run, provenance)?;
    let verdict = classify(&mse, bound, &biases, tolerances)?;
    let q = bound.param_dim();
    let rows: Vec<ReportRow> = verdict
        .steps
        .iter()
        .map(|s| ReportRow {
            t: s.t,
            trace_p: mse.trace(s.t),
            trace_l: bound.bounds[s.t].trace(),
            trace_gap: s.gap.trace_gap,
            min_eig_gap: s.gap.min_eigenvalue,
            mse: mse.diagonal(s.t),
            bound: bound.diagonal(s.t),
            frac_within_eps: s.fraction_within_eps.clone(),
            mean_bias: s.mean_bias.clone(),
            eps_unbiased: s.eps_unbiased.clone(),
            eps_mmse: s.eps_mmse.clone(),
            alpha_unbiased: s.alpha_unbiased.clone(),
            eps_efficient: s.eps_efficient,
        })
        .collect();
    let last = rows.last().ok_or_else(|| CoreError::Shape("empty horizon".into()))?;
    let steps = rows.len() as f64;
    let parameters = (0..q)
        .map(|i| ParameterVerdict {
            index: i + 1,
            name: names.get(i).cloned().unwrap_or_else(|| format!("theta_{}", i + 1)),
            mse: last.mse[i],
            bound: last.bound[i],
            fraction_within_eps: last.frac_within_eps[i],
            mean_bias: last.mean_bias[i],
            eps_unbiased: last.eps_unbiased[i],
            eps_mmse: last.eps_mmse[i],
            alpha_unbiased: last.alpha_unbiased[i],
            fraction_steps_mse_above_bound: rows.iter().filter(|r| r.mse[i] >= r.bound[i]).count() as f64 / steps,
        })
        .collect();
    let summary = ReportSummary {
        t_final: last.t,
        runs_used: runs.len(),
        runs_failed: Vec::new(),
        reference_provenance: provenance.to_string(),
        epsilon: tolerances.epsilon.clone(),
        alpha: tolerances.alpha.clone(),
        rho: tolerances.rho,
        eps_efficient: last.eps_efficient,
        trace_gap: last.trace_gap,
        min_eig_gap: last.min_eig_gap,
        negative_gap_steps: rows.iter().filter(|r| r.min_eig_gap < 0.0).count(),
        parameters,
    };
    Ok(Analysis { rows, biases, summary })
}

#[derive(Debug, Clone)]
pub struct AnalyzeOutcome {
    pub stage: StageOutcome,
    pub summary: ReportSummary,
}

/// Module 3: reference posterior means, MSE against the truth, conditional
/// biases and classification. Failed identification runs are left out.
pub fn cmd_analyze(config: &RunConfig) -> Result<AnalyzeOutcome> {
    let mut summary = None;
    let outcome = stage(config, "analyze", |dir, model| {
        let (ensemble, checksum) = load_ensemble(dir, config, model)?;
        let q = model.dims().param;
        let horizon = config.horizon;
        let bound_path = dir.join(io::BOUND_FULL_FILE);
        if !bound_path.exists() {
            return Err(CliError::data(&bound_path, "missing; run the `bound` stage first"));
        }
        let bound = io::read_bound_full(&bound_path, q)?;
        if bound.len() != horizon + 1 {
            return Err(CliError::data(
                &bound_path,
                format!("covers {} steps, expected {}", bound.len(), horizon + 1),
            ));
        }

        let mut used = Vec::new();
        let mut failed = Vec::new();
        let mut estimates = Vec::new();
        for j in 0..config.identify_runs {
            let csv = dir.join(io::run_file(io::ESTIMATES_DIR, j, "csv"));
            if csv.exists() {
                let recs = io::read_estimates(&csv, j, q, horizon)?;
                estimates.push(recs.into_iter().map(|r| r.theta).collect::<Vec<_>>());
                used.push(j);
            } else if dir.join(io::run_file(io::ESTIMATES_DIR, j, "failed")).exists() {
                failed.push(j);
            } else {
                return Err(CliError::data(&csv, "missing; run the `identify` stage first"));
            }
        }
        if used.is_empty() {
            return Err(CoreError::Degeneracy { t: 0 }.into());
        }

        let reference_config = config.reference()?;
        let provenance = reference_config.provenance();
        let key = cache_key(&[checksum, provenance.clone()]);
        let key_file = sync_cache_dir(dir, io::REFERENCE_DIR, &key)?;
        let us = ensemble.input_rows();
        let references = par::map_indexed(used.len(), |k| -> Result<(Vec<Vec<f64>>, FileRecord)> {
            let j = used[k];
            let rel = io::run_file(io::REFERENCE_DIR, j, "csv");
            if dir.join(&rel).exists() {
                let means = io::read_reference(&dir.join(&rel), j, q, horizon)?;
                return Ok((means, io::record_existing(dir, &rel)?));
            }
            let seed = rng::substream_seed(config.seed, Domain::Reference, j as u64);
            let r = reference_posterior_mean(model, &ensemble.measurement_rows(j), &us, &reference_config, seed)?;
            let file = io::write_atomic(dir, &rel, &io::reference_csv(j, &r.means))?;
            Ok((r.means, file))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut files = vec![key_file];
        let runs: Vec<RunData> = used
            .iter()
            .zip(estimates)
            .zip(references)
            .map(|((&j, est), (means, file))| {
                files.push(file);
                RunData {
                    index: j,
                    truth: ensemble.params(j).to_vec(),
                    estimates: est,
                    reference: means[1..].to_vec(),
                }
            })
            .collect();

        let mut analysis = analyze_runs(&model.param_names(), &bound, &runs, &config.tolerances(), &provenance)?;
        analysis.summary.runs_failed = failed;
        let bias_rows: Vec<(usize, &Vec<Vec<f64>>)> =
            used.iter().copied().zip(analysis.biases.per_run.iter()).collect();
        files.push(io::write_atomic(dir, io::BIAS_FILE, &io::bias_csv(q, &bias_rows))?);
        files.push(io::write_atomic(dir, io::REPORT_FILE, &io::report_csv(q, &analysis.rows))?);
        files.push(io::write_json(dir, io::REPORT_SUMMARY_FILE, &analysis.summary)?);
        summary = Some(analysis.summary);
        Ok(files)
    })?;
    Ok(AnalyzeOutcome {
        stage: outcome,
        summary: summary.expect("analyze stage produced a summary"),
    })
}

/// All three stages in order; the first failure stops the chain.
pub fn cmd_all(config: &RunConfig) -> Result<AnalyzeOutcome> {
    cmd_bound(config)?;
    cmd_identify(config)?;
    cmd_analyze(config)
}

/// `(name, description)` lines for `list-models`.
pub fn list_models() -> Vec<String> {
    registry::list()
        .into_iter()
        .map(|(name, description)| format!("{name}\t{description}"))
        .collect()
}

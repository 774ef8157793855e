//! The `calibrate`, `run`, `sweep` and `train-ngram` commands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use uhlm_core::backend::ngram::{read_corpus, NGramPair};
use uhlm_core::backend::{BackendConfig, BackendPair};
use uhlm_core::calibration::{CalibrationModel, UncertaintyHistogram};
use uhlm_core::engine::{run_generation, EngineConfig, Method, RunFailure, RunOutput};
use uhlm_core::trace::{config_hash, write_trace, ErrorRecord, TraceHeader};

use crate::config::{RunConfigFile, ThresholdChoice};
use crate::error::{CliError, Result};
use crate::output::OutDir;
use crate::summary::{write_rows, SummaryRow};

/// The config echoed into one run's outputs: the file with the engine
/// section replaced by what actually ran. Output locations and the
/// calibration file path are left out, since they do not change results and
/// the resolved threshold is already in the engine section.
pub fn run_value(cfg: &RunConfigFile, engine: &EngineConfig) -> serde_json::Value {
    let mut cfg = cfg.clone();
    cfg.calibration.path = None;
    let mut v = cfg.to_value();
    let obj = v.as_object_mut().expect("config is an object");
    obj.insert("engine".into(), serde_json::to_value(engine).expect("engine config serializes"));
    obj.remove("seeds");
    obj.remove("sweep");
    obj.remove("output");
    v
}

fn build_backend(cfg: &RunConfigFile, engine: &EngineConfig) -> Result<BackendPair> {
    Ok(cfg.backend.build(engine.seed, &engine.perturbation)?)
}

pub struct CalibrationOutput {
    pub model: CalibrationModel,
    pub path: PathBuf,
}

/// Runs HLM with oracle mode, fits the uncertainty/rejection line and writes
/// the calibration file.
pub fn calibrate(cfg: &RunConfigFile) -> Result<CalibrationOutput> {
    let engine = EngineConfig {
        method: Method::Hlm,
        oracle_mode: true,
        rounds: Some(cfg.calibration.rounds),
        u_th: None,
        rand_skip_prob: None,
        ..cfg.engine.clone()
    };
    let pair = build_backend(cfg, &engine)?;
    let out = run_generation(&engine, &pair).map_err(|f| f.error)?;
    let samples: Vec<_> = out.records.iter().filter_map(|r| r.calibration_sample()).collect();
    let edges = match cfg.calibration.bins {
        Some(n) => UncertaintyHistogram::uniform_edges(n),
        None => UncertaintyHistogram::lattice_edges(engine.perturbation.samples),
    };
    let mut model = CalibrationModel::fit(&samples, edges)?;
    model.config_hash = Some(config_hash(&run_value(cfg, &engine)));
    let dir = OutDir::create(&cfg.output.dir)?;
    let path = dir.write(&cfg.output.calibration, model.to_json()?.as_bytes())?;
    log::info!("calibration: a={:.6} b={:.6} delta={:.6} from {} rounds", model.a, model.b, model.delta, samples.len());
    Ok(CalibrationOutput { model, path })
}

/// `u_th` from the config, else from the calibration file.
pub fn resolve_u_th(cfg: &RunConfigFile) -> Result<Option<f64>> {
    if let Some(u) = cfg.engine.u_th {
        return Ok(Some(u));
    }
    let Some(path) = &cfg.calibration.path else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let model = CalibrationModel::from_json(&text)?;
    let u = match cfg.calibration.threshold {
        ThresholdChoice::Averse => model.u_th_averse,
        ThresholdChoice::Prone => model.u_th_prone,
    };
    log::info!("u_th = {u} ({:?} threshold from {})", cfg.calibration.threshold, path.display());
    Ok(Some(u))
}

fn calibration_required() -> CliError {
    CliError::Config("calibration required: UHLM needs u_th or a calibration file (--calibration)".into())
}

/// Fills the method-specific fields of `engine`. RandHLM without an explicit
/// skip probability is matched to the UHLM skip rate on the same seed.
fn prepare(engine: &mut EngineConfig, u_th: Option<f64>, pair: &BackendPair) -> Result<()> {
    match engine.method {
        Method::Uhlm => engine.u_th = Some(u_th.ok_or_else(calibration_required)?),
        Method::RandHlm if engine.rand_skip_prob.is_none() => {
            let uhlm = EngineConfig {
                method: Method::Uhlm,
                u_th: Some(u_th.ok_or_else(calibration_required)?),
                ..engine.clone()
            };
            let out = run_generation(&uhlm, pair).map_err(|f| f.error)?;
            let q = out.summary.skip_rate();
            log::info!("RandHLM seed {}: matched skip probability {q}", engine.seed);
            engine.rand_skip_prob = Some(q);
        }
        _ => {}
    }
    Ok(())
}

pub struct RunReport {
    pub rows: Vec<SummaryRow>,
    pub summary_path: PathBuf,
    pub traces: Vec<PathBuf>,
}

/// One run per seed; writes a trace per run and a summary CSV. Stops at the
/// first failing run after flushing its partial trace.
pub fn run(cfg: &RunConfigFile) -> Result<RunReport> {
    let u_th = resolve_u_th(cfg)?;
    if cfg.engine.method == Method::Uhlm && u_th.is_none() {
        return Err(calibration_required());
    }
    let dir = OutDir::create(&cfg.output.dir)?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut failure = None;
    for seed in cfg.run_seeds() {
        let mut engine = EngineConfig { seed, ..cfg.engine.clone() };
        let pair = build_backend(cfg, &engine)?;
        prepare(&mut engine, u_th, &pair)?;
        engine.validate()?;
        let header = TraceHeader::new(run_value(cfg, &engine));
        let name = format!("{}_{}_{}.ndjson", cfg.output.trace_prefix, engine.method, seed);
        let (path, mut w) = dir.file(&name)?;
        match run_generation(&engine, &pair) {
            Ok(RunOutput { records, summary }) => {
                write_trace(&mut w, &header, &records, None)?;
                rows.push(SummaryRow::new(&engine, &summary, "ok", &header.config_hash));
            }
            Err(RunFailure { records, error }) => {
                log::error!("seed {seed}: {error}");
                write_trace(&mut w, &header, &records, Some(&ErrorRecord::new(&error, records.len())))?;
                rows.push(SummaryRow::failed(&engine, &status(&error), &header.config_hash));
                failure = Some(error);
            }
        }
        traces.push(path);
        if failure.is_some() {
            break;
        }
    }
    let (summary_path, w) = dir.file(&cfg.output.summary)?;
    write_rows(w, &rows)?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(RunReport { rows, summary_path, traces }),
    }
}

fn status(e: &uhlm_core::Error) -> String {
    let kind = ErrorRecord::new(e, 0).kind;
    format!("error ({kind}): {e}")
}

#[derive(Debug, Clone)]
struct Cell {
    engine: EngineConfig,
    seed_index: usize,
    /// `(seed, channel point, u_th)` grid position, used to pair RandHLM
    /// cells with their UHLM counterpart.
    key: (usize, usize, usize),
    matched: bool,
}

fn run_cell(cfg: &RunConfigFile, engine: &EngineConfig, pair: &std::result::Result<BackendPair, String>) -> SummaryRow {
    let hash = config_hash(&run_value(cfg, engine));
    let pair = match pair {
        Ok(p) => p,
        Err(e) => return SummaryRow::failed(engine, e, &hash),
    };
    match run_generation(engine, pair) {
        Ok(out) => SummaryRow::new(engine, &out.summary, "ok", &hash),
        Err(f) => {
            log::warn!("sweep cell {} seed {} failed: {}", engine.method, engine.seed, f.error);
            SummaryRow::failed(engine, &status(&f.error), &hash)
        }
    }
}

/// Runs the cross product of the sweep axes in parallel and writes one row
/// per cell. Failed cells are recorded and the sweep carries on.
pub fn sweep(cfg: &RunConfigFile, jobs: usize) -> Result<(Vec<SummaryRow>, PathBuf)> {
    let axes = cfg.sweep.clone().ok_or_else(|| CliError::Config("sweep needs a [sweep] section".into()))?;
    axes.validate()?;
    let methods = axes.methods.clone().unwrap_or_else(|| vec![cfg.engine.method]);
    let seeds = axes.seeds.clone().unwrap_or_else(|| cfg.run_seeds());
    let rhos = axes.rho_m.clone().unwrap_or_else(|| vec![cfg.engine.channel.rho_m]);
    let powers = axes.p_dbm.clone().unwrap_or_else(|| vec![cfg.engine.channel.p_dbm]);
    let u_axis: Vec<Option<f64>> = match &axes.u_th {
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![resolve_u_th(cfg)?],
    };
    let needs_u = methods.contains(&Method::Uhlm)
        || (methods.contains(&Method::RandHlm) && cfg.engine.rand_skip_prob.is_none());
    if needs_u && u_axis.iter().any(Option::is_none) {
        return Err(calibration_required());
    }
    if methods.contains(&Method::RandHlm) && cfg.engine.rand_skip_prob.is_none() && !methods.contains(&Method::Uhlm) {
        return Err(CliError::Config(
            "RandHLM in a sweep needs rand_skip_prob or UHLM in the methods axis to match against".into(),
        ));
    }

    let mut cells = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        for (ci, (&rho_m, &p_dbm)) in rhos.iter().flat_map(|r| powers.iter().map(move |p| (r, p))).enumerate() {
            for &method in &methods {
                let mut engine = cfg.engine.clone();
                engine.seed = seed;
                engine.method = method;
                engine.channel.rho_m = rho_m;
                engine.channel.p_dbm = p_dbm;
                let matched = method == Method::RandHlm && engine.rand_skip_prob.is_none();
                if method == Method::Uhlm || matched {
                    for (ui, u) in u_axis.iter().enumerate() {
                        let engine = EngineConfig { u_th: *u, ..engine.clone() };
                        cells.push(Cell { engine, seed_index: si, key: (si, ci, ui), matched });
                    }
                } else {
                    cells.push(Cell { engine, seed_index: si, key: (si, ci, 0), matched: false });
                }
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let pairs: Vec<std::result::Result<BackendPair, String>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let engine = EngineConfig { seed, ..cfg.engine.clone() };
                build_backend(cfg, &engine).map_err(|e| format!("backend: {e}"))
            })
            .collect()
    });

    let mut rows: Vec<Option<SummaryRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| (!c.matched).then(|| run_cell(cfg, &c.engine, &pairs[c.seed_index])))
            .collect()
    });
    let uhlm_skip: BTreeMap<(usize, usize, usize), std::result::Result<f64, String>> = cells
        .iter()
        .zip(&rows)
        .filter(|(c, _)| c.engine.method == Method::Uhlm)
        .filter_map(|(c, r)| r.as_ref().map(|r| (c.key, if r.ok() { Ok(1.0 - r.tr) } else { Err(r.status.clone()) })))
        .collect();
    let matched: Vec<(usize, SummaryRow)> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .filter(|(_, c)| c.matched)
            .map(|(i, c)| {
                let mut engine = c.engine.clone();
                let row = match &uhlm_skip[&c.key] {
                    Ok(q) => {
                        engine.rand_skip_prob = Some(*q);
                        run_cell(cfg, &engine, &pairs[c.seed_index])
                    }
                    Err(why) => SummaryRow::failed(&engine, &format!("matched UHLM cell failed: {why}"), ""),
                };
                (i, row)
            })
            .collect()
    });
    for (i, row) in matched {
        rows[i] = Some(row);
    }
    let rows: Vec<SummaryRow> = rows.into_iter().map(|r| r.expect("every cell ran")).collect();
    let failed = rows.iter().filter(|r| !r.ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep cells failed", rows.len());
    }
    let dir = OutDir::create(&cfg.output.dir)?;
    let (path, w) = dir.file(&cfg.output.sweep)?;
    write_rows(w, &rows)?;
    Ok((rows, path))
}

/// Trains the configured n-gram pair and saves it into the output directory.
pub fn train_ngram(cfg: &RunConfigFile) -> Result<PathBuf> {
    let BackendConfig::Ngram(ng) = &cfg.backend else {
        return Err(CliError::Config(format!("train-ngram needs an ngram backend, not {}", cfg.backend.name())));
    };
    ng.validate()?;
    let tokens = read_corpus(&ng.corpus_path)?;
    let pair = NGramPair::train(&tokens, ng)?;
    let dir = OutDir::create(&cfg.output.dir)?;
    Ok(dir.write(&cfg.output.ngram_model, pair.to_json()?.as_bytes())?)
}

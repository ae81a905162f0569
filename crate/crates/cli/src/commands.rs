//! The four subcommands as library functions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use siamts::analysis::{run_method, run_sweep, SweepTable};
use siamts::data::{
    load_corpus, make_scenario, split_dataset, synth_generate, users_of, write_binary, ScenarioInputs,
    SessionRecording, SynthParams,
};
use siamts::gradcheck::{run_gradcheck, GradcheckOptions, GradcheckResult};
use siamts::rng::{mix, stream};

use crate::config::RunConfig;
use crate::report::{KappaReport, ReportRow};
use crate::CliError;

const SYNTH_STREAM: u64 = 0x5EED;
const SPLIT_STREAM: u64 = 0x5B17;

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::Data(format!("cannot write {}: {e}", path.display()))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn generate_corpus(params: &SynthParams, seed: u64) -> Result<Vec<SessionRecording<f32>>, CliError> {
    Ok(synth_generate(params, &mut stream(mix(seed, SYNTH_STREAM), 0))?)
}

/// The configured corpus: loaded from disk, or generated from `synth`.
pub fn corpus(cfg: &RunConfig) -> Result<Vec<SessionRecording<f32>>, CliError> {
    match &cfg.corpus {
        Some(p) => Ok(load_corpus(p, None)?),
        None => generate_corpus(&cfg.synth, cfg.seed),
    }
}

/// Splits users into the two datasets and windows every session role.
pub fn scenario_inputs(cfg: &RunConfig) -> Result<ScenarioInputs<f32>, CliError> {
    let recs = corpus(cfg)?;
    let (d1, d2) = split_dataset(&recs, cfg.d1_fraction, &mut stream(mix(cfg.seed, SPLIT_STREAM), 0))?;
    Ok(ScenarioInputs::new(
        &d1,
        &d2,
        &cfg.sessions,
        cfg.window_len,
        cfg.train_overlap,
    )?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Manifest {
    pub format: &'static str,
    pub sessions: usize,
    pub channels: usize,
    pub users: Vec<u32>,
    pub seed: u64,
    pub params: SynthParams,
}

/// Generates the synthetic corpus into `out/corpus.stsd` with a
/// `manifest.json` beside it. Returns the corpus path.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let recs = generate_corpus(&cfg.synth, cfg.seed)?;
    let mut bytes = Vec::new();
    write_binary(&recs, &mut bytes)?;
    let path = cfg.out.join("corpus.stsd");
    write_atomic(&path, &bytes)?;
    let manifest = Manifest {
        format: "stsd",
        sessions: recs.len(),
        channels: cfg.synth.channels,
        users: users_of(&recs),
        seed: cfg.seed,
        params: cfg.synth.clone(),
    };
    write_json(&cfg.out.join("manifest.json"), &manifest)?;
    log::info!("wrote {} sessions to {}", recs.len(), path.display());
    Ok(path)
}

/// Every method at every label fraction, `runs` times, with run `r`
/// seeded `seed + r`. Writes `report.json`, `curve.csv` and the resolved
/// `config.toml` to `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> Result<KappaReport, CliError> {
    cfg.validate()?;
    let scenario = cfg.scenario_id()?;
    let inputs = scenario_inputs(cfg)?;
    let mut cells = Vec::new();
    for &method in &cfg.methods {
        for &fraction in &cfg.fractions {
            for run in 0..cfg.runs {
                cells.push((method, fraction, run));
            }
        }
    }
    let rows: Vec<ReportRow> = cells
        .into_par_iter()
        .map(|(method, fraction, run)| {
            let seed = cfg.seed.wrapping_add(run as u64);
            let outcome = make_scenario(scenario, &inputs, fraction, seed)
                .and_then(|split| run_method(&cfg.pipeline, method, &split, Some(&inputs.d1), seed));
            log::info!("{} fraction {fraction} run {run}: {outcome:?}", method.name());
            match outcome {
                Ok(o) => ReportRow {
                    method,
                    fraction,
                    run,
                    seed,
                    kappa: o.kappa,
                    accuracy: Some(o.accuracy),
                    collapse: o.collapse,
                    stopped_epoch: Some(o.stopped_epoch),
                    error: None,
                },
                Err(e) => ReportRow {
                    method,
                    fraction,
                    run,
                    seed,
                    kappa: None,
                    accuracy: None,
                    collapse: None,
                    stopped_epoch: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let report = KappaReport::new(cfg.clone(), rows);
    write_json(&cfg.out.join("report.json"), &report)?;
    let mut curve = Vec::new();
    report.write_curve(&mut curve)?;
    write_atomic(&cfg.out.join("curve.csv"), &curve)?;
    write_atomic(&cfg.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: RunConfig,
    pub table: SweepTable,
}

/// Runs the config's `[sweep]` table and writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepTable, CliError> {
    cfg.validate()?;
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] table in the config".into()))?;
    let inputs = scenario_inputs(cfg)?;
    let table = run_sweep(
        spec,
        &cfg.pipeline,
        &cfg.profile,
        &inputs,
        cfg.probe_samples_per_user,
        cfg.seed,
    )?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_atomic(&cfg.out.join("sweep.csv"), &csv)?;
    let report = SweepReport {
        config: cfg.clone(),
        table,
    };
    write_json(&cfg.out.join("sweep.json"), &report)?;
    Ok(report.table)
}

/// Finite-difference check of every op; a failing op is a numeric error.
/// With `out` set the per-op results go to `out/gradcheck.json`.
pub fn cmd_gradcheck(
    seed: u64,
    opts: &GradcheckOptions,
    out: Option<&Path>,
) -> Result<Vec<GradcheckResult>, CliError> {
    let results = run_gradcheck(seed, opts)?;
    for r in &results {
        println!(
            "{:<32} {:>10.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        write_json(&dir.join("gradcheck.json"), &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{breakdown, validate_refinement_log, write_trace_csv, Generation, PipelineConfig, Refinement, RunMode, Satisfaction};
use crate::attention::AttentionStack;
use crate::backend::{BackendError, BlobWorld};
use crate::constraints::ConstraintSet;
use crate::losses::{LossBreakdown, LossError};

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: RunMode,
    pub seed: u64,
    pub satisfaction: Satisfaction,
    pub aggregate: Option<f64>,
    pub final_loss: LossBreakdown,
    /// Stage-1 satisfaction when refining.
    pub stage1: Option<Satisfaction>,
    pub stage1_faulty: Vec<String>,
    pub final_faulty: Vec<String>,
    pub detection_rounds: usize,
    pub bookkeeping_violations: Vec<String>,
    pub final_latent_hash: String,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, RunDirError> {
    r.map_err(|source| RunDirError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RunDirError> {
    io(path, fs::write(path, bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunDirError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_trace(path: &Path, g: &Generation) -> Result<(), RunDirError> {
    let file = io(path, fs::File::create(path))?;
    write_trace_csv(&g.trace.entries, BufWriter::new(file)).map_err(|source| RunDirError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_maps(dir: &Path, stack: &AttentionStack) -> Result<(), RunDirError> {
    for (i, m) in stack.maps.iter().enumerate() {
        let stem = dir.join(format!("tok_{i}_t{}", stack.timestep));
        let csv_path = stem.with_extension("csv");
        let mut text = Vec::new();
        io(&csv_path, m.write_csv(&mut text))?;
        write_bytes(&csv_path, &text)?;
        write_bytes(&stem.with_extension("pgm"), &m.to_pgm())?;
    }
    Ok(())
}

/// Files shared by both modes: config, stage-1 trace, maps of the final
/// generation at `t = T` and `t = 0`, final render.
fn write_common(
    dir: &Path,
    backend: &BlobWorld,
    config: &serde_json::Value,
    stage1: &Generation,
    last: &Generation,
) -> Result<(), RunDirError> {
    let maps = dir.join("maps");
    io(&maps, fs::create_dir_all(&maps))?;
    write_json(&dir.join("config.json"), config)?;
    write_trace(&dir.join("trace_stage1.csv"), stage1)?;
    write_maps(&maps, &last.first_attention)?;
    write_maps(&maps, &last.final_attention)?;
    write_bytes(&dir.join("render_final.pgm"), &backend.render(&last.final_latent, 4)?)?;
    Ok(())
}

/// Populates `dir` for a plain guided generation.
pub fn write_generation_dir(
    dir: &Path,
    backend: &BlobWorld,
    cs: &ConstraintSet,
    config: &serde_json::Value,
    cfg: &PipelineConfig,
    g: &Generation,
) -> Result<RunMetrics, RunDirError> {
    write_common(dir, backend, config, g, g)?;
    let truth = backend.ground_truth(&g.final_latent)?;
    let satisfaction = Satisfaction::measure(&truth, &g.final_attention, cs);
    let metrics = RunMetrics {
        mode: RunMode::Generate,
        seed: cfg.seed,
        aggregate: satisfaction.aggregate(),
        satisfaction,
        final_loss: breakdown(&g.final_attention, cs, cfg)?,
        stage1: None,
        stage1_faulty: Vec::new(),
        final_faulty: Vec::new(),
        detection_rounds: 0,
        bookkeeping_violations: Vec::new(),
        final_latent_hash: g.final_latent.checksum(),
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Populates `dir` for a refinement run, adding the stage-2 trace, every
/// detection round and the refinement log.
pub fn write_refinement_dir(
    dir: &Path,
    backend: &BlobWorld,
    cs: &ConstraintSet,
    config: &serde_json::Value,
    cfg: &PipelineConfig,
    r: &Refinement,
) -> Result<RunMetrics, RunDirError> {
    let last = r.final_generation();
    write_common(dir, backend, config, &r.stage1, last)?;
    if let Some(s2) = &r.stage2 {
        write_trace(&dir.join("trace_stage2.csv"), s2)?;
    }
    write_json(&dir.join("verifier_report.json"), &r.rounds)?;
    write_json(&dir.join("refinement_log.json"), &r.events)?;
    let truth1 = backend.ground_truth(&r.stage1.final_latent)?;
    let truth = backend.ground_truth(&last.final_latent)?;
    let satisfaction = Satisfaction::measure(&truth, &last.final_attention, cs);
    let names = |k: usize| -> Vec<String> {
        r.rounds
            .get(k)
            .map(|d| d.classification.faulty.iter().map(|f| f.entity.clone()).collect())
            .unwrap_or_default()
    };
    let metrics = RunMetrics {
        mode: RunMode::Refine,
        seed: cfg.seed,
        aggregate: satisfaction.aggregate(),
        satisfaction,
        final_loss: breakdown(&last.final_attention, cs, cfg)?,
        stage1: Some(Satisfaction::measure(&truth1, &r.stage1.final_attention, cs)),
        stage1_faulty: names(0),
        final_faulty: names(r.rounds.len() - 1),
        detection_rounds: r.rounds.len(),
        bookkeeping_violations: validate_refinement_log(&r.events),
        final_latent_hash: last.final_latent.checksum(),
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

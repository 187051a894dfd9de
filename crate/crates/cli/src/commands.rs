use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use ear_core::backend::{Backend, BlobWorld, Latent};
use ear_core::constraints::{parse_constraints, ConstraintError, ConstraintSet};
use ear_core::grad::{gradcheck_sweep, LatentSource, SweepOptions};
use ear_core::par::Execution;
use ear_core::pipeline::{
    batch_run, ear_generate, refine as run_refinement, three_entity_scene, write_generation_dir, write_refinement_dir, BatchOptions,
    GridCell, PipelineError, RunMode, ScenarioSuite,
};
use ear_core::verifier::{ExecVerifier, HttpVerifier, OracleVerifier, Verifier, VerifierError, VerifierReport, VerifyInput};

use crate::config::{read, RunConfig};
use crate::manifest::{RunManifest, RunStatus};
use crate::{CliError, EXIT_BENCH_FAILURES, EXIT_GRADCHECK_FAILED};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn finish(manifest: RunManifest, dir: &Path) -> Result<(), CliError> {
    manifest
        .finish(dir)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

/// Reads and lints a constraint file. Returns the set and the raw bytes.
fn load_constraints(path: &Path) -> Result<(ConstraintSet, String), CliError> {
    let text = read(path)?;
    let cs = parse_constraints(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let problems = cs.validate();
    if !problems.is_empty() {
        return Err(CliError::Config(format!("{}: {}", path.display(), problems.join("; "))));
    }
    Ok((cs, text))
}

fn parse_faults(specs: &[String]) -> Result<Vec<(String, f64)>, CliError> {
    specs
        .iter()
        .map(|s| {
            let (entity, amp) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--fault '{s}': expected ENTITY=AMP")))?;
            let amp: f64 = amp
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("--fault '{s}': bad amplitude")))?;
            if !(0.0..=1.0).contains(&amp) {
                return Err(CliError::Config(format!("--fault '{s}': amplitude outside [0,1]")));
            }
            Ok((entity.trim().to_string(), amp))
        })
        .collect()
}

/// Config, constraints and seeded initial noise shared by `generate` and `refine`.
struct Prepared {
    cfg: RunConfig,
    backend: BlobWorld,
    cs: ConstraintSet,
    input: String,
    z: Latent,
}

fn prepare(config: Option<&Path>, constraints: &Path, seed: Option<u64>, faults: &[String]) -> Result<Prepared, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.pipeline.seed = s;
    }
    let (cs, input) = load_constraints(constraints)?;
    let faults = parse_faults(faults)?;
    let backend = BlobWorld::new(cfg.backend.clone());
    let mut z = backend.init_latent(cfg.pipeline.seed, cs.prompt_len).map_err(runtime)?;
    for (name, amp) in &faults {
        let e = cs
            .entity(name)
            .ok_or_else(|| CliError::Config(format!("--fault names unknown entity '{name}'")))?;
        for &i in &e.indices {
            backend.set_amplitude(&mut z, i, *amp);
        }
    }
    Ok(Prepared {
        cfg,
        backend,
        cs,
        input,
        z,
    })
}

fn resolved(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(cfg).map_err(runtime)
}

pub fn generate(
    out: &Path,
    config: Option<&Path>,
    constraints: &Path,
    seed: Option<u64>,
    faults: &[String],
) -> Result<u8, CliError> {
    let p = prepare(config, constraints, seed, faults)?;
    let value = resolved(&p.cfg)?;
    let mut manifest = RunManifest::new("generate", value.clone(), Some(p.input.as_bytes()));
    manifest.seeds.push(p.cfg.pipeline.seed);
    create_dir(out)?;
    let g = ear_generate(&p.backend, &p.cs, &p.cfg.pipeline, &p.z).map_err(runtime)?;
    write_generation_dir(out, &p.backend, &p.cs, &value, &p.cfg.pipeline, &g).map_err(runtime)?;
    manifest.runs.push(RunStatus {
        seed: p.cfg.pipeline.seed,
        exit_code: 0,
    });
    finish(manifest, out)?;
    Ok(0)
}

/// An external verifier that falls back to the oracle when it fails.
struct Fallback<V> {
    primary: V,
}

impl<V: Verifier> Verifier for Fallback<V> {
    fn verify(&self, input: &VerifyInput<'_>) -> Result<VerifierReport, VerifierError> {
        match self.primary.verify(input).and_then(|r| r.validate(input.cs).map(|_| r)) {
            Ok(r) => Ok(r),
            Err(e) => {
                log::warn!("external verifier failed ({e}); using the oracle");
                OracleVerifier.verify(input)
            }
        }
    }
}

/// Parses `oracle`, `exec:<command>`, `http:<url>` or a bare `http(s)://` URL.
pub fn make_verifier(spec: &str, fallback: bool) -> Result<Box<dyn Verifier>, CliError> {
    fn wrap<V: Verifier + 'static>(v: V, fallback: bool) -> Box<dyn Verifier> {
        if fallback {
            Box::new(Fallback { primary: v })
        } else {
            Box::new(v)
        }
    }
    if spec == "oracle" {
        return Ok(Box::new(OracleVerifier));
    }
    if let Some(cmd) = spec.strip_prefix("exec:") {
        if cmd.trim().is_empty() {
            return Err(CliError::Config("--verifier exec: needs a command".into()));
        }
        return Ok(wrap(ExecVerifier::from_command(cmd), fallback));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(wrap(HttpVerifier::new(spec), fallback));
    }
    if let Some(url) = spec.strip_prefix("http:") {
        return Ok(wrap(HttpVerifier::new(url), fallback));
    }
    Err(CliError::Config(format!(
        "--verifier '{spec}': expected oracle, exec:<command> or http:<url>"
    )))
}

pub fn refine(
    out: &Path,
    config: Option<&Path>,
    constraints: &Path,
    seed: Option<u64>,
    faults: &[String],
    verifier: &str,
    fallback: bool,
) -> Result<u8, CliError> {
    let verifier = make_verifier(verifier, fallback)?;
    let p = prepare(config, constraints, seed, faults)?;
    let value = resolved(&p.cfg)?;
    let seed = p.cfg.pipeline.seed;
    let mut manifest = RunManifest::new("refine", value.clone(), Some(p.input.as_bytes()));
    manifest.seeds.push(seed);
    create_dir(out)?;
    match run_refinement(&p.backend, &p.cs, verifier.as_ref(), &p.cfg.pipeline, &p.z) {
        Ok(r) => {
            write_refinement_dir(out, &p.backend, &p.cs, &value, &p.cfg.pipeline, &r).map_err(runtime)?;
            manifest.runs.push(RunStatus { seed, exit_code: 0 });
            finish(manifest, out)?;
            Ok(0)
        }
        Err(PipelineError::Verifier { source, stage1 }) => {
            write_generation_dir(out, &p.backend, &p.cs, &value, &p.cfg.pipeline, &stage1).map_err(runtime)?;
            let err = CliError::Verifier(source.to_string());
            manifest.runs.push(RunStatus {
                seed,
                exit_code: err.code().into(),
            });
            finish(manifest, out)?;
            Err(err)
        }
        Err(e) => Err(runtime(e)),
    }
}

pub struct BenchArgs<'a> {
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub suite: &'a str,
    pub ablate: &'a [String],
    pub mode: RunMode,
    pub jobs: Option<usize>,
    pub execution: Execution,
    pub verifier: &'a str,
    pub fallback_oracle: bool,
}

/// `builtin:<spatial|mixed|fault>:<n>[:<base seed>[:<amplitude>]]`.
fn builtin_suite(spec: &str) -> Result<ScenarioSuite, CliError> {
    let bad = || CliError::Config(format!("--suite builtin:{spec}: expected <spatial|mixed|fault>:<n>[:<base>[:<amp>]]"));
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() < 2 || parts.len() > 4 {
        return Err(bad());
    }
    let n: usize = parts[1].parse().map_err(|_| bad())?;
    let base: u64 = match parts.get(2) {
        Some(s) => s.parse().map_err(|_| bad())?,
        None => 0,
    };
    let amp: f64 = match parts.get(3) {
        Some(s) => s.parse().map_err(|_| bad())?,
        None => 0.003,
    };
    match (parts[0], parts.len()) {
        ("spatial", 2 | 3) => Ok(ScenarioSuite::spatial(n, base)),
        ("mixed", 2 | 3) => Ok(ScenarioSuite::mixed(n, base)),
        ("fault", _) => Ok(ScenarioSuite::seeded_fault(n, base, amp)),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct CellRecords<'a> {
    label: &'a str,
    records: &'a [ear_core::pipeline::RunRecord],
}

pub fn bench(a: BenchArgs<'_>) -> Result<u8, CliError> {
    let cfg = RunConfig::load(a.config)?;
    let (suite, input) = match a.suite.strip_prefix("builtin:") {
        Some(spec) => (builtin_suite(spec)?, None),
        None => {
            let path = PathBuf::from(a.suite);
            let text = read(&path)?;
            let suite = ScenarioSuite::load(&path).map_err(|e| CliError::Config(e.to_string()))?;
            (suite, Some(text))
        }
    };
    let mut grid = vec![GridCell {
        label: "full".into(),
        config: cfg.pipeline.clone(),
    }];
    for name in a.ablate {
        let mut c = cfg.pipeline.clone();
        if !c.loss.weights.ablate(name) {
            return Err(CliError::Config(format!(
                "--ablate '{name}': expected mixing, missing, attr, spatial, correction or preservation"
            )));
        }
        grid.push(GridCell {
            label: format!("-{name}"),
            config: c,
        });
    }
    let verifier = make_verifier(a.verifier, a.fallback_oracle)?;
    let backend = BlobWorld::new(cfg.backend.clone());
    let value = resolved(&cfg)?;
    let mut manifest = RunManifest::new("bench", value.clone(), input.as_deref().map(str::as_bytes));
    manifest.seeds = suite.scenarios.iter().map(|s| s.seed).collect();
    create_dir(a.out)?;
    let output = batch_run(
        &backend,
        &suite,
        &grid,
        verifier.as_ref(),
        BatchOptions {
            mode: a.mode,
            execution: a.execution,
            jobs: a.jobs,
        },
    );

    let csv_path = a.out.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    if output.rows.is_empty() {
        w.write_record(METRICS_HEADER).map_err(runtime)?;
    }
    for row in &output.rows {
        w.serialize(row).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    write_json(&a.out.join("metrics.json"), &output.rows)?;
    let cells: Vec<CellRecords> = output
        .rows
        .iter()
        .zip(&output.records)
        .map(|(row, records)| CellRecords {
            label: &row.label,
            records,
        })
        .collect();
    write_json(&a.out.join("runs.json"), &cells)?;

    let mut failures = 0;
    for (row, records) in output.rows.iter().zip(&output.records) {
        for r in records {
            let code = match &r.error {
                Some(e) => {
                    failures += 1;
                    log::error!("[{}] {} (seed {}): {e}", row.label, r.scenario, r.seed);
                    3
                }
                None => 0,
            };
            manifest.runs.push(RunStatus {
                seed: r.seed,
                exit_code: code,
            });
        }
        println!(
            "{:<16} runs {:>4}  failures {:>3}  aggregate {}",
            row.label,
            row.runs,
            row.failures,
            row.aggregate.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    finish(manifest, a.out)?;
    if failures > 0 {
        eprintln!("{failures} scenario run(s) failed");
        return Ok(EXIT_BENCH_FAILURES);
    }
    Ok(0)
}

const METRICS_HEADER: [&str; 12] = [
    "label",
    "runs",
    "failures",
    "presence_rate",
    "attribute_rate",
    "spatial_rate",
    "aggregate",
    "stage1_aggregate",
    "fault_fixed_rate",
    "preservation_rate",
    "bookkeeping_violations",
    "expectation_misses",
];

pub struct GradcheckArgs<'a> {
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub constraints: Option<&'a Path>,
    pub seeds: usize,
    pub tol: f64,
    pub h: f64,
    pub latents: LatentSource,
    pub jobs: Option<usize>,
}

pub fn gradcheck(a: GradcheckArgs<'_>) -> Result<u8, CliError> {
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(CliError::Config("--h must be positive".into()));
    }
    if a.tol.is_nan() || a.tol < 0.0 {
        return Err(CliError::Config("--tol must be non-negative".into()));
    }
    let cfg = RunConfig::load(a.config)?;
    let (cs, input) = match a.constraints {
        Some(p) => {
            let (cs, text) = load_constraints(p)?;
            (cs, Some(text))
        }
        None => (three_entity_scene(0), None),
    };
    let backend = BlobWorld::new(cfg.backend.clone());
    let seeds: Vec<u64> = (0..a.seeds as u64).collect();
    let mut manifest = RunManifest::new("gradcheck", resolved(&cfg)?, input.as_deref().map(str::as_bytes));
    manifest.seeds = seeds.clone();
    create_dir(a.out)?;
    let report = gradcheck_sweep(
        &backend,
        &cs,
        &cfg.pipeline.loss,
        &seeds,
        SweepOptions {
            h: a.h,
            tol: a.tol,
            latents: a.latents,
            execution: Execution::Parallel,
            jobs: a.jobs,
        },
    )
    .map_err(runtime)?;
    write_json(&a.out.join("gradcheck.json"), &report)?;
    for l in &report.losses {
        println!(
            "{:<32} {:>3}/{} (need {})  worst rel error {:.3e}  {}",
            l.loss,
            l.passed,
            report.seeds,
            report.required,
            l.worst_rel_error,
            if l.pass { "pass" } else { "FAIL" }
        );
    }
    let code = if report.pass { 0 } else { EXIT_GRADCHECK_FAILED };
    manifest.runs = seeds
        .iter()
        .map(|&seed| RunStatus {
            seed,
            exit_code: report.cases.iter().any(|c| c.seed == seed && !c.pass).into(),
        })
        .collect();
    finish(manifest, a.out)?;
    Ok(code)
}

pub fn validate(file: &Path) -> Result<u8, CliError> {
    let text = read(file)?;
    match parse_constraints(&text) {
        Ok(cs) => {
            let problems = cs.validate();
            if problems.is_empty() {
                println!(
                    "{}: ok ({} entities, {} attributes, {} relations)",
                    file.display(),
                    cs.entities.len(),
                    cs.attributes.len(),
                    cs.relations.len()
                );
                Ok(0)
            } else {
                for p in &problems {
                    eprintln!("{}: {p}", file.display());
                }
                Err(CliError::Config(format!("{}: {} problem(s)", file.display(), problems.len())))
            }
        }
        Err(ConstraintError::Invalid(problems)) => {
            for p in &problems {
                eprintln!("{}: {p}", file.display());
            }
            Err(CliError::Config(format!("{}: {} problem(s)", file.display(), problems.len())))
        }
        Err(e) => Err(CliError::Config(format!("{}: {e}", file.display()))),
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ear_generate, entity_iou, refine, validate_refinement_log, PipelineConfig, PipelineError};
use crate::attention::{self, AttentionStack};
use crate::backend::{Backend, BlobWorld, Latent, SceneTruth};
use crate::constraints::{direction, parse_constraints, AttributeBinding, ConstraintSet, Entity, Relation, RelationKind};
use crate::par::{self, Execution};
use crate::verifier::{oracle_verify, Verifier};

/// An entity counts as present when its mean blob amplitude reaches this.
pub const PRESENCE_THRESHOLD: f64 = 0.5;
/// Entities whose final maps overlap another entity's by this much count as
/// merged into it, hence not present.
pub const MIXED_IOU_THRESHOLD: f64 = 0.15;
/// An attribute counts as bound when its final map overlaps the entity's by this much.
pub const ATTRIBUTE_IOU_THRESHOLD: f64 = 0.2;
/// Originally proper entities must keep this share of their stage-1 overlap with the reference.
pub const PRESERVATION_RATIO: f64 = 0.8;

/// Forces an entity's amplitude in the initial noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub entity: String,
    pub amplitude: f64,
}

/// A satisfaction check a suite entry expects to hold on the final output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Presence,
    Attribute,
    Spatial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub cs: ConstraintSet,
    pub seed: u64,
    pub fault: Option<Fault>,
    pub expect: Vec<Check>,
}

impl Scenario {
    /// Seeded initial noise with the fault applied.
    pub fn initial_latent(&self, backend: &BlobWorld) -> Result<Latent, PipelineError> {
        let mut z = backend.init_latent(self.seed, self.cs.prompt_len)?;
        if let Some(f) = &self.fault {
            let e = self
                .cs
                .entity(&f.entity)
                .ok_or_else(|| PipelineError::Config(format!("fault names unknown entity '{}'", f.entity)))?;
            for &i in &e.indices {
                backend.set_amplitude(&mut z, i, f.amplitude);
            }
        }
        Ok(z)
    }
}

/// Where a suite entry's constraints come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConstraintSource {
    File(PathBuf),
    Inline(serde_json::Value),
}

/// One element of a suite file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    #[serde(default)]
    pub name: Option<String>,
    pub constraints: ConstraintSource,
    pub seed: u64,
    #[serde(default)]
    pub fault: Option<Fault>,
    #[serde(default)]
    pub expect: Vec<Check>,
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioSuite {
    pub scenarios: Vec<Scenario>,
}

const NOUNS: [(&str, &str); 6] = [
    ("cat", "dog"),
    ("cube", "sphere"),
    ("car", "tree"),
    ("bird", "clock"),
    ("cup", "book"),
    ("horse", "house"),
];
const THIRD: [&str; 6] = ["bench", "lamp", "boat", "apple", "chair", "kite"];
const COLORS: [(&str, &str); 4] = [("red", "blue"), ("green", "yellow"), ("black", "white"), ("purple", "orange")];
const AXES: [RelationKind; 4] = [RelationKind::Left, RelationKind::Right, RelationKind::Above, RelationKind::Below];

fn relation_words(kind: &RelationKind) -> &'static [&'static str] {
    match kind {
        RelationKind::Left => &["to", "the", "left", "of"],
        RelationKind::Right => &["to", "the", "right", "of"],
        RelationKind::Above => &["above"],
        _ => &["below"],
    }
}

/// Builds a constraint set from a word list, locating each surface by its
/// first occurrence.
fn scene(
    words: &[&str],
    entities: &[&str],
    attributes: &[(&str, &str)],
    relations: &[(&str, RelationKind, &str)],
) -> ConstraintSet {
    let at = |w: &str| words.iter().position(|x| *x == w).expect("word in prompt");
    let cs = ConstraintSet {
        prompt: words.join(" "),
        prompt_len: words.len(),
        entities: entities.iter().map(|e| Entity::new(*e, vec![at(e)])).collect(),
        attributes: attributes
            .iter()
            .map(|(e, a)| AttributeBinding {
                entity: e.to_string(),
                surface: a.to_string(),
                indices: vec![at(a)],
            })
            .collect(),
        relations: relations
            .iter()
            .map(|(s, k, o)| Relation {
                subject: s.to_string(),
                kind: k.clone(),
                object: o.to_string(),
            })
            .collect(),
    };
    debug_assert!(cs.validate().is_empty());
    cs
}

impl ScenarioSuite {
    /// Two entities and one axis relation per scenario.
    pub fn spatial(n: usize, base_seed: u64) -> Self {
        let scenarios = (0..n)
            .map(|i| {
                let (a, b) = NOUNS[(i / AXES.len()) % NOUNS.len()];
                let kind = AXES[i % AXES.len()].clone();
                let mut words = vec!["a", a];
                words.extend_from_slice(relation_words(&kind));
                words.extend(["a", b]);
                Scenario {
                    name: format!("spatial-{i}"),
                    cs: scene(&words, &[a, b], &[], &[(a, kind, b)]),
                    seed: base_seed + i as u64,
                    fault: None,
                    expect: vec![Check::Spatial],
                }
            })
            .collect();
        Self { scenarios }
    }

    /// Entities, attributes and one relation; alternates a two-entity and a
    /// three-entity template.
    pub fn mixed(n: usize, base_seed: u64) -> Self {
        let scenarios = (0..n)
            .map(|i| Scenario {
                name: format!("mixed-{i}"),
                cs: mixed_scene(i, i % 2 == 1),
                seed: base_seed + i as u64,
                fault: None,
                expect: Vec::new(),
            })
            .collect();
        Self { scenarios }
    }

    /// Three-entity scenes with one entity's amplitude forced to `amplitude`
    /// in the initial noise. The faulted entity rotates through the scene.
    pub fn seeded_fault(n: usize, base_seed: u64, amplitude: f64) -> Self {
        let scenarios = (0..n)
            .map(|i| {
                let cs = mixed_scene(i, true);
                let entity = cs.entities[i % cs.entities.len()].surface.clone();
                Scenario {
                    name: format!("fault-{i}"),
                    cs,
                    seed: base_seed + i as u64,
                    fault: Some(Fault { entity, amplitude }),
                    expect: vec![Check::Presence],
                }
            })
            .collect();
        Self { scenarios }
    }

    /// Reads a suite file; constraint paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, SuiteError> {
        let text = std::fs::read_to_string(path).map_err(|source| SuiteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries: Vec<SuiteEntry> = serde_json::from_str(&text).map_err(|e| SuiteError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_entries(entries, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_entries(entries: Vec<SuiteEntry>, base: &Path) -> Result<Self, SuiteError> {
        let mut scenarios = Vec::with_capacity(entries.len());
        for (k, entry) in entries.into_iter().enumerate() {
            let (cs, origin) = match entry.constraints {
                ConstraintSource::File(p) => {
                    let full = base.join(&p);
                    let text = std::fs::read_to_string(&full).map_err(|source| SuiteError::Io {
                        path: full.clone(),
                        source,
                    })?;
                    let cs = parse_constraints(&text).map_err(|e| SuiteError::Parse {
                        path: full.clone(),
                        message: e.to_string(),
                    })?;
                    (cs, p.display().to_string())
                }
                ConstraintSource::Inline(v) => {
                    let cs = ConstraintSet::from_value(v).map_err(|e| SuiteError::Parse {
                        path: base.join(format!("<entry {k}>")),
                        message: e.to_string(),
                    })?;
                    (cs, format!("entry-{k}"))
                }
            };
            if let Some(f) = &entry.fault {
                if cs.entity(&f.entity).is_none() {
                    return Err(SuiteError::Parse {
                        path: base.join(format!("<entry {k}>")),
                        message: format!("fault names unknown entity '{}'", f.entity),
                    });
                }
            }
            scenarios.push(Scenario {
                name: entry.name.unwrap_or(origin),
                cs,
                seed: entry.seed,
                fault: entry.fault,
                expect: entry.expect,
            });
        }
        Ok(Self { scenarios })
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

/// The `i`-th generated scene with three entities, two attributes and one relation.
pub fn three_entity_scene(i: usize) -> ConstraintSet {
    mixed_scene(i, true)
}

fn mixed_scene(i: usize, three: bool) -> ConstraintSet {
    let (a, b) = NOUNS[i % NOUNS.len()];
    let (ca, cb) = COLORS[(i / 2) % COLORS.len()];
    let kind = AXES[(i / 3) % AXES.len()].clone();
    let mut words = vec!["a", ca, a];
    words.extend_from_slice(relation_words(&kind));
    words.extend(["a", cb, b]);
    if three {
        let c = THIRD[i % THIRD.len()];
        words.extend(["and", "a", c]);
        scene(&words, &[a, b, c], &[(a, ca), (b, cb)], &[(a, kind, b)])
    } else {
        scene(&words, &[a, b], &[(a, ca), (b, cb)], &[(a, kind, b)])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub met: usize,
    pub total: usize,
}

impl Tally {
    fn push(&mut self, ok: bool) {
        self.met += ok as usize;
        self.total += 1;
    }

    fn add(&mut self, other: Tally) {
        self.met += other.met;
        self.total += other.total;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.met as f64 / self.total as f64)
    }
}

/// Satisfied-out-of-checked counts for the three scene checks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Satisfaction {
    pub presence: Tally,
    pub attribute: Tally,
    pub spatial: Tally,
}

impl Satisfaction {
    /// Presence from the exact amplitudes and entity separation; attribute overlap and center
    /// ordering from the final maps.
    pub fn measure(truth: &SceneTruth, stack: &AttentionStack, cs: &ConstraintSet) -> Self {
        let mut out = Self::default();
        let maps: Vec<_> = cs.entities.iter().map(|e| stack.aggregate(&e.indices)).collect();
        for (k, e) in cs.entities.iter().enumerate() {
            let amp = e.indices.iter().filter_map(|&i| truth.tokens.get(i)).map(|b| b.amplitude).sum::<f64>()
                / e.indices.len().max(1) as f64;
            let merged = maps
                .iter()
                .enumerate()
                .any(|(j, m)| j != k && attention::iou_slices(maps[k].values(), m.values()) >= MIXED_IOU_THRESHOLD);
            out.presence.push(amp >= PRESENCE_THRESHOLD && !merged);
        }
        for a in &cs.attributes {
            let Some(e) = cs.entity(&a.entity) else { continue };
            let iou = entity_iou_pair(stack, &e.indices, &a.indices);
            out.attribute.push(iou >= ATTRIBUTE_IOU_THRESHOLD);
        }
        for (i, rel, j) in cs.axis_relations() {
            let axis = rel.kind.axis().expect("axis relation");
            let ei = attention::center_of_mass(&stack.aggregate(&cs.entities[i].indices), axis);
            let ej = attention::center_of_mass(&stack.aggregate(&cs.entities[j].indices), axis);
            let ok = match (ei, ej) {
                (Ok(ei), Ok(ej)) => direction(&rel.kind) as f64 * (ej - ei) < 0.0,
                _ => false,
            };
            out.spatial.push(ok);
        }
        out
    }

    fn add(&mut self, other: &Satisfaction) {
        self.presence.add(other.presence);
        self.attribute.add(other.attribute);
        self.spatial.add(other.spatial);
    }

    /// Mean of the rates that have at least one check.
    pub fn aggregate(&self) -> Option<f64> {
        let rates: Vec<f64> = [self.presence, self.attribute, self.spatial]
            .iter()
            .filter_map(Tally::rate)
            .collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    fn holds(&self, check: Check) -> bool {
        let t = match check {
            Check::Presence => self.presence,
            Check::Attribute => self.attribute,
            Check::Spatial => self.spatial,
        };
        t.met == t.total
    }
}

fn entity_iou_pair(stack: &AttentionStack, a: &[usize], b: &[usize]) -> f64 {
    attention::iou_slices(stack.aggregate(a).values(), stack.aggregate(b).values())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    #[default]
    Generate,
    Refine,
}

/// How one originally proper entity held up through refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreservationCheck {
    pub entity: String,
    /// `iou(stage-1 final map, reference)`.
    pub stage1_iou: f64,
    /// `iou(final map, reference)`.
    pub final_iou: f64,
}

impl PreservationCheck {
    pub fn retained(&self) -> bool {
        self.final_iou >= PRESERVATION_RATIO * self.stage1_iou
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub seed: u64,
    pub error: Option<String>,
    pub satisfaction: Satisfaction,
    /// Stage-1 satisfaction when refining.
    pub stage1: Option<Satisfaction>,
    /// Oracle missing score of the faulted entity: after stage 1, and final.
    pub fault_missing: Option<(f64, f64)>,
    pub stage1_faulty: Vec<String>,
    pub preservation: Vec<PreservationCheck>,
    pub bookkeeping_violations: Vec<String>,
    pub expectation_misses: Vec<Check>,
    pub final_latent_hash: String,
}

impl RunRecord {
    fn failed(scenario: &Scenario, error: String) -> Self {
        Self {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            error: Some(error),
            satisfaction: Satisfaction::default(),
            stage1: None,
            fault_missing: None,
            stage1_faulty: Vec::new(),
            preservation: Vec::new(),
            bookkeeping_violations: Vec::new(),
            expectation_misses: Vec::new(),
            final_latent_hash: String::new(),
        }
    }

    /// Whether every originally proper entity kept its overlap with the reference.
    pub fn preserved(&self) -> Option<bool> {
        (!self.preservation.is_empty()).then(|| self.preservation.iter().all(PreservationCheck::retained))
    }
}

fn missing_score(truth: &SceneTruth, stack: &AttentionStack, cs: &ConstraintSet, entity: &str) -> Option<f64> {
    oracle_verify(truth, stack, cs).ok()?.scores.get(entity).map(|s| s.missing)
}

/// Runs one scenario; failures are recorded rather than returned.
pub fn run_scenario(
    backend: &BlobWorld,
    scenario: &Scenario,
    cfg: &PipelineConfig,
    mode: RunMode,
    verifier: &dyn Verifier,
) -> RunRecord {
    match try_run(backend, scenario, cfg, mode, verifier) {
        Ok(r) => r,
        Err(e) => RunRecord::failed(scenario, e.to_string()),
    }
}

fn try_run(
    backend: &BlobWorld,
    scenario: &Scenario,
    cfg: &PipelineConfig,
    mode: RunMode,
    verifier: &dyn Verifier,
) -> Result<RunRecord, PipelineError> {
    let cfg = PipelineConfig {
        seed: scenario.seed,
        ..cfg.clone()
    };
    let cs = &scenario.cs;
    let z = scenario.initial_latent(backend)?;
    let fault = scenario.fault.as_ref().map(|f| f.entity.as_str());
    let mut record = RunRecord::failed(scenario, String::new());
    record.error = None;
    match mode {
        RunMode::Generate => {
            let g = ear_generate(backend, cs, &cfg, &z)?;
            let truth = backend.ground_truth(&g.final_latent)?;
            record.satisfaction = Satisfaction::measure(&truth, &g.final_attention, cs);
            if let Some(f) = fault {
                let m = missing_score(&truth, &g.final_attention, cs, f).unwrap_or(1.0);
                record.fault_missing = Some((m, m));
            }
            record.final_latent_hash = g.final_latent.checksum();
        }
        RunMode::Refine => {
            let r = refine(backend, cs, verifier, &cfg, &z)?;
            let s1 = &r.stage1;
            let fin = r.final_generation();
            let truth1 = backend.ground_truth(&s1.final_latent)?;
            let truth = backend.ground_truth(&fin.final_latent)?;
            record.stage1 = Some(Satisfaction::measure(&truth1, &s1.final_attention, cs));
            record.satisfaction = Satisfaction::measure(&truth, &fin.final_attention, cs);
            if let Some(f) = fault {
                let before = missing_score(&truth1, &s1.final_attention, cs, f).unwrap_or(1.0);
                let after = missing_score(&truth, &fin.final_attention, cs, f).unwrap_or(1.0);
                record.fault_missing = Some((before, after));
            }
            let first = &r.rounds[0].classification;
            record.stage1_faulty = first.faulty.iter().map(|f| f.entity.clone()).collect();
            for name in &first.proper {
                let Some(e) = cs.entity(name) else { continue };
                record.preservation.push(PreservationCheck {
                    entity: name.clone(),
                    stage1_iou: entity_iou(&s1.final_attention, &s1.first_attention, &e.indices),
                    final_iou: entity_iou(&fin.final_attention, &s1.first_attention, &e.indices),
                });
            }
            record.bookkeeping_violations = validate_refinement_log(&r.events);
            record.final_latent_hash = fin.final_latent.checksum();
        }
    }
    record.expectation_misses = scenario
        .expect
        .iter()
        .copied()
        .filter(|c| !record.satisfaction.holds(*c))
        .collect();
    Ok(record)
}

/// One configuration in a batch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchOptions {
    pub mode: RunMode,
    pub execution: Execution,
    /// Worker count; `None` uses every core.
    pub jobs: Option<usize>,
}

/// Pooled rates of one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    pub runs: usize,
    pub failures: usize,
    pub presence_rate: Option<f64>,
    pub attribute_rate: Option<f64>,
    pub spatial_rate: Option<f64>,
    pub aggregate: Option<f64>,
    pub stage1_aggregate: Option<f64>,
    /// Share of faulted runs whose faulted entity ends below λ.
    pub fault_fixed_rate: Option<f64>,
    /// Share of refined runs where every originally proper entity kept its overlap.
    pub preservation_rate: Option<f64>,
    pub bookkeeping_violations: usize,
    pub expectation_misses: usize,
}

impl MetricsRow {
    pub fn from_records(label: &str, records: &[RunRecord], lambda: f64) -> Self {
        let ok: Vec<&RunRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let mut fin = Satisfaction::default();
        let mut s1 = Satisfaction::default();
        let mut any_s1 = false;
        for r in &ok {
            fin.add(&r.satisfaction);
            if let Some(s) = &r.stage1 {
                s1.add(s);
                any_s1 = true;
            }
        }
        let share = |flags: Vec<bool>| {
            (!flags.is_empty()).then(|| flags.iter().filter(|b| **b).count() as f64 / flags.len() as f64)
        };
        Self {
            label: label.to_string(),
            runs: records.len(),
            failures: records.len() - ok.len(),
            presence_rate: fin.presence.rate(),
            attribute_rate: fin.attribute.rate(),
            spatial_rate: fin.spatial.rate(),
            aggregate: fin.aggregate(),
            stage1_aggregate: if any_s1 { s1.aggregate() } else { None },
            fault_fixed_rate: share(ok.iter().filter_map(|r| r.fault_missing).map(|(_, m)| m < lambda).collect()),
            preservation_rate: share(ok.iter().filter_map(|r| r.preserved()).collect()),
            bookkeeping_violations: ok.iter().map(|r| r.bookkeeping_violations.len()).sum(),
            expectation_misses: ok.iter().map(|r| r.expectation_misses.len()).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchOutput {
    pub rows: Vec<MetricsRow>,
    /// Per-cell run records, sorted by seed then scenario name.
    pub records: Vec<Vec<RunRecord>>,
}

/// Runs every scenario under every grid cell. An empty suite gives an empty table.
pub fn batch_run(
    backend: &BlobWorld,
    suite: &ScenarioSuite,
    grid: &[GridCell],
    verifier: &dyn Verifier,
    opts: BatchOptions,
) -> BatchOutput {
    let mut out = BatchOutput::default();
    if suite.is_empty() {
        return out;
    }
    for cell in grid {
        let mut records = par::map(opts.execution, opts.jobs, &suite.scenarios, |s| {
            run_scenario(backend, s, &cell.config, opts.mode, verifier)
        });
        records.sort_by(|a, b| a.seed.cmp(&b.seed).then_with(|| a.scenario.cmp(&b.scenario)));
        out.rows.push(MetricsRow::from_records(&cell.label, &records, cell.config.lambda));
        out.records.push(records);
    }
    out
}

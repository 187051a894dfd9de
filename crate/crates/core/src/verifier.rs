//! Fine-grained feedback: per-entity mistake severities for the missing,
//! attribute and spatial failure modes, and the faulty/proper split that
//! drives refinement.
//!
//! Scores are mistake severities in [0,1]; 1 means fully wrong.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionStack};
use crate::backend::SceneTruth;
use crate::constraints::{direction, ConstraintSet};
use crate::losses::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EntityScores {
    pub missing: f64,
    pub attribute: f64,
    pub spatial: f64,
}

impl EntityScores {
    pub fn max(&self) -> f64 {
        self.missing.max(self.attribute).max(self.spatial)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifierReport {
    pub scores: BTreeMap<String, EntityScores>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    Missing,
    Attribute,
    Spatial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultyEntity {
    pub entity: String,
    pub modes: Vec<FailureMode>,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultClassification {
    /// Worst first.
    pub faulty: Vec<FaultyEntity>,
    pub proper: Vec<String>,
}

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("score out of range for '{entity}' ({mode}): {value}")]
    OutOfRange {
        entity: String,
        mode: &'static str,
        value: f64,
    },
    #[error("response has no scores for entity '{0}'")]
    MissingEntity(String),
    #[error("scene truth has no token {0}")]
    MissingTruth(usize),
}

impl VerifierReport {
    /// Checks that every entity is scored and all scores lie in [0,1].
    pub fn validate(&self, cs: &ConstraintSet) -> Result<(), VerifierError> {
        for e in &cs.entities {
            let s = self
                .scores
                .get(&e.surface)
                .ok_or_else(|| VerifierError::MissingEntity(e.surface.clone()))?;
            for (mode, value) in [("missing", s.missing), ("attribute", s.attribute), ("spatial", s.spatial)] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(VerifierError::OutOfRange {
                        entity: e.surface.clone(),
                        mode,
                        value,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Oracle scores from the exact scene and the final attention.
pub fn oracle_verify(
    truth: &SceneTruth,
    stack: &AttentionStack,
    cs: &ConstraintSet,
) -> Result<VerifierReport, VerifierError> {
    let mut report = VerifierReport {
        notes: "oracle".into(),
        ..Default::default()
    };
    let entity_maps: Vec<_> = cs.entities.iter().map(|e| stack.aggregate(&e.indices)).collect();
    for (k, e) in cs.entities.iter().enumerate() {
        let mut amp = 0.0;
        for &i in &e.indices {
            amp += truth.tokens.get(i).ok_or(VerifierError::MissingTruth(i))?.amplitude;
        }
        amp /= e.indices.len().max(1) as f64;
        let missing = (1.0 - amp).clamp(0.0, 1.0);

        let attrs: Vec<f64> = cs
            .attributes
            .iter()
            .filter(|a| a.entity == e.surface)
            .map(|a| {
                let m = stack.aggregate(&a.indices);
                1.0 - 2.0 * attention::iou_slices(entity_maps[k].values(), m.values())
            })
            .collect();
        let attribute = mean(&attrs).clamp(0.0, 1.0);

        let mut terms = Vec::new();
        for (i, rel, j) in cs.axis_relations() {
            if i != k && j != k {
                continue;
            }
            let axis = rel.kind.axis().expect("axis relation");
            let (Ok(ei), Ok(ej)) = (
                attention::center_of_mass(&entity_maps[i], axis),
                attention::center_of_mass(&entity_maps[j], axis),
            ) else {
                terms.push(1.0);
                continue;
            };
            let term = sigmoid(direction(&rel.kind) as f64 * (ej - ei));
            terms.push(2.0 * (term - 0.5).max(0.0));
        }
        let spatial = mean(&terms).clamp(0.0, 1.0);
        report.scores.insert(
            e.surface.clone(),
            EntityScores {
                missing,
                attribute,
                spatial,
            },
        );
    }
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Faulty iff any score ≥ λ. Faulty entities are ordered by descending
/// worst score, ties by ascending head token index.
pub fn classify(report: &VerifierReport, cs: &ConstraintSet, lambda: f64) -> FaultClassification {
    let mut out = FaultClassification::default();
    for e in &cs.entities {
        let s = report.scores.get(&e.surface).copied().unwrap_or_default();
        let mut modes = Vec::new();
        if s.missing >= lambda {
            modes.push(FailureMode::Missing);
        }
        if s.attribute >= lambda {
            modes.push(FailureMode::Attribute);
        }
        if s.spatial >= lambda {
            modes.push(FailureMode::Spatial);
        }
        if modes.is_empty() {
            out.proper.push(e.surface.clone());
        } else {
            out.faulty.push(FaultyEntity {
                entity: e.surface.clone(),
                modes,
                severity: s.max(),
            });
        }
    }
    let head = |name: &str| cs.entity(name).map_or(usize::MAX, |e| e.head());
    out.faulty.sort_by(|a, b| {
        b.severity
            .total_cmp(&a.severity)
            .then_with(|| head(&a.entity).cmp(&head(&b.entity)))
    });
    out
}

/// Request sent to an external verifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub prompt: String,
    pub render_pgm_b64: String,
    pub entities: Vec<RequestEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEntity {
    pub surface: String,
    pub attributes: Vec<String>,
    pub relations: Vec<[String; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub scores: BTreeMap<String, EntityScores>,
}

impl VerifyRequest {
    pub fn new(cs: &ConstraintSet, render_pgm: &[u8]) -> Self {
        let entities = cs
            .entities
            .iter()
            .map(|e| RequestEntity {
                surface: e.surface.clone(),
                attributes: cs
                    .attributes
                    .iter()
                    .filter(|a| a.entity == e.surface)
                    .map(|a| a.surface.clone())
                    .collect(),
                relations: cs
                    .relations
                    .iter()
                    .filter(|r| r.subject == e.surface || r.object == e.surface)
                    .map(|r| [r.subject.clone(), r.kind.name().to_string(), r.object.clone()])
                    .collect(),
            })
            .collect();
        Self {
            prompt: cs.prompt.clone(),
            render_pgm_b64: base64::engine::general_purpose::STANDARD.encode(render_pgm),
            entities,
        }
    }
}

/// Parses a response body and checks it against the constraint set.
pub fn parse_response(body: &str, cs: &ConstraintSet) -> Result<VerifierReport, VerifierError> {
    let resp: VerifyResponse =
        serde_json::from_str(body.trim()).map_err(|e| VerifierError::Malformed(e.to_string()))?;
    let report = VerifierReport {
        scores: resp.scores,
        notes: "external".into(),
    };
    report.validate(cs)?;
    Ok(report)
}

/// Everything a verifier may look at.
pub struct VerifyInput<'a> {
    pub cs: &'a ConstraintSet,
    pub truth: &'a SceneTruth,
    pub stack: &'a AttentionStack,
    pub render_pgm: &'a [u8],
}

pub trait Verifier: Sync {
    fn verify(&self, input: &VerifyInput<'_>) -> Result<VerifierReport, VerifierError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OracleVerifier;

impl Verifier for OracleVerifier {
    fn verify(&self, input: &VerifyInput<'_>) -> Result<VerifierReport, VerifierError> {
        oracle_verify(input.truth, input.stack, input.cs)
    }
}

/// Spawns a child per request, writes one JSON line, reads one JSON line.
#[derive(Debug, Clone)]
pub struct ExecVerifier {
    pub program: String,
    pub args: Vec<String>,
}

impl ExecVerifier {
    /// Splits a command line on whitespace.
    pub fn from_command(cmd: &str) -> Self {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        Self {
            program: parts.next().unwrap_or_default(),
            args: parts.collect(),
        }
    }
}

impl Verifier for ExecVerifier {
    fn verify(&self, input: &VerifyInput<'_>) -> Result<VerifierReport, VerifierError> {
        let request = serde_json::to_string(&VerifyRequest::new(input.cs, input.render_pgm))
            .map_err(|e| VerifierError::Transport(e.to_string()))?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| VerifierError::Transport(format!("spawn {}: {e}", self.program)))?;
        {
            let mut stdin = child
                .stdin
                .take()
                .ok_or_else(|| VerifierError::Transport("no stdin".into()))?;
            writeln!(stdin, "{request}").map_err(|e| VerifierError::Transport(e.to_string()))?;
        }
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| VerifierError::Transport("no stdout".into()))?;
        let mut line = String::new();
        BufReader::new(stdout)
            .read_line(&mut line)
            .map_err(|e| VerifierError::Transport(e.to_string()))?;
        let status = child.wait().map_err(|e| VerifierError::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            return Err(VerifierError::Transport(format!("no response ({status})")));
        }
        parse_response(&line, input.cs)
    }
}

/// POSTs the request as JSON.
#[derive(Debug, Clone)]
pub struct HttpVerifier {
    pub url: String,
    pub timeout: Duration,
}

impl HttpVerifier {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            timeout: Duration::from_secs(30),
        }
    }
}

impl Verifier for HttpVerifier {
    fn verify(&self, input: &VerifyInput<'_>) -> Result<VerifierReport, VerifierError> {
        let request = serde_json::to_string(&VerifyRequest::new(input.cs, input.render_pgm))
            .map_err(|e| VerifierError::Transport(e.to_string()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(request.as_bytes())
            .map_err(|e| VerifierError::Transport(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| VerifierError::Transport(e.to_string()))?;
        parse_response(&body, input.cs)
    }
}

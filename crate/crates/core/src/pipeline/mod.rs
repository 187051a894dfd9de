//! Guided generation and two-stage initial-noise refinement.
//!
//! [`ear_generate`] denoises from `T` down to 1 and, during the leading
//! update window, nudges each proposed latent down the gradient of the EAR
//! loss. [`refine`] runs that once, asks a verifier which entities failed,
//! corrects the initial noise one faulty entity at a time while holding the
//! proper ones near their reference maps, then generates again.

mod batch;
mod rundir;
mod trace;

pub use batch::{
    batch_run, run_scenario, BatchOptions, BatchOutput, Check, ConstraintSource, Fault, GridCell, MetricsRow,
    PreservationCheck, RunMode, RunRecord, Satisfaction, Scenario, ScenarioSuite, SuiteEntry, SuiteError, Tally,
    ATTRIBUTE_IOU_THRESHOLD, MIXED_IOU_THRESHOLD, PRESENCE_THRESHOLD, PRESERVATION_RATIO, three_entity_scene,
};
pub use rundir::{write_generation_dir, write_refinement_dir, RunDirError, RunMetrics};
pub use trace::{validate_refinement_log, write_trace_csv, RefinementEvent, TraceEntry};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionStack};
use crate::backend::{Backend, BackendError, BlobWorld, Latent};
use crate::constraints::ConstraintSet;
use crate::grad::{loss_grad, GradError, LossSpec};
use crate::losses::{self, ActiveModes, LossBreakdown, LossConfig, LossError};
use crate::verifier::{classify, FaultClassification, Verifier, VerifierError, VerifierReport, VerifyInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Denoising steps `T`.
    pub steps: usize,
    /// Leading steps (from `T` downward) that receive loss updates.
    pub update_steps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Step size for initial-noise updates.
    pub alpha_noise: f64,
    /// Gradient steps per popped faulty entity.
    pub inner_steps: usize,
    pub lambda: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Detection/refinement cycles after the first generation.
    pub max_rounds: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            update_steps: 25,
            alpha_start: 20.0,
            alpha_end: 10.0,
            alpha_noise: 10.0,
            inner_steps: 1,
            lambda: 0.5,
            seed: 0,
            loss: LossConfig::default(),
            max_rounds: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.steps < 1 {
            problems.push("steps must be at least 1".to_string());
        }
        if self.update_steps > self.steps {
            problems.push(format!("update_steps {} exceeds steps {}", self.update_steps, self.steps));
        }
        if !(self.alpha_end > 0.0 && self.alpha_start >= self.alpha_end) {
            problems.push("need alpha_start >= alpha_end > 0".to_string());
        }
        if !(self.alpha_noise.is_finite() && self.alpha_noise >= 0.0) {
            problems.push("alpha_noise must be finite and non-negative".to_string());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            problems.push(format!("lambda {} outside [0,1]", self.lambda));
        }
        if !self.loss.weights.is_valid() {
            problems.push("loss weights must be finite and non-negative".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    /// Whether step `t` (counting down from `T`) falls in the update window.
    pub fn updates_at(&self, t: usize) -> bool {
        t + self.update_steps > self.steps
    }
}

/// Step size for the `k`-th update (0-based): linear from `alpha_start` to
/// `alpha_end` across the window.
pub fn alpha_schedule(k: usize, cfg: &PipelineConfig) -> f64 {
    if cfg.update_steps <= 1 {
        return cfg.alpha_start;
    }
    let frac = k.min(cfg.update_steps - 1) as f64 / (cfg.update_steps - 1) as f64;
    cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * frac
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("step t={t}: {source}")]
    Gradient { t: usize, source: GradError },
    #[error("verifier failed: {source}")]
    Verifier {
        source: VerifierError,
        stage1: Box<Generation>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub entries: Vec<TraceEntry>,
}

/// Outcome of one guided rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub initial_latent: Latent,
    pub final_latent: Latent,
    pub trace: GenerationTrace,
    /// Attention at the first step (`t = T`).
    pub first_attention: AttentionStack,
    /// Attention of the final latent at `t = 0`.
    pub final_attention: AttentionStack,
}

/// Runs guided denoising from `z_t`.
pub fn ear_generate<B: Backend + ?Sized>(
    backend: &B,
    cs: &ConstraintSet,
    cfg: &PipelineConfig,
    z_t: &Latent,
) -> Result<Generation, PipelineError> {
    cfg.validate().map_err(PipelineError::Config)?;
    if backend.steps() != cfg.steps {
        return Err(PipelineError::Config(format!(
            "backend runs {} steps, config asks for {}",
            backend.steps(),
            cfg.steps
        )));
    }
    let spec = LossSpec::Ear {
        cs,
        config: cfg.loss,
    };
    let mut z = z_t.clone();
    let mut entries = Vec::with_capacity(cfg.steps);
    let mut first_attention = None;
    for t in (1..=cfg.steps).rev() {
        let step = backend.step(&z, t)?;
        let breakdown = losses::ear_loss(&step.attention, cs, &cfg.loss)?;
        if !breakdown.total.is_finite() {
            return Err(PipelineError::Gradient {
                t,
                source: GradError::NonFinite("loss"),
            });
        }
        if first_attention.is_none() {
            first_attention = Some(step.attention.clone());
        }
        let proposal = step.next_latent;
        let (alpha, grad_norm) = if cfg.updates_at(t) {
            let alpha = alpha_schedule(cfg.steps - t, cfg);
            // The proposal's attention one step later is the differentiable proxy.
            let (_, grad) =
                loss_grad(backend, &proposal, t - 1, &spec).map_err(|source| PipelineError::Gradient { t, source })?;
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            z = proposal.descend(&grad, alpha);
            (alpha, norm)
        } else {
            z = proposal;
            (0.0, 0.0)
        };
        entries.push(TraceEntry {
            t,
            mixing: breakdown.mixing,
            missing: breakdown.missing,
            attr: breakdown.attr,
            spatial: breakdown.spatial,
            total: breakdown.total,
            alpha,
            grad_norm,
            latent_hash: z.checksum(),
        });
    }
    let final_attention = backend.attention(&z, 0)?;
    Ok(Generation {
        initial_latent: z_t.clone(),
        first_attention: first_attention.unwrap_or_else(|| final_attention.clone()),
        final_latent: z,
        trace: GenerationTrace { entries },
        final_attention,
    })
}

/// Verifier output for one detection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRound {
    pub report: VerifierReport,
    pub classification: FaultClassification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub stage1: Generation,
    /// The final generation when refinement ran.
    pub stage2: Option<Generation>,
    pub rounds: Vec<DetectionRound>,
    pub events: Vec<RefinementEvent>,
    /// Reference maps after refinement (stage-1 first-step maps, with
    /// corrected entities replaced).
    pub reference: AttentionStack,
    pub refined_noise: Latent,
}

impl Refinement {
    pub fn final_generation(&self) -> &Generation {
        self.stage2.as_ref().unwrap_or(&self.stage1)
    }
}

/// Backend with ground truth and rendering; what the verifier needs.
pub trait SceneBackend: Backend {
    fn truth(&self, z: &Latent) -> Result<crate::backend::SceneTruth, BackendError>;
    fn render_pgm(&self, z: &Latent) -> Result<Vec<u8>, BackendError>;
}

impl SceneBackend for BlobWorld {
    fn truth(&self, z: &Latent) -> Result<crate::backend::SceneTruth, BackendError> {
        self.ground_truth(z)
    }

    fn render_pgm(&self, z: &Latent) -> Result<Vec<u8>, BackendError> {
        self.render(z, 4)
    }
}

fn detect<B: SceneBackend + ?Sized>(
    backend: &B,
    cs: &ConstraintSet,
    verifier: &dyn Verifier,
    generation: &Generation,
    lambda: f64,
) -> Result<Result<DetectionRound, VerifierError>, BackendError> {
    let truth = backend.truth(&generation.final_latent)?;
    let render = backend.render_pgm(&generation.final_latent)?;
    let report = verifier.verify(&VerifyInput {
        cs,
        truth: &truth,
        stack: &generation.final_attention,
        render_pgm: &render,
    });
    Ok(report.and_then(|report| {
        report.validate(cs)?;
        let classification = classify(&report, cs, lambda);
        Ok(DetectionRound { report, classification })
    }))
}

/// Replaces the maps of `entity`'s tokens in `reference` with those in `from`.
fn adopt_reference(reference: &mut AttentionStack, from: &AttentionStack, indices: &[usize]) {
    for &i in indices {
        reference.maps[i] = from.maps[i].clone();
    }
}

/// Two-stage generation: detect misaligned entities, correct the initial
/// noise entity by entity, regenerate.
pub fn refine<B: SceneBackend + ?Sized>(
    backend: &B,
    cs: &ConstraintSet,
    verifier: &dyn Verifier,
    cfg: &PipelineConfig,
    z_t: &Latent,
) -> Result<Refinement, PipelineError> {
    let stage1 = ear_generate(backend, cs, cfg, z_t)?;
    let first = match detect(backend, cs, verifier, &stage1, cfg.lambda)? {
        Ok(round) => round,
        Err(source) => {
            return Err(PipelineError::Verifier {
                source,
                stage1: Box::new(stage1),
            })
        }
    };
    let mut out = Refinement {
        reference: stage1.first_attention.clone(),
        refined_noise: z_t.clone(),
        stage1,
        stage2: None,
        rounds: vec![first],
        events: Vec::new(),
    };

    let t_init = cfg.steps;
    for round in 0..cfg.max_rounds {
        let detection = out.rounds.last().expect("at least one round").clone();
        if detection.classification.faulty.is_empty() {
            break;
        }
        let mut noise = out.refined_noise.clone();
        let mut proper: Vec<String> = detection.classification.proper.clone();
        let mut queue: std::collections::VecDeque<_> = detection.classification.faulty.iter().cloned().collect();
        let mut init = backend.attention(&noise, t_init)?;
        while let Some(faulty) = queue.pop_front() {
            let entity = cs
                .entity_position(&faulty.entity)
                .ok_or_else(|| LossError::UnknownEntity(faulty.entity.clone()))?;
            let modes = ActiveModes::from_report(&detection.report, &faulty.entity, cfg.lambda)?;
            let proper_idx: Vec<usize> = proper.iter().filter_map(|p| cs.entity_position(p)).collect();
            let faulty_before: Vec<String> = std::iter::once(faulty.entity.clone())
                .chain(queue.iter().map(|f| f.entity.clone()))
                .collect();
            let proper_before = proper.clone();
            let reference = out.reference.clone();
            let spec = LossSpec::Refinement {
                cs,
                config: cfg.loss,
                entity,
                modes,
                reference: &reference,
                proper: proper_idx.clone(),
            };
            let mut last_norm = 0.0;
            let (correction, preservation) = split_refinement(&init, &reference, cs, entity, modes, &proper_idx, cfg)?;
            for _ in 0..cfg.inner_steps {
                let (_, grad) = loss_grad(backend, &noise, t_init, &spec)
                    .map_err(|source| PipelineError::Gradient { t: t_init, source })?;
                last_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                noise = noise.descend(&grad, cfg.alpha_noise);
            }
            init = backend.attention(&noise, t_init)?;
            adopt_reference(&mut out.reference, &init, &cs.entities[entity].indices);
            proper.push(faulty.entity.clone());
            out.events.push(RefinementEvent {
                round,
                entity: faulty.entity.clone(),
                modes,
                correction,
                preservation,
                grad_norm: last_norm,
                faulty_before,
                proper_before,
                faulty_after: queue.iter().map(|f| f.entity.clone()).collect(),
                proper_after: proper.clone(),
            });
        }
        out.refined_noise = noise;
        let regenerated = ear_generate(backend, cs, cfg, &out.refined_noise)?;
        match detect(backend, cs, verifier, &regenerated, cfg.lambda)? {
            Ok(r) => out.rounds.push(r),
            Err(source) => {
                return Err(PipelineError::Verifier {
                    source,
                    stage1: Box::new(out.stage1),
                })
            }
        }
        out.stage2 = Some(regenerated);
    }
    Ok(out)
}

/// Correction and preservation values on the current `init` maps.
fn split_refinement(
    init: &AttentionStack,
    reference: &AttentionStack,
    cs: &ConstraintSet,
    entity: usize,
    modes: ActiveModes,
    proper: &[usize],
    cfg: &PipelineConfig,
) -> Result<(f64, f64), LossError> {
    let maps = losses::SceneMaps::resolve(init, cs)?;
    let refs = losses::SceneMaps::resolve(reference, cs)?;
    let correction = losses::correction_terms(&maps, entity, modes, &cfg.loss, 1.0, None)?;
    let preservation = losses::preservation_terms(&maps, &refs, proper, 1.0, None);
    Ok((correction, preservation))
}

/// `iou` of an entity's maps in two stacks.
pub fn entity_iou(a: &AttentionStack, b: &AttentionStack, indices: &[usize]) -> f64 {
    attention::iou_slices(a.aggregate(indices).values(), b.aggregate(indices).values())
}

/// Loss breakdown of a stack; convenience for reports.
pub fn breakdown(stack: &AttentionStack, cs: &ConstraintSet, cfg: &PipelineConfig) -> Result<LossBreakdown, LossError> {
    losses::ear_loss(stack, cs, &cfg.loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = PipelineConfig::default();
        assert_eq!(alpha_schedule(0, &cfg), 20.0);
        assert_eq!(alpha_schedule(24, &cfg), 10.0);
        assert_eq!(alpha_schedule(12, &cfg), 15.0);
        let one = PipelineConfig {
            update_steps: 1,
            ..cfg.clone()
        };
        assert_eq!(alpha_schedule(0, &one), 20.0);
    }

    #[test]
    fn window_is_leading_steps() {
        let cfg = PipelineConfig::default();
        let active: Vec<usize> = (1..=50).rev().filter(|&t| cfg.updates_at(t)).collect();
        assert_eq!(active.len(), 25);
        assert_eq!(active.first(), Some(&50));
        assert_eq!(active.last(), Some(&26));
        let none = PipelineConfig {
            update_steps: 0,
            ..cfg
        };
        assert!((1..=50).all(|t| !none.updates_at(t)));
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            update_steps: 60,
            lambda: 1.5,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err();
        assert!(msg.contains("update_steps") && msg.contains("lambda"));
    }
}

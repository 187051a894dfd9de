//! Scalar objectives over an attention stack: mixing, missing, attribute
//! binding and spatial terms, their weighted sum, the per-entity correction
//! loss and the preservation loss used during noise refinement.
//!
//! Every term is written once against [`SceneMaps`]; passing an [`Adjoint`]
//! accumulates the gradient with respect to the entity and attribute maps,
//! which [`Adjoint::scatter`] pushes back onto the per-token maps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{self, AttentionMap, AttentionStack, CenterMode};
use crate::constraints::{direction, ConstraintSet};
use crate::verifier::VerifierReport;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty map for entity '{0}'")]
    EmptyMap(String),
    #[error("unknown entity '{0}'")]
    UnknownEntity(String),
    #[error("no verifier scores for entity '{0}'")]
    MissingScores(String),
    #[error("token {index} out of range for stack of {len}")]
    TokenRange { index: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mixing: f64,
    pub missing: f64,
    pub attr: f64,
    pub spatial: f64,
    pub correction: f64,
    pub preservation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mixing: 1.0,
            missing: 1.0,
            attr: 1.0,
            spatial: 1.0,
            correction: 1.0,
            preservation: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            mixing: 0.0,
            missing: 0.0,
            attr: 0.0,
            spatial: 0.0,
            correction: 0.0,
            preservation: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [
            self.mixing,
            self.missing,
            self.attr,
            self.spatial,
            self.correction,
            self.preservation,
        ]
        .iter()
        .all(|w| w.is_finite() && *w >= 0.0)
    }

    /// Zeroes the named term. Returns false for unknown names.
    pub fn ablate(&mut self, term: &str) -> bool {
        match term {
            "mixing" => self.mixing = 0.0,
            "missing" => self.missing = 0.0,
            "attr" | "attribute" => self.attr = 0.0,
            "spatial" => self.spatial = 0.0,
            "correction" => self.correction = 0.0,
            "preservation" => self.preservation = 0.0,
            _ => return false,
        }
        true
    }
}

/// How the positive part of `A_e1 - A_e2` is reduced over pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingReducer {
    #[default]
    SumPositivePart,
    MaxPositivePart,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub reducer: MissingReducer,
    pub center: CenterMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mixing: f64,
    pub missing: f64,
    pub attr: f64,
    pub spatial: f64,
    pub total: f64,
}

/// Entity and attribute maps resolved from a stack, in constraint-set order.
pub struct SceneMaps<'a> {
    pub cs: &'a ConstraintSet,
    pub entities: Vec<AttentionMap>,
    pub attributes: Vec<AttentionMap>,
    width: usize,
}

impl<'a> SceneMaps<'a> {
    pub fn resolve(stack: &AttentionStack, cs: &'a ConstraintSet) -> Result<Self, LossError> {
        let check = |idx: &[usize]| {
            idx.iter().try_for_each(|&index| {
                if index < stack.len() {
                    Ok(())
                } else {
                    Err(LossError::TokenRange {
                        index,
                        len: stack.len(),
                    })
                }
            })
        };
        let mut entities = Vec::with_capacity(cs.entities.len());
        for e in &cs.entities {
            check(&e.indices)?;
            entities.push(stack.aggregate(&e.indices));
        }
        let mut attributes = Vec::with_capacity(cs.attributes.len());
        for a in &cs.attributes {
            check(&a.indices)?;
            attributes.push(stack.aggregate(&a.indices));
        }
        Ok(Self {
            cs,
            entities,
            attributes,
            width: stack.resolution().1,
        })
    }

    fn pixels(&self) -> usize {
        self.entities
            .first()
            .or(self.attributes.first())
            .map_or(0, |m| m.values().len())
    }
}

/// Gradient with respect to the resolved entity and attribute maps.
pub struct Adjoint {
    pub entities: Vec<Vec<f64>>,
    pub attributes: Vec<Vec<f64>>,
}

impl Adjoint {
    pub fn zeros(maps: &SceneMaps<'_>) -> Self {
        let n = maps.pixels();
        Self {
            entities: vec![vec![0.0; n]; maps.entities.len()],
            attributes: vec![vec![0.0; n]; maps.attributes.len()],
        }
    }

    /// Pushes the map gradients back through the mean aggregation into
    /// per-token cotangents, adding into `out`.
    pub fn scatter(&self, cs: &ConstraintSet, out: &mut [Vec<f64>]) {
        let groups = cs
            .entities
            .iter()
            .map(|e| &e.indices)
            .zip(&self.entities)
            .chain(cs.attributes.iter().map(|a| &a.indices).zip(&self.attributes));
        for (indices, grad) in groups {
            let share = 1.0 / indices.len() as f64;
            for &i in indices {
                for (o, g) in out[i].iter_mut().zip(grad) {
                    *o += share * g;
                }
            }
        }
    }
}

/// Restricts a term to the parts involving one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Focus {
    All,
    Entity(usize),
}

impl Focus {
    fn touches(self, a: usize, b: usize) -> bool {
        match self {
            Focus::All => true,
            Focus::Entity(f) => a == f || b == f,
        }
    }
}

pub(crate) fn mixing_term(maps: &SceneMaps<'_>, focus: Focus, scale: f64, mut adj: Option<&mut Adjoint>) -> f64 {
    let n = maps.entities.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if !focus.touches(i, j) {
                continue;
            }
            let (a, b) = (maps.entities[i].values(), maps.entities[j].values());
            total += attention::iou_slices(a, b);
            if let Some(adj) = adj.as_deref_mut() {
                let (lo, hi) = adj.entities.split_at_mut(j);
                attention::iou_backward(a, b, scale, &mut lo[i], &mut hi[0]);
            }
        }
    }
    total
}

fn exclusive(a: &[f64], b: &[f64], reducer: MissingReducer) -> (f64, Option<usize>) {
    match reducer {
        MissingReducer::SumPositivePart => (
            attention::compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y).max(0.0))),
            None,
        ),
        MissingReducer::MaxPositivePart => {
            let (p, d) = a
                .iter()
                .zip(b)
                .map(|(x, y)| x - y)
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (p, d)| if d > best.1 { (p, d) } else { best });
            if d > 0.0 {
                (d, Some(p))
            } else {
                (0.0, None)
            }
        }
    }
}

pub(crate) fn missing_term(
    maps: &SceneMaps<'_>,
    reducer: MissingReducer,
    focus: Focus,
    scale: f64,
    mut adj: Option<&mut Adjoint>,
) -> f64 {
    let n = maps.entities.len();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        if let Focus::Entity(f) = focus {
            if f != 0 {
                return 0.0;
            }
        }
        let a = maps.entities[0].values();
        let hw = a.len() as f64;
        if let Some(adj) = adj {
            adj.entities[0].iter_mut().for_each(|g| *g -= scale / hw);
        }
        return -a.iter().sum::<f64>() / hw;
    }
    let denom = (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j || !focus.touches(i, j) {
                continue;
            }
            let (a, b) = (maps.entities[i].values(), maps.entities[j].values());
            let (value, arg) = exclusive(a, b, reducer);
            total += value;
            if let Some(adj) = adj.as_deref_mut() {
                let s = -scale / denom;
                match reducer {
                    MissingReducer::SumPositivePart => {
                        for p in 0..a.len() {
                            if a[p] > b[p] {
                                adj.entities[i][p] += s;
                                adj.entities[j][p] -= s;
                            }
                        }
                    }
                    MissingReducer::MaxPositivePart => {
                        if let Some(p) = arg {
                            adj.entities[i][p] += s;
                            adj.entities[j][p] -= s;
                        }
                    }
                }
            }
        }
    }
    -total / denom
}

pub(crate) fn attr_term(maps: &SceneMaps<'_>, focus: Focus, scale: f64, mut adj: Option<&mut Adjoint>) -> f64 {
    let mut total = 0.0;
    for (k, binding) in maps.cs.attributes.iter().enumerate() {
        let Some(e) = maps.cs.entity_position(&binding.entity) else {
            continue;
        };
        if let Focus::Entity(f) = focus {
            if f != e {
                continue;
            }
        }
        let (a, b) = (maps.entities[e].values(), maps.attributes[k].values());
        total -= attention::iou_slices(a, b);
        if let Some(adj) = adj.as_deref_mut() {
            attention::iou_backward(a, b, -scale, &mut adj.entities[e], &mut adj.attributes[k]);
        }
    }
    total
}

pub(crate) fn spatial_term(
    maps: &SceneMaps<'_>,
    center: CenterMode,
    focus: Focus,
    scale: f64,
    mut adj: Option<&mut Adjoint>,
) -> Result<f64, LossError> {
    let mut total = 0.0;
    for (i, rel, j) in maps.cs.axis_relations() {
        if !focus.touches(i, j) {
            continue;
        }
        let axis = rel.kind.axis().expect("axis relation");
        let dir = direction(&rel.kind) as f64;
        let (a, b) = (&maps.entities[i], &maps.entities[j]);
        let (aa, oa) = attention::center_parts(a.values(), maps.width, axis, center)
            .map_err(|_| LossError::EmptyMap(rel.subject.clone()))?;
        let (ab, ob) = attention::center_parts(b.values(), maps.width, axis, center)
            .map_err(|_| LossError::EmptyMap(rel.object.clone()))?;
        let s = sigmoid(dir * ((ab - aa) + (ob - oa)));
        total += s;
        if let Some(adj) = adj.as_deref_mut() {
            let ds = scale * s * (1.0 - s) * dir;
            attention::center_backward(b.values(), maps.width, axis, center, ds, &mut adj.entities[j]);
            attention::center_backward(a.values(), maps.width, axis, center, -ds, &mut adj.entities[i]);
        }
    }
    Ok(total)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn mixing_loss(stack: &AttentionStack, cs: &ConstraintSet) -> Result<f64, LossError> {
    Ok(mixing_term(&SceneMaps::resolve(stack, cs)?, Focus::All, 1.0, None))
}

pub fn missing_loss(stack: &AttentionStack, cs: &ConstraintSet, reducer: MissingReducer) -> Result<f64, LossError> {
    Ok(missing_term(&SceneMaps::resolve(stack, cs)?, reducer, Focus::All, 1.0, None))
}

pub fn attribute_loss(stack: &AttentionStack, cs: &ConstraintSet) -> Result<f64, LossError> {
    Ok(attr_term(&SceneMaps::resolve(stack, cs)?, Focus::All, 1.0, None))
}

pub fn spatial_loss(stack: &AttentionStack, cs: &ConstraintSet) -> Result<f64, LossError> {
    spatial_term(&SceneMaps::resolve(stack, cs)?, CenterMode::MassNormalized, Focus::All, 1.0, None)
}

/// Weighted EAR objective. With an adjoint, accumulates `∂total/∂maps`.
pub(crate) fn ear_terms(
    maps: &SceneMaps<'_>,
    cfg: &LossConfig,
    focus: Focus,
    scale: f64,
    mut adj: Option<&mut Adjoint>,
) -> Result<LossBreakdown, LossError> {
    let w = &cfg.weights;
    let mixing = mixing_term(maps, focus, scale * w.mixing, adj.as_deref_mut());
    let missing = missing_term(maps, cfg.reducer, focus, scale * w.missing, adj.as_deref_mut());
    let attr = attr_term(maps, focus, scale * w.attr, adj.as_deref_mut());
    let spatial = spatial_term(maps, cfg.center, focus, scale * w.spatial, adj)?;
    Ok(LossBreakdown {
        mixing,
        missing,
        attr,
        spatial,
        total: w.mixing * mixing + w.missing * missing + w.attr * attr + w.spatial * spatial,
    })
}

pub fn ear_loss(stack: &AttentionStack, cs: &ConstraintSet, cfg: &LossConfig) -> Result<LossBreakdown, LossError> {
    ear_terms(&SceneMaps::resolve(stack, cs)?, cfg, Focus::All, 1.0, None)
}

/// Which restricted terms of one faulty entity are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveModes {
    pub entity: bool,
    pub attribute: bool,
    pub spatial: bool,
}

impl ActiveModes {
    pub fn from_report(report: &VerifierReport, entity: &str, lambda: f64) -> Result<Self, LossError> {
        let s = report
            .scores
            .get(entity)
            .ok_or_else(|| LossError::MissingScores(entity.to_string()))?;
        Ok(Self {
            entity: s.missing >= lambda,
            attribute: s.attribute >= lambda,
            spatial: s.spatial >= lambda,
        })
    }

    pub fn any(&self) -> bool {
        self.entity || self.attribute || self.spatial
    }
}

pub(crate) fn correction_terms(
    maps: &SceneMaps<'_>,
    entity: usize,
    modes: ActiveModes,
    cfg: &LossConfig,
    scale: f64,
    mut adj: Option<&mut Adjoint>,
) -> Result<f64, LossError> {
    let w = &cfg.weights;
    let focus = Focus::Entity(entity);
    let mut total = 0.0;
    if modes.entity {
        total += w.mixing * mixing_term(maps, focus, scale * w.mixing, adj.as_deref_mut());
        total += w.missing * missing_term(maps, cfg.reducer, focus, scale * w.missing, adj.as_deref_mut());
    }
    if modes.attribute {
        total += w.attr * attr_term(maps, focus, scale * w.attr, adj.as_deref_mut());
    }
    if modes.spatial {
        total += w.spatial * spatial_term(maps, cfg.center, focus, scale * w.spatial, adj)?;
    }
    Ok(total)
}

/// Correction loss for faulty entity `entity`: each restricted term is
/// enabled iff the matching mistake score is at least `lambda`.
pub fn correction_loss(
    stack: &AttentionStack,
    cs: &ConstraintSet,
    report: &VerifierReport,
    entity: &str,
    lambda: f64,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    let f = cs
        .entity_position(entity)
        .ok_or_else(|| LossError::UnknownEntity(entity.to_string()))?;
    let modes = ActiveModes::from_report(report, entity, lambda)?;
    correction_terms(&SceneMaps::resolve(stack, cs)?, f, modes, cfg, 1.0, None)
}

pub(crate) fn preservation_terms(
    init: &SceneMaps<'_>,
    reference: &SceneMaps<'_>,
    proper: &[usize],
    scale: f64,
    adj: Option<&mut Adjoint>,
) -> f64 {
    let mut total = 0.0;
    let mut adj = adj;
    for &e in proper {
        let (a, r) = (init.entities[e].values(), reference.entities[e].values());
        total -= attention::iou_slices(a, r);
        if let Some(adj) = adj.as_deref_mut() {
            let mut sink = vec![0.0; r.len()];
            attention::iou_backward(a, r, -scale, &mut adj.entities[e], &mut sink);
        }
    }
    total
}

/// `-Σ iou(init, ref)` over the proper entities (by surface).
pub fn preservation_loss(
    init: &AttentionStack,
    reference: &AttentionStack,
    cs: &ConstraintSet,
    proper: &[String],
) -> Result<f64, LossError> {
    let idx = proper
        .iter()
        .map(|p| cs.entity_position(p).ok_or_else(|| LossError::UnknownEntity(p.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let a = SceneMaps::resolve(init, cs)?;
    let r = SceneMaps::resolve(reference, cs)?;
    Ok(preservation_terms(&a, &r, &idx, 1.0, None))
}

pub fn refinement_loss(correction: f64, preservation: f64, weights: &LossWeights) -> f64 {
    weights.correction * correction + weights.preservation * preservation
}

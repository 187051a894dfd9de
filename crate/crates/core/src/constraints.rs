//! Structured prompt constraints: entities, entity/attribute pairs and
//! spatial triples, plus the axis and direction semantics of relations.
//!
//! Constraint files are JSON:
//!
//! ```json
//! {
//!   "prompt": "a black cat on the left of a green frog",
//!   "prompt_len": 11,
//!   "entities": [{"surface": "cat", "indices": [3]}, {"surface": "frog", "indices": [10]}],
//!   "attributes": [["cat", "black", [2]], ["frog", "green", [9]]],
//!   "relations": [["cat", "left", "frog"]]
//! }
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A prompt token by position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub surface: String,
}

/// An entity phrase. Its attention map is the pixelwise mean of its token maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub surface: String,
    pub indices: Vec<usize>,
}

impl Entity {
    pub fn new(surface: impl Into<String>, indices: Vec<usize>) -> Self {
        Self {
            surface: surface.into(),
            indices,
        }
    }

    /// First token position; used for ordering ties.
    pub fn head(&self) -> usize {
        self.indices.first().copied().unwrap_or(usize::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeBinding {
    pub entity: String,
    pub surface: String,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationKind {
    Left,
    Right,
    Above,
    Below,
    TopOf,
    BottomOf,
    Near,
    In,
    On,
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl RelationKind {
    /// Parses a relation word or phrase. Phrases such as "on the left of"
    /// resolve to their canonical kind; unknown words become `Other`.
    pub fn parse(word: &str) -> Self {
        let lowered = word.trim().to_lowercase();
        let canon: String = lowered
            .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
            .filter(|w| !w.is_empty() && !matches!(*w, "on" | "the" | "to" | "of" | "at"))
            .collect::<Vec<_>>()
            .join(" ");
        match canon.as_str() {
            "left" => RelationKind::Left,
            "right" => RelationKind::Right,
            "above" => RelationKind::Above,
            "below" => RelationKind::Below,
            "top" => RelationKind::TopOf,
            "bottom" => RelationKind::BottomOf,
            "near" => RelationKind::Near,
            "in" => RelationKind::In,
            "" if lowered == "on" => RelationKind::On,
            _ => RelationKind::Other(lowered),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            RelationKind::Left => "left",
            RelationKind::Right => "right",
            RelationKind::Above => "above",
            RelationKind::Below => "below",
            RelationKind::TopOf => "top-of",
            RelationKind::BottomOf => "bottom-of",
            RelationKind::Near => "near",
            RelationKind::In => "in",
            RelationKind::On => "on",
            RelationKind::Other(s) => s,
        }
    }

    pub fn axis(&self) -> Option<Axis> {
        match self {
            RelationKind::Left | RelationKind::Right => Some(Axis::X),
            RelationKind::Above | RelationKind::Below | RelationKind::TopOf | RelationKind::BottomOf => {
                Some(Axis::Y)
            }
            _ => None,
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `(x_flag, y_flag)`; at most one is set, none for non-spatial kinds.
pub fn axis_flags(kind: &RelationKind) -> (u8, u8) {
    match kind.axis() {
        Some(Axis::X) => (1, 0),
        Some(Axis::Y) => (0, 1),
        None => (0, 0),
    }
}

/// Sign of the relation along its axis. Rows grow downward, so "below" is +1.
pub fn direction(kind: &RelationKind) -> i8 {
    match kind {
        RelationKind::Right | RelationKind::Below | RelationKind::BottomOf => 1,
        RelationKind::Left | RelationKind::Above | RelationKind::TopOf => -1,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub subject: String,
    pub kind: RelationKind,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintSet {
    pub prompt: String,
    pub prompt_len: usize,
    pub entities: Vec<Entity>,
    pub attributes: Vec<AttributeBinding>,
    pub relations: Vec<Relation>,
}

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid constraint set: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintFile {
    prompt: String,
    prompt_len: usize,
    #[serde(default)]
    entities: Vec<Entity>,
    #[serde(default)]
    attributes: Vec<(String, String, Vec<usize>)>,
    #[serde(default)]
    relations: Vec<(String, String, String)>,
}

impl ConstraintSet {
    pub fn entity_position(&self, surface: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.surface == surface)
    }

    pub fn entity(&self, surface: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.surface == surface)
    }

    /// Every invariant violation, in a stable order. Empty iff valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen_idx = HashSet::new();
        let mut seen_surface = HashSet::new();
        for e in &self.entities {
            if e.indices.is_empty() {
                out.push(format!("entity '{}' has no token indices", e.surface));
            }
            for &i in &e.indices {
                if i >= self.prompt_len {
                    out.push(format!(
                        "entity '{}' index {} out of range (prompt_len {})",
                        e.surface, i, self.prompt_len
                    ));
                }
                if !seen_idx.insert(i) {
                    out.push(format!("duplicate entity index {} ('{}')", i, e.surface));
                }
            }
            if !seen_surface.insert(e.surface.as_str()) {
                out.push(format!("duplicate entity '{}'", e.surface));
            }
        }
        for a in &self.attributes {
            if self.entity(&a.entity).is_none() {
                out.push(format!(
                    "attribute '{}' refers to unknown entity '{}'",
                    a.surface, a.entity
                ));
            }
            if a.indices.is_empty() {
                out.push(format!("attribute '{}' has no token indices", a.surface));
            }
            for &i in &a.indices {
                if i >= self.prompt_len {
                    out.push(format!(
                        "attribute '{}' index {} out of range (prompt_len {})",
                        a.surface, i, self.prompt_len
                    ));
                }
            }
        }
        for r in &self.relations {
            for end in [&r.subject, &r.object] {
                if self.entity(end).is_none() {
                    out.push(format!(
                        "relation ({}, {}, {}) refers to unknown entity '{}'",
                        r.subject, r.kind, r.object, end
                    ));
                }
            }
        }
        out
    }

    /// Relations that act along an axis, with their entity positions.
    pub fn axis_relations(&self) -> impl Iterator<Item = (usize, &Relation, usize)> + '_ {
        self.relations.iter().filter_map(move |r| {
            r.kind.axis()?;
            Some((self.entity_position(&r.subject)?, r, self.entity_position(&r.object)?))
        })
    }

    /// All token indices referenced by any entity or attribute.
    pub fn referenced_tokens(&self) -> BTreeSet<usize> {
        self.entities
            .iter()
            .flat_map(|e| e.indices.iter().copied())
            .chain(self.attributes.iter().flat_map(|a| a.indices.iter().copied()))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = ConstraintFile {
            prompt: self.prompt.clone(),
            prompt_len: self.prompt_len,
            entities: self.entities.clone(),
            attributes: self
                .attributes
                .iter()
                .map(|a| (a.entity.clone(), a.surface.clone(), a.indices.clone()))
                .collect(),
            relations: self
                .relations
                .iter()
                .map(|r| (r.subject.clone(), r.kind.name().to_string(), r.object.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("constraint file serializes")
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, ConstraintError> {
        let file: ConstraintFile = serde_json::from_value(value).map_err(|e| ConstraintError::Parse {
            line: e.line(),
            column: e.column(),
            message: bare_message(&e),
        })?;
        Self::from_file(file)
    }

    fn from_file(file: ConstraintFile) -> Result<Self, ConstraintError> {
        let cs = ConstraintSet {
            prompt: file.prompt,
            prompt_len: file.prompt_len,
            entities: file.entities,
            attributes: file
                .attributes
                .into_iter()
                .map(|(entity, surface, indices)| AttributeBinding {
                    entity,
                    surface,
                    indices,
                })
                .collect(),
            relations: file
                .relations
                .into_iter()
                .map(|(subject, kind, object)| Relation {
                    subject,
                    kind: RelationKind::parse(&kind),
                    object,
                })
                .collect(),
        };
        let problems = cs.validate();
        if problems.is_empty() {
            Ok(cs)
        } else {
            Err(ConstraintError::Invalid(problems))
        }
    }
}

/// serde_json's message without its trailing position.
fn bare_message(e: &serde_json::Error) -> String {
    let text = e.to_string();
    match text.rsplit_once(" at line ") {
        Some((head, _)) if e.line() > 0 => head.to_string(),
        _ => text,
    }
}

/// Parses and validates a constraint file.
pub fn parse_constraints(document: &str) -> Result<ConstraintSet, ConstraintError> {
    let file: ConstraintFile = serde_json::from_str(document).map_err(|e| ConstraintError::Parse {
        line: e.line(),
        column: e.column(),
        message: bare_message(&e),
    })?;
    ConstraintSet::from_file(file)
}

pub fn validate(cs: &ConstraintSet) -> Vec<String> {
    cs.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BIRD: &str = r#"{
        "prompt": "a bird on the left of a clock",
        "prompt_len": 9,
        "entities": [{"surface": "bird", "indices": [2]}, {"surface": "clock", "indices": [8]}],
        "attributes": [],
        "relations": [["bird", "on the left of", "clock"]]
    }"#;

    #[test]
    fn parses_bird_clock() {
        let cs = parse_constraints(BIRD).unwrap();
        assert_eq!(cs.entities.len(), 2);
        assert_eq!(cs.attributes.len(), 0);
        assert_eq!(cs.relations.len(), 1);
        assert_eq!(cs.relations[0].kind, RelationKind::Left);
    }

    #[test]
    fn no_spatial_kitchen() {
        let doc = r#"{
            "prompt": "a small white kitchen with brown wood floor",
            "prompt_len": 9,
            "entities": [{"surface": "kitchen", "indices": [4]}, {"surface": "floor", "indices": [8]}],
            "attributes": [["kitchen", "small", [2]], ["kitchen", "white", [3]],
                           ["floor", "brown", [6]], ["floor", "wood", [7]]],
            "relations": []
        }"#;
        let cs = parse_constraints(doc).unwrap();
        assert!(cs.relations.is_empty());
        assert_eq!(cs.attributes.len(), 4);
    }

    #[test]
    fn relations_without_entities_rejected() {
        let doc = r#"{"prompt": "x", "prompt_len": 3, "entities": [],
                      "relations": [["a", "left", "b"]]}"#;
        match parse_constraints(doc) {
            Err(ConstraintError::Invalid(v)) => {
                assert_eq!(v.len(), 2);
                assert!(v[0].contains("'a'"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_reports_line() {
        let doc = "{\n  \"prompt\": \"x\",\n  \"prompt_len\": \"nine\"\n}";
        match parse_constraints(doc) {
            Err(ConstraintError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn axis_and_direction_tables() {
        assert_eq!(axis_flags(&RelationKind::Left), (1, 0));
        assert_eq!(axis_flags(&RelationKind::TopOf), (0, 1));
        assert_eq!(axis_flags(&RelationKind::Near), (0, 0));
        assert_eq!(direction(&RelationKind::Right), 1);
        assert_eq!(direction(&RelationKind::Left), -1);
        assert_eq!(direction(&RelationKind::Above), -1);
        assert_eq!(direction(&RelationKind::Below), 1);
        assert_eq!(direction(&RelationKind::TopOf), -1);
        assert_eq!(direction(&RelationKind::BottomOf), 1);
        assert_eq!(direction(&RelationKind::Other("beside".into())), 0);
    }

    #[test]
    fn relation_phrases() {
        assert_eq!(RelationKind::parse("on top of"), RelationKind::TopOf);
        assert_eq!(RelationKind::parse("top-of"), RelationKind::TopOf);
        assert_eq!(RelationKind::parse("to the right of"), RelationKind::Right);
        assert_eq!(RelationKind::parse("on"), RelationKind::On);
        assert_eq!(RelationKind::parse("in"), RelationKind::In);
        assert_eq!(RelationKind::parse("in front of"), RelationKind::Other("in front of".into()));
        assert_eq!(RelationKind::parse("on side of"), RelationKind::Other("on side of".into()));
    }

    #[test]
    fn validate_reports() {
        let mut cs = parse_constraints(BIRD).unwrap();
        assert!(validate(&cs).is_empty());

        let mut dangling = cs.clone();
        dangling.relations[0].object = "lamp".into();
        assert_eq!(validate(&dangling).len(), 1);

        cs.entities[1].indices = vec![2];
        assert_eq!(validate(&cs).len(), 1);
    }
}

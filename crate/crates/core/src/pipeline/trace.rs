use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::losses::ActiveModes;

/// One denoising step. Loss terms are those of the step's own attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: usize,
    pub mixing: f64,
    pub missing: f64,
    pub attr: f64,
    pub spatial: f64,
    pub total: f64,
    /// Zero outside the update window.
    pub alpha: f64,
    pub grad_norm: f64,
    pub latent_hash: String,
}

/// Writes `t,mixing,missing,attr,spatial,total,alpha,grad_norm,latent_hash`.
pub fn write_trace_csv(entries: &[TraceEntry], w: impl Write) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in entries {
        out.serialize(e)?;
    }
    out.flush()?;
    Ok(())
}

/// Bookkeeping for one popped faulty entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementEvent {
    pub round: usize,
    pub entity: String,
    pub modes: ActiveModes,
    /// Values on the noise before this entity's updates.
    pub correction: f64,
    pub preservation: f64,
    pub grad_norm: f64,
    pub faulty_before: Vec<String>,
    pub proper_before: Vec<String>,
    pub faulty_after: Vec<String>,
    pub proper_after: Vec<String>,
}

/// Checks the faulty/proper set algebra of a refinement log. Returns one
/// message per violation.
pub fn validate_refinement_log(events: &[RefinementEvent]) -> Vec<String> {
    let mut out = Vec::new();
    let mut total_by_round = std::collections::BTreeMap::new();
    for (k, e) in events.iter().enumerate() {
        let before = e.faulty_before.len() + e.proper_before.len();
        let after = e.faulty_after.len() + e.proper_after.len();
        let total = *total_by_round.entry(e.round).or_insert(before);
        if before != total || after != total {
            out.push(format!("event {k}: union size changed ({before} -> {after}, expected {total})"));
        }
        if e.faulty_after.len() + 1 != e.faulty_before.len() {
            out.push(format!("event {k}: faulty did not shrink by one"));
        }
        if e.proper_after.len() != e.proper_before.len() + 1 || !e.proper_after.contains(&e.entity) {
            out.push(format!("event {k}: '{}' not added to proper", e.entity));
        }
        if !e.faulty_before.contains(&e.entity) || e.faulty_after.contains(&e.entity) {
            out.push(format!("event {k}: '{}' not moved out of faulty", e.entity));
        }
        for p in &e.proper_before {
            if !e.proper_after.contains(p) {
                out.push(format!("event {k}: '{p}' left proper"));
            }
        }
        for (name, set) in [("before", (&e.faulty_before, &e.proper_before)), ("after", (&e.faulty_after, &e.proper_after))] {
            if set.0.iter().any(|f| set.1.contains(f)) {
                out.push(format!("event {k}: faulty and proper overlap {name}"));
            }
        }
        if let Some(next) = events.get(k + 1).filter(|n| n.round == e.round) {
            if next.faulty_before != e.faulty_after || next.proper_before != e.proper_after {
                out.push(format!("event {k}: state does not chain into event {}", k + 1));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(entity: &str, fb: &[&str], pb: &[&str], fa: &[&str], pa: &[&str]) -> RefinementEvent {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        RefinementEvent {
            round: 0,
            entity: entity.into(),
            modes: ActiveModes::default(),
            correction: 0.0,
            preservation: 0.0,
            grad_norm: 0.0,
            faulty_before: s(fb),
            proper_before: s(pb),
            faulty_after: s(fa),
            proper_after: s(pa),
        }
    }

    #[test]
    fn clean_log_passes() {
        let log = vec![
            ev("a", &["a", "b"], &["c"], &["b"], &["c", "a"]),
            ev("b", &["b"], &["c", "a"], &[], &["c", "a", "b"]),
        ];
        assert!(validate_refinement_log(&log).is_empty());
    }

    #[test]
    fn broken_log_is_flagged() {
        let log = vec![ev("a", &["a", "b"], &["c"], &["a", "b"], &["c"])];
        let v = validate_refinement_log(&log);
        assert!(v.len() >= 3, "{v:?}");
        let unchained = vec![
            ev("a", &["a", "b"], &["c"], &["b"], &["c", "a"]),
            ev("b", &["b"], &["c"], &[], &["c", "b"]),
        ];
        assert!(!validate_refinement_log(&unchained).is_empty());
    }

    #[test]
    fn csv_columns() {
        let mut buf = Vec::new();
        write_trace_csv(
            &[TraceEntry {
                t: 50,
                mixing: 0.0,
                missing: -1.5,
                attr: 0.0,
                spatial: 0.25,
                total: -1.25,
                alpha: 20.0,
                grad_norm: 3.0,
                latent_hash: "ab".into(),
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "t,mixing,missing,attr,spatial,total,alpha,grad_norm,latent_hash\n50,0.0,-1.5,0.0,0.25,-1.25,20.0,3.0,ab\n"
        );
    }
}

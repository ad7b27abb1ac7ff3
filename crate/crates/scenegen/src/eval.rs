//! Evaluation: classification metrics from the confusion matrix,
//! graph-to-statement rendering with factual-overlap scoring, and the
//! scenario consistency rate.

use crate::graph::TemporalGraph;
use crate::ontology::{Criticality, NodeClass, RelationType, ALL_NODE_CLASSES, ALL_RELATIONS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("prediction and gold vectors differ in length: {pred} vs {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("empty input")]
    Empty,
    #[error("unparseable statement: {0}")]
    BadStatement(String),
}

/// Confusion-matrix metrics; ratios with zero denominators are reported as
/// 0 with the corresponding flag set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub undefined_precision: bool,
    pub undefined_recall: bool,
    pub undefined_f1: bool,
}

pub fn classification_metrics(pred: &[bool], gold: &[bool]) -> Result<MetricBundle, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let undefined_precision = tp + fp == 0;
    let undefined_recall = tp + fn_ == 0;
    let precision = if undefined_precision {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if undefined_recall {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let undefined_f1 = precision + recall == 0.0;
    let f1 = if undefined_f1 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let accuracy = (tp + tn) as f64 / pred.len() as f64;
    Ok(MetricBundle {
        tp,
        fp,
        tn,
        fn_,
        f1,
        accuracy,
        precision,
        recall,
        undefined_precision,
        undefined_recall,
        undefined_f1,
    })
}

/// Canonical statement strings, one per relation per tau; set semantics.
pub type StatementSet = BTreeSet<String>;

fn relation_phrase(rel: RelationType) -> &'static str {
    match rel {
        RelationType::IsIn => "is in",
        RelationType::Move => "is moving",
        RelationType::Brake => "is braking",
        RelationType::Stop => "is stopped",
        RelationType::IndicateLeft => "is indicating left",
        RelationType::IndicateRight => "is indicating right",
        RelationType::TurnLeft => "is turning left",
        RelationType::TurnRight => "is turning right",
        RelationType::Cross => "is crossing",
        RelationType::Red => "is red",
        RelationType::Amber => "is amber",
        RelationType::Green => "is green",
        RelationType::MovingAway => "is moving away from",
        RelationType::MovingTowards => "is moving towards",
        RelationType::MustStop => "must stop for",
        RelationType::NearCollision => "is in near collision with",
        RelationType::Near => "is near",
        RelationType::Visible => "is visible to",
        RelationType::AvMove => "is performing AV-Move",
        RelationType::AvMoveLeft => "is performing AV-MoveLeft",
        RelationType::AvMoveRight => "is performing AV-MoveRight",
        RelationType::AvOvertake => "is performing AV-Overtake",
        RelationType::AvStop => "is performing AV-Stop",
        RelationType::AvTurnLeft => "is performing AV-TurnLeft",
        RelationType::AvTurnRight => "is performing AV-TurnRight",
        RelationType::CriticalityLink => "is the criticality of",
    }
}

fn entity_phrase(cls: NodeClass, track: u32) -> String {
    if cls == NodeClass::Ego {
        "the ego-vehicle".to_string()
    } else {
        format!("{} {}", cls.label(), track)
    }
}

/// Renders one edge as a canonical statement. Self-edges omit the object.
pub fn statement(
    time: u32,
    src_cls: NodeClass,
    src_track: u32,
    rel: RelationType,
    dst_cls: NodeClass,
    dst_track: u32,
) -> String {
    let subject = entity_phrase(src_cls, src_track);
    let phrase = relation_phrase(rel);
    if src_cls == dst_cls && src_track == dst_track {
        format!("At time {time}: {subject} {phrase}.")
    } else {
        let object = entity_phrase(dst_cls, dst_track);
        format!("At time {time}: {subject} {phrase} {object}.")
    }
}

/// One statement per edge; the time is the absolute frame index of the
/// edge's tau slice when the graph carries frame times, else tau itself.
pub fn graph_to_statements(g: &TemporalGraph) -> StatementSet {
    let mut out = BTreeSet::new();
    for e in &g.edges {
        let (Some(src), Some(dst)) = (g.node(e.src), g.node(e.dst)) else {
            continue;
        };
        let time = match &g.frames {
            Some(frames) => frames[e.tau as usize],
            None => e.tau as u32,
        };
        out.insert(statement(time, src.cls, src.track, e.rel, dst.cls, dst.track));
    }
    out
}

/// Parses a canonical statement back into (time, subject, relation, object).
pub fn parse_statement(
    s: &str,
) -> Result<(u32, (NodeClass, u32), RelationType, (NodeClass, u32)), EvalError> {
    let bad = || EvalError::BadStatement(s.to_string());
    let rest = s.strip_prefix("At time ").ok_or_else(bad)?;
    let (time_str, rest) = rest.split_once(": ").ok_or_else(bad)?;
    let time: u32 = time_str.parse().map_err(|_| bad())?;
    let body = rest.strip_suffix('.').ok_or_else(bad)?;

    let parse_entity = |s: &str| -> Option<(NodeClass, u32)> {
        if s == "the ego-vehicle" {
            return Some((NodeClass::Ego, 0));
        }
        let (label, track) = s.rsplit_once(' ')?;
        let cls = ALL_NODE_CLASSES.iter().find(|c| c.label() == label)?;
        Some((*cls, track.parse().ok()?))
    };

    // Subject: "the ego-vehicle" or "<Class> <track>".
    let (subject, after_subject) = if let Some(r) = body.strip_prefix("the ego-vehicle ") {
        ((NodeClass::Ego, 0), r)
    } else {
        let mut split = body.splitn(3, ' ');
        let label = split.next().ok_or_else(bad)?;
        let track = split.next().ok_or_else(bad)?;
        let rest = split.next().ok_or_else(bad)?;
        let cls = ALL_NODE_CLASSES
            .iter()
            .find(|c| c.label() == label)
            .ok_or_else(bad)?;
        ((*cls, track.parse().map_err(|_| bad())?), rest)
    };

    // Longest matching relation phrase wins.
    let mut relations: Vec<RelationType> = ALL_RELATIONS.to_vec();
    relations.sort_by_key(|r| std::cmp::Reverse(relation_phrase(*r).len()));
    for rel in relations {
        let phrase = relation_phrase(rel);
        if after_subject == phrase {
            return Ok((time, subject, rel, subject));
        }
        if let Some(obj) = after_subject.strip_prefix(&format!("{phrase} ")) {
            let object = parse_entity(obj).ok_or_else(bad)?;
            return Ok((time, subject, rel, object));
        }
    }
    Err(bad())
}

/// F1 of the statement overlap: TP = |pred & gold|, FP = |pred - gold|,
/// FN = |gold - pred|; both sets empty scores 1.
pub fn factual_correctness(pred: &StatementSet, gold: &StatementSet) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let tp = pred.intersection(gold).count() as f64;
    let fp = pred.difference(gold).count() as f64;
    let fn_ = gold.difference(pred).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}

/// Pluggable semantic-similarity scorer; reported separately from the
/// factual score, never blended into it.
pub trait SemanticScorer {
    fn score(&self, pred: &str, gold: &str) -> f64;
}

/// Token-level Jaccard similarity, the default stand-in scorer.
pub struct TokenJaccard;

impl SemanticScorer for TokenJaccard {
    fn score(&self, pred: &str, gold: &str) -> f64 {
        let tokens = |s: &str| -> BTreeSet<String> {
            s.split_whitespace()
                .map(|t| {
                    t.trim_matches(|c: char| !c.is_alphanumeric() && c != '-')
                        .to_lowercase()
                })
                .filter(|t| !t.is_empty())
                .collect()
        };
        let a = tokens(pred);
        let b = tokens(gold);
        if a.is_empty() && b.is_empty() {
            return 1.0;
        }
        let inter = a.intersection(&b).count() as f64;
        let union = a.union(&b).count() as f64;
        inter / union
    }
}

/// Factual and semantic components of the answer-correctness evaluation,
/// reported side by side.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub factual: f64,
    pub semantic: f64,
}

pub fn answer_correctness(
    pred: &StatementSet,
    gold: &StatementSet,
    scorer: &dyn SemanticScorer,
) -> CorrectnessReport {
    let join = |s: &StatementSet| s.iter().cloned().collect::<Vec<_>>().join(" ");
    CorrectnessReport {
        factual: factual_correctness(pred, gold),
        semantic: scorer.score(&join(pred), &join(gold)),
    }
}

/// Per-criticality and overall scenario consistency rates (percent).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScrReport {
    pub groups: Vec<ScrGroup>,
    pub overall_pct: f64,
    pub matched: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScrGroup {
    pub requested: Criticality,
    pub pct: f64,
    pub matched: usize,
    pub total: usize,
}

pub fn scenario_consistency_rate(
    results: &[(Criticality, Criticality)],
) -> Result<ScrReport, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut groups = Vec::new();
    for crit in crate::ontology::ALL_CRITICALITIES {
        let in_group: Vec<_> = results.iter().filter(|(req, _)| *req == crit).collect();
        if in_group.is_empty() {
            continue;
        }
        let matched = in_group.iter().filter(|(req, real)| req == real).count();
        groups.push(ScrGroup {
            requested: crit,
            pct: 100.0 * matched as f64 / in_group.len() as f64,
            matched,
            total: in_group.len(),
        });
    }
    let matched = results.iter().filter(|(req, real)| req == real).count();
    Ok(ScrReport {
        groups,
        overall_pct: 100.0 * matched as f64 / results.len() as f64,
        matched,
        total: results.len(),
    })
}

/// Aligned plain-text table of the classification metrics.
pub fn render_metric_table(rows: &[(&str, &MetricBundle)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>10} {:>10} {:>8}\n",
        "", "F1", "Accuracy", "Precision", "Recall"
    ));
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<16} {:>8.3} {:>10.3} {:>10.3} {:>8.3}\n",
            name, m.f1, m.accuracy, m.precision, m.recall
        ));
    }
    out
}

/// Aligned plain-text table of SCR percentages per criticality.
pub fn render_scr_table(rows: &[(&str, &ScrReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>14}\n",
        "", "Visible", "Near", "NearCollision"
    ));
    for (name, report) in rows {
        let pct = |crit: Criticality| {
            report
                .groups
                .iter()
                .find(|g| g.requested == crit)
                .map_or("-".to_string(), |g| format!("{:.0}", g.pct))
        };
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>14}\n",
            name,
            pct(Criticality::Visible),
            pct(Criticality::Near),
            pct(Criticality::NearCollision),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Criticality;

    #[test]
    fn metrics_hand_confusion() {
        let pred = [true, true, false, false];
        let gold = [true, false, true, false];
        let m = classification_metrics(&pred, &gold).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn metrics_perfect_and_degenerate() {
        let m = classification_metrics(&[true, false], &[true, false]).unwrap();
        assert_eq!((m.f1, m.accuracy, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));

        let m = classification_metrics(&[false, false], &[true, false]).unwrap();
        assert_eq!(m.recall, 0.0);
        assert!(!m.undefined_recall);
        assert!(m.undefined_precision);

        assert!(classification_metrics(&[true], &[true, false]).is_err());
        assert!(classification_metrics(&[], &[]).is_err());
    }

    #[test]
    fn metrics_match_brute_force() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let gold: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let m = classification_metrics(&pred, &gold).unwrap();
            // Independent count.
            let tp = pred.iter().zip(&gold).filter(|(p, g)| **p && **g).count();
            let fp = pred.iter().zip(&gold).filter(|(p, g)| **p && !**g).count();
            let fn_ = pred.iter().zip(&gold).filter(|(p, g)| !**p && **g).count();
            let tn = n - tp - fp - fn_;
            assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
            if tp + fp > 0 {
                assert_eq!(m.precision, tp as f64 / (tp + fp) as f64);
            }
            if tp + fn_ > 0 {
                assert_eq!(m.recall, tp as f64 / (tp + fn_) as f64);
            }
            assert_eq!(m.accuracy, (tp + tn) as f64 / n as f64);
        }
    }

    #[test]
    fn statement_template_exact() {
        let s = statement(
            42,
            NodeClass::Pedestrian,
            1,
            RelationType::Near,
            NodeClass::Ego,
            0,
        );
        assert_eq!(s, "At time 42: Pedestrian 1 is near the ego-vehicle.");
    }

    #[test]
    fn statements_parse_round_trip() {
        let cases = [
            (7, NodeClass::Car, 3, RelationType::IsIn, NodeClass::VehicleLane, 0),
            (0, NodeClass::Car, 3, RelationType::Move, NodeClass::Car, 3),
            (3, NodeClass::Cyclist, 2, RelationType::MovingTowards, NodeClass::Ego, 0),
            (9, NodeClass::TrafficLight, 5, RelationType::Red, NodeClass::TrafficLight, 5),
            (1, NodeClass::Ego, 0, RelationType::AvTurnLeft, NodeClass::Ego, 0),
            (2, NodeClass::NearCollision, 8, RelationType::CriticalityLink, NodeClass::Ego, 0),
            (4, NodeClass::Car, 1, RelationType::MustStop, NodeClass::TrafficLight, 9),
            (5, NodeClass::Bus, 4, RelationType::NearCollision, NodeClass::Ego, 0),
        ];
        for (t, sc, st, rel, dc, dt) in cases {
            let s = statement(t, sc, st, rel, dc, dt);
            let (pt, psub, prel, pobj) = parse_statement(&s).unwrap();
            assert_eq!(pt, t, "{s}");
            assert_eq!(psub, (sc, st), "{s}");
            assert_eq!(prel, rel, "{s}");
            assert_eq!(pobj, (dc, dt), "{s}");
        }
    }

    #[test]
    fn factual_scores() {
        let set = |items: &[&str]| -> StatementSet {
            items.iter().map(|s| s.to_string()).collect()
        };
        let gold = set(&["a", "b", "c", "d"]);
        assert_eq!(factual_correctness(&gold, &gold), 1.0);

        let pred = set(&["a", "b", "c", "d", "x"]);
        assert!((factual_correctness(&pred, &gold) - 8.0 / 9.0).abs() < 1e-12);

        let disjoint = set(&["p", "q"]);
        assert_eq!(factual_correctness(&disjoint, &gold), 0.0);

        assert_eq!(factual_correctness(&set(&[]), &set(&[])), 1.0);

        // Symmetry: TP shared, FP/FN swap.
        assert_eq!(
            factual_correctness(&pred, &gold),
            factual_correctness(&gold, &pred)
        );
    }

    #[test]
    fn scr_values() {
        let all = vec![(Criticality::Near, Criticality::Near); 4];
        let r = scenario_consistency_rate(&all).unwrap();
        assert_eq!(r.overall_pct, 100.0);

        let mut results = vec![(Criticality::Visible, Criticality::Visible); 7];
        results.extend(vec![(Criticality::Visible, Criticality::Near); 3]);
        let r = scenario_consistency_rate(&results).unwrap();
        assert_eq!(r.groups.len(), 1);
        assert_eq!(r.groups[0].pct, 70.0);

        // Groups are independent.
        results.extend(vec![(Criticality::Near, Criticality::Near); 2]);
        let r = scenario_consistency_rate(&results).unwrap();
        let vis = r.groups.iter().find(|g| g.requested == Criticality::Visible).unwrap();
        let near = r.groups.iter().find(|g| g.requested == Criticality::Near).unwrap();
        assert_eq!(vis.pct, 70.0);
        assert_eq!(near.pct, 100.0);

        assert!(scenario_consistency_rate(&[]).is_err());
    }

    #[test]
    fn jaccard_scorer() {
        let j = TokenJaccard;
        assert_eq!(j.score("a b c", "a b c"), 1.0);
        assert_eq!(j.score("", ""), 1.0);
        assert!(j.score("car is near", "car is far") > 0.0);
    }
}

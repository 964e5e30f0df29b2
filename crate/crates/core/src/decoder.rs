//! From final hidden states to scene graphs and ranked tuple lists.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, SceneGraphSample};
use crate::error::{Error, Result};
use crate::model::{HiddenState, PredicateModel, ScoreTable};

pub const DEFAULT_TAU: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "predcls")]
    PredCls,
    #[serde(rename = "sgcls")]
    SgCls,
    #[serde(rename = "sggen")]
    SgGen,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::PredCls => "predcls",
            EvalMode::SgCls => "sgcls",
            EvalMode::SgGen => "sggen",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "predcls" => Ok(EvalMode::PredCls),
            "sgcls" => Ok(EvalMode::SgCls),
            "sggen" => Ok(EvalMode::SgGen),
            _ => Err(Error::InvalidArgument(format!("unknown mode `{s}` (expected predcls, sgcls or sggen)"))),
        }
    }
}

/// Combined score `c` of the triple `<subject, predicate, object>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub subject: usize,
    /// Dataset predicate id.
    pub predicate: usize,
    pub object: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedGraph {
    pub node_distributions: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub edges: Vec<EdgeScore>,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedTuple {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub score: f64,
    pub subject_label: usize,
    pub object_label: usize,
    pub subject_box: Option<BBox>,
    pub object_box: Option<BBox>,
}

pub fn classify_nodes(model: &PredicateModel, states: &[HiddenState]) -> Vec<Vec<f64>> {
    let sem: Vec<Vec<f64>> = states.iter().map(|s| s.sem.clone()).collect();
    model.classify(&sem)
}

/// Every off-diagonal `c_ijp`, in `(i, j, p)` order.
pub fn score_all_edges(table: &ScoreTable) -> Vec<EdgeScore> {
    let n = table.n;
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) * table.predicate_ids.len());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            for (slot, &p) in table.predicate_ids.iter().enumerate() {
                out.push(EdgeScore {
                    subject: i,
                    predicate: p,
                    object: j,
                    score: table.combined_at(slot, i, j),
                });
            }
        }
    }
    out
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

pub fn emit_scene_graph(edges: &[EdgeScore], node_distributions: &[Vec<f64>], tau: f64) -> Result<PredictedGraph> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
    }
    Ok(PredictedGraph {
        node_distributions: node_distributions.to_vec(),
        labels: node_distributions.iter().map(|d| argmax(d)).collect(),
        edges: edges.iter().filter(|e| e.score > tau).copied().collect(),
        threshold: tau,
    })
}

/// Sorts by score descending, then `(subject, object, predicate)` ascending.
pub fn sort_tuples(tuples: &mut [RankedTuple]) {
    tuples.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.subject.cmp(&b.subject))
            .then(a.object.cmp(&b.object))
            .then(a.predicate.cmp(&b.predicate))
    });
}

pub fn rank_predictions(
    edges: &[EdgeScore],
    node_distributions: &[Vec<f64>],
    mode: EvalMode,
    sample: &SceneGraphSample,
) -> Result<Vec<RankedTuple>> {
    let n = sample.proposals.len();
    if node_distributions.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} node distributions for {n} proposals in `{}`",
            node_distributions.len(),
            sample.sample_id
        )));
    }
    let (labels, probs): (Vec<usize>, Vec<f64>) = match mode {
        EvalMode::PredCls => {
            let mut labels = Vec::with_capacity(n);
            for (i, p) in sample.proposals.iter().enumerate() {
                let c = p.category.ok_or_else(|| {
                    Error::validation(&sample.sample_id, format!("proposals[{i}].category"), "PredCls needs ground-truth categories")
                })?;
                labels.push(c);
            }
            (labels, vec![1.0; n])
        }
        EvalMode::SgCls | EvalMode::SgGen => node_distributions
            .iter()
            .map(|d| {
                let k = argmax(d);
                (k, d[k])
            })
            .unzip(),
    };
    let with_boxes = mode == EvalMode::SgGen;
    let mut out: Vec<RankedTuple> = edges
        .iter()
        .map(|e| RankedTuple {
            subject: e.subject,
            predicate: e.predicate,
            object: e.object,
            score: e.score * probs[e.subject] * probs[e.object],
            subject_label: labels[e.subject],
            object_label: labels[e.object],
            subject_box: with_boxes.then(|| sample.proposals[e.subject].bbox),
            object_box: with_boxes.then(|| sample.proposals[e.object].bbox),
        })
        .collect();
    sort_tuples(&mut out);
    Ok(out)
}

/// One line of the prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub mode: EvalMode,
    /// `[subject, predicate, object, score]`.
    pub tuples: Vec<(usize, usize, usize, f64)>,
    pub labels: Vec<usize>,
}

impl PredictionRecord {
    pub fn new(id: &str, mode: EvalMode, ranked: &[RankedTuple], labels: Vec<usize>) -> Self {
        PredictionRecord {
            id: id.to_string(),
            mode,
            tuples: ranked.iter().map(|t| (t.subject, t.predicate, t.object, t.score)).collect(),
            labels,
        }
    }
}

pub fn write_predictions(out: &mut dyn Write, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<predictions>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::ObjectProposal;

    fn sample(n: usize) -> SceneGraphSample {
        SceneGraphSample {
            sample_id: "s".into(),
            proposals: (0..n)
                .map(|i| ObjectProposal {
                    bbox: BBox::new(0.0, 0.0, 0.5, 0.5 + 0.1 * i as f64),
                    category: Some(i % 2),
                    feature: None,
                })
                .collect(),
            relationships: vec![],
        }
    }

    fn e(subject: usize, predicate: usize, object: usize, score: f64) -> EdgeScore {
        EdgeScore {
            subject,
            predicate,
            object,
            score,
        }
    }

    #[test]
    fn threshold_examples() {
        let d = vec![vec![0.5, 0.5]; 2];
        let edges = [e(0, 0, 1, 0.3), e(0, 1, 1, 0.2), e(1, 0, 0, 0.9)];
        assert_eq!(emit_scene_graph(&edges, &d, 0.25).unwrap().edges.len(), 2);
        assert!(emit_scene_graph(&edges, &d, 1.0).unwrap().edges.is_empty());
        assert_eq!(emit_scene_graph(&edges, &d, 0.0).unwrap().edges.len(), 3);
        assert!(emit_scene_graph(&edges, &d, 1.5).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn predcls_orders_by_score() {
        let d = vec![vec![0.5, 0.5]; 2];
        let r = rank_predictions(&[e(0, 1, 1, 0.4), e(0, 0, 1, 0.9)], &d, EvalMode::PredCls, &sample(2)).unwrap();
        assert_eq!(r.iter().map(|t| t.predicate).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(r[0].subject_label, 0);
        assert_eq!(r[0].object_label, 1);
    }

    #[test]
    fn sgcls_with_flat_probabilities_matches_predcls_order() {
        let d = vec![vec![0.5, 0.5]; 3];
        let edges = [e(0, 0, 1, 0.3), e(1, 0, 2, 0.7), e(2, 1, 0, 0.3), e(0, 1, 2, 0.5)];
        let a = rank_predictions(&edges, &d, EvalMode::PredCls, &sample(3)).unwrap();
        let b = rank_predictions(&edges, &d, EvalMode::SgCls, &sample(3)).unwrap();
        let key = |v: &[RankedTuple]| v.iter().map(|t| (t.subject, t.predicate, t.object)).collect::<Vec<_>>();
        assert_eq!(key(&a), key(&b));
        assert!((b[0].score - 0.7 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_subject_object_predicate() {
        let d = vec![vec![1.0, 0.0]; 3];
        let edges = [e(1, 0, 0, 0.5), e(0, 1, 2, 0.5), e(0, 0, 2, 0.5), e(0, 3, 1, 0.5)];
        let r = rank_predictions(&edges, &d, EvalMode::SgCls, &sample(3)).unwrap();
        let order: Vec<_> = r.iter().map(|t| (t.subject, t.object, t.predicate)).collect();
        assert_eq!(order, vec![(0, 1, 3), (0, 2, 0), (0, 2, 1), (1, 0, 0)]);
    }

    #[test]
    fn sggen_records_boxes_and_predcls_requires_labels() {
        let d = vec![vec![0.9, 0.1]; 2];
        let r = rank_predictions(&[e(0, 0, 1, 0.5)], &d, EvalMode::SgGen, &sample(2)).unwrap();
        assert_eq!(r[0].object_box, Some(sample(2).proposals[1].bbox));
        let mut s = sample(2);
        s.proposals[1].category = None;
        assert!(rank_predictions(&[e(0, 0, 1, 0.5)], &d, EvalMode::PredCls, &s).is_err());
    }

    #[test]
    fn mode_parses_and_dump_is_json_lines() {
        assert_eq!("PredCls".parse::<EvalMode>().unwrap(), EvalMode::PredCls);
        assert!("bogus".parse::<EvalMode>().is_err());
        let d = vec![vec![0.5, 0.5]; 2];
        let r = rank_predictions(&[e(0, 0, 1, 0.5)], &d, EvalMode::PredCls, &sample(2)).unwrap();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &[PredictionRecord::new("s", EvalMode::PredCls, &r, vec![0, 1])]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "{\"id\":\"s\",\"mode\":\"predcls\",\"tuples\":[[0,0,1,0.5]],\"labels\":[0,1]}\n");
    }
}

//! Macro recall@K for the three evaluation protocols.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use rayon::prelude::*;

use crate::datamodel::{BBox, SceneGraphSample};
use crate::decoder::{argmax, classify_nodes, rank_predictions, score_all_edges, EvalMode, PredictionRecord, RankedTuple};
use crate::error::{Error, Result};
use crate::model::{FeatureProvider, PredicateModel};
use crate::seeds::derive_seed;

pub const LOCALIZATION_IOU: f64 = 0.5;

pub fn exact_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A ground-truth triple with the node labels and boxes needed by every mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtTriple {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    pub subject_label: usize,
    pub object_label: usize,
    pub subject_box: BBox,
    pub object_box: BBox,
}

/// Ground truth of a sample, optionally restricted to a predicate subset.
pub fn gt_triples(sample: &SceneGraphSample, keep: impl Fn(usize) -> bool) -> Result<Vec<GtTriple>> {
    sample
        .relationships
        .iter()
        .filter(|r| keep(r.predicate_id))
        .map(|r| {
            let label = |i: usize| {
                sample.proposals[i].category.ok_or_else(|| {
                    Error::validation(&sample.sample_id, format!("proposals[{i}].category"), "ground-truth category required for evaluation")
                })
            };
            Ok(GtTriple {
                subject: r.subject_idx,
                predicate: r.predicate_id,
                object: r.object_idx,
                subject_label: label(r.subject_idx)?,
                object_label: label(r.object_idx)?,
                subject_box: sample.proposals[r.subject_idx].bbox,
                object_box: sample.proposals[r.object_idx].bbox,
            })
        })
        .collect()
}

pub fn matches(mode: EvalMode, pred: &RankedTuple, gt: &GtTriple) -> bool {
    if pred.predicate != gt.predicate {
        return false;
    }
    let same_nodes = pred.subject == gt.subject && pred.object == gt.object;
    let same_labels = pred.subject_label == gt.subject_label && pred.object_label == gt.object_label;
    match mode {
        EvalMode::PredCls => same_nodes,
        EvalMode::SgCls => same_nodes && same_labels,
        EvalMode::SgGen => {
            let located = |b: Option<BBox>, g: &BBox| b.is_some_and(|b| exact_iou(&b, g) >= LOCALIZATION_IOU);
            same_labels && located(pred.subject_box, &gt.subject_box) && located(pred.object_box, &gt.object_box)
        }
    }
}

/// Ranked predictions and ground truth of one image.
#[derive(Clone, Debug)]
pub struct ImageEval {
    pub id: String,
    pub ranked: Vec<RankedTuple>,
    pub gt: Vec<GtTriple>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecall {
    pub id: String,
    pub gt: usize,
    pub matched: BTreeMap<String, usize>,
    pub recall: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mode: EvalMode,
    pub k_values: Vec<usize>,
    /// Macro mean over images with ground truth, keyed `recall@K`.
    pub recall: BTreeMap<String, f64>,
    pub gt_triples: usize,
    pub matched: BTreeMap<String, usize>,
    pub images: usize,
    pub excluded_images: usize,
    pub per_image: Vec<ImageRecall>,
}

impl EvalResult {
    pub fn at(&self, k: usize) -> f64 {
        self.recall[&recall_key(k)]
    }
}

pub fn recall_key(k: usize) -> String {
    format!("recall@{k}")
}

/// Number of GT triples matched by at least one of the first `k` predictions.
pub fn matched_in_top_k(mode: EvalMode, ranked: &[RankedTuple], gt: &[GtTriple], k: usize) -> usize {
    let top = &ranked[..k.min(ranked.len())];
    gt.iter().filter(|g| top.iter().any(|p| matches(mode, p, g))).count()
}

pub fn recall_at_k(images: &[ImageEval], k_values: &[usize], mode: EvalMode) -> Result<EvalResult> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(Error::InvalidArgument("K values must be positive".into()));
    }
    let mut per_image = Vec::new();
    let mut excluded = 0;
    for img in images {
        if img.gt.is_empty() {
            excluded += 1;
            continue;
        }
        let mut matched = BTreeMap::new();
        let mut recall = BTreeMap::new();
        for &k in k_values {
            let m = matched_in_top_k(mode, &img.ranked, &img.gt, k);
            matched.insert(recall_key(k), m);
            recall.insert(recall_key(k), m as f64 / img.gt.len() as f64);
        }
        per_image.push(ImageRecall {
            id: img.id.clone(),
            gt: img.gt.len(),
            matched,
            recall,
        });
    }
    if per_image.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut recall = BTreeMap::new();
    let mut matched = BTreeMap::new();
    for &k in k_values {
        let key = recall_key(k);
        // sorted so the mean does not depend on image order
        let mut vals: Vec<f64> = per_image.iter().map(|r| r.recall[&key]).collect();
        vals.sort_by(f64::total_cmp);
        recall.insert(key.clone(), vals.iter().sum::<f64>() / vals.len() as f64);
        matched.insert(key.clone(), per_image.iter().map(|r| r.matched[&key]).sum());
    }
    Ok(EvalResult {
        mode,
        k_values: k_values.to_vec(),
        recall,
        gt_triples: per_image.iter().map(|r| r.gt).sum(),
        matched,
        images: per_image.len(),
        excluded_images: excluded,
        per_image,
    })
}

/// How the evaluation set is decoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub k_values: Vec<usize>,
    /// SGGen only: each proposal box edge is moved by up to this fraction of
    /// the box size before decoding, so localization is actually tested.
    pub proposal_jitter: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::PredCls,
            k_values: vec![50, 100],
            proposal_jitter: 0.0,
            seed: 0,
        }
    }
}

fn jitter_sample(sample: &SceneGraphSample, amount: f64, seed: u64) -> SceneGraphSample {
    use rand::Rng;
    let mut rng = crate::params::rng_for(seed);
    let mut out = sample.clone();
    for p in &mut out.proposals {
        let (w, h) = (p.bbox.width(), p.bbox.height());
        let mut d = || rng.random_range(-amount..=amount);
        let x1 = (p.bbox.x1 + d() * w).clamp(0.0, 1.0);
        let y1 = (p.bbox.y1 + d() * h).clamp(0.0, 1.0);
        let x2 = (p.bbox.x2 + d() * w).clamp(0.0, 1.0);
        let y2 = (p.bbox.y2 + d() * h).clamp(0.0, 1.0);
        if x1 < x2 && y1 < y2 {
            p.bbox = BBox::new(x1, y1, x2, y2);
        }
    }
    out
}

/// Decodes every sample and scores the rankings. Ground truth is restricted
/// to the predicates the model serves.
pub fn evaluate(
    model: &PredicateModel,
    samples: &[SceneGraphSample],
    provider: &dyn FeatureProvider,
    opts: &EvalOptions,
) -> Result<(EvalResult, Vec<PredictionRecord>)> {
    let decoded: Vec<Result<(ImageEval, PredictionRecord)>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, sample)| {
            let input = if opts.mode == EvalMode::SgGen && opts.proposal_jitter > 0.0 {
                jitter_sample(sample, opts.proposal_jitter, derive_seed(opts.seed, &[idx as u64]))
            } else {
                sample.clone()
            };
            let out = model.forward_sample(&input, provider)?;
            let dists = classify_nodes(model, &out.states);
            let edges = score_all_edges(&out.scores);
            let ranked = rank_predictions(&edges, &dists, opts.mode, &input)?;
            let labels = ranked_labels(opts.mode, &input, &dists);
            let gt = gt_triples(sample, |p| model.slot_of(p).is_some())?;
            let record = PredictionRecord::new(&sample.sample_id, opts.mode, &ranked, labels);
            Ok((
                ImageEval {
                    id: sample.sample_id.clone(),
                    ranked,
                    gt,
                },
                record,
            ))
        })
        .collect();
    let mut images = Vec::with_capacity(decoded.len());
    let mut records = Vec::with_capacity(decoded.len());
    for d in decoded {
        let (img, rec) = d?;
        images.push(img);
        records.push(rec);
    }
    Ok((recall_at_k(&images, &opts.k_values, opts.mode)?, records))
}

fn ranked_labels(mode: EvalMode, sample: &SceneGraphSample, dists: &[Vec<f64>]) -> Vec<usize> {
    match mode {
        EvalMode::PredCls => sample.proposals.iter().map(|p| p.category.unwrap_or(0)).collect(),
        _ => dists.iter().map(|d| argmax(d)).collect(),
    }
}

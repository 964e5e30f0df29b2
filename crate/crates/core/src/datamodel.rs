//! Dataset types, the JSON dataset format, validation, the frequent/rare
//! predicate split and k-shot episode sampling.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateVocabulary {
    #[serde(rename = "objects")]
    pub object_categories: Vec<String>,
    pub predicates: Vec<String>,
    /// Predicates the graph model is trained on, ascending.
    #[serde(rename = "frequent")]
    pub frequent_ids: Vec<usize>,
    /// Predicates learned few-shot, ascending.
    #[serde(rename = "rare")]
    pub rare_ids: Vec<usize>,
}

impl PredicateVocabulary {
    pub fn n_categories(&self) -> usize {
        self.object_categories.len()
    }

    pub fn n_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_rare(&self, p: usize) -> bool {
        self.rare_ids.binary_search(&p).is_ok()
    }

    pub fn is_frequent(&self, p: usize) -> bool {
        self.frequent_ids.binary_search(&p).is_ok()
    }

    pub fn predicate_id(&self, name: &str) -> Result<usize> {
        self.predicates
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::NotFound(format!("predicate `{name}`")))
    }

    pub fn category_id(&self, name: &str) -> Result<usize> {
        self.object_categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::NotFound(format!("object category `{name}`")))
    }

    fn validate(&self) -> Result<()> {
        let v = |field: &str, msg: String| Error::validation("<vocabulary>", field, msg);
        for (field, names) in [("objects", &self.object_categories), ("predicates", &self.predicates)] {
            let mut seen = HashSet::new();
            for (i, n) in names.iter().enumerate() {
                if n.is_empty() {
                    return Err(v(field, format!("entry {i} is empty")));
                }
                if !seen.insert(n.as_str()) {
                    return Err(v(field, format!("duplicate name `{n}`")));
                }
            }
        }
        let np = self.predicates.len();
        let mut covered = vec![false; np];
        for (field, ids) in [("frequent", &self.frequent_ids), ("rare", &self.rare_ids)] {
            if ids.windows(2).any(|w| w[0] >= w[1]) {
                return Err(v(field, "indices must be strictly ascending".into()));
            }
            for &p in ids {
                if p >= np {
                    return Err(v(field, format!("predicate index {p} out of range ({np} predicates)")));
                }
                if covered[p] {
                    return Err(v(field, format!("predicate {p} is both frequent and rare")));
                }
                covered[p] = true;
            }
        }
        if let Some(p) = covered.iter().position(|c| !c) {
            return Err(v("frequent", format!("predicate {p} is neither frequent nor rare")));
        }
        Ok(())
    }
}

/// Axis-aligned box in normalized image coordinates, `y` pointing down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        let c = [self.x1, self.y1, self.x2, self.y2];
        c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && self.x1 < self.x2 && self.y1 < self.y2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub bbox: BBox,
    #[serde(default)]
    pub category: Option<usize>,
    #[serde(default)]
    pub feature: Option<Vec<f64>>,
}

/// A ground-truth `<subject, predicate, object>` triple over proposal indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Relationship {
    pub subject_idx: usize,
    pub predicate_id: usize,
    pub object_idx: usize,
}

impl From<[usize; 3]> for Relationship {
    fn from(a: [usize; 3]) -> Self {
        Relationship {
            subject_idx: a[0],
            predicate_id: a[1],
            object_idx: a[2],
        }
    }
}

impl From<Relationship> for [usize; 3] {
    fn from(r: Relationship) -> Self {
        [r.subject_idx, r.predicate_id, r.object_idx]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphSample {
    #[serde(rename = "id")]
    pub sample_id: String,
    pub proposals: Vec<ObjectProposal>,
    #[serde(default)]
    pub relationships: Vec<Relationship>,
}

impl SceneGraphSample {
    pub fn n_nodes(&self) -> usize {
        self.proposals.len()
    }

    pub fn categories(&self) -> Vec<Option<usize>> {
        self.proposals.iter().map(|p| p.category).collect()
    }

    fn validate(&self, vocab: &PredicateVocabulary, feature_dim: &mut Option<usize>) -> Result<()> {
        let id = self.sample_id.as_str();
        if self.proposals.is_empty() {
            return Err(Error::validation(id, "proposals", "sample has no proposals"));
        }
        for (i, p) in self.proposals.iter().enumerate() {
            if !p.bbox.is_valid() {
                return Err(Error::validation(
                    id,
                    format!("proposals[{i}].bbox"),
                    format!("invalid box {:?}; need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1", <[f64; 4]>::from(p.bbox)),
                ));
            }
            if let Some(c) = p.category {
                if c >= vocab.n_categories() {
                    return Err(Error::validation(
                        id,
                        format!("proposals[{i}].category"),
                        format!("category {c} out of range ({} categories)", vocab.n_categories()),
                    ));
                }
            }
            if let Some(f) = &p.feature {
                let d = *feature_dim.get_or_insert(f.len());
                if f.len() != d {
                    return Err(Error::validation(
                        id,
                        format!("proposals[{i}].feature"),
                        format!("feature length {} differs from dataset dimension {d}", f.len()),
                    ));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation(id, format!("proposals[{i}].feature"), "non-finite value"));
                }
            }
        }
        let n = self.proposals.len();
        let mut seen = HashSet::new();
        for (k, r) in self.relationships.iter().enumerate() {
            let field = format!("relationships[{k}]");
            if r.subject_idx >= n || r.object_idx >= n {
                return Err(Error::validation(id, field, format!("node index out of range ({n} proposals)")));
            }
            if r.subject_idx == r.object_idx {
                return Err(Error::validation(id, field, "subject and object are the same node"));
            }
            if r.predicate_id >= vocab.n_predicates() {
                return Err(Error::validation(
                    id,
                    field,
                    format!("predicate {} out of range ({} predicates)", r.predicate_id, vocab.n_predicates()),
                ));
            }
            if !seen.insert(*r) {
                return Err(Error::validation(id, field, "duplicate relationship"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<SceneGraphSample>,
    #[serde(default)]
    pub val: Vec<SceneGraphSample>,
    #[serde(default)]
    pub test: Vec<SceneGraphSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub vocabulary: PredicateVocabulary,
    pub splits: Splits,
    /// Settings of the tool that produced the file, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneGraphSample] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn find_sample(&self, split: Split, id: &str) -> Result<&SceneGraphSample> {
        self.split(split)
            .iter()
            .find(|s| s.sample_id == id)
            .ok_or_else(|| Error::NotFound(format!("sample `{id}`")))
    }

    /// Length of the stored proposal features, if any proposal carries one.
    pub fn feature_dim(&self) -> Option<usize> {
        [&self.splits.train, &self.splits.val, &self.splits.test]
            .into_iter()
            .flatten()
            .flat_map(|s| &s.proposals)
            .find_map(|p| p.feature.as_ref().map(Vec::len))
    }

    pub fn validate(&self) -> Result<()> {
        self.vocabulary.validate()?;
        let mut dim = None;
        for samples in [&self.splits.train, &self.splits.val, &self.splits.test] {
            let mut ids = HashSet::new();
            for s in samples {
                if !ids.insert(s.sample_id.as_str()) {
                    return Err(Error::validation(&s.sample_id, "id", "duplicate sample id within split"));
                }
                s.validate(&self.vocabulary, &mut dim)?;
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("dataset serialization cannot fail")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Number of training relationships per predicate.
    pub fn train_predicate_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocabulary.n_predicates()];
        for s in &self.splits.train {
            for r in &s.relationships {
                counts[r.predicate_id] += 1;
            }
        }
        counts
    }
}

/// Reads and fully validates a dataset file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_json(&text)
}

/// The `n_frequent` predicates with the largest counts (ties broken by
/// ascending index) and the remainder. Both lists ascending.
pub fn split_predicates(counts: &[u64], n_frequent: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_frequent > counts.len() {
        return Err(Error::InvalidArgument(format!(
            "n_frequent = {n_frequent} exceeds the number of predicates ({})",
            counts.len()
        )));
    }
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let frequent: BTreeSet<usize> = order[..n_frequent].iter().copied().collect();
    let rare = (0..counts.len()).filter(|p| !frequent.contains(p)).collect();
    Ok((frequent.into_iter().collect(), rare))
}

/// Reference to a `<subject, object>` pair inside a sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    pub sample_id: String,
    pub subject_idx: usize,
    pub object_idx: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RarePredicateShots {
    pub predicate: usize,
    pub instances: Vec<PairRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub sample_id: String,
    pub subject_idx: usize,
    pub object_idx: usize,
    pub predicate: usize,
}

/// k labelled training instances per rare predicate plus every rare-predicate
/// relationship of the test split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotEpisode {
    pub k: usize,
    pub seed: u64,
    pub rare_ids: Vec<usize>,
    pub train_instances: Vec<RarePredicateShots>,
    pub eval_pairs: Vec<EvalPair>,
}

impl FewShotEpisode {
    pub fn n_train(&self) -> usize {
        self.train_instances.iter().map(|s| s.instances.len()).sum()
    }
}

pub fn sample_k_shot_episode(dataset: &Dataset, k: usize, seed: u64) -> Result<FewShotEpisode> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let vocab = &dataset.vocabulary;
    let mut train_instances = Vec::with_capacity(vocab.rare_ids.len());
    for &p in &vocab.rare_ids {
        let mut pool: Vec<PairRef> = dataset
            .splits
            .train
            .iter()
            .flat_map(|s| {
                s.relationships.iter().filter(move |r| r.predicate_id == p).map(move |r| PairRef {
                    sample_id: s.sample_id.clone(),
                    subject_idx: r.subject_idx,
                    object_idx: r.object_idx,
                })
            })
            .collect();
        if pool.len() < k {
            return Err(Error::InsufficientInstances {
                predicate: vocab.predicates[p].clone(),
                available: pool.len(),
                requested: k,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[p as u64]));
        let (chosen, _) = pool.partial_shuffle(&mut rng, k);
        let instances = chosen.to_vec();
        train_instances.push(RarePredicateShots { predicate: p, instances });
    }
    let eval_pairs = dataset
        .splits
        .test
        .iter()
        .flat_map(|s| {
            s.relationships
                .iter()
                .filter(|r| vocab.is_rare(r.predicate_id))
                .map(move |r| EvalPair {
                    sample_id: s.sample_id.clone(),
                    subject_idx: r.subject_idx,
                    object_idx: r.object_idx,
                    predicate: r.predicate_id,
                })
        })
        .collect();
    Ok(FewShotEpisode {
        k,
        seed,
        rare_ids: vocab.rare_ids.clone(),
        train_instances,
        eval_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json(rels: &str) -> String {
        format!(
            r#"{{"vocabulary": {{"objects": ["person", "horse"], "predicates": ["riding", "near"],
                "frequent": [0], "rare": [1]}},
              "splits": {{"train": [{{"id": "s0", "proposals": [
                  {{"bbox": [0.1, 0.1, 0.4, 0.5], "category": 0, "feature": [1.0, 0.0]}},
                  {{"bbox": [0.1, 0.5, 0.5, 0.9], "category": 1, "feature": null}}],
                "relationships": {rels}}}]}}}}"#
        )
    }

    #[test]
    fn loads_minimal_dataset() {
        let ds = Dataset::from_json(&minimal_json("[[0, 0, 1]]")).unwrap();
        assert_eq!(ds.splits.train.len(), 1);
        assert!(ds.splits.val.is_empty());
        assert_eq!(ds.splits.train[0].relationships[0].predicate_id, 0);
        assert_eq!(ds.feature_dim(), Some(2));
    }

    #[test]
    fn rejects_self_loop() {
        let err = Dataset::from_json(&minimal_json("[[1, 0, 1]]")).unwrap_err();
        match err {
            Error::Validation { sample, field, .. } => {
                assert_eq!(sample, "s0");
                assert_eq!(field, "relationships[0]");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_triples_and_bad_boxes() {
        assert!(matches!(
            Dataset::from_json(&minimal_json("[[0, 0, 1], [0, 0, 1]]")),
            Err(Error::Validation { .. })
        ));
        let bad = minimal_json("[]").replace("[0.1, 0.1, 0.4, 0.5]", "[0.4, 0.1, 0.1, 0.5]");
        let err = Dataset::from_json(&bad).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "proposals[0].bbox"));
    }

    #[test]
    fn rejects_malformed_json() {
        assert!(matches!(Dataset::from_json("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn accepts_visual_genome_sized_vocabulary() {
        let objects: Vec<String> = (0..150).map(|i| format!("obj{i}")).collect();
        let predicates: Vec<String> = (0..50).map(|i| format!("pred{i}")).collect();
        let ds = Dataset {
            vocabulary: PredicateVocabulary {
                object_categories: objects,
                predicates,
                frequent_ids: (0..25).collect(),
                rare_ids: (25..50).collect(),
            },
            splits: Splits {
                train: vec![SceneGraphSample {
                    sample_id: "a".into(),
                    proposals: vec![
                        ObjectProposal { bbox: BBox::new(0.0, 0.0, 0.5, 0.5), category: Some(149), feature: None },
                        ObjectProposal { bbox: BBox::new(0.5, 0.5, 1.0, 1.0), category: Some(0), feature: None },
                    ],
                    relationships: vec![[0, 49, 1].into()],
                }],
                ..Default::default()
            },
            generator: None,
        };
        let back = Dataset::from_json(&ds.to_json()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn vocabulary_must_partition_predicates() {
        let overlap = minimal_json("[]").replace(r#""rare": [1]"#, r#""rare": [0, 1]"#);
        assert!(Dataset::from_json(&overlap).is_err());
        let missing = minimal_json("[]").replace(r#""rare": [1]"#, r#""rare": []"#);
        assert!(Dataset::from_json(&missing).is_err());
    }

    #[test]
    fn split_predicates_examples() {
        assert_eq!(split_predicates(&[10, 5, 7, 1], 2).unwrap(), (vec![0, 2], vec![1, 3]));
        assert_eq!(split_predicates(&[4, 4, 1], 1).unwrap(), (vec![0], vec![1, 2]));
        let counts: Vec<u64> = (0..50).map(|i| (i * 37 % 101) as u64).collect();
        let (f, r) = split_predicates(&counts, 25).unwrap();
        assert_eq!((f.len(), r.len()), (25, 25));
        assert!(split_predicates(&[1, 2], 3).is_err());
    }

    fn episode_dataset() -> Dataset {
        let mut train = Vec::new();
        for s in 0..6 {
            train.push(SceneGraphSample {
                sample_id: format!("t{s}"),
                proposals: vec![
                    ObjectProposal { bbox: BBox::new(0.0, 0.0, 0.5, 0.5), category: Some(0), feature: None },
                    ObjectProposal { bbox: BBox::new(0.5, 0.5, 1.0, 1.0), category: Some(1), feature: None },
                ],
                relationships: (1..5).map(|p| [0, p, 1].into()).collect(),
            });
        }
        let mut test = train.clone();
        for (i, s) in test.iter_mut().enumerate() {
            s.sample_id = format!("e{i}");
        }
        Dataset {
            vocabulary: PredicateVocabulary {
                object_categories: vec!["a".into(), "b".into()],
                predicates: (0..5).map(|i| format!("p{i}")).collect(),
                frequent_ids: vec![0],
                rare_ids: vec![1, 2, 3, 4],
            },
            splits: Splits { train, val: vec![], test },
            generator: None,
        }
    }

    #[test]
    fn episode_counts_and_determinism() {
        let ds = episode_dataset();
        let ep = sample_k_shot_episode(&ds, 1, 3).unwrap();
        assert_eq!(ep.n_train(), 4);
        assert_eq!(ep.eval_pairs.len(), 24);
        assert_eq!(ep, sample_k_shot_episode(&ds, 1, 3).unwrap());
        for k in 1..=5 {
            let ep = sample_k_shot_episode(&ds, k, 11).unwrap();
            assert!(ep.train_instances.iter().all(|s| s.instances.len() == k));
            // drawn without replacement
            for shots in &ep.train_instances {
                let ids: HashSet<_> = shots.instances.iter().map(|i| &i.sample_id).collect();
                assert_eq!(ids.len(), k);
            }
        }
    }

    #[test]
    fn episode_rejects_too_few_instances() {
        let ds = episode_dataset();
        match sample_k_shot_episode(&ds, 7, 0) {
            Err(Error::InsufficientInstances { predicate, .. }) => assert_eq!(predicate, "p1"),
            other => panic!("unexpected {other:?}"),
        }
    }
}

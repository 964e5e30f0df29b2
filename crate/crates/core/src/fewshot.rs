//! k-shot classification of rare predicates from frozen hidden states.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, Tape, Tensor};
use crate::datamodel::{Dataset, FewShotEpisode, SceneGraphSample, Split};
use crate::decoder::{argmax, sort_tuples, EvalMode, RankedTuple};
use crate::error::{Error, Result};
use crate::metrics::{recall_at_k, GtTriple, ImageEval};
use crate::model::{init_hidden, FeatureProvider, HiddenState, PredicateModel, ScoreTable};
use crate::params::{mlp_forward, rng_for, Dense, Init, ParamGroup, ParamStore};
use crate::trainer::{Optimizer, OptimizerKind};

/// Where pair features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    /// Final hidden states of the frozen graph network.
    Frozen,
    /// Input features and masks, without message passing.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub max_steps: usize,
    /// Stop once the loss changes by less than this between steps.
    pub tolerance: f64,
    /// Average-pool masks to this side length before flattening.
    pub pool_to: Option<usize>,
    /// Append every frequent predicate's forward and backward score of the pair.
    pub expand_scores: bool,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            hidden: 32,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            max_steps: 500,
            tolerance: 1e-5,
            pool_to: None,
            expand_scores: false,
            seed: 0,
        }
    }
}

impl FewShotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 || self.max_steps < 1 {
            return Err(Error::Config("few-shot hidden size and max_steps must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("few-shot learning_rate must be positive".into()));
        }
        if self.pool_to == Some(0) {
            return Err(Error::Config("pool_to must be positive".into()));
        }
        Ok(())
    }
}

/// Average-pools an `L x L` map to `side x side` by cell-centre binning.
pub fn pool_map(map: &[f64], side: usize) -> Vec<f64> {
    let l = (map.len() as f64).sqrt().round() as usize;
    if side >= l {
        return map.to_vec();
    }
    let mut sum = vec![0.0; side * side];
    let mut cnt = vec![0usize; side * side];
    for r in 0..l {
        for c in 0..l {
            let k = (r * side / l) * side + c * side / l;
            sum[k] += map[r * l + c];
            cnt[k] += 1;
        }
    }
    sum.iter().zip(&cnt).map(|(s, &n)| s / n as f64).collect()
}

/// `[h_s.sem ; flat(h_s.spa) ; h_o.sem ; flat(h_o.spa)]`.
pub fn pair_representation(states: &[HiddenState], subject: usize, object: usize) -> Result<Vec<f64>> {
    pair_representation_with(states, subject, object, None)
}

pub fn pair_representation_with(states: &[HiddenState], subject: usize, object: usize, pool_to: Option<usize>) -> Result<Vec<f64>> {
    let n = states.len();
    if subject >= n || object >= n {
        return Err(Error::InvalidArgument(format!("pair ({subject}, {object}) out of range for {n} nodes")));
    }
    let mut out = Vec::new();
    for &i in &[subject, object] {
        out.extend_from_slice(&states[i].sem);
        match pool_to {
            Some(side) => out.extend(pool_map(&states[i].spa, side)),
            None => out.extend_from_slice(&states[i].spa),
        }
    }
    Ok(out)
}

/// Per-sample node states and scores, computed once.
struct Encoded {
    states: Vec<HiddenState>,
    scores: Option<ScoreTable>,
}

/// Extracts pair features from one representation of a set of samples.
pub struct PairEncoder<'a> {
    model: &'a PredicateModel,
    provider: &'a dyn FeatureProvider,
    representation: Representation,
    cfg: FewShotConfig,
    cache: HashMap<String, Encoded>,
}

impl<'a> PairEncoder<'a> {
    pub fn new(model: &'a PredicateModel, provider: &'a dyn FeatureProvider, representation: Representation, cfg: &FewShotConfig) -> Self {
        PairEncoder {
            model,
            provider,
            representation,
            cfg: cfg.clone(),
            cache: HashMap::new(),
        }
    }

    /// Encodes `samples` in parallel and caches the results.
    pub fn encode_all(&mut self, samples: &[&SceneGraphSample]) -> Result<()> {
        let todo: Vec<&SceneGraphSample> = samples.iter().copied().filter(|s| !self.cache.contains_key(&s.sample_id)).collect();
        let encoded: Vec<Result<Encoded>> = todo.par_iter().map(|s| self.encode(s)).collect();
        for (s, e) in todo.iter().zip(encoded) {
            self.cache.insert(s.sample_id.clone(), e?);
        }
        Ok(())
    }

    fn encode(&self, sample: &SceneGraphSample) -> Result<Encoded> {
        let side = self.model.config().mask_resolution;
        let needs_scores = self.cfg.expand_scores;
        match self.representation {
            Representation::Frozen => {
                let out = self.model.forward_sample(sample, self.provider)?;
                Ok(Encoded {
                    states: out.states,
                    scores: needs_scores.then_some(out.scores),
                })
            }
            Representation::Raw => {
                let states = init_hidden(sample, self.provider, side)?;
                let scores = if needs_scores { Some(self.model.forward_sample(sample, self.provider)?.scores) } else { None };
                Ok(Encoded { states, scores })
            }
        }
    }

    pub fn pair(&mut self, sample: &SceneGraphSample, subject: usize, object: usize) -> Result<Vec<f64>> {
        if !self.cache.contains_key(&sample.sample_id) {
            let e = self.encode(sample)?;
            self.cache.insert(sample.sample_id.clone(), e);
        }
        let e = &self.cache[&sample.sample_id];
        let mut v = pair_representation_with(&e.states, subject, object, self.cfg.pool_to)?;
        if let Some(table) = &e.scores {
            let last = table.iterations.last().expect("at least one iteration");
            let n = table.n;
            for ps in last {
                v.push(ps.forward.blend[subject * n + object]);
                v.push(ps.backward.as_ref().map_or(0.0, |b| b.blend[object * n + subject]));
            }
        }
        Ok(v)
    }
}

/// Two-layer MLP over pair features with a softmax over rare predicates.
#[derive(Clone, Debug)]
pub struct FewShotClassifier {
    pub rare_ids: Vec<usize>,
    pub input_dim: usize,
    params: ParamStore,
    layers: Vec<Dense>,
    pub steps: usize,
    pub final_loss: f64,
}

impl FewShotClassifier {
    pub fn new(input_dim: usize, rare_ids: Vec<usize>, cfg: &FewShotConfig) -> Self {
        let mut params = ParamStore::default();
        let mut rng = rng_for(cfg.seed);
        let layers = vec![
            Dense::new(&mut params, "fewshot.0", ParamGroup::NodeClassifier, input_dim, cfg.hidden, Init::HeUniform, &mut rng),
            Dense::new(&mut params, "fewshot.1", ParamGroup::NodeClassifier, cfg.hidden, rare_ids.len(), Init::HeUniform, &mut rng),
        ];
        FewShotClassifier {
            rare_ids,
            input_dim,
            params,
            layers,
            steps: 0,
            final_loss: f64::NAN,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Class distributions for each input row.
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if x.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_rows(x));
        let logits = mlp_forward(&self.layers, &self.params, &mut tape, v);
        tape.value(logits).to_rows().iter().map(|r| softmax(r)).collect()
    }

    /// Full-batch training on `(features, class index)` pairs.
    pub fn fit(&mut self, x: &[Vec<f64>], y: &[usize], cfg: &FewShotConfig) -> Result<()> {
        let data = Tensor::from_rows(x);
        let targets: Vec<Option<usize>> = y.iter().map(|&c| Some(c)).collect();
        let mut opt = Optimizer::with_settings(cfg.optimizer, cfg.learning_rate, 0.9, 0.999, 1e-8, &self.params);
        let mut prev = f64::INFINITY;
        for step in 0..cfg.max_steps {
            let mut tape = Tape::new();
            let v = tape.constant(data.clone());
            let logits = mlp_forward(&self.layers, &self.params, &mut tape, v);
            let loss = tape.softmax_xent(logits, targets.clone());
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { iteration: step });
            }
            self.steps = step + 1;
            self.final_loss = value;
            if (prev - value).abs() < cfg.tolerance {
                break;
            }
            prev = value;
            let grads = tape.backward(loss);
            let mut acc: Vec<Vec<f64>> = self.params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
            for (pid, var) in tape.bound_params() {
                if let Some(g) = grads.get(var) {
                    acc[pid].copy_from_slice(g);
                }
            }
            opt.step(&mut self.params, &acc);
        }
        Ok(())
    }
}

fn train_pairs<'d>(dataset: &'d Dataset, episode: &FewShotEpisode) -> Result<Vec<(&'d SceneGraphSample, usize, usize, usize)>> {
    let mut out = Vec::with_capacity(episode.n_train());
    for (class, shots) in episode.train_instances.iter().enumerate() {
        for inst in &shots.instances {
            let s = dataset.find_sample(Split::Train, &inst.sample_id)?;
            out.push((s, inst.subject_idx, inst.object_idx, class));
        }
    }
    Ok(out)
}

/// Trains a classifier on the episode's k labelled instances per rare predicate.
pub fn train_fewshot(
    dataset: &Dataset,
    episode: &FewShotEpisode,
    encoder: &mut PairEncoder<'_>,
    cfg: &FewShotConfig,
) -> Result<FewShotClassifier> {
    cfg.validate()?;
    let pairs = train_pairs(dataset, episode)?;
    let samples: Vec<&SceneGraphSample> = pairs.iter().map(|p| p.0).collect();
    encoder.encode_all(&samples)?;
    let mut x = Vec::with_capacity(pairs.len());
    let mut y = Vec::with_capacity(pairs.len());
    for (s, subj, obj, class) in pairs {
        x.push(encoder.pair(s, subj, obj)?);
        y.push(class);
    }
    let dim = x.first().map_or(0, Vec::len);
    let mut clf = FewShotClassifier::new(dim, episode.rare_ids.clone(), cfg);
    clf.fit(&x, &y, cfg)?;
    Ok(clf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub instances: usize,
    pub recall_at_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotScores {
    pub recall_at_1: f64,
    pub recall_at_50: f64,
    /// Keyed by predicate name.
    pub per_predicate: BTreeMap<String, PredicateRecall>,
    pub eval_pairs: usize,
}

/// Recall@1 per ground-truth pair and per-image recall@50 over rare-predicate tuples.
pub fn eval_fewshot(
    classifier: &FewShotClassifier,
    dataset: &Dataset,
    episode: &FewShotEpisode,
    encoder: &mut PairEncoder<'_>,
) -> Result<FewShotScores> {
    if episode.eval_pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut by_sample: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (k, p) in episode.eval_pairs.iter().enumerate() {
        by_sample.entry(p.sample_id.as_str()).or_default().push(k);
    }
    let samples: Vec<&SceneGraphSample> = by_sample
        .keys()
        .map(|id| dataset.find_sample(Split::Test, id))
        .collect::<Result<_>>()?;
    encoder.encode_all(&samples)?;

    let class_of: HashMap<usize, usize> = classifier.rare_ids.iter().enumerate().map(|(c, &p)| (p, c)).collect();
    let mut hits = vec![0usize; classifier.rare_ids.len()];
    let mut totals = vec![0usize; classifier.rare_ids.len()];
    let mut images = Vec::with_capacity(samples.len());
    for sample in samples {
        let n = sample.proposals.len();
        let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
        let mut feats = Vec::with_capacity(pairs.capacity());
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pairs.push((i, j));
                    feats.push(encoder.pair(sample, i, j)?);
                }
            }
        }
        let probs = classifier.predict(&feats);
        let mut ranked = Vec::with_capacity(pairs.len() * classifier.rare_ids.len());
        for (&(i, j), dist) in pairs.iter().zip(&probs) {
            for (c, &p) in classifier.rare_ids.iter().enumerate() {
                ranked.push(RankedTuple {
                    subject: i,
                    predicate: p,
                    object: j,
                    score: dist[c],
                    subject_label: 0,
                    object_label: 0,
                    subject_box: None,
                    object_box: None,
                });
            }
        }
        sort_tuples(&mut ranked);
        let mut gt = Vec::new();
        for &k in &by_sample[sample.sample_id.as_str()] {
            let ep = &episode.eval_pairs[k];
            let class = *class_of
                .get(&ep.predicate)
                .ok_or_else(|| Error::InvalidArgument(format!("eval predicate {} is not rare", ep.predicate)))?;
            let idx = pairs.iter().position(|&q| q == (ep.subject_idx, ep.object_idx)).ok_or_else(|| {
                Error::validation(&ep.sample_id, "relationships", format!("pair ({}, {}) out of range", ep.subject_idx, ep.object_idx))
            })?;
            totals[class] += 1;
            hits[class] += usize::from(argmax(&probs[idx]) == class);
            let b = sample.proposals[ep.subject_idx].bbox;
            gt.push(GtTriple {
                subject: ep.subject_idx,
                predicate: ep.predicate,
                object: ep.object_idx,
                subject_label: 0,
                object_label: 0,
                subject_box: b,
                object_box: sample.proposals[ep.object_idx].bbox,
            });
        }
        images.push(ImageEval {
            id: sample.sample_id.clone(),
            ranked,
            gt,
        });
    }
    let r50 = recall_at_k(&images, &[50], EvalMode::PredCls)?.at(50);
    let total: usize = totals.iter().sum();
    let per_predicate = classifier
        .rare_ids
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let name = dataset.vocabulary.predicates[p].clone();
            let r = if totals[c] == 0 { 0.0 } else { hits[c] as f64 / totals[c] as f64 };
            (
                name,
                PredicateRecall {
                    instances: totals[c],
                    recall_at_1: r,
                },
            )
        })
        .collect();
    Ok(FewShotScores {
        recall_at_1: hits.iter().sum::<usize>() as f64 / total as f64,
        recall_at_50: r50,
        per_predicate,
        eval_pairs: total,
    })
}

/// Scope of the reported recall@50.
pub const RECALL_AT_50_SCOPE: &str = "rare_predicates_only";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub k: usize,
    pub seed: u64,
    pub representation: Representation,
    pub recall_at_1: f64,
    pub recall_at_50: f64,
    pub recall_at_50_scope: String,
    pub per_predicate: BTreeMap<String, PredicateRecall>,
    pub eval_pairs: usize,
    pub train_instances: usize,
    pub classifier_steps: usize,
    pub classifier_final_loss: f64,
}

/// Samples an episode, trains on it and evaluates, for one representation.
pub fn run_episode(
    dataset: &Dataset,
    episode: &FewShotEpisode,
    model: &PredicateModel,
    provider: &dyn FeatureProvider,
    representation: Representation,
    cfg: &FewShotConfig,
) -> Result<FewShotResult> {
    let mut encoder = PairEncoder::new(model, provider, representation, cfg);
    let clf = train_fewshot(dataset, episode, &mut encoder, cfg)?;
    let scores = eval_fewshot(&clf, dataset, episode, &mut encoder)?;
    Ok(FewShotResult {
        k: episode.k,
        seed: episode.seed,
        representation,
        recall_at_1: scores.recall_at_1,
        recall_at_50: scores.recall_at_50,
        recall_at_50_scope: RECALL_AT_50_SCOPE.to_string(),
        per_predicate: scores.per_predicate,
        eval_pairs: scores.eval_pairs,
        train_instances: episode.n_train(),
        classifier_steps: clf.steps,
        classifier_final_loss: clf.final_loss,
    })
}

//! Losses, the optimization loop, and finite-difference gradient checks.
//!
//! The objective is `λ_node · CE(node labels) + λ_edge · BCE(edges)`, where
//! the edge term covers every ground-truth triple with a frequent predicate
//! plus `r` sampled non-ground-truth triples per positive.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{bce_term, Tape, Tensor, Var};
use crate::checkpoint;
use crate::datamodel::{Dataset, SceneGraphSample, Split};
use crate::decoder::EvalMode;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::{init_hidden, FeatureProvider, ModelConfig, PredicateModel, ScoreComponents, ScoreTable};
use crate::params::{rng_for, Init, ParamGroup, ParamStore};
use crate::seeds::derive_seed;

/// Probability clamp inside the edge BCE.
pub const BCE_EPS: f64 = 1e-6;

const STREAM_SHUFFLE: u64 = 0;
const STREAM_TRAIN_NEG: u64 = 1;
const STREAM_VAL_NEG: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub negative_ratio: usize,
    pub lambda_node: f64,
    pub lambda_edge: f64,
    pub seed: u64,
    pub semantic_only: bool,
    pub spatial_only: bool,
    pub disable_inverse: bool,
    pub optimizer: OptimizerKind,
    /// Momentum coefficient, or Adam's first-moment decay.
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a validation-loss improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 8,
            negative_ratio: 4,
            lambda_node: 1.0,
            lambda_edge: 1.0,
            seed: 0,
            semantic_only: false,
            spatial_only: false,
            disable_inverse: false,
            optimizer: OptimizerKind::Sgd,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.negative_ratio < 1 {
            return bad("negative_ratio must be at least 1");
        }
        if !(self.lambda_node >= 0.0 && self.lambda_edge >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if self.semantic_only && self.spatial_only {
            return bad("semantic_only and spatial_only are mutually exclusive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }

    /// Model configuration with the ablation flags and the training seed applied.
    pub fn resolve_model(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if self.semantic_only {
            m.components = ScoreComponents::SemanticOnly;
        } else if self.spatial_only {
            m.components = ScoreComponents::SpatialOnly;
        }
        if self.disable_inverse {
            m.inverse_functions = false;
        }
        m.init_seed = derive_seed(self.seed, &[3]);
        m
    }
}

/// Tensors and targets of one sample, computed once per run.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub n: usize,
    pub sem0: Tensor,
    pub spa: Tensor,
    pub labels: Vec<Option<usize>>,
    /// `(slot, subject, object)` of every frequent ground-truth triple.
    pub positives: Vec<(usize, usize, usize)>,
}

pub fn prepare_sample(model: &PredicateModel, sample: &SceneGraphSample, provider: &dyn FeatureProvider) -> Result<PreparedSample> {
    let cfg = model.config();
    let states = init_hidden(sample, provider, cfg.mask_resolution)?;
    let sem: Vec<Vec<f64>> = states.iter().map(|s| s.sem.clone()).collect();
    let spa: Vec<Vec<f64>> = states.iter().map(|s| s.spa.clone()).collect();
    let positives = sample
        .relationships
        .iter()
        .filter_map(|r| model.slot_of(r.predicate_id).map(|s| (s, r.subject_idx, r.object_idx)))
        .collect();
    Ok(PreparedSample {
        n: states.len(),
        sem0: Tensor::from_rows(&sem),
        spa: Tensor::from_rows(&spa),
        labels: sample.categories(),
        positives,
    })
}

/// Edge BCE targets as `(slot * n * n + i * n + j, target)`: every positive,
/// then `r` negatives per positive drawn uniformly without replacement from
/// the non-ground-truth triples.
pub fn edge_targets(n: usize, n_slots: usize, positives: &[(usize, usize, usize)], r: usize, seed: u64) -> Vec<(usize, f64)> {
    if positives.is_empty() {
        return Vec::new();
    }
    let flat = |s: usize, i: usize, j: usize| s * n * n + i * n + j;
    let pos: HashSet<usize> = positives.iter().map(|&(s, i, j)| flat(s, i, j)).collect();
    let mut pool = Vec::new();
    for s in 0..n_slots {
        for i in 0..n {
            for j in 0..n {
                if i != j && !pos.contains(&flat(s, i, j)) {
                    pool.push(flat(s, i, j));
                }
            }
        }
    }
    let count = (r * positives.len()).min(pool.len());
    let mut rng = rng_for(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, pool.len(), count).into_iter().map(|k| pool[k]).collect();
    picked.sort_unstable();
    let mut out: Vec<(usize, f64)> = positives.iter().map(|&(s, i, j)| (flat(s, i, j), 1.0)).collect();
    out.extend(picked.into_iter().map(|k| (k, 0.0)));
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeLoss {
    pub value: f64,
    pub terms: usize,
    /// True when the sample had no frequent ground truth and contributed 0.
    pub empty: bool,
}

/// Mean edge BCE over the combined score table of one sample.
pub fn edge_loss(table: &ScoreTable, positives: &[(usize, usize, usize)], r: usize, seed: u64) -> EdgeLoss {
    let n = table.n;
    let targets = edge_targets(n, table.combined.len(), positives, r, seed);
    if targets.is_empty() {
        return EdgeLoss {
            value: 0.0,
            terms: 0,
            empty: true,
        };
    }
    let nn = n * n;
    let total: f64 = targets
        .iter()
        .map(|&(k, y)| bce_term(table.combined[k / nn][k % nn], y, BCE_EPS))
        .sum();
    EdgeLoss {
        value: total / targets.len() as f64,
        terms: targets.len(),
        empty: false,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeLoss {
    pub value: f64,
    pub labelled: usize,
    /// True when no node had a known category.
    pub unlabelled: bool,
}

/// Mean cross-entropy of category distributions over labelled nodes.
pub fn node_loss(distributions: &[Vec<f64>], categories: &[Option<usize>]) -> NodeLoss {
    let mut total = 0.0;
    let mut count = 0;
    for (d, c) in distributions.iter().zip(categories) {
        if let Some(c) = *c {
            total -= d[c].max(f64::MIN_POSITIVE).ln();
            count += 1;
        }
    }
    NodeLoss {
        value: if count == 0 { 0.0 } else { total / count as f64 },
        labelled: count,
        unlabelled: count == 0,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub node: f64,
    pub edge: f64,
    pub edge_empty: bool,
}

/// Builds the loss of one sample on `tape`.
pub fn sample_loss(
    model: &PredicateModel,
    tape: &mut Tape,
    prep: &PreparedSample,
    targets: &[(usize, f64)],
    cfg: &TrainConfig,
) -> Result<(Var, LossParts)> {
    let g = model.build_graph(tape, prep.sem0.clone(), prep.spa.clone(), true)?;
    let logits = g.logits.expect("requested");
    let node = tape.softmax_xent(logits, prep.labels.clone());
    let node_v = tape.value(node).item();
    let node_term = tape.scale(node, cfg.lambda_node);
    let (total, edge_v) = if targets.is_empty() {
        (node_term, 0.0)
    } else {
        let all = tape.concat(&g.combined);
        let picked = tape.gather(all, targets.iter().map(|t| t.0).collect());
        let edge = tape.bce_mean(picked, targets.iter().map(|t| t.1).collect(), BCE_EPS);
        let edge_v = tape.value(edge).item();
        let edge_term = tape.scale(edge, cfg.lambda_edge);
        (tape.add(node_term, edge_term), edge_v)
    };
    let parts = LossParts {
        total: tape.value(total).item(),
        node: node_v,
        edge: edge_v,
        edge_empty: targets.is_empty(),
    };
    Ok((total, parts))
}

/// Gradients keyed by parameter index, in index order.
pub type SparseGrads = Vec<(usize, Vec<f64>)>;

/// Loss and per-parameter gradients of one sample.
pub fn sample_gradients(
    model: &PredicateModel,
    prep: &PreparedSample,
    targets: &[(usize, f64)],
    cfg: &TrainConfig,
) -> Result<(LossParts, SparseGrads)> {
    let mut tape = Tape::new();
    let (root, parts) = sample_loss(model, &mut tape, prep, targets, cfg)?;
    let grads = tape.backward(root);
    let mut out: Vec<(usize, Vec<f64>)> = tape
        .bound_params()
        .filter_map(|(pid, v)| grads.get(v).map(|g| (pid, g.to_vec())))
        .collect();
    out.sort_by_key(|e| e.0);
    Ok((parts, out))
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        Self::with_settings(cfg.optimizer, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, params)
    }

    pub fn with_settings(kind: OptimizerKind, lr: f64, beta1: f64, beta2: f64, eps: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        Optimizer {
            kind,
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Overrides the step size; used to check that a zero step is a no-op.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        for (idx, g) in grads.iter().enumerate() {
            let p = params.data_mut(idx);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Momentum => {
                    let m = &mut self.m[idx];
                    for ((w, gi), mi) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = self.beta1 * *mi + gi;
                        *w -= self.lr * *mi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                    let c1 = 1.0 - self.beta1.powi(t);
                    let c2 = 1.0 - self.beta2.powi(t);
                    for (k, w) in p.iter_mut().enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_node_loss: f64,
    pub train_edge_loss: f64,
    pub val_loss: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// PredCls recall@50 of the best checkpoint on the validation split,
    /// over ground truth with frequent predicates.
    pub val_predcls_recall_at_50: f64,
    pub early_stopped: bool,
    pub checkpoint: Option<PathBuf>,
    pub zero_gt_train_samples: usize,
    pub n_parameters: usize,
    pub parameters_per_predicate: usize,
    /// Kept out of the serialized report so reruns produce identical files.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Mean loss over `samples` with negatives fixed by `seed`.
pub fn mean_loss(model: &PredicateModel, samples: &[PreparedSample], cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let parts: Vec<Result<LossParts>> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, prep)| {
            let targets = edge_targets(prep.n, model.n_predicates(), &prep.positives, cfg.negative_ratio, derive_seed(seed, &[STREAM_VAL_NEG, idx as u64]));
            let mut tape = Tape::new();
            Ok(sample_loss(model, &mut tape, prep, &targets, cfg)?.1)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?.total;
    }
    Ok(total / samples.len().max(1) as f64)
}

pub fn prepare_split(model: &PredicateModel, samples: &[SceneGraphSample], provider: &dyn FeatureProvider) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare_sample(model, s, provider)).collect()
}

/// Validation loss of `model` as recorded by [`train`].
pub fn validation_loss(model: &PredicateModel, dataset: &Dataset, provider: &dyn FeatureProvider, cfg: &TrainConfig) -> Result<f64> {
    let val = prepare_split(model, dataset.split(Split::Val), provider)?;
    mean_loss(model, &val, cfg, cfg.seed)
}

/// Trains on the frequent predicates of `dataset` and returns the model with
/// the lowest validation loss. Parameters are kept at f32 precision after
/// every step, so the returned model equals its checkpoint exactly.
pub fn train(
    dataset: &Dataset,
    provider: &dyn FeatureProvider,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<(PredicateModel, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    let mcfg = cfg.resolve_model(&model_cfg.clone().bind_vocabulary(&dataset.vocabulary));
    if mcfg.feature_dim != provider.dim() {
        return Err(Error::Config(format!(
            "model feature_dim {} does not match the data ({})",
            mcfg.feature_dim,
            provider.dim()
        )));
    }
    if dataset.split(Split::Val).is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut model = PredicateModel::with_init(mcfg.clone(), Init::HeUniform)?;
    model.params_mut().round_to_f32();
    let train_set = prepare_split(&model, dataset.split(Split::Train), provider)?;
    let val_set = prepare_split(&model, dataset.split(Split::Val), provider)?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let zero_gt = train_set.iter().filter(|p| p.positives.is_empty()).count();
    let mut opt = Optimizer::new(cfg, model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<u8>)> = None;
    let mut since_best = 0;
    let mut early_stopped = false;

    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64])));
        let (mut sum_total, mut sum_node, mut sum_edge) = (0.0, 0.0, 0.0);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(LossParts, SparseGrads)>> = batch
                .par_iter()
                .map(|&idx| {
                    let prep = &train_set[idx];
                    let seed = derive_seed(cfg.seed, &[STREAM_TRAIN_NEG, epoch as u64, idx as u64]);
                    let targets = edge_targets(prep.n, model.n_predicates(), &prep.positives, cfg.negative_ratio, seed);
                    sample_gradients(&model, prep, &targets, cfg)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Vec<f64>> = model.params().entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
            let mut batch_loss = 0.0;
            for r in results {
                let r = match r {
                    Err(Error::NonFinite { .. }) => {
                        return Err(Error::Divergence {
                            epoch,
                            step,
                            loss: f64::NAN,
                        })
                    }
                    other => other?,
                };
                let (parts, grads) = r;
                batch_loss += parts.total;
                sum_node += parts.node;
                sum_edge += parts.edge;
                for (pid, g) in grads {
                    for (a, gi) in acc[pid].iter_mut().zip(&g) {
                        *a += gi * scale;
                    }
                }
            }
            if !batch_loss.is_finite() || acc.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: batch_loss * scale,
                });
            }
            sum_total += batch_loss;
            opt.step(model.params_mut(), &acc);
            model.params_mut().round_to_f32();
        }
        let n = train_set.len() as f64;
        let val_loss = mean_loss(&model, &val_set, cfg, cfg.seed)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: order.len().div_ceil(cfg.batch_size),
                loss: val_loss,
            });
        }
        let improved = best.as_ref().is_none_or(|b| val_loss < b.1);
        if improved {
            let bytes = checkpoint::to_bytes(&model)?;
            if let Some(path) = checkpoint_path {
                std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
            }
            best = Some((epoch, val_loss, bytes));
            since_best = 0;
        } else {
            since_best += 1;
        }
        log::info!("epoch {epoch}: train {:.5} val {:.5}{}", sum_total / n, val_loss, if improved { " *" } else { "" });
        epochs.push(EpochRecord {
            epoch,
            train_loss: sum_total / n,
            train_node_loss: sum_node / n,
            train_edge_loss: sum_edge / n,
            val_loss,
            improved,
        });
        if cfg.patience.is_some_and(|p| since_best >= p) {
            early_stopped = true;
            break;
        }
    }
    let (best_epoch, best_val_loss, bytes) = best.expect("at least one epoch");
    let best_model = checkpoint::from_bytes(&bytes)?;
    let opts = EvalOptions {
        mode: EvalMode::PredCls,
        k_values: vec![50],
        ..EvalOptions::default()
    };
    let recall = evaluate(&best_model, dataset.split(Split::Val), provider, &opts)?.0.at(50);
    let report = TrainReport {
        parameters_per_predicate: mcfg.parameters_per_predicate(),
        n_parameters: best_model.params().n_scalars(),
        model: mcfg,
        train: cfg.clone(),
        seed: cfg.seed,
        epochs,
        best_epoch,
        best_val_loss,
        val_predcls_recall_at_50: recall,
        early_stopped,
        checkpoint: checkpoint_path.map(Path::to_path_buf),
        zero_gt_train_samples: zero_gt,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((best_model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub parameters: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub groups: BTreeMap<String, GroupCheck>,
    pub failing_groups: Vec<String>,
    pub passed: bool,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const GRADCHECK_FLOOR: f64 = 1e-6;

/// A random toy scene: `n` nodes, labelled, with two frequent relationships.
pub fn toy_sample(model: &PredicateModel, n: usize, seed: u64) -> PreparedSample {
    use rand::Rng;
    let cfg = model.config();
    let mut rng = rng_for(seed);
    let side = cfg.mask_resolution;
    let sem: Vec<Vec<f64>> = (0..n).map(|_| (0..cfg.feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let spa: Vec<Vec<f64>> = (0..n).map(|_| (0..side * side).map(|_| rng.random_range(0.05..0.95)).collect()).collect();
    let labels = (0..n).map(|i| Some(i % cfg.n_categories)).collect();
    let np = model.n_predicates();
    let positives = vec![(0, 0, 1 % n), (np - 1, n - 1, 0)].into_iter().filter(|&(_, i, j)| i != j).collect();
    PreparedSample {
        n,
        sem0: Tensor::from_rows(&sem),
        spa: Tensor::from_rows(&spa),
        labels,
        positives,
    }
}

/// Small model used by the gradient check: every scalar gets probed, so the
/// widths stay tiny.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        mask_resolution: 6,
        sem_depth: 3,
        sem_hidden: 8,
        spa_depth: 3,
        spa_channels: 3,
        classifier_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Compares analytic gradients of the total loss on a toy scene with central
/// differences for every parameter scalar.
pub fn gradcheck(model_cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    if model_cfg.feature_dim > 8 || model_cfg.mask_resolution > 8 {
        return Err(Error::Config("gradient check needs feature_dim and mask_resolution of at most 8".into()));
    }
    let mut mcfg = model_cfg.clone();
    mcfg.init_seed = seed;
    if mcfg.predicate_ids.is_empty() {
        mcfg.predicate_ids = vec![0, 1];
    }
    if mcfg.n_categories == 0 {
        mcfg.n_categories = 3;
    }
    let mut model = PredicateModel::new(mcfg.clone())?;
    // Zero biases put dead-region pre-activations exactly on the ReLU kink,
    // where central differences see half the slope. Nudge everything off it.
    {
        use rand::Rng;
        let mut rng = rng_for(derive_seed(seed, &[3]));
        for idx in 0..model.params().len() {
            for v in model.params_mut().data_mut(idx) {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }
    let prep = toy_sample(&model, 4.min(mcfg.feature_dim.max(2)), derive_seed(seed, &[1]));
    let cfg = TrainConfig::default();
    let targets = edge_targets(prep.n, model.n_predicates(), &prep.positives, 2, derive_seed(seed, &[2]));
    let (_, analytic) = sample_gradients(&model, &prep, &targets, &cfg)?;
    let analytic: BTreeMap<usize, Vec<f64>> = analytic.into_iter().collect();
    let loss_at = |m: &PredicateModel| -> Result<f64> {
        let mut tape = Tape::new();
        Ok(sample_loss(m, &mut tape, &prep, &targets, &cfg)?.1.total)
    };
    let mut groups: BTreeMap<String, GroupCheck> = BTreeMap::new();
    for idx in 0..model.params().len() {
        let (name, group, len) = {
            let e = &model.params().entries()[idx];
            (e.name.clone(), e.group, e.data.len())
        };
        let entry = groups.entry(group.name().to_string()).or_insert(GroupCheck {
            parameters: 0,
            max_rel_error: 0.0,
            worst: String::new(),
        });
        for k in 0..len {
            let orig = model.params().entries()[idx].data[k];
            model.params_mut().data_mut(idx)[k] = orig + GRADCHECK_STEP;
            let up = loss_at(&model)?;
            model.params_mut().data_mut(idx)[k] = orig - GRADCHECK_STEP;
            let down = loss_at(&model)?;
            model.params_mut().data_mut(idx)[k] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            let a = analytic.get(&idx).map_or(0.0, |g| g[k]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            entry.parameters += 1;
            if rel > entry.max_rel_error || entry.worst.is_empty() {
                entry.max_rel_error = entry.max_rel_error.max(rel);
                entry.worst = format!("{name}[{k}]");
            }
        }
    }
    let max_rel_error = groups.values().map(|g| g.max_rel_error).fold(0.0, f64::max);
    let failing_groups: Vec<String> = groups
        .iter()
        .filter(|(_, g)| g.max_rel_error > GRADCHECK_TOLERANCE)
        .map(|(k, _)| k.clone())
        .collect();
    Ok(GradcheckReport {
        model: mcfg,
        seed,
        step: GRADCHECK_STEP,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error,
        passed: failing_groups.is_empty(),
        failing_groups,
        groups,
    })
}

/// Top-1 accuracy of the node classifier over labelled nodes.
pub fn node_accuracy(model: &PredicateModel, samples: &[SceneGraphSample], provider: &dyn FeatureProvider) -> Result<f64> {
    let per: Vec<Result<(usize, usize)>> = samples
        .par_iter()
        .map(|s| {
            let out = model.forward_sample(s, provider)?;
            let dists = crate::decoder::classify_nodes(model, &out.states);
            let mut hit = 0;
            let mut total = 0;
            for (d, c) in dists.iter().zip(s.categories()) {
                if let Some(c) = c {
                    total += 1;
                    hit += usize::from(crate::decoder::argmax(d) == c);
                }
            }
            Ok((hit, total))
        })
        .collect();
    let (mut hit, mut total) = (0, 0);
    for p in per {
        let (h, t) = p?;
        hit += h;
        total += t;
    }
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(hit as f64 / total as f64)
}

/// Parameter groups the model reads during a forward pass.
pub fn groups_read(model: &PredicateModel) -> Vec<ParamGroup> {
    ParamGroup::ALL.into_iter().filter(|&g| model.params().reads(g) > 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_loss_at_half_is_log2() {
        let table = ScoreTable {
            n: 3,
            predicate_ids: vec![0],
            iterations: vec![],
            combined: vec![vec![0.5; 9]],
        };
        let l = edge_loss(&table, &[(0, 0, 1)], 4, 1);
        assert_eq!(l.terms, 5);
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn edge_loss_perfect_scores_is_near_zero() {
        let mut c = vec![0.0; 9];
        c[1] = 1.0;
        c[5] = 1.0;
        let table = ScoreTable {
            n: 3,
            predicate_ids: vec![0],
            iterations: vec![],
            combined: vec![c],
        };
        let l = edge_loss(&table, &[(0, 0, 1), (0, 1, 2)], 2, 9);
        assert!(l.value <= -(1.0 - BCE_EPS).ln() * 3.0);
        assert!(l.value < 1e-5);
    }

    #[test]
    fn edge_loss_matches_hand_sum() {
        // 2 positives, 2 negatives: the non-GT pool has exactly two triples
        let c = vec![0.0, 0.8, 0.3, 0.6];
        let table = ScoreTable {
            n: 2,
            predicate_ids: vec![0, 1],
            iterations: vec![],
            combined: vec![c.clone(), vec![0.0, 0.1, 0.9, 0.0]],
        };
        let l = edge_loss(&table, &[(0, 0, 1), (0, 1, 0)], 1, 0);
        let hand = -(0.8f64.ln() + 0.3f64.ln() + (1.0f64 - 0.1).ln() + (1.0f64 - 0.9).ln()) / 4.0;
        assert_eq!(l.terms, 4);
        assert!((l.value - hand).abs() < 1e-12);
    }

    #[test]
    fn zero_gt_contributes_nothing() {
        let table = ScoreTable {
            n: 2,
            predicate_ids: vec![0],
            iterations: vec![],
            combined: vec![vec![0.0, 0.3, 0.3, 0.0]],
        };
        let l = edge_loss(&table, &[], 4, 0);
        assert!(l.empty);
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn negatives_are_deterministic_and_exclude_positives() {
        let pos = [(0, 0, 1), (1, 2, 0)];
        let a = edge_targets(4, 2, &pos, 4, 17);
        assert_eq!(a, edge_targets(4, 2, &pos, 4, 17));
        assert_eq!(a.len(), 10);
        let negs: Vec<usize> = a.iter().filter(|t| t.1 == 0.0).map(|t| t.0).collect();
        assert!(!negs.contains(&1) && !negs.contains(&(16 + 8)));
        assert!(negs.iter().all(|&k| (k % 16) / 4 != (k % 16) % 4));
    }

    #[test]
    fn node_loss_examples() {
        let one_hot = node_loss(&[vec![1.0, 0.0]], &[Some(0)]);
        assert!(one_hot.value.abs() < 1e-12);
        let uniform = node_loss(&[vec![0.25; 4]], &[Some(2)]);
        assert!((uniform.value - 4f64.ln()).abs() < 1e-12);
        let mixed = node_loss(&[vec![0.5, 0.5], vec![0.2, 0.8], vec![0.9, 0.1]], &[Some(0), Some(1), None]);
        assert!((mixed.value - -(0.5f64.ln() + 0.8f64.ln()) / 2.0).abs() < 1e-12);
        assert_eq!(mixed.labelled, 2);
        assert!(node_loss(&[vec![0.5, 0.5]], &[None]).unlabelled);
    }

    #[test]
    fn edge_loss_is_monotone_in_positive_score() {
        let mut c = vec![0.2, 0.4, 0.6, 0.1];
        let table = |c: &Vec<f64>| ScoreTable {
            n: 2,
            predicate_ids: vec![0],
            iterations: vec![],
            combined: vec![c.clone()],
        };
        let before = edge_loss(&table(&c), &[(0, 0, 1)], 1, 3).value;
        c[1] = 0.5;
        assert!(edge_loss(&table(&c), &[(0, 0, 1)], 1, 3).value < before);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let both = TrainConfig {
            semantic_only: true,
            spatial_only: true,
            ..TrainConfig::default()
        };
        assert!(both.validate().is_err());
        let zero = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(zero.validate().is_err());
    }
}

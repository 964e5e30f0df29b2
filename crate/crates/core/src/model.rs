//! Graph convolution with predicates as message-passing functions.
//!
//! Every node carries a semantic vector and a fixed spatial mask. For each
//! predicate the model owns a forward and an inverse semantic MLP and a
//! forward and an inverse spatial convolution stack. Per iteration, each
//! ordered pair `(i, j)` and predicate `p` is scored by blending the cosine
//! between `f_sem[p](h_i)` and `h_j` with the soft IoU between `f_spa[p](m_i)`
//! and `m_j`; node `i` then receives the score-weighted inverse transform of
//! every neighbour, summed over predicates and normalized by `|P|(|V|-1)`.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax, ConvShape, Tape, Tensor, Var};
use crate::datamodel::{PredicateVocabulary, SceneGraphSample};
use crate::error::{Error, Result};
use crate::params::{conv_stack_forward, mlp_forward, rng_for, Conv, Dense, Init, ParamGroup, ParamId, ParamStore};
use crate::synthworld::rasterize_mask;

/// Added to the soft-IoU denominator. Small enough that a unit-overlap
/// fixture stays within 1e-9 of its exact ratio.
pub const SOFT_IOU_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreComponents {
    Both,
    SemanticOnly,
    SpatialOnly,
}

impl ScoreComponents {
    pub fn semantic(self) -> bool {
        !matches!(self, ScoreComponents::SpatialOnly)
    }

    pub fn spatial(self) -> bool {
        !matches!(self, ScoreComponents::SemanticOnly)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub mask_resolution: usize,
    pub sem_depth: usize,
    pub sem_hidden: usize,
    pub spa_depth: usize,
    pub spa_channels: usize,
    pub spa_kernel: usize,
    pub classifier_hidden: usize,
    /// Number of message-passing iterations `T`.
    pub iterations: usize,
    pub alpha: f64,
    /// Apply a sigmoid after the update.
    pub update_sigmoid: bool,
    pub inverse_functions: bool,
    pub components: ScoreComponents,
    pub init_seed: u64,
    /// Dataset predicate id served by each function slot.
    pub predicate_ids: Vec<usize>,
    pub n_categories: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            mask_resolution: 8,
            sem_depth: 4,
            sem_hidden: 32,
            spa_depth: 4,
            spa_channels: 4,
            spa_kernel: 3,
            classifier_hidden: 32,
            iterations: 2,
            alpha: 0.5,
            update_sigmoid: false,
            inverse_functions: true,
            components: ScoreComponents::Both,
            init_seed: 0,
            predicate_ids: Vec::new(),
            n_categories: 0,
        }
    }
}

impl ModelConfig {
    /// Serves the frequent predicates of `vocab`.
    pub fn bind_vocabulary(mut self, vocab: &PredicateVocabulary) -> Self {
        self.predicate_ids = vocab.frequent_ids.clone();
        self.n_categories = vocab.n_categories();
        self
    }

    pub fn n_predicates(&self) -> usize {
        self.predicate_ids.len()
    }

    /// Blend weight actually applied, after the component ablation.
    pub fn effective_alpha(&self) -> f64 {
        match self.components {
            ScoreComponents::Both => self.alpha,
            ScoreComponents::SemanticOnly => 1.0,
            ScoreComponents::SpatialOnly => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_dim < 1 || self.mask_resolution < 1 {
            return bad("feature_dim and mask_resolution must be positive".into());
        }
        if self.sem_depth < 1 || self.spa_depth < 1 {
            return bad("function depths must be at least 1".into());
        }
        if self.sem_hidden < 1 || self.spa_channels < 1 || self.classifier_hidden < 1 {
            return bad("hidden sizes must be positive".into());
        }
        if self.spa_kernel.is_multiple_of(2) {
            return bad(format!("spa_kernel must be odd, got {}", self.spa_kernel));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if self.predicate_ids.is_empty() {
            return bad("model serves no predicates".into());
        }
        if self.n_categories < 1 {
            return bad("n_categories must be positive".into());
        }
        Ok(())
    }

    /// Parameters owned by one predicate (both directions, both components).
    pub fn parameters_per_predicate(&self) -> usize {
        let d = self.feature_dim;
        let h = self.sem_hidden;
        let mlp = if self.sem_depth == 1 {
            d * d + d
        } else {
            (d * h + h) + (self.sem_depth - 2) * (h * h + h) + (h * d + d)
        };
        let k2 = self.spa_kernel * self.spa_kernel;
        let c = self.spa_channels;
        let conv = if self.spa_depth == 1 {
            k2 + 1
        } else {
            (c * k2 + c) + (self.spa_depth - 2) * (c * c * k2 + c) + (c * k2 + 1)
        };
        let per_dir = if self.components.semantic() { mlp } else { 0 } + if self.components.spatial() { conv } else { 0 };
        per_dir * if self.inverse_functions { 2 } else { 1 }
    }
}

/// A node's representation: semantic vector plus fixed `L x L` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub sem: Vec<f64>,
    pub spa: Vec<f64>,
}

pub trait FeatureProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn features(&self, sample: &SceneGraphSample) -> Result<Vec<Vec<f64>>>;
}

/// Reads the features stored on each proposal.
pub struct StoredFeatures {
    pub dim: usize,
}

impl FeatureProvider for StoredFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn features(&self, sample: &SceneGraphSample) -> Result<Vec<Vec<f64>>> {
        sample
            .proposals
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.feature
                    .clone()
                    .ok_or_else(|| Error::validation(&sample.sample_id, format!("proposals[{i}].feature"), "missing feature"))
            })
            .collect()
    }
}

pub fn init_hidden(sample: &SceneGraphSample, provider: &dyn FeatureProvider, side: usize) -> Result<Vec<HiddenState>> {
    let feats = provider.features(sample)?;
    feats
        .into_iter()
        .zip(&sample.proposals)
        .enumerate()
        .map(|(i, (sem, p))| {
            if sem.len() != provider.dim() {
                return Err(Error::validation(
                    &sample.sample_id,
                    format!("proposals[{i}].feature"),
                    format!("feature length {} != {}", sem.len(), provider.dim()),
                ));
            }
            Ok(HiddenState {
                sem,
                spa: rasterize_mask(&p.bbox, side),
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PredicateFunctions {
    pub sem_forward: Vec<Dense>,
    pub sem_inverse: Vec<Dense>,
    pub spa_forward: Vec<Conv>,
    pub spa_inverse: Vec<Conv>,
}

/// The full trainable model: predicate functions, `W0` and the node classifier.
#[derive(Debug)]
pub struct PredicateModel {
    config: ModelConfig,
    params: ParamStore,
    functions: Vec<PredicateFunctions>,
    w0: ParamId,
    classifier: Vec<Dense>,
    zero_norm_events: AtomicU64,
}

impl Clone for PredicateModel {
    fn clone(&self) -> Self {
        PredicateModel {
            config: self.config.clone(),
            params: self.params.clone(),
            functions: self.functions.clone(),
            w0: self.w0,
            classifier: self.classifier.clone(),
            zero_norm_events: AtomicU64::new(self.zero_norm_events()),
        }
    }
}

impl PredicateModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::with_init(config, Init::HeUniform)
    }

    /// `init` applies to the predicate functions; `W0` is always identity
    /// plus uniform noise of scale 0.01 and the classifier is He-uniform.
    pub fn with_init(config: ModelConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.init_seed);
        let mut params = ParamStore::default();
        let d = config.feature_dim;
        let sem_dims: Vec<usize> = (0..=config.sem_depth)
            .map(|l| if l == 0 || l == config.sem_depth { d } else { config.sem_hidden })
            .collect();
        let spa_channels: Vec<usize> = (0..=config.spa_depth)
            .map(|l| if l == 0 || l == config.spa_depth { 1 } else { config.spa_channels })
            .collect();
        let mut functions = Vec::with_capacity(config.n_predicates());
        for (slot, pid) in config.predicate_ids.iter().enumerate() {
            let mut mlp = |dir: &str, group: ParamGroup, params: &mut ParamStore| -> Vec<Dense> {
                (0..config.sem_depth)
                    .map(|l| {
                        Dense::new(params, &format!("pred{slot}_{pid}.sem_{dir}.{l}"), group, sem_dims[l], sem_dims[l + 1], init, &mut rng)
                    })
                    .collect()
            };
            let sem_forward = if config.components.semantic() {
                mlp("fwd", ParamGroup::SemanticForward, &mut params)
            } else {
                Vec::new()
            };
            let sem_inverse = if config.components.semantic() && config.inverse_functions {
                mlp("inv", ParamGroup::SemanticInverse, &mut params)
            } else {
                Vec::new()
            };
            let mut convs = |dir: &str, group: ParamGroup, params: &mut ParamStore| -> Vec<Conv> {
                (0..config.spa_depth)
                    .map(|l| {
                        let shape = ConvShape {
                            in_channels: spa_channels[l],
                            out_channels: spa_channels[l + 1],
                            side: config.mask_resolution,
                            kernel: config.spa_kernel,
                        };
                        Conv::new(params, &format!("pred{slot}_{pid}.spa_{dir}.{l}"), group, shape, init, &mut rng)
                    })
                    .collect()
            };
            let spa_forward = if config.components.spatial() {
                convs("fwd", ParamGroup::SpatialForward, &mut params)
            } else {
                Vec::new()
            };
            let spa_inverse = if config.components.spatial() && config.inverse_functions {
                convs("inv", ParamGroup::SpatialInverse, &mut params)
            } else {
                Vec::new()
            };
            functions.push(PredicateFunctions {
                sem_forward,
                sem_inverse,
                spa_forward,
                spa_inverse,
            });
        }
        let mut w0 = vec![0.0; d * d];
        for (k, v) in w0.iter_mut().enumerate() {
            use rand::Rng;
            *v = if k / d == k % d { 1.0 } else { 0.0 } + rng.random_range(-0.01..0.01);
        }
        let w0 = params.add("w0".into(), ParamGroup::Update, d, d, w0);
        let classifier = vec![
            Dense::new(&mut params, "classifier.0", ParamGroup::NodeClassifier, d, config.classifier_hidden, Init::HeUniform, &mut rng),
            Dense::new(
                &mut params,
                "classifier.1",
                ParamGroup::NodeClassifier,
                config.classifier_hidden,
                config.n_categories,
                Init::HeUniform,
                &mut rng,
            ),
        ];
        Ok(PredicateModel {
            config,
            params,
            functions,
            w0,
            classifier,
            zero_norm_events: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn functions(&self, slot: usize) -> &PredicateFunctions {
        &self.functions[slot]
    }

    pub fn classifier_layers(&self) -> &[Dense] {
        &self.classifier
    }

    pub fn n_predicates(&self) -> usize {
        self.functions.len()
    }

    /// Function slot serving dataset predicate `predicate_id`.
    pub fn slot_of(&self, predicate_id: usize) -> Option<usize> {
        self.config.predicate_ids.iter().position(|&p| p == predicate_id)
    }

    pub fn w0(&self) -> &[f64] {
        &self.params.entry(self.w0).data
    }

    /// Total zero-norm cosine evaluations seen by this model.
    pub fn zero_norm_events(&self) -> u64 {
        self.zero_norm_events.load(Ordering::Relaxed)
    }

    pub(crate) fn note_zero_norm(&self, n: usize) {
        if n > 0 {
            self.zero_norm_events.fetch_add(n as u64, Ordering::Relaxed);
        }
    }

    fn sem_layers(&self, slot: usize, dir: Direction) -> Result<&[Dense]> {
        let f = &self.functions[slot];
        let layers = match dir {
            Direction::Forward => &f.sem_forward,
            Direction::Backward => &f.sem_inverse,
        };
        if layers.is_empty() {
            return Err(Error::NotFound(format!("semantic {dir:?} function for slot {slot}")));
        }
        Ok(layers)
    }

    fn spa_layers(&self, slot: usize, dir: Direction) -> Result<&[Conv]> {
        let f = &self.functions[slot];
        let layers = match dir {
            Direction::Forward => &f.spa_forward,
            Direction::Backward => &f.spa_inverse,
        };
        if layers.is_empty() {
            return Err(Error::NotFound(format!("spatial {dir:?} function for slot {slot}")));
        }
        Ok(layers)
    }

    pub fn apply_semantic(&self, slot: usize, dir: Direction, x: &[f64]) -> Result<Vec<f64>> {
        let layers = self.sem_layers(slot, dir)?;
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(x.to_vec()));
        let y = mlp_forward(layers, &self.params, &mut tape, v);
        Ok(tape.value(y).data.clone())
    }

    pub fn apply_spatial(&self, slot: usize, dir: Direction, map: &[f64]) -> Result<Vec<f64>> {
        let layers = self.spa_layers(slot, dir)?;
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row(map.to_vec()));
        let y = conv_stack_forward(layers, &self.params, &mut tape, v);
        Ok(tape.value(y).data.clone())
    }

    /// `(1 + cos(f_sem[p, dir](h_i), h_j)) / 2`; 0.5 when either side has zero norm.
    pub fn score_semantic(&self, slot: usize, h_i: &[f64], h_j: &[f64], dir: Direction) -> Result<f64> {
        let t = self.apply_semantic(slot, dir, h_i)?;
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(t));
        let b = tape.constant(Tensor::row(h_j.to_vec()));
        let c = tape.cosine(a, b);
        self.note_zero_norm(tape.zero_norm_events());
        Ok(0.5 + 0.5 * tape.value(c).item())
    }

    pub fn score_spatial(&self, slot: usize, m_i: &[f64], m_j: &[f64], dir: Direction) -> Result<f64> {
        let t = self.apply_spatial(slot, dir, m_i)?;
        Ok(soft_iou(&t, m_j))
    }

    /// Blended score of the edge `<i, p, j>` as seen from `h_i` (forward) or
    /// of `<j, p, i>` as seen from `h_i` through the inverse functions (backward).
    pub fn score_predicate(&self, slot: usize, h_i: &HiddenState, h_j: &HiddenState, dir: Direction) -> Result<ScoredEdge> {
        let c = self.config.components;
        let alpha = self.config.effective_alpha();
        let s_sem = if c.semantic() { self.score_semantic(slot, &h_i.sem, &h_j.sem, dir)? } else { 0.0 };
        let s_spa = if c.spatial() { self.score_spatial(slot, &h_i.spa, &h_j.spa, dir)? } else { 0.0 };
        Ok(ScoredEdge {
            i: 0,
            j: 1,
            predicate: slot,
            s_sem,
            s_spa,
            s: blend(s_sem, s_spa, alpha, c),
            raw_cos: 2.0 * s_sem - 1.0,
            direction: dir,
            iteration: 0,
        })
    }

    /// Node category distributions `g(h_i)`.
    pub fn classify(&self, sem: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if sem.is_empty() {
            return Vec::new();
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(sem));
        let logits = mlp_forward(&self.classifier, &self.params, &mut tape, x);
        tape.value(logits).to_rows().iter().map(|r| softmax(r)).collect()
    }

    /// Builds the full message-passing graph on `tape`.
    pub fn build_graph(&self, tape: &mut Tape, sem0: Tensor, spa: Tensor, with_logits: bool) -> Result<GraphVars> {
        let cfg = &self.config;
        let n = sem0.rows;
        let np = self.functions.len();
        let comps = cfg.components;
        let alpha = cfg.effective_alpha();
        let inverse = cfg.inverse_functions;
        let h0 = tape.constant(sem0);
        let masks = tape.constant(spa);

        // spatial scores never change across iterations
        let mut iou_fwd = Vec::with_capacity(np);
        let mut iou_bwd = Vec::with_capacity(np);
        if comps.spatial() {
            for f in &self.functions {
                let a = conv_stack_forward(&f.spa_forward, &self.params, tape, masks);
                iou_fwd.push(tape.soft_iou(a, masks, SOFT_IOU_EPS));
                if inverse {
                    let b = conv_stack_forward(&f.spa_inverse, &self.params, tape, masks);
                    iou_bwd.push(tape.soft_iou(b, masks, SOFT_IOU_EPS));
                }
            }
        }
        let offdiag = {
            let mut m = vec![1.0; n * n];
            for i in 0..n {
                m[i * n + i] = 0.0;
            }
            tape.constant(Tensor::new(n, n, m))
        };
        let w0 = self.params.bind(tape, self.w0);
        let norm = if n > 1 { 1.0 / (np * (n - 1)) as f64 } else { 0.0 };

        let mut hidden = vec![h0];
        let mut scores = Vec::with_capacity(cfg.iterations + 1);
        for t in 0..=cfg.iterations {
            let h = hidden[t];
            let last = t == cfg.iterations;
            let mut per_pred = Vec::with_capacity(np);
            let mut message: Option<Var> = None;
            for (slot, f) in self.functions.iter().enumerate() {
                let (mut fwd_cos, mut bwd_cos, mut fwd_out, mut bwd_out) = (None, None, None, None);
                if comps.semantic() {
                    let fx = mlp_forward(&f.sem_forward, &self.params, tape, h);
                    fwd_cos = Some(tape.cosine(fx, h));
                    fwd_out = Some(fx);
                    if inverse {
                        let gx = mlp_forward(&f.sem_inverse, &self.params, tape, h);
                        bwd_cos = Some(tape.cosine(gx, h));
                        bwd_out = Some(gx);
                    }
                }
                let fwd = direction_vars(tape, fwd_cos, iou_fwd.get(slot).copied(), alpha, comps);
                let bwd = if inverse {
                    Some(direction_vars(tape, bwd_cos, iou_bwd.get(slot).copied(), alpha, comps))
                } else {
                    None
                };
                if !last && n > 1 {
                    // inverse transform of the neighbour; forward when inverses are ablated;
                    // the untransformed neighbour when no semantic functions exist
                    let source = bwd_out.or(fwd_out).unwrap_or(h);
                    let weights = tape.mul(fwd.blend, offdiag);
                    let m = tape.matmul(weights, source);
                    message = Some(match message {
                        Some(acc) => tape.add(acc, m),
                        None => m,
                    });
                }
                per_pred.push(PredicateScoreVars { fwd, bwd });
            }
            scores.push(per_pred);
            if !last {
                let mut next = tape.matmul_bt(h, w0);
                if let Some(m) = message {
                    let m = tape.scale(m, norm);
                    next = tape.add(next, m);
                }
                if cfg.update_sigmoid {
                    next = tape.sigmoid(next);
                }
                if !tape.value(next).is_finite() {
                    return Err(Error::NonFinite { iteration: t + 1 });
                }
                hidden.push(next);
            }
        }
        let final_scores = scores.last().expect("at least one iteration");
        let combined = final_scores
            .iter()
            .map(|s| match &s.bwd {
                Some(b) => {
                    let bt = tape.transpose(b.blend);
                    tape.mul(s.fwd.blend, bt)
                }
                None => s.fwd.blend,
            })
            .collect();
        let logits = if with_logits {
            let hl = *hidden.last().expect("nonempty");
            Some(mlp_forward(&self.classifier, &self.params, tape, hl))
        } else {
            None
        };
        self.note_zero_norm(tape.zero_norm_events());
        Ok(GraphVars {
            n,
            hidden,
            scores,
            combined,
            logits,
        })
    }

    pub fn forward_sample(&self, sample: &SceneGraphSample, provider: &dyn FeatureProvider) -> Result<ForwardOutput> {
        if provider.dim() != self.config.feature_dim {
            return Err(Error::Config(format!(
                "feature provider dimension {} != model feature_dim {}",
                provider.dim(),
                self.config.feature_dim
            )));
        }
        let states = init_hidden(sample, provider, self.config.mask_resolution)?;
        forward_pass(self, &states)
    }
}

fn blend(s_sem: f64, s_spa: f64, alpha: f64, comps: ScoreComponents) -> f64 {
    match comps {
        ScoreComponents::Both => alpha * s_sem + (1.0 - alpha) * s_spa,
        ScoreComponents::SemanticOnly => s_sem,
        ScoreComponents::SpatialOnly => s_spa,
    }
}

fn direction_vars(tape: &mut Tape, cos: Option<Var>, iou: Option<Var>, alpha: f64, comps: ScoreComponents) -> DirectionVars {
    let sem = cos.map(|c| tape.affine(c, 0.5, 0.5));
    let blend = match (sem, iou) {
        (Some(s), Some(p)) => {
            let a = tape.scale(s, alpha);
            let b = tape.scale(p, 1.0 - alpha);
            tape.add(a, b)
        }
        (Some(s), None) => s,
        (None, Some(p)) => p,
        (None, None) => unreachable!("a model scores with at least one component: {comps:?}"),
    };
    DirectionVars { cos, sem, spa: iou, blend }
}

/// Soft IoU of two maps in `[0, 1]`.
pub fn soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let inter: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    inter / (sa + sb - inter + SOFT_IOU_EPS)
}

/// Tape handles for one direction of one predicate at one iteration; all
/// `n x n`. Backward matrices are indexed `[source j, target i]`.
#[derive(Clone, Copy, Debug)]
pub struct DirectionVars {
    pub cos: Option<Var>,
    pub sem: Option<Var>,
    pub spa: Option<Var>,
    pub blend: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PredicateScoreVars {
    pub fwd: DirectionVars,
    pub bwd: Option<DirectionVars>,
}

#[derive(Debug)]
pub struct GraphVars {
    pub n: usize,
    /// `H^0 ..= H^T`, each `n x D`.
    pub hidden: Vec<Var>,
    /// Scores at iterations `0 ..= T`, one entry per predicate slot.
    pub scores: Vec<Vec<PredicateScoreVars>>,
    /// `c[i][j]` = forward score at `T` times backward score at `T`, per slot.
    pub combined: Vec<Var>,
    pub logits: Option<Var>,
}

/// Numeric scores for one direction of one predicate, `n x n` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionScores {
    pub raw_cos: Option<Vec<f64>>,
    pub sem: Option<Vec<f64>>,
    pub spa: Option<Vec<f64>>,
    pub blend: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredicateScores {
    pub forward: DirectionScores,
    pub backward: Option<DirectionScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub n: usize,
    pub predicate_ids: Vec<usize>,
    /// Indexed by iteration `0 ..= T`, then predicate slot.
    pub iterations: Vec<Vec<PredicateScores>>,
    /// Final combined scores per slot, `c[i * n + j]`.
    pub combined: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    pub i: usize,
    pub j: usize,
    /// Function slot.
    pub predicate: usize,
    pub s_sem: f64,
    pub s_spa: f64,
    pub s: f64,
    pub raw_cos: f64,
    pub direction: Direction,
    pub iteration: usize,
}

impl ScoreTable {
    /// Every scored edge `<i, p, j>` at iteration `t` in the given direction.
    /// Backward edges carry the inverse-function score of `j` towards `i`.
    pub fn edges(&self, t: usize, dir: Direction) -> Vec<ScoredEdge> {
        let n = self.n;
        let mut out = Vec::new();
        for (slot, ps) in self.iterations[t].iter().enumerate() {
            let (d, transposed) = match dir {
                Direction::Forward => (&ps.forward, false),
                Direction::Backward => match &ps.backward {
                    Some(b) => (b, true),
                    None => continue,
                },
            };
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let k = if transposed { j * n + i } else { i * n + j };
                    out.push(ScoredEdge {
                        i,
                        j,
                        predicate: slot,
                        s_sem: d.sem.as_ref().map_or(0.0, |v| v[k]),
                        s_spa: d.spa.as_ref().map_or(0.0, |v| v[k]),
                        s: d.blend[k],
                        raw_cos: d.raw_cos.as_ref().map_or(0.0, |v| v[k]),
                        direction: dir,
                        iteration: t,
                    });
                }
            }
        }
        out
    }

    pub fn combined_at(&self, slot: usize, i: usize, j: usize) -> f64 {
        self.combined[slot][i * self.n + j]
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub states: Vec<HiddenState>,
    /// Semantic vectors at every iteration `0 ..= T`.
    pub history: Vec<Vec<Vec<f64>>>,
    pub scores: ScoreTable,
    pub zero_norm_events: usize,
}

fn states_to_tensors(states: &[HiddenState]) -> (Tensor, Tensor) {
    let sem: Vec<Vec<f64>> = states.iter().map(|s| s.sem.clone()).collect();
    let spa: Vec<Vec<f64>> = states.iter().map(|s| s.spa.clone()).collect();
    (Tensor::from_rows(&sem), Tensor::from_rows(&spa))
}

fn read_direction(tape: &Tape, d: &DirectionVars) -> DirectionScores {
    DirectionScores {
        raw_cos: d.cos.map(|v| tape.value(v).data.clone()),
        sem: d.sem.map(|v| tape.value(v).data.clone()),
        spa: d.spa.map(|v| tape.value(v).data.clone()),
        blend: tape.value(d.blend).data.clone(),
    }
}

/// Runs `T` iterations of message passing and records every score table.
pub fn forward_pass(model: &PredicateModel, states: &[HiddenState]) -> Result<ForwardOutput> {
    if states.is_empty() {
        return Err(Error::InvalidArgument("forward pass needs at least one node".into()));
    }
    let cfg = model.config();
    let side2 = cfg.mask_resolution * cfg.mask_resolution;
    for s in states {
        if s.sem.len() != cfg.feature_dim || s.spa.len() != side2 {
            return Err(Error::InvalidArgument(format!(
                "hidden state shape ({}, {}) does not match model ({}, {side2})",
                s.sem.len(),
                s.spa.len(),
                cfg.feature_dim
            )));
        }
    }
    let (sem0, spa) = states_to_tensors(states);
    let mut tape = Tape::new();
    let g = model.build_graph(&mut tape, sem0, spa, false)?;
    let history: Vec<Vec<Vec<f64>>> = g.hidden.iter().map(|&h| tape.value(h).to_rows()).collect();
    let last = history.last().expect("nonempty").clone();
    let final_states = last
        .into_iter()
        .zip(states)
        .map(|(sem, s)| HiddenState { sem, spa: s.spa.clone() })
        .collect();
    let iterations = g
        .scores
        .iter()
        .map(|per| {
            per.iter()
                .map(|ps| PredicateScores {
                    forward: read_direction(&tape, &ps.fwd),
                    backward: ps.bwd.as_ref().map(|b| read_direction(&tape, b)),
                })
                .collect()
        })
        .collect();
    let combined = g.combined.iter().map(|&c| tape.value(c).data.clone()).collect();
    Ok(ForwardOutput {
        states: final_states,
        history,
        scores: ScoreTable {
            n: g.n,
            predicate_ids: cfg.predicate_ids.clone(),
            iterations,
            combined,
        },
        zero_norm_events: tape.zero_norm_events(),
    })
}

/// Semantic messages `m_i = sum_p sum_{j != i} s_p(h_i, h_j) g_p(h_j)` for the
/// current states, where `g_p` is the inverse function (forward when inverse
/// functions are disabled, identity when there are no semantic functions).
pub fn compute_messages(model: &PredicateModel, states: &[HiddenState]) -> Result<Vec<Vec<f64>>> {
    let n = states.len();
    let d = model.config().feature_dim;
    if n <= 1 {
        return Ok(vec![vec![0.0; d]; n]);
    }
    let (sem0, spa) = states_to_tensors(states);
    let mut tape = Tape::new();
    // One iteration; recover the message from H^1 = H^0 W0^T + norm * M.
    let mut cfg = model.config().clone();
    cfg.iterations = 1;
    let mut one = model.clone();
    one.config = cfg;
    let g = one.build_graph(&mut tape, sem0.clone(), spa, false)?;
    let h1 = tape.value(g.hidden[1]).clone();
    let norm = (model.n_predicates() * (n - 1)) as f64;
    let w0 = model.w0();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let hi = sem0.row_slice(i);
        let row: Vec<f64> = (0..d)
            .map(|r| {
                let base: f64 = (0..d).map(|c| w0[r * d + c] * hi[c]).sum();
                (h1.at(i, r) - base) * norm
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// `sem <- W0 sem + m / (|P| (|V| - 1))`; the message term is dropped when
/// `|V| = 1`. The mask is carried over unchanged.
pub fn update_hidden(state: &HiddenState, message: &[f64], w0: &[f64], n_predicates: usize, n_nodes: usize) -> HiddenState {
    let d = state.sem.len();
    let scale = if n_nodes > 1 { 1.0 / (n_predicates * (n_nodes - 1)) as f64 } else { 0.0 };
    let sem = (0..d)
        .map(|r| {
            let base: f64 = (0..d).map(|c| w0[r * d + c] * state.sem[c]).sum();
            if n_nodes > 1 {
                base + scale * message[r]
            } else {
                base
            }
        })
        .collect();
    HiddenState {
        sem,
        spa: state.spa.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(d: usize, l: usize, preds: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: d,
            mask_resolution: l,
            sem_depth: 1,
            sem_hidden: d,
            spa_depth: 1,
            spa_channels: 1,
            classifier_hidden: 3,
            iterations: 1,
            predicate_ids: (0..preds).collect(),
            n_categories: 3,
            init_seed: 5,
            ..ModelConfig::default()
        }
    }

    fn identity_model(d: usize, l: usize, preds: usize) -> PredicateModel {
        PredicateModel::with_init(config(d, l, preds), Init::Identity).unwrap()
    }

    fn state(sem: Vec<f64>, spa: Vec<f64>) -> HiddenState {
        HiddenState { sem, spa }
    }

    #[test]
    fn semantic_score_examples() {
        let m = identity_model(3, 4, 1);
        let h = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = h.iter().map(|x| -x).collect();
        assert!((m.score_semantic(0, &h, &h, Direction::Forward).unwrap() - 1.0).abs() < 1e-12);
        assert!(m.score_semantic(0, &h, &neg, Direction::Forward).unwrap().abs() < 1e-12);
        let s = m.score_semantic(0, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], Direction::Backward).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_scores_neutral_and_counts() {
        let m = identity_model(3, 4, 1);
        assert_eq!(m.zero_norm_events(), 0);
        let s = m.score_semantic(0, &[0.0; 3], &[1.0, 0.0, 0.0], Direction::Forward).unwrap();
        assert_eq!(s, 0.5);
        assert_eq!(m.zero_norm_events(), 1);
    }

    #[test]
    fn soft_iou_examples() {
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [1.0, 0.0, 1.0, 0.0];
        assert!((soft_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(soft_iou(&a, &b), soft_iou(&b, &a));
        assert!(soft_iou(&a, &a) > 1.0 - 1e-6);
        assert_eq!(soft_iou(&a, &[0.0, 0.0, 1.0, 1.0]), 0.0);
        assert_eq!(soft_iou(&[0.0; 4], &[0.0; 4]), 0.0);
    }

    #[test]
    fn blend_examples() {
        assert_eq!(blend(0.2, 0.6, 1.0, ScoreComponents::Both), 0.2);
        assert_eq!(blend(0.2, 0.6, 0.0, ScoreComponents::Both), 0.6);
        assert!((blend(0.2, 0.6, 0.5, ScoreComponents::Both) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn score_predicate_blends_recorded_parts() {
        let mut cfg = config(2, 4, 1);
        cfg.alpha = 0.25;
        let m = PredicateModel::new(cfg).unwrap();
        let a = state(vec![1.0, 0.3], crate::synthworld::rasterize_mask(&crate::datamodel::BBox::new(0.0, 0.0, 0.5, 0.5), 4));
        let b = state(vec![-0.2, 0.7], crate::synthworld::rasterize_mask(&crate::datamodel::BBox::new(0.25, 0.25, 1.0, 1.0), 4));
        let e = m.score_predicate(0, &a, &b, Direction::Forward).unwrap();
        assert!((e.s - (0.25 * e.s_sem + 0.75 * e.s_spa)).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&e.s_sem) && (0.0..=1.0).contains(&e.s_spa));
    }

    #[test]
    fn single_node_gets_zero_message() {
        let m = identity_model(2, 4, 2);
        let s = [state(vec![1.0, 2.0], vec![1.0; 16])];
        assert_eq!(compute_messages(&m, &s).unwrap(), vec![vec![0.0, 0.0]]);
        let out = forward_pass(&m, &s).unwrap();
        let w0 = m.w0();
        let expect: Vec<f64> = (0..2).map(|r| w0[r * 2] * 1.0 + w0[r * 2 + 1] * 2.0).collect();
        for (a, b) in out.states[0].sem.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_node_message_is_score_times_neighbour() {
        let m = identity_model(2, 4, 1);
        let h1 = state(vec![1.0, 0.0], crate::synthworld::rasterize_mask(&crate::datamodel::BBox::new(0.0, 0.0, 0.5, 0.5), 4));
        let h2 = state(vec![0.6, 0.8], crate::synthworld::rasterize_mask(&crate::datamodel::BBox::new(0.0, 0.0, 1.0, 0.5), 4));
        let s = m.score_predicate(0, &h1, &h2, Direction::Forward).unwrap().s;
        let msg = compute_messages(&m, &[h1, h2.clone()]).unwrap();
        for (a, b) in msg[0].iter().zip(&h2.sem) {
            assert!((a - s * b).abs() < 1e-9);
        }
    }

    #[test]
    fn update_examples() {
        let h = state(vec![3.0, -1.0], vec![0.5; 4]);
        let id = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(update_hidden(&h, &[0.0, 0.0], &id, 2, 3).sem, h.sem);
        assert_eq!(update_hidden(&h, &[9.0, 9.0], &id, 2, 1).sem, h.sem);
        let u = update_hidden(&h, &[2.0, 4.0], &[0.0; 4], 2, 3);
        assert_eq!(u.sem, vec![0.5, 1.0]);
        assert_eq!(u.spa, h.spa);
    }

    #[test]
    fn one_iteration_is_message_then_update() {
        let mut cfg = config(3, 4, 2);
        cfg.sem_depth = 2;
        cfg.spa_depth = 2;
        cfg.spa_channels = 2;
        let m = PredicateModel::new(cfg).unwrap();
        let states = vec![
            state(vec![0.3, -0.2, 0.9], vec![0.1, 0.9, 0.4, 0.0, 1.0, 0.2, 0.3, 0.3, 0.5, 0.5, 0.1, 0.0, 0.7, 0.2, 0.9, 0.6]),
            state(vec![-0.5, 0.4, 0.1], vec![0.2; 16]),
            state(vec![0.8, 0.8, -0.3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ];
        let msgs = compute_messages(&m, &states).unwrap();
        let out = forward_pass(&m, &states).unwrap();
        for (i, s) in states.iter().enumerate() {
            let u = update_hidden(s, &msgs[i], m.w0(), 2, 3);
            for (a, b) in out.states[i].sem.iter().zip(&u.sem) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(out.states[i].spa, s.spa);
        }
    }

    #[test]
    fn component_ablations_drop_parameters() {
        let mut cfg = config(3, 4, 2);
        cfg.components = ScoreComponents::SemanticOnly;
        let m = PredicateModel::new(cfg.clone()).unwrap();
        assert!(m.params().entries().iter().all(|e| !e.group.is_spatial()));
        cfg.components = ScoreComponents::SpatialOnly;
        cfg.inverse_functions = false;
        let m = PredicateModel::new(cfg.clone()).unwrap();
        assert!(m.params().entries().iter().all(|e| !e.group.is_semantic() && e.group != ParamGroup::SpatialInverse));
        let per: usize = m
            .params()
            .entries()
            .iter()
            .filter(|e| e.group == ParamGroup::SpatialForward)
            .map(|e| e.data.len())
            .sum();
        assert_eq!(per, 2 * cfg.parameters_per_predicate());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = config(3, 4, 1);
        assert!(ok.validate().is_ok());
        for bad in [
            ModelConfig { alpha: 1.5, ..ok.clone() },
            ModelConfig { iterations: 0, ..ok.clone() },
            ModelConfig { spa_kernel: 2, ..ok.clone() },
            ModelConfig { predicate_ids: vec![], ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn stored_feature_length_is_checked() {
        use crate::datamodel::{BBox, ObjectProposal};
        let sample = SceneGraphSample {
            sample_id: "s".into(),
            proposals: vec![ObjectProposal {
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                category: None,
                feature: Some(vec![1.0, 2.0]),
            }],
            relationships: vec![],
        };
        let h = init_hidden(&sample, &StoredFeatures { dim: 2 }, 8).unwrap();
        assert_eq!(h[0].sem, vec![1.0, 2.0]);
        assert_eq!(h[0].spa, vec![1.0; 64]);
        assert!(init_hidden(&sample, &StoredFeatures { dim: 3 }, 8).is_err());
    }
}

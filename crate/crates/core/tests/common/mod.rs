//! Shared fixtures: random small instances and a naive per-edge reference
//! implementation of message passing.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relfn::model::{Direction, HiddenState, ModelConfig, PredicateModel, ScoreComponents, SOFT_IOU_EPS};

pub struct Instance {
    pub model: PredicateModel,
    pub states: Vec<HiddenState>,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A mask that is either a filled rectangle or uniform noise in `[0, 1]`.
pub fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> Vec<f64> {
    if rng.random_bool(0.5) {
        let r0 = rng.random_range(0..side);
        let c0 = rng.random_range(0..side);
        let r1 = rng.random_range(r0..side);
        let c1 = rng.random_range(c0..side);
        (0..side * side)
            .map(|k| {
                let (r, c) = (k / side, k % side);
                f64::from(u8::from(r >= r0 && r <= r1 && c >= c0 && c <= c1))
            })
            .collect()
    } else {
        (0..side * side).map(|_| rng.random::<f64>()).collect()
    }
}

pub fn random_states(rng: &mut ChaCha8Rng, n: usize, d: usize, side: usize) -> Vec<HiddenState> {
    (0..n)
        .map(|_| HiddenState {
            sem: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            spa: random_mask(rng, side),
        })
        .collect()
}

/// Random architecture within `|V| <= 5`, `|P| <= 3`, `D <= 8`, `L <= 8`.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let components = match rng.random_range(0..4) {
        0 => ScoreComponents::SemanticOnly,
        1 => ScoreComponents::SpatialOnly,
        _ => ScoreComponents::Both,
    };
    let d = rng.random_range(2..=8);
    ModelConfig {
        feature_dim: d,
        mask_resolution: rng.random_range(3..=8),
        sem_depth: rng.random_range(1..=3),
        sem_hidden: rng.random_range(2..=8),
        spa_depth: rng.random_range(1..=3),
        spa_channels: rng.random_range(1..=3),
        spa_kernel: 3,
        classifier_hidden: 4,
        iterations: rng.random_range(1..=3),
        alpha: rng.random_range(0.1..0.9),
        update_sigmoid: rng.random_bool(0.3),
        inverse_functions: rng.random_bool(0.7),
        components,
        init_seed: rng.random(),
        predicate_ids: (0..rng.random_range(1..=3)).collect(),
        n_categories: 3,
    }
}

pub fn random_instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let cfg = random_config(&mut r);
    let n = r.random_range(1..=5);
    let states = random_states(&mut r, n, cfg.feature_dim, cfg.mask_resolution);
    let mut model = PredicateModel::new(cfg).expect("valid random config");
    // move biases off zero so every parameter matters
    for idx in 0..model.params().len() {
        for v in model.params_mut().data_mut(idx) {
            *v += r.random_range(-0.05..0.05);
        }
    }
    Instance { model, states }
}

fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn naive_soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut sa = 0.0;
    let mut sb = 0.0;
    for k in 0..a.len() {
        inter += a[k] * b[k];
        sa += a[k];
        sb += b[k];
    }
    inter / (sa + sb - inter + SOFT_IOU_EPS)
}

/// Blended score of `h_i` transformed by predicate `slot` against `h_j`.
pub fn naive_score(model: &PredicateModel, slot: usize, hi: (&[f64], &[f64]), hj: (&[f64], &[f64]), dir: Direction) -> f64 {
    let cfg = model.config();
    let sem = || {
        let t = model.apply_semantic(slot, dir, hi.0).unwrap();
        (1.0 + naive_cosine(&t, hj.0)) / 2.0
    };
    let spa = || {
        let t = model.apply_spatial(slot, dir, hi.1).unwrap();
        naive_soft_iou(&t, hj.1)
    };
    match cfg.components {
        ScoreComponents::Both => cfg.alpha * sem() + (1.0 - cfg.alpha) * spa(),
        ScoreComponents::SemanticOnly => sem(),
        ScoreComponents::SpatialOnly => spa(),
    }
}

pub struct NaiveOutput {
    pub final_sem: Vec<Vec<f64>>,
    /// `[t][slot][i][j]`
    pub forward: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[slot][i][j]`
    pub combined: Vec<Vec<Vec<f64>>>,
}

/// Message passing written as explicit loops over `(i, p, j)`.
pub fn naive_forward(model: &PredicateModel, states: &[HiddenState]) -> NaiveOutput {
    let cfg = model.config();
    let n = states.len();
    let np = model.n_predicates();
    let d = cfg.feature_dim;
    let w0 = model.w0();
    let masks: Vec<&[f64]> = states.iter().map(|s| s.spa.as_slice()).collect();
    let mut sem: Vec<Vec<f64>> = states.iter().map(|s| s.sem.clone()).collect();
    let mut forward = Vec::new();
    let mut backward = Vec::new();
    for t in 0..=cfg.iterations {
        let mut f_t = vec![vec![vec![0.0; n]; n]; np];
        let mut b_t = vec![vec![vec![0.0; n]; n]; np];
        for p in 0..np {
            for i in 0..n {
                for j in 0..n {
                    f_t[p][i][j] = naive_score(model, p, (&sem[i], masks[i]), (&sem[j], masks[j]), Direction::Forward);
                    if cfg.inverse_functions {
                        b_t[p][i][j] = naive_score(model, p, (&sem[i], masks[i]), (&sem[j], masks[j]), Direction::Backward);
                    }
                }
            }
        }
        if t < cfg.iterations {
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                let mut m = vec![0.0; d];
                for p in 0..np {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let src = if !cfg.components.semantic() {
                            sem[j].clone()
                        } else if cfg.inverse_functions {
                            model.apply_semantic(p, Direction::Backward, &sem[j]).unwrap()
                        } else {
                            model.apply_semantic(p, Direction::Forward, &sem[j]).unwrap()
                        };
                        for r in 0..d {
                            m[r] += f_t[p][i][j] * src[r];
                        }
                    }
                }
                let row: Vec<f64> = (0..d)
                    .map(|r| {
                        let mut v: f64 = (0..d).map(|c| w0[r * d + c] * sem[i][c]).sum();
                        if n > 1 {
                            v += m[r] / (np * (n - 1)) as f64;
                        }
                        if cfg.update_sigmoid {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            v
                        }
                    })
                    .collect();
                next.push(row);
            }
            sem = next;
        }
        forward.push(f_t);
        backward.push(b_t);
    }
    let last_f = forward.last().unwrap();
    let last_b = backward.last().unwrap();
    let combined = (0..np)
        .map(|p| {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            if cfg.inverse_functions {
                                last_f[p][i][j] * last_b[p][j][i]
                            } else {
                                last_f[p][i][j]
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    NaiveOutput {
        final_sem: sem,
        forward,
        combined,
    }
}

/// Largest absolute difference between the production forward pass and the
/// naive loops over final states, per-iteration forward scores and combined
/// scores.
pub fn oracle_gap(model: &PredicateModel, states: &[HiddenState]) -> f64 {
    let out = relfn::model::forward_pass(model, states).unwrap();
    let naive = naive_forward(model, states);
    let n = states.len();
    let mut gap: f64 = 0.0;
    for (a, b) in out.states.iter().zip(&naive.final_sem) {
        for (x, y) in a.sem.iter().zip(b) {
            gap = gap.max((x - y).abs());
        }
    }
    for (t, per) in out.scores.iterations.iter().enumerate() {
        for (p, ps) in per.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    gap = gap.max((ps.forward.blend[i * n + j] - naive.forward[t][p][i][j]).abs());
                }
            }
        }
    }
    for p in 0..naive.combined.len() {
        for i in 0..n {
            for j in 0..n {
                gap = gap.max((out.scores.combined_at(p, i, j) - naive.combined[p][i][j]).abs());
            }
        }
    }
    gap
}

pub fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Five images with random ground truth and a random full ranking over every
/// `(subject, predicate, object)`; ties in score are frequent on purpose.
pub fn random_eval_images(seed: u64) -> Vec<relfn::metrics::ImageEval> {
    use relfn::datamodel::BBox;
    use relfn::decoder::{sort_tuples, RankedTuple};
    use relfn::metrics::{GtTriple, ImageEval};
    let mut r = rng(seed);
    let unit = BBox::new(0.0, 0.0, 1.0, 1.0);
    (0..5)
        .map(|img| {
            let n = r.random_range(2..=6);
            let np = r.random_range(1..=4);
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
            let mut all = Vec::new();
            for s in 0..n {
                for o in 0..n {
                    if s != o {
                        for p in 0..np {
                            all.push((s, p, o));
                        }
                    }
                }
            }
            // image 4 sometimes carries no ground truth at all
            let n_gt = if img == 4 && r.random_bool(0.5) { 0 } else { r.random_range(1..=all.len().min(6)) };
            let gt = rand::seq::index::sample(&mut r, all.len(), n_gt)
                .into_iter()
                .map(|k| {
                    let (s, p, o) = all[k];
                    GtTriple {
                        subject: s,
                        predicate: p,
                        object: o,
                        subject_label: labels[s],
                        object_label: labels[o],
                        subject_box: unit,
                        object_box: unit,
                    }
                })
                .collect();
            let mut ranked: Vec<RankedTuple> = all
                .iter()
                .map(|&(s, p, o)| RankedTuple {
                    subject: s,
                    predicate: p,
                    object: o,
                    score: f64::from(r.random_range(0..8u8)) / 8.0,
                    subject_label: labels[s],
                    object_label: labels[o],
                    subject_box: None,
                    object_box: None,
                })
                .collect();
            sort_tuples(&mut ranked);
            ImageEval {
                id: format!("img{img}"),
                ranked,
                gt,
            }
        })
        .collect()
}

/// PredCls recall@K by set intersection of the top-K triples with the
/// ground-truth set, averaged over images that have ground truth.
pub fn brute_force_recall(images: &[relfn::metrics::ImageEval], k: usize) -> f64 {
    use std::collections::BTreeSet;
    let mut per = Vec::new();
    for img in images {
        let gt: BTreeSet<(usize, usize, usize)> = img.gt.iter().map(|g| (g.subject, g.predicate, g.object)).collect();
        if gt.is_empty() {
            continue;
        }
        let top: BTreeSet<(usize, usize, usize)> = img.ranked.iter().take(k).map(|t| (t.subject, t.predicate, t.object)).collect();
        per.push(gt.intersection(&top).count() as f64 / gt.len() as f64);
    }
    per.sort_by(f64::total_cmp);
    per.iter().sum::<f64>() / per.len() as f64
}

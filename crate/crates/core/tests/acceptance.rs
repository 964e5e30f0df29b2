//! Release acceptance criteria, run in a fixed order with one PASS/FAIL line
//! each. Trained desk-scale models are shared between the criteria that
//! need them.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use relfn::checkpoint;
use relfn::datamodel::{sample_k_shot_episode, Dataset, Split};
use relfn::decoder::EvalMode;
use relfn::fewshot::{run_episode, FewShotConfig, Representation};
use relfn::interp::spatial_heatmap;
use relfn::metrics::recall_at_k;
use relfn::model::{forward_pass, soft_iou, Direction, HiddenState, ModelConfig, PredicateModel, StoredFeatures};
use relfn::synthworld::{generate_world, WorldConfig};
use relfn::trainer::{gradcheck, gradcheck_config, train, validation_loss, OptimizerKind, TrainConfig, TrainReport};

use common::*;

const SEEDS: [u64; 3] = [0, 1, 2];
const DESK_BUDGET_SECONDS: f64 = 15.0 * 60.0;
const DESK_RECALL_FLOOR: f64 = 0.6;

struct Trained {
    model: PredicateModel,
    report: TrainReport,
    seconds: f64,
}

fn desk_world() -> &'static Dataset {
    static WORLD: OnceLock<Dataset> = OnceLock::new();
    WORLD.get_or_init(|| generate_world(&WorldConfig::default()).expect("default world"))
}

fn provider() -> StoredFeatures {
    StoredFeatures {
        dim: desk_world().feature_dim().expect("features"),
    }
}

/// Adam at 1e-3, 30 epochs, batch 8.
fn desk_recipe(seed: u64, disable_inverse: bool) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::Adam,
        learning_rate: 1e-3,
        epochs: 30,
        batch_size: 8,
        seed,
        disable_inverse,
        ..TrainConfig::default()
    }
}

fn train_seeds(disable_inverse: bool) -> Vec<Trained> {
    SEEDS
        .iter()
        .map(|&seed| {
            let started = Instant::now();
            let (model, report) = train(desk_world(), &provider(), &ModelConfig::default(), &desk_recipe(seed, disable_inverse), None).expect("training");
            let seconds = started.elapsed().as_secs_f64();
            println!(
                "    trained seed {seed}{}: val PredCls recall@50 {:.4}, best epoch {}, {seconds:.0}s",
                if disable_inverse { " without inverse functions" } else { "" },
                report.val_predcls_recall_at_50,
                report.best_epoch
            );
            Trained { model, report, seconds }
        })
        .collect()
}

fn full_models() -> &'static [Trained] {
    static FULL: OnceLock<Vec<Trained>> = OnceLock::new();
    FULL.get_or_init(|| train_seeds(false))
}

fn ablated_models() -> &'static [Trained] {
    static ABLATED: OnceLock<Vec<Trained>> = OnceLock::new();
    ABLATED.get_or_init(|| train_seeds(true))
}

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let inst = random_instance(1000 + seed);
        let cfg = inst.model.config();
        assert!(inst.states.len() <= 5 && cfg.n_predicates() <= 3 && cfg.feature_dim <= 8 && cfg.mask_resolution <= 8);
        worst = worst.max(oracle_gap(&inst.model, &inst.states));
    }
    let secs = started.elapsed().as_secs_f64();
    check(worst <= 1e-6 && secs < 30.0, format!("max gap {worst:.2e} (<= 1e-6) over 50 instances in {secs:.1}s (< 30s)"))
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let report = gradcheck(&gradcheck_config(), 0).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let n: usize = report.groups.values().map(|g| g.parameters).sum();
    check(
        report.max_rel_error <= 1e-4 && report.passed && secs < 120.0,
        format!(
            "max relative error {:.2e} (<= 1e-4) over {n} scalars in {} groups, {secs:.1}s (< 120s)",
            report.max_rel_error,
            report.groups.len()
        ),
    )
}

fn score_properties() -> Outcome {
    let mut inputs = 0usize;
    let mut out_of_range = 0usize;
    let mut seed = 0u64;
    while inputs < 10_000 {
        let inst = random_instance(5000 + seed);
        seed += 1;
        let mut r = rng(seed);
        let cfg = inst.model.config().clone();
        for _ in 0..50 {
            let pair = random_states(&mut r, 2, cfg.feature_dim, cfg.mask_resolution);
            let slot = r.random_range(0..cfg.n_predicates());
            let dir = if cfg.inverse_functions && r.random_bool(0.5) { Direction::Backward } else { Direction::Forward };
            let e = inst.model.score_predicate(slot, &pair[0], &pair[1], dir).map_err(|e| e.to_string())?;
            if ![e.s_sem, e.s_spa, e.s].iter().all(|v| (0.0..=1.0).contains(v)) {
                out_of_range += 1;
            }
            inputs += 1;
        }
    }
    let mut r = rng(77);
    let mut self_min: f64 = 1.0;
    let mut asymmetric = 0;
    for _ in 0..2000 {
        let side = r.random_range(1..=8);
        let a = random_mask(&mut r, side);
        let b = random_mask(&mut r, side);
        if soft_iou(&a, &b).to_bits() != soft_iou(&b, &a).to_bits() {
            asymmetric += 1;
        }
        let mut binary: Vec<f64> = a.iter().map(|&x| if x >= 0.5 { 1.0 } else { 0.0 }).collect();
        if binary.iter().all(|&x| x == 0.0) {
            binary[0] = 1.0;
        }
        self_min = self_min.min(soft_iou(&binary, &binary));
    }
    let fixture = soft_iou(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0]);
    let fixture_err = (fixture - 1.0 / 3.0).abs();
    check(
        out_of_range == 0 && self_min >= 1.0 - 1e-6 && asymmetric == 0 && fixture_err <= 1e-9,
        format!(
            "{out_of_range} of {inputs} scores outside [0, 1]; min self-IoU {self_min:.9}; {asymmetric} asymmetric pairs; 2x2 fixture off by {fixture_err:.1e}"
        ),
    )
}

fn permutation_equivariance() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = random_instance(9000 + seed);
        let n = inst.states.len();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng(seed));
        let permuted: Vec<HiddenState> = perm.iter().map(|&k| inst.states[k].clone()).collect();
        let a = forward_pass(&inst.model, &inst.states).map_err(|e| e.to_string())?;
        let b = forward_pass(&inst.model, &permuted).map_err(|e| e.to_string())?;
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in b.states[new].sem.iter().zip(&a.states[old].sem) {
                worst = worst.max((x - y).abs());
            }
        }
        for (ta, tb) in a.scores.iterations.iter().zip(&b.scores.iterations) {
            for (pa, pb) in ta.iter().zip(tb) {
                for i in 0..n {
                    for j in 0..n {
                        let k_new = i * n + j;
                        let k_old = perm[i] * n + perm[j];
                        worst = worst.max((pb.forward.blend[k_new] - pa.forward.blend[k_old]).abs());
                    }
                }
            }
        }
        for p in 0..inst.model.n_predicates() {
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((b.scores.combined_at(p, i, j) - a.scores.combined_at(p, perm[i], perm[j])).abs());
                }
            }
        }
    }
    check(worst <= 1e-6, format!("max deviation {worst:.2e} (<= 1e-6) over 20 instances"))
}

fn metric_oracle() -> Outcome {
    let ks = [1, 5, 50, 100];
    let mut mismatches = 0;
    let mut non_monotone = 0;
    for seed in 0..20 {
        let images = random_eval_images(seed);
        let res = recall_at_k(&images, &ks, EvalMode::PredCls).map_err(|e| e.to_string())?;
        let mut prev = 0.0;
        for k in ks {
            if res.at(k) != brute_force_recall(&images, k) {
                mismatches += 1;
            }
            if res.at(k) < prev {
                non_monotone += 1;
            }
            prev = res.at(k);
        }
    }
    check(
        mismatches == 0 && non_monotone == 0,
        format!("{mismatches} mismatches against set intersection, {non_monotone} decreases over K in {{1, 5, 50, 100}} on 20 fixtures"),
    )
}

fn desk_training() -> Outcome {
    let runs = full_models();
    let recalls: Vec<f64> = runs.iter().map(|t| t.report.val_predcls_recall_at_50).collect();
    let slowest = runs.iter().map(|t| t.seconds).fold(0.0, f64::max);
    let med = median(recalls.clone());
    check(
        med >= DESK_RECALL_FLOOR && slowest < DESK_BUDGET_SECONDS,
        format!("median val PredCls recall@50 {med:.4} (>= {DESK_RECALL_FLOOR}) over seeds {recalls:.4?}; slowest run {slowest:.0}s (< 900s)"),
    )
}

fn fewshot_transfer() -> Outcome {
    let ds = desk_world();
    let runs = full_models();
    let mut frozen = Vec::new();
    let mut raw = Vec::new();
    for (t, &seed) in runs.iter().zip(&SEEDS) {
        let episode = sample_k_shot_episode(ds, 5, seed).map_err(|e| e.to_string())?;
        let cfg = FewShotConfig {
            seed,
            ..FewShotConfig::default()
        };
        let f = run_episode(ds, &episode, &t.model, &provider(), Representation::Frozen, &cfg).map_err(|e| e.to_string())?;
        let r = run_episode(ds, &episode, &t.model, &provider(), Representation::Raw, &cfg).map_err(|e| e.to_string())?;
        frozen.push(f.recall_at_1);
        raw.push(r.recall_at_1);
    }
    let uniform = 1.0 / ds.vocabulary.rare_ids.len() as f64;
    let (mf, mr) = (median(frozen.clone()), median(raw.clone()));
    check(
        mf >= uniform + 0.15 && mf >= mr + 0.05,
        format!(
            "k=5 median rare recall@1 {mf:.4} vs uniform {uniform:.2} (margin {:.4} >= 0.15) and raw features {mr:.4} (margin {:.4} >= 0.05); frozen {frozen:.4?}, raw {raw:.4?}",
            mf - uniform,
            mf - mr
        ),
    )
}

fn inverse_ablation() -> Outcome {
    let full: Vec<f64> = full_models().iter().map(|t| t.report.val_predcls_recall_at_50).collect();
    let ablated: Vec<f64> = ablated_models().iter().map(|t| t.report.val_predcls_recall_at_50).collect();
    let (mf, ma) = (median(full), median(ablated.clone()));
    check(ma <= mf, format!("median val PredCls recall@50 without inverse functions {ma:.4} <= full model {mf:.4}; ablated seeds {ablated:.4?}"))
}

/// Every output file of one CLI pipeline run, keyed by relative path.
fn cli_pipeline(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let d = dir.to_str().expect("utf-8 temp path");
    let at = |name: &str| format!("{d}/{name}");
    let ckpt = at("ckpt/model.ckpt");
    let data = at("data.json");
    let commands: Vec<Vec<String>> = vec![
        vec!["synth", "--out", &data, "--samples", "60,20,30", "--seed", "5"],
        vec!["train", "--data", &data, "--out", &at("ckpt"), "--epochs", "3", "--optimizer", "adam", "--learning-rate", "0.001", "--seed", "9"],
        vec!["eval", "--ckpt", &ckpt, "--data", &data, "--mode", "predcls", "--out", &at("predcls.json"), "--predictions", &at("predcls.jsonl")],
        vec!["eval", "--ckpt", &ckpt, "--data", &data, "--mode", "sgcls", "--out", &at("sgcls.json")],
        vec!["eval", "--ckpt", &ckpt, "--data", &data, "--mode", "sggen", "--proposal-jitter", "0.1", "--seed", "4", "--out", &at("sggen.json")],
        vec!["fewshot", "--ckpt", &ckpt, "--data", &data, "--k", "1..2", "--seeds", "0,1", "--out", &at("fewshot.json")],
        vec!["inspect", "heatmap", "--ckpt", &ckpt, "--data", &data, "--sample", "test_00001", "--node", "1", "--predicate", "2", "--direction", "backward", "--out", &at("heat.pgm")],
        vec!["inspect", "neighbors", "--ckpt", &ckpt, "--data", &data, "--predicate", "1", "--subject", "3", "--out", &at("neighbors.json")],
        vec!["inspect", "embedding", "--ckpt", &ckpt, "--data", &data, "--out", &at("embedding.csv")],
        vec!["gradcheck", "--seed", "2", "--out", &at("gradcheck.json")],
    ]
    .into_iter()
    .map(|c| c.into_iter().map(String::from).collect())
    .collect();
    for c in &commands {
        let argv = ["relfn", "--threads", "1"].into_iter().map(String::from).chain(c.iter().cloned());
        let code = relfn_cli::run(argv);
        if code != 0 {
            return Err(format!("`{}` exited with {code}", c.join(" ")));
        }
    }
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in fs::read_dir(&p).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "train.log") {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = cli_pipeline(dir.path())?;
    for entry in fs::read_dir(dir.path()).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.is_dir() {
            fs::remove_dir_all(&p).map_err(|e| e.to_string())?;
        } else {
            fs::remove_file(&p).map_err(|e| e.to_string())?;
        }
    }
    let second = cli_pipeline(dir.path())?;
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    check(
        differing.is_empty() && first.len() == second.len(),
        format!("{} output files compared byte for byte across two --threads 1 reruns; differing: {differing:?}", first.len()),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let ds = desk_world();
    let trained = &full_models()[0];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&trained.model, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let cfg = desk_recipe(0, false);
    let before = validation_loss(&trained.model, ds, &provider(), &cfg).map_err(|e| e.to_string())?;
    let after = validation_loss(&loaded, ds, &provider(), &cfg).map_err(|e| e.to_string())?;
    let mut heatmaps = 0;
    let mut differing = 0;
    for sample in ds.split(Split::Test).iter().take(5) {
        for &p in &loaded.config().predicate_ids {
            for dir_ in [Direction::Forward, Direction::Backward] {
                let a = spatial_heatmap(&trained.model, p, dir_, sample, 0).map_err(|e| e.to_string())?;
                let b = spatial_heatmap(&loaded, p, dir_, sample, 0).map_err(|e| e.to_string())?;
                let (pa, pb) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
                a.write_pgm(&pa).map_err(|e| e.to_string())?;
                b.write_pgm(&pb).map_err(|e| e.to_string())?;
                heatmaps += 1;
                if fs::read(&pa).unwrap() != fs::read(&pb).unwrap() {
                    differing += 1;
                }
            }
        }
    }
    let gap = (before - after).abs();
    check(
        gap <= 1e-7 && differing == 0,
        format!("validation loss {before:.9} vs {after:.9} (gap {gap:.1e} <= 1e-7); {differing} of {heatmaps} heatmap files differ"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient check", gradient_check),
        ("score properties", score_properties),
        ("permutation equivariance", permutation_equivariance),
        ("metric oracle", metric_oracle),
        ("desk-scale training", desk_training),
        ("few-shot transfer", fewshot_transfer),
        ("inverse-function ablation", inverse_ablation),
        ("determinism", determinism),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    println!("running {} acceptance criteria", criteria.len());
    let mut failed = 0;
    for (n, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", n + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail} [{secs:.1}s]", n + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! Command-line driver: argument parsing and subcommand wiring. The binary
//! is a thin wrapper around [`run`].

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use relfn::checkpoint;
use relfn::datamodel::{load_dataset, sample_k_shot_episode, Dataset, Split};
use relfn::decoder::{write_predictions, EvalMode};
use relfn::fewshot::{run_episode, FewShotConfig, FewShotResult, Representation, RECALL_AT_50_SCOPE};
use relfn::interp::{category_means, embedding_projection, semantic_neighbors, spatial_heatmap, write_projection_csv};
use relfn::metrics::{evaluate, EvalOptions};
use relfn::model::{Direction, ModelConfig, StoredFeatures};
use relfn::synthworld::{generate_world, WorldConfig};
use relfn::trainer::{gradcheck, gradcheck_config, train, OptimizerKind, TrainConfig};

#[derive(Parser)]
#[command(name = "relfn", version, about = "Predicates as learned functions for scene graph prediction")]
struct Cli {
    /// Upper bound on worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic relational dataset.
    Synth(SynthArgs),
    /// Train the graph network on the frequent predicates.
    Train(TrainArgs),
    /// Evaluate a checkpoint with recall@K.
    Eval(EvalArgs),
    /// Train and evaluate k-shot rare-predicate classifiers.
    Fewshot(FewshotArgs),
    /// Interpretability artifacts.
    Inspect {
        #[command(subcommand)]
        what: InspectCommand,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Sample counts as `train,val,test`.
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    mask_resolution: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Momentum,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Momentum => OptimizerKind::Momentum,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the checkpoint and report.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    semantic_only: bool,
    #[arg(long)]
    spatial_only: bool,
    #[arg(long)]
    disable_inverse: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Predcls,
    Sgcls,
    Sggen,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Predcls => EvalMode::PredCls,
            ModeArg::Sgcls => EvalMode::SgCls,
            ModeArg::Sggen => EvalMode::SgGen,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Comma-separated K values.
    #[arg(long, default_value = "50,100")]
    k: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write ranked predictions as JSON lines.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// SGGen: perturb proposal boxes by up to this fraction of their size.
    #[arg(long, default_value_t = 0.0)]
    proposal_jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FewshotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Shots per rare predicate: `5`, `1,3,5` or `1..5`.
    #[arg(long, default_value = "1..5")]
    k: String,
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    /// Few-shot classifier settings as JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    pool_to: Option<usize>,
    #[arg(long)]
    expand_scores: bool,
    /// Skip the raw-feature baseline.
    #[arg(long)]
    no_baseline: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Forward,
    Backward,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Forward => Direction::Forward,
            DirectionArg::Backward => Direction::Backward,
        }
    }
}

#[derive(Subcommand)]
enum InspectCommand {
    /// Write a predicate's spatial transform of one node mask as a PGM image.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        node: usize,
        /// Predicate name or index.
        #[arg(long)]
        predicate: String,
        #[arg(long, value_enum, default_value = "forward")]
        direction: DirectionArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank categories closest to a transformed subject category.
    Neighbors {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predicate: String,
        /// Subject category name or index.
        #[arg(long)]
        subject: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project category mean embeddings to 2D and write a CSV.
    Embedding {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GradcheckArgs {
    /// JSON with an optional `model` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    disable_inverse: bool,
    #[arg(long)]
    semantic_only: bool,
    #[arg(long)]
    spatial_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Core(relfn::Error),
    Gradient(String),
}

impl From<relfn::Error> for Failure {
    fn from(e: relfn::Error) -> Self {
        Failure::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentFile {
    model: Option<Value>,
    train: Option<TrainConfig>,
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| relfn::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::Core(relfn::Error::Parse(format!("{}: {e}", path.display()))))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: Value, what: &str) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| Failure::Core(relfn::Error::Config(format!("{what}: {e}"))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut text = serde_json::to_string_pretty(value).map_err(relfn::Error::from)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| relfn::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| {
        Failure::Core(relfn::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn parse_list(text: &str, what: &str) -> CliResult<Vec<u64>> {
    let bad = || Failure::Usage(format!("invalid {what} list `{text}`"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn provider_for(dataset: &Dataset) -> CliResult<StoredFeatures> {
    let dim = dataset
        .feature_dim()
        .ok_or_else(|| Failure::Core(relfn::Error::Config("dataset carries no proposal features".into())))?;
    Ok(StoredFeatures { dim })
}

fn lookup(names: &[String], key: &str, what: &str) -> CliResult<usize> {
    if let Some(i) = names.iter().position(|n| n == key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < names.len() => Ok(i),
        _ => Err(Failure::Core(relfn::Error::NotFound(format!("{what} `{key}`")))),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let mut cfg: WorldConfig = match &a.config {
        Some(p) => from_value(read_json(p)?, "world config")?,
        None => WorldConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.noise_sigma {
        cfg.noise_sigma = s;
    }
    if let Some(d) = a.feature_dim {
        cfg.feature_dim = d;
    }
    if let Some(l) = a.mask_resolution {
        cfg.mask_resolution = l;
    }
    if let Some(s) = &a.samples {
        let v = parse_list(s, "sample count")?;
        if v.len() != 3 {
            return Err(Failure::Usage("--samples expects train,val,test".into()));
        }
        cfg.samples_per_split = [v[0] as usize, v[1] as usize, v[2] as usize];
    }
    let ds = generate_world(&cfg)?;
    write_file(&a.out, ds.to_json().as_bytes())?;
    log::info!("wrote {} samples to {}", ds.splits.train.len() + ds.splits.val.len() + ds.splits.test.len(), a.out.display());
    Ok(())
}

fn resolve_train(a: &TrainArgs, dataset: &Dataset) -> CliResult<(ModelConfig, TrainConfig)> {
    let file: ExperimentFile = match &a.config {
        Some(p) => from_value(read_json(p)?, "experiment config")?,
        None => ExperimentFile::default(),
    };
    let model_value = file.model.unwrap_or_else(|| json!({}));
    let has_dim = model_value.get("feature_dim").is_some();
    let mut model: ModelConfig = from_value(model_value, "model config")?;
    if !has_dim {
        model.feature_dim = provider_for(dataset)?.dim;
    }
    let mut tc = file.train.unwrap_or_default();
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        tc.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(o) = a.optimizer {
        tc.optimizer = o.into();
    }
    tc.semantic_only |= a.semantic_only;
    tc.spatial_only |= a.spatial_only;
    tc.disable_inverse |= a.disable_inverse;
    Ok((model, tc))
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let dataset = load_dataset(&a.data)?;
    let (model_cfg, tc) = resolve_train(&a, &dataset)?;
    let provider = provider_for(&dataset)?;
    fs::create_dir_all(&a.out).map_err(|e| relfn::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let ckpt = a.out.join("model.ckpt");
    let (_, report) = train(&dataset, &provider, &model_cfg, &tc, Some(&ckpt))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let log = format!(
        "finished_unix={now}\nwall_clock_seconds={:.3}\nepochs={}\nbest_epoch={}\nval_predcls_recall_at_50={}\n",
        report.wall_clock_seconds,
        report.epochs.len(),
        report.best_epoch,
        report.val_predcls_recall_at_50
    );
    write_file(&a.out.join("train.log"), log.as_bytes())?;
    println!("val PredCls recall@50 = {:.4} (best epoch {})", report.val_predcls_recall_at_50, report.best_epoch);
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let model = checkpoint::load(&a.ckpt)?;
    let dataset = load_dataset(&a.data)?;
    let provider = provider_for(&dataset)?;
    let k_values: Vec<usize> = parse_list(&a.k, "K")?.into_iter().map(|k| k as usize).collect();
    let split: Split = a.split.into();
    let opts = EvalOptions {
        mode: a.mode.into(),
        k_values,
        proposal_jitter: a.proposal_jitter,
        seed: a.seed,
    };
    let (result, records) = evaluate(&model, dataset.split(split), &provider, &opts)?;
    if let Some(p) = &a.predictions {
        let mut buf = Vec::new();
        write_predictions(&mut buf, &records)?;
        write_file(p, &buf)?;
    }
    let out = json!({
        "config": { "eval": opts, "split": split, "model": model.config() },
        "seed": a.seed,
        "mode": result.mode,
        "recall": result.recall,
        "result": result,
    });
    write_json(&a.out, &out)?;
    for (k, v) in &result.recall {
        println!("{} {k} = {v:.4}", result.mode);
    }
    Ok(())
}

#[derive(Serialize)]
struct FewshotSummary {
    k: usize,
    median_recall_at_1: f64,
    median_recall_at_50: f64,
    baseline_median_recall_at_1: Option<f64>,
    baseline_median_recall_at_50: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn fewshot_cmd(a: FewshotArgs) -> CliResult {
    let before = fs::read(&a.ckpt).map_err(|e| relfn::Error::Io {
        path: a.ckpt.clone(),
        source: e,
    })?;
    let model = checkpoint::from_bytes(&before)?;
    let dataset = load_dataset(&a.data)?;
    let provider = provider_for(&dataset)?;
    let mut cfg: FewShotConfig = match &a.config {
        Some(p) => from_value(read_json(p)?, "few-shot config")?,
        None => FewShotConfig::default(),
    };
    if let Some(h) = a.hidden {
        cfg.hidden = h;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(s) = a.max_steps {
        cfg.max_steps = s;
    }
    if a.pool_to.is_some() {
        cfg.pool_to = a.pool_to;
    }
    cfg.expand_scores |= a.expand_scores;
    cfg.validate()?;
    let ks: Vec<usize> = parse_list(&a.k, "k")?.into_iter().map(|k| k as usize).collect();
    let seeds = parse_list(&a.seeds, "seed")?;
    let mut runs: Vec<FewShotResult> = Vec::new();
    let mut baseline: Vec<FewShotResult> = Vec::new();
    let mut summary = Vec::new();
    for &k in &ks {
        let (mut r1, mut r50, mut b1, mut b50) = (vec![], vec![], vec![], vec![]);
        for &seed in &seeds {
            let episode = sample_k_shot_episode(&dataset, k, seed)?;
            let run_cfg = FewShotConfig { seed, ..cfg.clone() };
            let r = run_episode(&dataset, &episode, &model, &provider, Representation::Frozen, &run_cfg)?;
            r1.push(r.recall_at_1);
            r50.push(r.recall_at_50);
            runs.push(r);
            if !a.no_baseline {
                let b = run_episode(&dataset, &episode, &model, &provider, Representation::Raw, &run_cfg)?;
                b1.push(b.recall_at_1);
                b50.push(b.recall_at_50);
                baseline.push(b);
            }
        }
        let s = FewshotSummary {
            k,
            median_recall_at_1: median(r1),
            median_recall_at_50: median(r50),
            baseline_median_recall_at_1: (!b1.is_empty()).then(|| median(b1)),
            baseline_median_recall_at_50: (!b50.is_empty()).then(|| median(b50)),
        };
        println!(
            "k={k}: recall@1 {:.4} recall@50 {:.4}{}",
            s.median_recall_at_1,
            s.median_recall_at_50,
            s.baseline_median_recall_at_1.map_or(String::new(), |b| format!(" (raw-feature baseline recall@1 {b:.4})"))
        );
        summary.push(s);
    }
    let after = fs::read(&a.ckpt).map_err(|e| relfn::Error::Io {
        path: a.ckpt.clone(),
        source: e,
    })?;
    if before != after || checkpoint::to_bytes(&model)? != before {
        return Err(Failure::Core(relfn::Error::Checkpoint("frozen checkpoint changed during the few-shot run".into())));
    }
    let out = json!({
        "config": { "fewshot": cfg, "model": model.config(), "k": ks, "seeds": seeds },
        "seed": seeds,
        "recall_at_50_scope": RECALL_AT_50_SCOPE,
        "summary": summary,
        "runs": runs,
        "baseline": baseline,
    });
    write_json(&a.out, &out)
}

fn inspect_cmd(what: InspectCommand) -> CliResult {
    match what {
        InspectCommand::Heatmap {
            ckpt,
            data,
            sample,
            split,
            node,
            predicate,
            direction,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let p = lookup(&dataset.vocabulary.predicates, &predicate, "predicate")?;
            let s = dataset.find_sample(split.into(), &sample)?;
            let map = spatial_heatmap(&model, p, direction.into(), s, node)?;
            write_file(&out, &map.to_pgm())?;
            let (r, c) = map.centroid();
            println!("centroid row {r:.4} col {c:.4}");
        }
        InspectCommand::Neighbors {
            ckpt,
            data,
            predicate,
            subject,
            top,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let provider = provider_for(&dataset)?;
            let p = lookup(&dataset.vocabulary.predicates, &predicate, "predicate")?;
            let c = lookup(&dataset.vocabulary.object_categories, &subject, "category")?;
            let means = category_means(&model, &dataset, &provider)?;
            let ranked = semantic_neighbors(&model, &means, &dataset.vocabulary.object_categories, p, c, top)?;
            let report = json!({
                "config": { "predicate": dataset.vocabulary.predicates[p], "subject": dataset.vocabulary.object_categories[c], "top": top, "model": model.config() },
                "seed": model.config().init_seed,
                "neighbors": ranked,
            });
            write_json(&out, &report)?;
        }
        InspectCommand::Embedding { ckpt, data, out } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = load_dataset(&data)?;
            let provider = provider_for(&dataset)?;
            let means = category_means(&model, &dataset, &provider)?;
            let proj = embedding_projection(&means, &dataset.vocabulary.object_categories)?;
            let mut buf = Vec::new();
            write_projection_csv(&mut buf, &proj)?;
            write_file(&out, &buf)?;
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    let mut model = gradcheck_config();
    if let Some(p) = &a.config {
        let file: ExperimentFile = from_value(read_json(p)?, "experiment config")?;
        if let Some(m) = file.model {
            let mut base = serde_json::to_value(&model).map_err(relfn::Error::from)?;
            if let (Some(base), Some(over)) = (base.as_object_mut(), m.as_object()) {
                for (k, v) in over {
                    base.insert(k.clone(), v.clone());
                }
            }
            model = from_value(base, "model config")?;
        }
    }
    let tc = TrainConfig {
        seed: a.seed,
        semantic_only: a.semantic_only,
        spatial_only: a.spatial_only,
        disable_inverse: a.disable_inverse,
        ..TrainConfig::default()
    };
    tc.validate()?;
    let mut model = tc.resolve_model(&model);
    model.init_seed = a.seed;
    let report = gradcheck(&model, a.seed)?;
    match &a.out {
        Some(p) => write_json(p, &report)?,
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(relfn::Error::from)?;
            println!("{text}");
        }
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Gradient(format!(
            "max relative error {:.3e} exceeds {:.0e} in: {}",
            report.max_rel_error,
            report.tolerance,
            report.failing_groups.join(", ")
        )))
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Fewshot(a) => fewshot_cmd(a),
        Command::Inspect { what } => inspect_cmd(what),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn execute(cli: Cli) -> CliResult {
    match cli.threads {
        None => dispatch(cli.command),
        Some(0) => Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Usage(format!("cannot start {n} worker threads: {e}")))?;
            pool.install(|| dispatch(cli.command))
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 for bad input, 2 for runtime faults.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("run `relfn --help` for usage");
            1
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                1
            } else {
                2
            }
        }
        Err(Failure::Gradient(m)) => {
            eprintln!("gradient check failed: {m}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges_parse() {
        assert_eq!(parse_list("50,100", "K").ok(), Some(vec![50, 100]));
        assert_eq!(parse_list("1..5", "k").ok(), Some(vec![1, 2, 3, 4, 5]));
        assert_eq!(parse_list(" 7 ", "seed").ok(), Some(vec![7]));
        assert!(parse_list("5..1", "k").is_err());
        assert!(parse_list("a,b", "k").is_err());
    }

    #[test]
    fn median_of_even_and_odd_lists() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn lookup_accepts_names_and_indices() {
        let names = vec!["left_of".to_string(), "above".to_string()];
        assert_eq!(lookup(&names, "above", "predicate").ok(), Some(1));
        assert_eq!(lookup(&names, "0", "predicate").ok(), Some(0));
        assert!(lookup(&names, "2", "predicate").is_err());
    }
}

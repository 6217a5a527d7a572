//! Argument parsing and one handler per subcommand.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use refgame_core::eval::{self, ComprehensionMode, GenerationSettings, GenerationVariant, Scorer};
use refgame_core::gradsuite;
use refgame_core::rng;
use refgame_core::trainer::{write_atomic, Checkpoint, TrainConfig, Trainer};
use refgame_core::visual::FeatureCache;
use refgame_core::world::{generate_dataset, Dataset, Split, Vocabulary, WorldConfig};
use refgame_core::Error;

use crate::manifest::RunManifest;

/// Queries of the train split used to tune the ensemble weight.
const TUNE_LIMIT: usize = 3000;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "refgame",
    version,
    about = "Referring-expression speaker, listener and reinforcer"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as JSON lines.
    GenData(GenData),
    /// Train a model, optionally resuming from a checkpoint.
    Train(Train),
    /// Comprehension accuracy on a split.
    EvalComprehension(EvalComprehension),
    /// Oracle accuracy, duplicate rate and length of generated expressions.
    EvalGeneration(EvalGeneration),
    /// Rank the objects of one scene for an expression.
    Comprehend(Comprehend),
    /// Describe every object of one scene.
    Generate(Generate),
    /// Finite-difference check of every operation and loss.
    GradCheck(GradCheck),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON file of configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field override, `key=value`; repeatable and applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct Train {
    /// Dataset file written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from this checkpoint instead of starting afresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalInputs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Override of evaluation fields of the checkpoint's config, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalComprehension {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, default_value = "val")]
    split: String,
    /// speaker, listener or ensemble.
    #[arg(long, default_value = "ensemble")]
    mode: String,
    /// Ensemble weight; tuned on the train split when omitted.
    #[arg(long)]
    lambda: Option<f64>,
    /// Score jittered boxes instead of the true ones.
    #[arg(long)]
    jitter: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalGeneration {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long, default_value = "val")]
    split: String,
    /// greedy, sample, beam-top1 or rerank.
    #[arg(long, alias = "mode", default_value = "rerank")]
    variant: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Comprehend {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long)]
    scene_id: usize,
    #[arg(long)]
    expr: String,
    #[arg(long, default_value = "ensemble")]
    mode: String,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    jitter: bool,
}

#[derive(Debug, Args)]
struct Generate {
    #[command(flatten)]
    inputs: EvalInputs,
    #[arg(long)]
    scene_id: usize,
    #[arg(long, alias = "mode", default_value = "rerank")]
    variant: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GradCheck {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::EvalComprehension(a) => eval_comprehension(a),
        Command::EvalGeneration(a) => eval_generation(a),
        Command::Comprehend(a) => comprehend(a),
        Command::Generate(a) => generate(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Defaults, then the config file, then `extra` and `sets` in order. Keys
/// absent from the defaults are rejected.
fn resolve<T: Serialize + DeserializeOwned + Default>(
    file: Option<&Path>,
    extra: &[String],
    sets: &[String],
) -> CliResult<T> {
    let mut v = serde_json::to_value(T::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    let obj = v.as_object_mut().expect("configs serialise to objects");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let parsed: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let fields = parsed.as_object().ok_or_else(|| {
            CliError::Config(format!("{} must hold a JSON object", path.display()))
        })?;
        for (k, val) in fields {
            if !obj.contains_key(k) {
                return Err(CliError::Config(format!(
                    "unknown config key `{k}` in {}",
                    path.display()
                )));
            }
            obj.insert(k.clone(), val.clone());
        }
    }
    for s in extra.iter().chain(sets) {
        let (k, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
        let k = k.trim();
        if !obj.contains_key(k) {
            return Err(CliError::Config(format!("unknown config key `{k}`")));
        }
        let val = serde_json::from_str(raw.trim())
            .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        obj.insert(k.to_string(), val);
    }
    serde_json::from_value(v).map_err(|e| CliError::Config(e.to_string()))
}

fn to_value<T: Serialize>(t: &T) -> serde_json::Value {
    serde_json::to_value(t).unwrap_or(serde_json::Value::Null)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn gen_data(a: GenData) -> CliResult<()> {
    let start = Instant::now();
    let world: WorldConfig = resolve(a.cfg.config.as_deref(), &[], &a.cfg.sets)?;
    world.validate()?;
    let dataset = generate_dataset(&world, a.seed)?;
    create_dir(&a.out)?;
    let path = a.out.join("dataset.jsonl");
    write_atomic(&path, &dataset.to_jsonl()?)?;
    let counts: Vec<String> = Split::ALL
        .iter()
        .map(|&s| format!("{} {}", s.name(), dataset.split(s).count()))
        .collect();
    let mut m = RunManifest::new("gen-data", to_value(&world), a.seed);
    m.output("dataset", &path);
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out)?;
    println!(
        "wrote {} scenes ({}) to {}",
        dataset.scenes.len(),
        counts.join(", "),
        path.display()
    );
    Ok(())
}

fn load_dataset(path: &Path, vocab: &Vocabulary) -> CliResult<Dataset> {
    Dataset::load(path, vocab).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn train(a: Train) -> CliResult<()> {
    let start = Instant::now();
    let vocab = Vocabulary::standard();
    let mut trainer = match &a.checkpoint {
        Some(path) => {
            if a.cfg.config.is_some() || !a.cfg.sets.is_empty() || a.seed.is_some() {
                return Err(CliError::Config(
                    "a resumed run keeps its checkpoint's configuration".into(),
                ));
            }
            let ck = Checkpoint::load(path)?;
            let vocab = ck.vocabulary()?;
            Trainer::resume(load_dataset(&a.data, &vocab)?, ck)?
        }
        None => {
            let seed: Vec<String> = a.seed.map(|s| format!("seed={s}")).into_iter().collect();
            let cfg: TrainConfig = resolve(a.cfg.config.as_deref(), &seed, &a.cfg.sets)?;
            cfg.validate()?;
            let dataset = load_dataset(&a.data, &vocab)?;
            Trainer::new(dataset, &vocab, cfg)?
        }
    };
    if let Some(r) = &trainer.state.reward {
        eprintln!(
            "reward: {} steps, train acc {:.4}, held-out acc {:.4}",
            r.report.steps, r.report.train_accuracy, r.heldout_accuracy
        );
    }
    create_dir(&a.out)?;
    let path = a.out.join("checkpoint.json");
    trainer.run(|rec| {
        eprintln!(
            "step {:>6}  loss {:.4}  val {:.4}",
            rec.step, rec.loss, rec.val_accuracy
        );
    })?;
    let ck = trainer.into_checkpoint();
    ck.save(&path)?;
    let mut m = RunManifest::new("train", to_value(&ck.config), ck.config.seed);
    m.input("data", &a.data);
    if let Some(c) = &a.checkpoint {
        m.input("resume", c);
    }
    m.output("checkpoint", &path);
    m.duration_secs = start.elapsed().as_secs_f64();
    m.write(&a.out)?;
    println!(
        "trained {} steps; best val {:.4} at step {}; checkpoint {}",
        ck.step,
        ck.progress.best_val.unwrap_or(f64::NAN),
        ck.progress.best_step,
        path.display()
    );
    Ok(())
}

/// Checkpoint, dataset and features ready for scoring.
struct Loaded {
    ck: Checkpoint,
    vocab: Vocabulary,
    dataset: Dataset,
    model: refgame_core::model::Model,
    features: FeatureCache,
}

fn load(inputs: &EvalInputs) -> CliResult<Loaded> {
    let mut ck = Checkpoint::load(&inputs.checkpoint)?;
    if !inputs.sets.is_empty() {
        let shape = ck.config.model_config(ck.vocab.len());
        ck.config = ck.config.with_overrides(&inputs.sets)?;
        if ck.config.model_config(ck.vocab.len()) != shape {
            return Err(CliError::Config(
                "overrides may not change the model's shape".into(),
            ));
        }
        ck.config.validate()?;
    }
    let vocab = ck.vocabulary()?;
    let dataset = load_dataset(&inputs.data, &vocab)?;
    let model = ck.model()?;
    let features = FeatureCache::build(&dataset, &model.config.visual)?;
    Ok(Loaded {
        ck,
        vocab,
        dataset,
        model,
        features,
    })
}

fn parse_split(s: &str) -> CliResult<Split> {
    Ok(Split::parse(s)?)
}

fn write_report<T: Serialize>(
    out: &Path,
    stem: &str,
    report: &T,
    text: &str,
) -> CliResult<(PathBuf, PathBuf)> {
    create_dir(out)?;
    let json = out.join(format!("{stem}.json"));
    let txt = out.join(format!("{stem}.txt"));
    let mut body =
        serde_json::to_string_pretty(report).map_err(|e| CliError::Runtime(e.to_string()))?;
    body.push('\n');
    write_atomic(&json, body.as_bytes())?;
    write_atomic(&txt, text.as_bytes())?;
    Ok((json, txt))
}

fn ensemble_lambda(l: &Loaded, mode: ComprehensionMode, given: Option<f64>) -> CliResult<f64> {
    match (mode, given) {
        (_, Some(x)) if !(x.is_finite() && x >= 0.0) => Err(CliError::Config(format!(
            "lambda must be finite and non-negative, got {x}"
        ))),
        (_, Some(x)) => Ok(x),
        (ComprehensionMode::Ensemble, None) => {
            let scorer = Scorer::new(&l.model, l.ck.eval_params(), &l.features);
            Ok(eval::tune_lambda_on(
                &scorer,
                &l.dataset,
                Split::Train,
                TUNE_LIMIT,
            )?)
        }
        _ => Ok(0.0),
    }
}

fn eval_comprehension(a: EvalComprehension) -> CliResult<()> {
    let start = Instant::now();
    let split = parse_split(&a.split)?;
    let mode: ComprehensionMode = a.mode.parse()?;
    let l = load(&a.inputs)?;
    let lambda = ensemble_lambda(&l, mode, a.lambda)?;
    let jitter = a.jitter.then_some((l.ck.config.jitter, l.ck.config.seed));
    let report = eval::evaluate_comprehension(
        &l.model,
        l.ck.eval_params(),
        &l.dataset,
        &l.features,
        split,
        mode,
        lambda,
        jitter,
    )?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        let stem = format!(
            "comprehension_{}_{}{}",
            split.name(),
            mode,
            if a.jitter { "_jitter" } else { "" }
        );
        let (json, txt) = write_report(out, &stem, &report, &text)?;
        let mut m = RunManifest::new(
            "eval-comprehension",
            to_value(&l.ck.config),
            l.ck.config.seed,
        );
        m.input("checkpoint", &a.inputs.checkpoint);
        m.input("data", &a.inputs.data);
        m.output("report", &json);
        m.output("text", &txt);
        m.duration_secs = start.elapsed().as_secs_f64();
        m.write(out)?;
    }
    Ok(())
}

fn settings(cfg: &TrainConfig) -> GenerationSettings {
    GenerationSettings {
        beam: cfg.beam_width,
        max_len: cfg.max_len,
        temperature: cfg.temperature,
        weights: cfg.rerank(),
    }
}

fn eval_generation(a: EvalGeneration) -> CliResult<()> {
    let start = Instant::now();
    let split = parse_split(&a.split)?;
    let variant: GenerationVariant = a.variant.parse()?;
    let l = load(&a.inputs)?;
    let scorer = Scorer::new(&l.model, l.ck.eval_params(), &l.features);
    let report = eval::evaluate_generation(
        &scorer,
        &l.dataset,
        &l.vocab,
        split,
        variant,
        &settings(&l.ck.config),
        l.ck.config.seed,
    )?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        let stem = format!("generation_{}_{}", split.name(), variant);
        let (json, txt) = write_report(out, &stem, &report, &text)?;
        let mut m = RunManifest::new("eval-generation", to_value(&l.ck.config), l.ck.config.seed);
        m.input("checkpoint", &a.inputs.checkpoint);
        m.input("data", &a.inputs.data);
        m.output("report", &json);
        m.output("text", &txt);
        m.duration_secs = start.elapsed().as_secs_f64();
        m.write(out)?;
    }
    Ok(())
}

fn scene_position(dataset: &Dataset, id: usize) -> CliResult<usize> {
    dataset
        .scenes
        .iter()
        .position(|s| s.id == id)
        .ok_or_else(|| CliError::Runtime(format!("no scene with id {id}")))
}

fn comprehend(a: Comprehend) -> CliResult<()> {
    let mode: ComprehensionMode = a.mode.parse()?;
    let mut l = load(&a.inputs)?;
    let si = scene_position(&l.dataset, a.scene_id)?;
    let lambda = ensemble_lambda(&l, mode, a.lambda)?;
    let expr = l.vocab.encode(&a.expr);
    let scene = l.dataset.scenes[si].clone();
    let candidates = if a.jitter {
        let jittered = eval::jittered(&l.dataset, l.ck.config.jitter, l.ck.config.seed);
        l.features = FeatureCache::build(&jittered, &l.model.config.visual)?;
        jittered.scenes[si].clone()
    } else {
        scene.clone()
    };
    let scorer = Scorer::new(&l.model, l.ck.eval_params(), &l.features);
    let r = eval::comprehend(
        &scorer,
        si,
        &scene,
        &candidates,
        expr.tokens(),
        None,
        mode,
        lambda,
    )?;
    println!(
        "predicted object {} for \"{}\" in scene {} (mode {mode}, lambda {lambda})",
        r.predicted,
        l.vocab.surface(expr.tokens()),
        a.scene_id
    );
    println!(
        "{:>6} {:>10} {:>10} {:>10}",
        "object", "log_p", "sim", "combined"
    );
    for i in 0..r.object_ids.len() {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>10.4}",
            r.object_ids[i], r.log_prob[i], r.similarity[i], r.combined[i]
        );
    }
    Ok(())
}

fn generate(a: Generate) -> CliResult<()> {
    let variant: GenerationVariant = a.variant.parse()?;
    let l = load(&a.inputs)?;
    let si = scene_position(&l.dataset, a.scene_id)?;
    let scorer = Scorer::new(&l.model, l.ck.eval_params(), &l.features);
    let seed = a.seed.unwrap_or(l.ck.config.seed);
    let mut r = rng::stream(seed, "generate");
    let exprs = eval::generate_scene(&scorer, si, variant, &settings(&l.ck.config), &mut r)?;
    let scene = &l.dataset.scenes[si];
    println!("scene {} ({variant})", a.scene_id);
    for (o, e) in scene.objects.iter().zip(&exprs) {
        let d = refgame_core::world::denote(e, scene, &l.vocab);
        let unique = d.len() == 1 && d.contains(&o.id);
        println!(
            "{:>6}  {:<40} {}",
            o.id,
            l.vocab.surface(e),
            if unique { "unique" } else { "ambiguous" }
        );
    }
    Ok(())
}

fn grad_check(a: GradCheck) -> CliResult<()> {
    let start = Instant::now();
    let reports = gradsuite::run(a.seed)?;
    let worst = reports
        .iter()
        .max_by(|x, y| x.report.max_rel_err.total_cmp(&y.report.max_rel_err))
        .expect("suite has cases");
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name)
        .collect();
    for r in &reports {
        eprintln!(
            "{:<28} checked {:>4} skipped {:>3} max rel err {:.3e}",
            r.name, r.report.checked, r.report.skipped, r.report.max_rel_err
        );
    }
    println!(
        "grad-check: {} cases, max relative error {:.3e} ({}), threshold {:.0e}: {}",
        reports.len(),
        worst.report.max_rel_err,
        worst.name,
        gradsuite::THRESHOLD,
        if failed.is_empty() { "pass" } else { "FAIL" }
    );
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut m = RunManifest::new("grad-check", serde_json::json!({}), a.seed);
        m.duration_secs = start.elapsed().as_secs_f64();
        m.write(out)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

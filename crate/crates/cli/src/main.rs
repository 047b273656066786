//! `camr`: data generation, training, embedding, evaluation and export.

mod manifest;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use camr::data::{gen_blobs, load_csv, save_2d_export, save_csv, split_per_class, BlobSpec};
use camr::encoder::{init_encoder, Activation};
use camr::metrics::{evaluate, EvalReport, SearchMode};
use camr::retrieval::{build_index, classify};
use camr::store::{load_anchors, load_embeddings, load_model, save_anchors, save_embeddings, save_model, EmbeddingStore};
use camr::trainer::{train, AnchorInit, TrainConfig};
use camr::{Exec, RngSeed};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "camr", version, about = "Class anchor margin metric learning and two-stage retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a labeled Gaussian-blob CSV dataset.
    GenData(GenDataArgs),
    /// Train an encoder and class anchors on a CSV dataset.
    Train(TrainArgs),
    /// Embed a CSV dataset into a binary embedding store.
    Embed(EmbedArgs),
    /// Score queries against a gallery; prints a JSON report.
    Evaluate(EvaluateArgs),
    /// Nearest-anchor classification accuracy; prints JSON.
    Classify(ClassifyArgs),
    /// Write 2D embeddings plus anchor rows (label -1) as CSV.
    #[command(name = "export-2d")]
    #[serde(rename = "export-2d")]
    Export2d(Export2dArgs),
    /// Re-run the command recorded in a manifest.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    input_dim: usize,
    #[arg(long, default_value_t = 5.0)]
    sep: f64,
    #[arg(long, default_value_t = 0.5)]
    std: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Hold out the last N rows of each class into `--test-out`.
    #[arg(long, requires = "test_out")]
    test_per_class: Option<usize>,
    #[arg(long, requires = "test_per_class")]
    test_out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Hidden layer widths, comma separated; empty for a linear encoder.
    #[arg(long, default_value = "")]
    hidden: String,
    #[arg(long, default_value = "tanh")]
    activation: String,
    #[arg(long, default_value_t = 2.0)]
    margin: f64,
    #[arg(long, default_value_t = 1.0)]
    min_norm: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value = "adam")]
    optimizer: String,
    /// `base` or `random`.
    #[arg(long, default_value = "base")]
    anchor_init: String,
    #[arg(long)]
    no_repeller: bool,
    #[arg(long)]
    no_min_norm: bool,
    #[arg(long)]
    per_class_cap: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "parallel")]
    exec: String,
    /// Writes `<prefix>.model`, `<prefix>.anchors` and `<prefix>.history.jsonl`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EmbedArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "parallel")]
    exec: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    anchors: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,100")]
    k: Vec<usize>,
    /// `brute`, `two-stage` or `both`.
    #[arg(long, default_value = "both")]
    mode: String,
    #[arg(long, default_value = "parallel")]
    exec: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    anchors: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct Export2dArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    anchors: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Write the regenerated files here and compare them byte for byte with
    /// the recorded outputs. Without it the recorded outputs are overwritten.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: &Command) -> Result<()> {
    let summary = match command {
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Classify(a) => classify_cmd(a)?,
        Command::Replay(a) => replay(a)?,
        _ => produce(command)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn parse_exec(s: &str) -> Result<Exec> {
    match s {
        "parallel" => Ok(Exec::Parallel),
        "sequential" => Ok(Exec::Sequential),
        other => bail!("unknown exec mode '{other}' (expected parallel or sequential)"),
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(|w| {
            let width: usize = w.parse().with_context(|| format!("bad hidden width '{w}'"))?;
            ensure!(width > 0, "hidden widths must be >= 1");
            Ok(width)
        })
        .collect()
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn outputs_json(outputs: &[PathBuf]) -> Value {
    json!(outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>())
}

fn gen_data(command: &Command, a: &GenDataArgs) -> Result<Value> {
    let spec = BlobSpec {
        classes: a.classes,
        per_class: a.per_class,
        input_dim: a.input_dim,
        separation: a.sep,
        noise_std: a.std,
    };
    let data = gen_blobs(&spec, RngSeed(a.seed))?;
    let mut outputs = vec![a.out.clone()];
    let mut rows = json!({ "rows": data.len() });
    match (a.test_per_class, &a.test_out) {
        (Some(n), Some(test_out)) => {
            let (train_set, test_set) = split_per_class(&data, n);
            save_csv(&train_set, &a.out)?;
            save_csv(&test_set, test_out)?;
            outputs.push(test_out.clone());
            rows = json!({ "rows": train_set.len(), "test_rows": test_set.len() });
        }
        _ => save_csv(&data, &a.out)?,
    }
    RunManifest::new(command, json!({ "blob_spec": spec }), Some(a.seed), &outputs).write_all()?;
    Ok(json!({ "counts": rows, "outputs": outputs_json(&outputs) }))
}

fn train_cmd(command: &Command, a: &TrainArgs) -> Result<Value> {
    let data = load_csv(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let activation: Activation = a.activation.parse()?;
    let mut sizes = vec![data.input_dim()];
    sizes.extend(parse_hidden(&a.hidden)?);
    sizes.push(a.embed_dim);
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        margin: a.margin,
        min_norm: a.min_norm,
        anchor_init: a.anchor_init.parse::<AnchorInit>()?,
        enable_repeller: !a.no_repeller,
        enable_min_norm: !a.no_min_norm,
        optimizer: a.optimizer.parse()?,
        seed: RngSeed(a.seed),
        per_class_cap: a.per_class_cap,
        exec: parse_exec(&a.exec)?,
        ..TrainConfig::default()
    };
    let model = init_encoder(&sizes, activation, RngSeed(a.seed))?;

    let started = Instant::now();
    let outcome = train(&config, &data, model)?;
    eprintln!("trained {} epochs in {:.2}s", config.epochs, started.elapsed().as_secs_f64());

    let model_path = with_suffix(&a.out_prefix, ".model");
    let anchors_path = with_suffix(&a.out_prefix, ".anchors");
    let history_path = with_suffix(&a.out_prefix, ".history.jsonl");
    save_model(&outcome.model, &model_path)?;
    save_anchors(&outcome.anchors, &anchors_path)?;
    // Wall time stays out of the log so a replay reproduces it exactly.
    let mut log = BufWriter::new(fs::File::create(&history_path)?);
    for r in &outcome.history.epochs {
        let line = json!({
            "epoch": r.epoch,
            "attractor": r.attractor,
            "repeller": r.repeller,
            "min_norm": r.min_norm,
            "total": r.total,
        });
        writeln!(log, "{line}")?;
    }
    log.flush()?;

    let outputs = vec![model_path, anchors_path, history_path];
    let resolved = json!({
        "train_config": config,
        "layer_sizes": sizes,
        "activation": activation,
        "classes": data.num_classes(),
        "rows": data.len(),
    });
    RunManifest::new(command, resolved, Some(a.seed), &outputs).write_all()?;
    let last = outcome.history.epochs.last().map(|r| r.total);
    Ok(json!({ "final_loss": last, "outputs": outputs_json(&outputs) }))
}

fn embed(command: &Command, a: &EmbedArgs) -> Result<Value> {
    let model = load_model(&a.model)?;
    let data = load_csv(&a.data)?;
    ensure!(
        data.input_dim() == model.input_dim(),
        "dataset has {} features but the model expects {}",
        data.input_dim(),
        model.input_dim()
    );
    let embeddings = model.embed_rows(data.features(), parse_exec(&a.exec)?)?;
    let store = EmbeddingStore::sequential(data.labels().to_vec(), embeddings)?;
    save_embeddings(&store, &a.out)?;
    let outputs = vec![a.out.clone()];
    let resolved = json!({ "rows": store.len(), "dim": store.dim() });
    RunManifest::new(command, resolved, None, &outputs).write_all()?;
    Ok(json!({ "rows": store.len(), "dim": store.dim(), "outputs": outputs_json(&outputs) }))
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Value> {
    let gallery = load_embeddings(&a.gallery)?;
    let queries = load_embeddings(&a.queries)?;
    let anchors = load_anchors(&a.anchors)?;
    ensure!(
        gallery.dim() == anchors.dim() && queries.dim() == anchors.dim(),
        "incompatible dimensions: gallery {}, queries {}, anchors {}",
        gallery.dim(),
        queries.dim(),
        anchors.dim()
    );
    let exec = parse_exec(&a.exec)?;
    let index = build_index(gallery.embeddings, gallery.labels, anchors)?;
    let run = |mode| -> Result<EvalReport> { Ok(evaluate(&index, &queries.embeddings, &queries.labels, &a.k, mode, exec)?) };
    match a.mode.as_str() {
        "both" => {
            let brute = run(SearchMode::Brute)?;
            let two_stage = run(SearchMode::TwoStage)?;
            let ratio = brute.mean_comparisons_per_query / two_stage.mean_comparisons_per_query;
            Ok(json!({
                "brute": brute.to_json(),
                "two_stage": two_stage.to_json(),
                "comparison_ratio": ratio,
            }))
        }
        other => Ok(run(other.parse::<SearchMode>()?)?.to_json()),
    }
}

fn classify_cmd(a: &ClassifyArgs) -> Result<Value> {
    let model = load_model(&a.model)?;
    let anchors = load_anchors(&a.anchors)?;
    let data = load_csv(&a.data)?;
    ensure!(
        model.embedding_dim() == anchors.dim(),
        "model embeds into {} dimensions but anchors have {}",
        model.embedding_dim(),
        anchors.dim()
    );
    let embeddings = model.embed_rows(data.features(), Exec::Parallel)?;
    let predictions = embeddings.iter_rows().map(|e| classify(&anchors, e)).collect::<camr::Result<Vec<_>>>()?;
    let accuracy = camr::metrics::accuracy(&predictions, data.labels())?;
    Ok(json!({ "accuracy": accuracy, "count": data.len() }))
}

fn export_2d(command: &Command, a: &Export2dArgs) -> Result<Value> {
    let model = load_model(&a.model)?;
    let anchors = load_anchors(&a.anchors)?;
    let data = load_csv(&a.data)?;
    let embeddings = model.embed_rows(data.features(), Exec::Parallel)?;
    let rows = save_2d_export(&embeddings, data.labels(), anchors.matrix(), &a.out)?;
    let outputs = vec![a.out.clone()];
    RunManifest::new(command, json!({ "rows": rows, "anchors": anchors.num_classes() }), None, &outputs).write_all()?;
    Ok(json!({ "rows": rows, "outputs": outputs_json(&outputs) }))
}

fn redirect(path: &mut PathBuf, dir: &Path) -> Result<()> {
    let name = path.file_name().with_context(|| format!("output path {} has no file name", path.display()))?;
    *path = dir.join(name);
    Ok(())
}

fn replay(a: &ReplayArgs) -> Result<Value> {
    let recorded = RunManifest::load(&a.manifest)?;
    let mut command = recorded.command.clone();
    let Some(dir) = &a.out_dir else {
        produce(&command)?;
        return Ok(json!({ "replayed": outputs_json(&recorded.outputs) }));
    };
    fs::create_dir_all(dir)?;
    match &mut command {
        Command::GenData(g) => {
            redirect(&mut g.out, dir)?;
            if let Some(t) = &mut g.test_out {
                redirect(t, dir)?;
            }
        }
        Command::Train(t) => redirect(&mut t.out_prefix, dir)?,
        Command::Embed(e) => redirect(&mut e.out, dir)?,
        Command::Export2d(e) => redirect(&mut e.out, dir)?,
        _ => bail!("manifest records a command without file outputs"),
    }
    produce(&command)?;

    let mut all_identical = true;
    let mut report = Vec::new();
    for original in &recorded.outputs {
        let mut fresh = original.clone();
        redirect(&mut fresh, dir)?;
        let identical = fs::read(original).with_context(|| format!("reading {}", original.display()))? == fs::read(&fresh)?;
        all_identical &= identical;
        report.push(json!({
            "original": original.display().to_string(),
            "replayed": fresh.display().to_string(),
            "identical": identical,
        }));
    }
    ensure!(all_identical, "replayed outputs differ: {}", serde_json::to_string(&report)?);
    Ok(json!({ "outputs": report }))
}

/// Runs a file-producing command and writes its manifests.
fn produce(command: &Command) -> Result<Value> {
    match command {
        Command::GenData(a) => gen_data(command, a),
        Command::Train(a) => train_cmd(command, a),
        Command::Embed(a) => embed(command, a),
        Command::Export2d(a) => export_2d(command, a),
        _ => bail!("manifest records a command without file outputs"),
    }
}

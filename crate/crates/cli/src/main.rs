//! `pcnn` command-line driver: data generation, training, embedding,
//! retrieval, evaluation and gradient checking.

mod dataset;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcnn::data::{generate, DatasetManifest, EmbeddingSet, GenerateConfig, ShapeClass, Split};
use pcnn::gradcheck::{run_suite, SuiteOptions, DEFAULT_STEP, TOLERANCE};
use pcnn::param::ParamStore;
use pcnn::retrieval::{map_and_pr, rank_all, ranking_csv, Metric};
use pcnn::train::save_outputs;
use pcnn::{Ablation, LossPreset, Pcnn, Profile, RunConfig};

use dataset::Dataset;

#[derive(Parser)]
#[command(name = "pcnn", version, about = "Patch convolutional network for view-based 3D model retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic train and test splits.
    GenData(GenDataArgs),
    /// Train a network and write checkpoints plus the loss trace.
    Train(TrainArgs),
    /// Write retrieval embeddings for a dataset.
    Embed(EmbedArgs),
    /// Rank every model against the rest and write the ranking CSV.
    Retrieve(RetrieveArgs),
    /// Compute mAP and the precision-recall curve.
    Eval(RetrieveArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma separated shape classes.
    #[arg(long, default_value = "sphere,box,cylinder,pyramid")]
    classes: String,
    /// Training models per class.
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Test models per class (half of --per-class when omitted).
    #[arg(long)]
    test_per_class: Option<usize>,
    /// Selects the default view count and resolution.
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    loss: Option<LossPreset>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset to embed (`paths.test` by default).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file (`<output_dir>/embeddings.emb` by default).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Supplies `retrieval.metric` and `retrieval.rerank`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    metric: Option<Metric>,
    /// Move gallery items sharing the query's predicted class to the front.
    #[arg(long)]
    rerank: bool,
    /// Output file for `retrieve`, directory for `eval` (next to the
    /// embeddings by default).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Restrict to these checks (repeatable).
    #[arg(long = "op")]
    ops: Vec<String>,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Perturb the analytic gradient of one check (exercises the harness).
    #[arg(long, hide = true)]
    corrupt: Option<String>,
    /// List the available checks.
    #[arg(long)]
    list: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Embed(a) => embed(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let classes = ShapeClass::parse_list(&a.classes)?;
    let (views, res) = a.profile.data_geometry();
    let test_per_class = a.test_per_class.unwrap_or((a.per_class / 2).max(1));
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (split, per_class) in [(Split::Train, a.per_class), (Split::Test, test_per_class)] {
        let seed = split.derive_seed(a.seed);
        let set = generate(&GenerateConfig {
            classes: classes.clone(),
            per_class,
            num_views: a.views.unwrap_or(views),
            res: a.res.unwrap_or(res),
            seed,
        })?;
        let path = a.out.join(format!("{}.mvi", split.name()));
        let mut bytes = Vec::new();
        set.write(&mut bytes)?;
        write(&path, bytes)?;
        let manifest = DatasetManifest {
            num_models: set.samples.len(),
            num_classes: classes.len(),
            num_views: set.num_views,
            height: set.height,
            width: set.width,
            split: split.name().into(),
            seed,
            classes: classes.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest.to_json())?;
        write(&a.out.join(format!("{}.json", split.name())), json + "\n")?;
        println!("{}: {} models -> {}", split.name(), set.samples.len(), path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(ablation) = a.ablation {
        cfg.apply_ablation(ablation);
    }
    if let Some(preset) = a.loss {
        cfg.apply_loss(preset);
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.paths.output_dir = out;
    }
    let data = Dataset::load(&cfg.paths.train)?;
    if cfg.num_classes == 0 {
        cfg.num_classes = data.num_classes();
    }
    let model_cfg = cfg.model_config(data.input()?, data.num_views(), cfg.num_classes);
    let mut model = Pcnn::new(model_cfg, cfg.train.seed)?;
    let report = data.train(&mut model, &cfg.train)?;
    let out = cfg.paths.output_dir.clone();
    save_outputs(&out, &model, &report)?;
    // the echo can be handed straight to `embed`
    cfg.paths.checkpoint = out.join("final.pck");
    write(&out.join("config.txt"), cfg.to_string())?;
    let last = report.trace.records.last().map_or(f64::NAN, |r| r.l_dis);
    println!(
        "trained {} steps on {} models; final l_dis {last:.6}; best epoch {}; outputs in {}",
        report.trace.records.len(),
        data.len(),
        report.best_epoch,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Class count of a checkpoint, read from its fusion classifier.
fn checkpoint_classes(entries: &[(String, pcnn::Tensor)]) -> Result<usize> {
    entries
        .iter()
        .find(|(name, _)| name == "classifier/fusion/bias")
        .map(|(_, t)| t.len())
        .context("checkpoint has no classifier/fusion/bias; set model.num_classes")
}

fn embed(a: EmbedArgs) -> Result<ExitCode> {
    let cfg = load_config(a.config.as_deref())?;
    let ckpt = a.checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    if !ckpt.is_file() {
        bail!("checkpoint {} not found", ckpt.display());
    }
    let file = fs::File::open(&ckpt).with_context(|| format!("cannot open {}", ckpt.display()))?;
    let entries = ParamStore::read_checkpoint(std::io::BufReader::new(file))
        .with_context(|| format!("cannot read checkpoint {}", ckpt.display()))?;
    let classes = match cfg.num_classes {
        0 => checkpoint_classes(&entries)?,
        n => n,
    };
    let data_path = a.data.unwrap_or_else(|| cfg.paths.test.clone());
    let data = Dataset::load(&data_path)?;
    let mut model = Pcnn::new(cfg.model_config(data.input()?, data.num_views(), classes), cfg.train.seed)?;
    model
        .store
        .load_entries(entries)
        .with_context(|| format!("checkpoint {} does not match the configured network", ckpt.display()))?;
    let set = data.embed(&model)?;
    let out = a.out.unwrap_or_else(|| cfg.paths.output_dir.join("embeddings.emb"));
    let mut bytes = Vec::new();
    set.write(&mut bytes)?;
    write(&out, bytes)?;
    println!("embedded {} models ({} dims) -> {}", set.records.len(), set.dim, out.display());
    Ok(ExitCode::SUCCESS)
}

fn retrieval_inputs(a: &RetrieveArgs) -> Result<(EmbeddingSet, Metric, bool)> {
    let cfg = load_config(a.config.as_deref())?;
    let set = EmbeddingSet::load(&a.embeddings)
        .with_context(|| format!("cannot load embeddings {}", a.embeddings.display()))?;
    Ok((set, a.metric.unwrap_or(cfg.metric), a.rerank || cfg.rerank))
}

fn beside_embeddings(a: &RetrieveArgs) -> PathBuf {
    a.embeddings.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn retrieve(a: RetrieveArgs) -> Result<ExitCode> {
    let (set, metric, rerank) = retrieval_inputs(&a)?;
    let lists = rank_all(&set, metric, rerank)?;
    let out = a.out.clone().unwrap_or_else(|| beside_embeddings(&a).join("ranking.csv"));
    write(&out, ranking_csv(&lists))?;
    println!(
        "ranked {} queries ({}, rerank {}) -> {}",
        lists.len(),
        metric.name(),
        rerank,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: RetrieveArgs) -> Result<ExitCode> {
    let (set, metric, rerank) = retrieval_inputs(&a)?;
    let ev = map_and_pr(&set, metric, rerank)?;
    let dir = a.out.clone().unwrap_or_else(|| beside_embeddings(&a));
    write(&dir.join("metrics.json"), ev.metrics_json() + "\n")?;
    write(&dir.join("pr.csv"), ev.pr_csv())?;
    println!("map={:.6}", ev.map);
    println!("queries={} excluded={}", ev.queries, ev.excluded);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.list {
        pcnn::gradcheck::op_names().for_each(|n| println!("{n}"));
        return Ok(ExitCode::SUCCESS);
    }
    let report = run_suite(&SuiteOptions {
        ops: a.ops,
        seeds: a.seeds,
        h: a.step,
        corrupt: a.corrupt,
    })?;
    print!("{}", report.table());
    if let Some(w) = report.worst() {
        println!("worst: {} max_rel_err={:.3e} (seed {})", w.name, w.max_rel_err, w.worst_seed);
    }
    if report.passed() {
        println!("all checks below {TOLERANCE:e}");
        return Ok(ExitCode::SUCCESS);
    }
    for op in report.ops.iter().filter(|o| !o.passed()) {
        match &op.worst {
            Some(m) => println!(
                "FAILED {}: {} [{}] analytic {:e} numeric {:e} (seed {})",
                op.name, m.input, m.index, m.analytic, m.numeric, op.worst_seed
            ),
            None => println!("FAILED {}", op.name),
        }
    }
    Ok(ExitCode::from(1))
}

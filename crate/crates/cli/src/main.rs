use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use layerpool::config::RunConfig;
use layerpool::corpus::Corpus;
use layerpool::fsio::{csv_field, write_atomic};
use layerpool::model::{FrozenInput, InferencePooling, Model};
use layerpool::pooler::{attention_csv, strategy};
use layerpool::search::{embed_corpus, evaluate_search, EmbeddingMatrix, IvfIndex, DEFAULT_NLIST, DEFAULT_NPROBE};
use layerpool::sts::{evaluate, layer_sweep, load_sts, sts_jsonl, sweep_csv};
use layerpool::synth::{Generator, PUBLISHED_SEED};
use layerpool::trainer::{loss_csv, Checkpoint, StepLoss, Trainer};
use layerpool::numeric::rng::domain;
use layerpool::numeric::{Matrix, Rng};

const LOSSES: &str = "losses.csv";

#[derive(Parser)]
#[command(name = "layerpool", version, about = "Layer-wise attention pooling: training, STS evaluation and IVF search")]
struct Cli {
    /// Worker threads for embedding and clustering.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and pooler with a contrastive objective.
    Train(TrainArgs),
    /// Spearman correlation of cosine similarities against gold scores.
    EvalSts(EvalArgs),
    /// Spearman score of every layer's [CLS] and mean-token vectors.
    LayerSweep(SweepArgs),
    /// Per-text layer attention weights as CSV.
    InspectAttention(AttentionArgs),
    /// Write unit-normalized sentence embeddings.
    Embed(EmbedArgs),
    /// Build, query and score IVF indexes.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Write a synthetic topic corpus.
    GenSynthetic(SynthArgs),
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Cluster embeddings into an IVF index directory.
    Build(BuildArgs),
    /// Top-k neighbours for each query text.
    Search(SearchArgs),
    /// MRR@10, latency and memory against gold ids.
    Eval(IndexEvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    learning_rate: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    temperature: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Continue the run saved in this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many steps have completed.
    #[arg(long)]
    max_steps: Option<u64>,
}

/// Where a checkpoint's layer stacks come from.
#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frozen features replacing the paths recorded in the checkpoint.
    #[arg(long, requires = "feature_texts")]
    features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    feature_texts: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<Model> {
        let ckpt = Checkpoint::load(&self.checkpoint)?;
        let frozen = match (&self.features, &self.feature_texts) {
            (Some(f), Some(t)) => Some(FrozenInput::load(f, t)?),
            _ => None,
        };
        Ok(ckpt.model(frozen)?)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the strategy the checkpoint was trained with.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttentionArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// `{"text": …}` records.
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pooling {
    Detached,
    Trained,
}

impl From<Pooling> for InferencePooling {
    fn from(p: Pooling) -> Self {
        match p {
            Pooling::Detached => InferencePooling::Detached,
            Pooling::Trained => InferencePooling::Trained,
        }
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "detached")]
    pooling: Pooling,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NLIST)]
    nlist: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// `{"text": …}` records.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_NPROBE)]
    nprobe: usize,
    #[arg(long, value_enum, default_value = "detached")]
    pooling: Pooling,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IndexEvalArgs {
    #[arg(long)]
    index: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// `{"text": …, "gold": id}` records.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NPROBE)]
    nprobe: usize,
    #[arg(long, value_enum, default_value = "detached")]
    pooling: Pooling,
    /// Metrics JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Pairs,
    Triplets,
    Bare,
    Sts,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = PUBLISHED_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn bare_texts(path: &Path) -> Result<Vec<String>> {
    match Corpus::load(path)? {
        Corpus::Bare(t) => Ok(t),
        other => bail!("{} holds {}, expected `{{\"text\": …}}` records", path.display(), other.kind()),
    }
}

fn refs(texts: &[String]) -> Vec<&str> {
    texts.iter().map(String::as_str).collect()
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, text.as_bytes())?),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut doc = match &args.config {
        Some(p) => serde_json::from_str::<Value>(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .map_err(|e| layerpool::Error::Config { key: "(document)".into(), reason: e.to_string() })?,
        None => json!({}),
    };
    let Some(obj) = doc.as_object_mut() else {
        return Err(layerpool::Error::Config { key: "(document)".into(), reason: "expected a JSON object".into() }.into());
    };
    let overrides = [
        ("objective", args.objective.map(Value::from)),
        ("corpus", args.corpus.map(|p| json!(p))),
        ("strategy", args.strategy.map(Value::from)),
        ("seed", args.seed.map(Value::from)),
        ("epochs", args.epochs.map(Value::from)),
        ("batch_size", args.batch_size.map(Value::from)),
        ("learning_rate", args.learning_rate.map(Value::from)),
        ("temperature", args.temperature.map(Value::from)),
        ("output_dir", args.output_dir.map(|p| json!(p))),
        ("checkpoint_dir", args.checkpoint_dir.map(|p| json!(p))),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            obj.insert(key.into(), v);
        }
    }
    let config = RunConfig::from_value(&doc)?;
    config.check_paths()?;
    let corpus = Corpus::load(&config.corpus)?;
    let frozen = config.frozen()?;

    let (mut trainer, mut losses) = match &args.resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            if ckpt.config != config.train {
                bail!("training settings differ from those recorded in {}", dir.display());
            }
            let step = ckpt.step;
            let trainer = Trainer::resume(ckpt, &corpus, frozen)?;
            (trainer, previous_losses(&config.output_dir.join(LOSSES), step)?)
        }
        None => (Trainer::new(config.train.clone(), &corpus, frozen)?, Vec::new()),
    };
    config.write_effective()?;
    losses.extend(trainer.run(&corpus, args.max_steps)?);
    trainer.checkpoint().save(&config.checkpoint_dir)?;
    write_atomic(&config.output_dir.join(LOSSES), loss_csv(&losses).as_bytes())?;
    let last = losses.last().map_or(String::from("n/a"), |l| format!("{:.6}", l.loss));
    println!(
        "trained {} of {} steps, last loss {last}, checkpoint {}",
        trainer.step(),
        trainer.total_steps(&corpus),
        config.checkpoint_dir.display()
    );
    Ok(())
}

/// Loss rows up to `step` from an earlier, interrupted run.
fn previous_losses(path: &Path, step: u64) -> Result<Vec<StepLoss>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let (s, l) = line.split_once(',').with_context(|| format!("malformed line {line:?} in {}", path.display()))?;
        let l = StepLoss { step: s.parse()?, loss: l.parse()? };
        if l.step <= step {
            out.push(l);
        }
    }
    Ok(out)
}

fn eval_sts(args: EvalArgs) -> Result<()> {
    let model = args.model.load()?;
    let records = load_sts(&args.data)?;
    let strategy = match &args.strategy {
        Some(s) => strategy(s)?,
        None => model.strategy.clone(),
    };
    println!("{}", evaluate(&model, &*strategy, &records)?);
    Ok(())
}

fn embed(args: EmbedArgs) -> Result<()> {
    let model = args.model.load()?;
    let texts = bare_texts(&args.texts)?;
    let e = embed_corpus(&model, &refs(&texts), args.pooling.into())?;
    e.save(&args.out)?;
    println!("{} embeddings of dim {} written to {}", e.len(), e.dim(), args.out.display());
    Ok(())
}

fn embed_queries(model: &Model, texts: &[String], pooling: Pooling) -> Result<Matrix> {
    Ok(model.embed(&refs(texts), pooling.into())?)
}

fn index(cmd: IndexCommand) -> Result<()> {
    match cmd {
        IndexCommand::Build(a) => {
            let e = EmbeddingMatrix::load(&a.embeddings)?;
            let index = IvfIndex::build(e, a.nlist, &mut Rng::new(a.seed).derive(domain::KMEANS, 0))?;
            index.save(&a.out)?;
            println!("index of {} vectors in {} lists written to {}", index.len(), index.nlist(), a.out.display());
        }
        IndexCommand::Search(a) => {
            let index = IvfIndex::load(&a.index)?;
            let model = a.model.load()?;
            let texts = bare_texts(&a.queries)?;
            let q = embed_queries(&model, &texts, a.pooling)?;
            let mut csv = String::from("query,rank,id,similarity\n");
            for (i, text) in texts.iter().enumerate() {
                for (r, hit) in index.query(q.row(i), a.top_k, a.nprobe)?.iter().enumerate() {
                    csv.push_str(&format!("{},{},{},{:?}\n", csv_field(text), r + 1, hit.id, hit.similarity));
                }
            }
            write_or_print(a.out.as_deref(), &csv)?;
        }
        IndexCommand::Eval(a) => {
            let index = IvfIndex::load(&a.index)?;
            let model = a.model.load()?;
            let (texts, gold) = gold_queries(&a.queries)?;
            let q = embed_queries(&model, &texts, a.pooling)?;
            let metrics = evaluate_search(&index, &q, &gold, a.nprobe)?;
            let mut out = serde_json::to_string_pretty(&metrics)?;
            out.push('\n');
            write_or_print(a.out.as_deref(), &out)?;
        }
    }
    Ok(())
}

fn gold_queries(path: &Path) -> Result<(Vec<String>, Vec<u32>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut texts = Vec::new();
    let mut gold = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record = |reason: String| layerpool::Error::Record { path: path.to_path_buf(), line: i + 1, reason };
        let v: Value = serde_json::from_str(line).map_err(|e| record(e.to_string()))?;
        let fields = v.as_object().filter(|o| o.len() == 2);
        let text = fields.and_then(|o| o.get("text")?.as_str());
        let id = fields.and_then(|o| u32::try_from(o.get("gold")?.as_u64()?).ok());
        let (Some(text), Some(id)) = (text, id) else {
            return Err(record("expected {\"text\": string, \"gold\": u32}".into()).into());
        };
        texts.push(text.to_string());
        gold.push(id);
    }
    Ok((texts, gold))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut g = Generator::new(args.seed);
    let body = match args.kind {
        SynthKind::Pairs => g.pairs(args.n).to_jsonl(),
        SynthKind::Triplets => g.triplets(args.n).to_jsonl(),
        SynthKind::Bare => g.bare(args.n).to_jsonl(),
        SynthKind::Sts => sts_jsonl(&g.sts(args.n)),
    };
    write_atomic(&args.out, body.as_bytes())?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    match cli.command {
        Command::Train(a) => train(a),
        Command::EvalSts(a) => eval_sts(a),
        Command::LayerSweep(a) => {
            let rows = layer_sweep(&a.model.load()?, &load_sts(&a.data)?)?;
            Ok(write_atomic(&a.out, sweep_csv(&rows).as_bytes())?)
        }
        Command::InspectAttention(a) => {
            let texts = bare_texts(&a.texts)?;
            let reports = layerpool::sts::attention_report(&a.model.load()?, &refs(&texts))?;
            Ok(write_atomic(&a.out, attention_csv(&reports).as_bytes())?)
        }
        Command::Embed(a) => embed(a),
        Command::Index(c) => index(c),
        Command::GenSynthetic(a) => synth(a),
    }
}

/// `error[code]: message` on one line.
fn report(e: &anyhow::Error) -> String {
    let code = e.downcast_ref::<layerpool::Error>().map_or("cli", |e| e.code());
    let msg = format!("{e:#}").replace(['\n', '\r'], " ");
    format!("error[{code}]: {msg}")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid usage").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", report(&e));
            ExitCode::FAILURE
        }
    }
}

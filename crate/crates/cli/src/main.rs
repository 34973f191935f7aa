use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mmig::datasets::{load_dataset, SceneIndex, SplitRatios};
use mmig::decoder::{load_generations, save_generations};
use mmig::metrics::scorer_by_name;
use mmig::pipeline::{self, RunConfig, FEATURES_DIR, SCENES_DIR};
use mmig::training::Stage;

/// Instruction generation for two-image fetch-and-carry tasks.
#[derive(Parser)]
#[command(name = "mmig", version)]
struct Cli {
    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with scene sidecars and a feature cache.
    GenData(GenDataArgs),
    /// Run one training stage and write its checkpoint and log.
    Train(TrainArgs),
    /// Beam-search instructions for every pair of a dataset.
    Generate(GenerateArgs),
    /// Score generations against dataset references.
    Evaluate(EvaluateArgs),
    /// Emit a dataset whose references are the model's own top candidates.
    Augment(AugmentArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            run.seed = seed;
        }
        if let Some(d) = &self.data_dir {
            run.paths.data_dir = d.clone();
        }
        Ok(run)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of scenes.
    #[arg(long)]
    n: Option<usize>,
    /// Output directory; defaults to the configured data directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train/val/test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// pretrain-lm, tqpp, pdmp or hccp.
    #[arg(long)]
    stage: Stage,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    beam_size: Option<usize>,
    /// Extra training dataset, e.g. an augmented one; repeatable.
    #[arg(long)]
    train_extra: Vec<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Feature cache; defaults to `features/` next to the dataset.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    generations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Scene sidecars; defaults to `scenes/` next to the dataset.
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long, default_value = "stub")]
    scorer: String,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
}

fn beside(dataset: &Path, dir: &str) -> PathBuf {
    dataset.parent().unwrap_or(Path::new(".")).join(dir)
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let run = args.config.load()?;
    let out = args.out.unwrap_or(run.paths.data_dir);
    let ratios = match args.split.as_deref() {
        Some(&[train, val, test]) => SplitRatios { train, val, test },
        Some(_) => bail!("--split takes three fractions"),
        None => run.data.split,
    };
    let n = args.n.unwrap_or(run.data.scenes);
    let d = pipeline::gen_data(&out, n, run.seed, ratios)?;
    println!(
        "wrote {} scenes to {} (train {}, val {}, test {})",
        d.scenes.len(),
        out.display(),
        d.train.len(),
        d.val.len(),
        d.test.len()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut run = args.config.load()?;
    if let Some(d) = args.checkpoint_dir {
        run.paths.checkpoint_dir = d;
    }
    run.paths.train_extra.extend(args.train_extra);
    let cfg = run.stage_mut(args.stage);
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.beam_size {
        cfg.beam_size = v;
    }
    let out = pipeline::train(&run, args.stage)?;
    if let Some(from) = &out.started_from {
        println!("started from {}", from.display());
    }
    for (k, v) in &out.checkpoint.metrics {
        println!("{k} = {v}");
    }
    println!("checkpoint {}", out.checkpoint_path.display());
    println!("log {}", out.log_path.display());
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let features = args.features.unwrap_or_else(|| beside(&args.dataset, FEATURES_DIR));
    let records = pipeline::generate(&args.checkpoint, &args.dataset, &features, args.beam_size)?;
    save_generations(&records, &args.out)?;
    println!("wrote {} generations to {}", records.len(), args.out.display());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let pairs = load_dataset(&args.dataset)?;
    let generations = load_generations(&args.generations)?;
    let scenes = SceneIndex::load_dir(&args.scenes.unwrap_or_else(|| beside(&args.dataset, SCENES_DIR)))?;
    let scorer = scorer_by_name(&args.scorer)?;
    let out = pipeline::evaluate_generations(&pairs, &generations, &scenes, scorer.as_ref())?;
    pipeline::write_json(&out, &args.out)?;
    let r = &out.report;
    println!("cider_d = {}", r.cider_d);
    println!("bleu4 = {}", r.bleu4);
    println!("stub_target = {}", r.stub_target);
    println!("stub_receptacle = {}", r.stub_receptacle);
    Ok(())
}

fn augment(args: AugmentArgs) -> Result<()> {
    let features = args.features.unwrap_or_else(|| beside(&args.dataset, FEATURES_DIR));
    let pairs = pipeline::augment(&args.checkpoint, &args.dataset, &features, args.beam_size, &args.out)?;
    println!("wrote {} augmented pairs to {}", pairs.len(), args.out.display());
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Augment(a) => augment(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

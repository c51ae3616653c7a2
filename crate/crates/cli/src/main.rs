//! `bivex`: generate corpora, train, evaluate, recognize single images,
//! check gradients and inspect checkpoints.

mod settings;

use std::fmt::Display;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bivex::checks;
use bivex::datagen::{self, Augmentation, GenSpec, Manifest, VerticalLayout, MANIFEST_FILE};
use bivex::eval::{self, LexiconMode};
use bivex::image::GrayImage;
use bivex::persistence::{self, Checkpoint};
use bivex::train::{self, Dataset, TrainConfig};
use bivex::{ModelConfig, ModelFlags};
use clap::{Args, Parser, Subcommand};

use settings::FileSettings;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Fallback for `--workers` when neither the flag nor the config file sets it.
const THREADS_ENV: &str = "BIVEX_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] bivex::Error),
}

impl From<persistence::CheckpointError> for CliError {
    fn from(e: persistence::CheckpointError) -> Self {
        CliError::Run(e.into())
    }
}

impl From<datagen::ManifestError> for CliError {
    fn from(e: datagen::ManifestError) -> Self {
        CliError::Run(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "bivex", version, about = "Horizontal and vertical scene-text recognition")]
struct Cli {
    /// Flat key=value file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic word corpus (PGM images plus manifest.tsv).
    Generate(GenerateArgs),
    /// Train a model on a generated corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Recognize one image.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's header, configuration and tensors.
    Describe(DescribeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long = "vertical-frac")]
    vertical_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "min-len")]
    min_len: Option<usize>,
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    /// Vertical word layout: rotated or stacked.
    #[arg(long)]
    layout: Option<VerticalLayout>,
    /// Render clean images without jitter, contrast or noise.
    #[arg(long = "no-augment")]
    no_augment: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Add the directional encoding mask as a second input channel.
    #[arg(long = "use-dem")]
    use_dem: bool,
    /// Use separate attention heads for horizontal and vertical text.
    #[arg(long = "use-san")]
    use_san: bool,
    /// Swap the sin/cos kernels of the mask.
    #[arg(long = "dem-kernel-swap")]
    dem_kernel_swap: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training corpus: a directory holding manifest.tsv, or the manifest.
    #[arg(long = "train")]
    train_set: Option<PathBuf>,
    /// Validation corpus.
    #[arg(long = "val")]
    val_set: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long = "val-interval")]
    val_interval: Option<u64>,
    #[arg(long = "clip-norm")]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from a `last.ckpt` written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory for checkpoints and report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Corpus directory or manifest.
    corpus: PathBuf,
    /// Word list file (one per line), or `50` for per-sample 50-word lexicons.
    #[arg(long)]
    lexicon: Option<String>,
    /// Seed of the 50-word lexicon draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-sample results as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write attention maps of every sample under this directory.
    #[arg(long = "dump-attention")]
    dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    checkpoint: PathBuf,
    image: PathBuf,
    /// Word list file to snap the prediction to.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long = "dump-attention")]
    dump_attention: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Number of random seeds per check.
    #[arg(long)]
    seeds: Option<u64>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    checkpoint: PathBuf,
}

/// The resolved settings of a run, echoed so it can be replayed.
struct Echo {
    words: Vec<String>,
}

impl Echo {
    fn new(command: &str) -> Self {
        Echo {
            words: vec!["bivex".into(), command.into()],
        }
    }

    fn positional(&mut self, value: impl Display) -> &mut Self {
        self.words.push(value.to_string());
        self
    }

    fn flag(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.words.push(format!("--{key}"));
        self.words.push(value.to_string());
        self
    }

    fn switch(&mut self, key: &str, on: bool) -> &mut Self {
        if on {
            self.words.push(format!("--{key}"));
        }
        self
    }

    fn print(&self) {
        eprintln!("effective: {}", self.words.join(" "));
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    let mut file = FileSettings::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(args) => generate(args, file),
        Command::Train(args) => train_cmd(args, file),
        Command::Eval(args) => eval_cmd(args, file),
        Command::Infer(args) => infer(args, file),
        Command::Gradcheck(args) => {
            let seeds = file.pick("seeds", args.seeds, 3)?;
            file.finish()?;
            gradcheck(seeds)
        }
        Command::Describe(args) => {
            file.finish()?;
            println!("{}", persistence::describe(&args.checkpoint)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn workers(file: &mut FileSettings, flag: Option<usize>) -> Result<usize, CliError> {
    let fallback = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 1,
    };
    let n = file.pick("workers", flag, fallback)?;
    if n == 0 {
        return Err(CliError::Usage("workers must be at least 1".into()));
    }
    Ok(n)
}

fn required<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing --{what}")))
}

fn generate(args: GenerateArgs, mut file: FileSettings) -> Result<ExitCode, CliError> {
    let defaults = GenSpec::default();
    let no_augment = file.switch("no-augment", args.no_augment)?;
    let spec = GenSpec {
        count: file.pick("count", args.count, defaults.count)?,
        min_len: file.pick("min-len", args.min_len, defaults.min_len)?,
        max_len: file.pick("max-len", args.max_len, defaults.max_len)?,
        vertical_fraction: file.pick("vertical-frac", args.vertical_frac, defaults.vertical_fraction)?,
        layout: file.pick("layout", args.layout, defaults.layout)?,
        augment: if no_augment { Augmentation::none() } else { defaults.augment },
        seed: file.pick("seed", args.seed, defaults.seed)?,
    };
    let workers = workers(&mut file, args.workers)?;
    let out = required(file.maybe("out", args.out)?, "out")?;
    file.finish()?;
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    Echo::new("generate")
        .flag("count", spec.count)
        .flag("vertical-frac", spec.vertical_fraction)
        .flag("seed", spec.seed)
        .flag("min-len", spec.min_len)
        .flag("max-len", spec.max_len)
        .flag("layout", spec.layout.as_str())
        .switch("no-augment", no_augment)
        .flag("workers", workers)
        .flag("out", out.display())
        .print();
    let manifest = datagen::generate_corpus(&spec, &out, workers)?;
    let vertical = manifest
        .entries
        .iter()
        .filter(|e| !e.direction.is_horizontal())
        .count();
    println!(
        "wrote {} images ({vertical} vertical) and {}",
        manifest.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(ExitCode::SUCCESS)
}

/// A corpus argument may name the directory or its manifest.
fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    Ok(Manifest::load(&manifest)?)
}

fn model_flags(file: &mut FileSettings, args: &ModelArgs) -> Result<ModelFlags, CliError> {
    let flags = ModelFlags {
        use_dem: file.switch("use-dem", args.use_dem)?,
        use_san: file.switch("use-san", args.use_san)?,
        dem_kernel_swap: file.switch("dem-kernel-swap", args.dem_kernel_swap)?,
    };
    if flags.dem_kernel_swap && !flags.use_dem {
        return Err(CliError::Usage("--dem-kernel-swap needs --use-dem".into()));
    }
    Ok(flags)
}

fn train_cmd(args: TrainArgs, mut file: FileSettings) -> Result<ExitCode, CliError> {
    let flags = model_flags(&mut file, &args.model)?;
    let mut config = TrainConfig::new(ModelConfig::desk(flags));
    config.batch = file.pick("batch", args.batch, config.batch)?;
    config.learning_rate = file.pick("lr", args.lr, config.learning_rate)?;
    config.iterations = file.pick("iters", args.iters, config.iterations)?;
    config.val_interval = file.pick("val-interval", args.val_interval, config.val_interval)?;
    config.clip_norm = file.pick("clip-norm", args.clip_norm, config.clip_norm)?;
    config.seed = file.pick("seed", args.seed, config.seed)?;
    config.workers = workers(&mut file, args.workers)?;
    config.verbose = true;
    let train_path = required(file.maybe("train", args.train_set)?, "train")?;
    let val_path = required(file.maybe("val", args.val_set)?, "val")?;
    let out = required(file.maybe("out", args.out)?, "out")?;
    let resume: Option<PathBuf> = file.maybe("resume", args.resume)?;
    file.finish()?;
    config.checkpoint_dir = Some(out.clone());
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut echo = Echo::new("train");
    echo.flag("train", train_path.display())
        .flag("val", val_path.display())
        .switch("use-dem", flags.use_dem)
        .switch("use-san", flags.use_san)
        .switch("dem-kernel-swap", flags.dem_kernel_swap)
        .flag("batch", config.batch)
        .flag("lr", config.learning_rate)
        .flag("iters", config.iterations)
        .flag("val-interval", config.val_interval)
        .flag("clip-norm", config.clip_norm)
        .flag("seed", config.seed)
        .flag("workers", config.workers)
        .flag("out", out.display());
    if let Some(r) = &resume {
        echo.flag("resume", r.display());
    }
    echo.print();

    let train_set = Dataset::from_manifest(&config.model, &load_manifest(&train_path)?)?;
    let val_set = Dataset::from_manifest(&config.model, &load_manifest(&val_path)?)?;
    let (model, report) = match resume {
        Some(path) => {
            let checkpoint = Checkpoint::load_expecting(&path, flags)?;
            train::resume(&config, checkpoint, &train_set, &val_set)?
        }
        None => train::train(&config, &train_set, &val_set)?,
    };
    report.write_csv(&out.join("report.csv"))?;
    let mut best = Checkpoint::of_model(model);
    best.iteration = report.best_iteration;
    best.seed = config.seed;
    best.val_accuracy = report.best_val_acc;
    best.save(&out.join("best.ckpt"))?;
    println!(
        "best validation accuracy {:.4} at iteration {}; model in {}",
        report.best_val_acc,
        report.best_iteration,
        out.join("best.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn lexicon_mode(spec: Option<&str>, seed: u64) -> Result<LexiconMode, CliError> {
    Ok(match spec {
        None => LexiconMode::Free,
        Some("50") => LexiconMode::Fifty { seed },
        Some(path) => LexiconMode::from_file(Path::new(path))?,
    })
}

fn eval_cmd(args: EvalArgs, mut file: FileSettings) -> Result<ExitCode, CliError> {
    let lexicon: Option<String> = file.maybe("lexicon", args.lexicon)?;
    let seed = file.pick("seed", args.seed, 0)?;
    let out: Option<PathBuf> = file.maybe("out", args.out)?;
    let dump: Option<PathBuf> = file.maybe("dump-attention", args.dump_attention)?;
    file.finish()?;

    let mut echo = Echo::new("eval");
    echo.positional(args.checkpoint.display()).positional(args.corpus.display());
    if let Some(l) = &lexicon {
        echo.flag("lexicon", l).flag("seed", seed);
    }
    if let Some(o) = &out {
        echo.flag("out", o.display());
    }
    if let Some(d) = &dump {
        echo.flag("dump-attention", d.display());
    }
    echo.print();

    let mode = lexicon_mode(lexicon.as_deref(), seed)?;
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let manifest = load_manifest(&args.corpus)?;
    let report = eval::evaluate(&model, &manifest, &mode)?;
    print!("{}", report.summary());
    if let Some(path) = &out {
        std::fs::write(path, report.to_csv())
            .map_err(|e| CliError::Run(bivex::Error::Io { path: path.clone(), source: e }))?;
    }
    if let Some(dir) = &dump {
        for entry in &manifest.entries {
            let path = manifest.resolve(entry);
            let image = read_image(&path)?;
            let stem = entry.path.file_stem().unwrap_or_default();
            eval::dump_attention(&model, &image, &dir.join(stem))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_image(path: &Path) -> Result<GrayImage, CliError> {
    GrayImage::read_pgm(path).map_err(|source| {
        CliError::Run(bivex::Error::Image {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn infer(args: InferArgs, mut file: FileSettings) -> Result<ExitCode, CliError> {
    let lexicon: Option<PathBuf> = file.maybe("lexicon", args.lexicon)?;
    let dump: Option<PathBuf> = file.maybe("dump-attention", args.dump_attention)?;
    file.finish()?;

    let mut echo = Echo::new("infer");
    echo.positional(args.checkpoint.display()).positional(args.image.display());
    if let Some(l) = &lexicon {
        echo.flag("lexicon", l.display());
    }
    if let Some(d) = &dump {
        echo.flag("dump-attention", d.display());
    }
    echo.print();

    let words = match &lexicon {
        Some(path) => match LexiconMode::from_file(path)? {
            LexiconMode::Shared(words) => Some(words),
            _ => None,
        },
        None => None,
    };
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let image = read_image(&args.image)?;
    let direction = model.route(&image)?.direction;
    let text = eval::recognize(&model, &image, words.as_deref())?;
    println!("{text}\t{direction}");
    if let Some(dir) = &dump {
        let written = eval::dump_attention(&model, &image, dir)?;
        eprintln!("wrote {} attention maps to {}", written.len(), dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seeds: u64) -> Result<ExitCode, CliError> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    Echo::new("gradcheck").flag("seeds", seeds).print();
    let seeds: Vec<u64> = (0..seeds).collect();
    let entries = checks::run_suite(&seeds)?;
    let mut stdout = std::io::stdout().lock();
    let mut failed = 0;
    let mut ops: Vec<&str> = entries.iter().map(|e| e.op).collect();
    ops.dedup();
    for op in ops {
        let group: Vec<_> = entries.iter().filter(|e| e.op == op).collect();
        let worst = group
            .iter()
            .map(|e| e.result.max_relative_error)
            .fold(0.0, f64::max);
        let ok = group.iter().all(|e| e.passed());
        failed += usize::from(!ok);
        let _ = writeln!(
            stdout,
            "{op:<16} max_rel_err {worst:.3e}  tol {:.0e}  {}",
            group[0].tolerance,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

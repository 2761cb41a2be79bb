//! Command-line front end: `train`, `eval`, `compress`, `analyze`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::compress::{self, compress, find_layer, layer_names, matrix_csv, overlap_matrix, winner_stats};
use crate::config::{load_config, RunConfig};
use crate::data::{load_mnist, Dataset};
use crate::error::{Error, Result};
use crate::model::{Layer, Model};
use crate::train::{error_rate, train, METRICS_HEADER};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "compression.txt";
pub const WINNERS_FILE: &str = "winner_stats.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";

#[derive(Parser, Debug)]
#[command(name = "sblwta", version, about = "Stick-breaking LWTA networks: train, evaluate, compress, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Report the test error of a checkpoint.
    Eval(EvalArgs),
    /// Prune, infer bit precisions, quantize and report errors.
    Compress(CompressArgs),
    /// Write per-class winner frequencies and the class overlap matrix of one layer.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Directory holding the MNIST IDX files (default: $MNIST_DIR, else ./data/mnist).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Accepted for scripting; every command is already bit-reproducible.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train on the first N examples.
    #[arg(long)]
    subset: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = compress::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer name (`dense2`, `conv1`, ...) or index; default: the second dense layer.
    #[arg(long)]
    layer: Option<String>,
    /// Number of leading blocks to report.
    #[arg(long, default_value_t = 10)]
    blocks: usize,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Compress(a) => run_compress(a),
        Command::Analyze(a) => run_analyze(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => EXIT_NUMERIC,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn data_dir(common: &Common) -> PathBuf {
    common
        .data
        .clone()
        .or_else(|| std::env::var_os("MNIST_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn test_split(dir: &Path) -> Result<Dataset> {
    load_mnist(dir, "t10k")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match (&a.preset, &a.config) {
        (_, Some(path)) => load_config(path)?,
        (Some(p), None) => RunConfig::from_preset(p)?,
        (None, None) => RunConfig::from_preset("lenet300-sb2")?,
    };
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if a.subset.is_some() {
        cfg.subset = a.subset;
    }
    cfg.validate()?;

    let dir = data_dir(&a.common);
    let mut train_set = load_mnist(&dir, "train")?;
    if let Some(n) = cfg.subset {
        train_set = train_set.take(n);
    }
    let test_set = test_split(&dir).ok();
    create_dir(&a.out)?;

    let mut model = Model::new(cfg.arch.clone(), cfg.prior, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    let metrics_path = a.out.join(METRICS_FILE);
    let mut metrics = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    println!("architecture: {}", cfg.arch);
    println!("training on {} examples, {} parameters", train_set.len(), model.param_count());

    let mut write_err = None;
    let outcome = train(&mut model, &train_set, test_set.as_ref(), &cfg.train, |row| {
        println!(
            "epoch {:>3}  loss {:.4}  train_err {:.4}  test_err {:.4}  lambda {:.4}",
            row.epoch, row.loss, row.train_err, row.test_err, row.lambda
        );
        if let Err(e) = writeln!(metrics, "{}", row.csv_row()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let mut ckpt = Checkpoint::new(model, cfg.train.seed);
    let log = match outcome {
        Ok(log) => log,
        Err(e) => {
            save_checkpoint(&ckpt, &ckpt_path)?;
            eprintln!("last good parameters saved to {}", ckpt_path.display());
            return Err(e);
        }
    };
    ckpt.step = log.steps.len() as u64;
    ckpt.adam = log.adam;
    save_checkpoint(&ckpt, &ckpt_path)?;
    match &test_set {
        Some(t) => println!("final test error: {:.4}", error_rate(&ckpt.model, t)?),
        None => println!("no test split in {}; skipped evaluation", dir.display()),
    }
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let test = test_split(&data_dir(&a.common))?;
    println!("test error: {}", error_rate(&ckpt.model, &test)?);
    Ok(())
}

fn run_compress(a: CompressArgs) -> Result<()> {
    if a.tau.is_nan() || a.tau < 0.0 {
        return Err(Error::Config(format!("tau must be non-negative, got {}", a.tau)));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let test = test_split(&data_dir(&a.common))?;
    let (report, _, _) = compress(&ckpt.model, a.tau, &test)?;
    print!("{}", report.table());
    println!(
        "error: unpruned {}  pruned {}  quantized {}",
        report.err_unpruned, report.err_fp, report.err_q
    );
    create_dir(&a.out)?;
    write_file(&a.out.join(REPORT_FILE), &report.to_text())
}

fn default_layer(model: &Model) -> Result<usize> {
    let dense: Vec<usize> = (0..model.layers.len())
        .filter(|&i| matches!(model.layers[i], Layer::Dense(_)))
        .collect();
    dense
        .get(1)
        .or(dense.first())
        .or(model.lwta_layers().first())
        .copied()
        .ok_or_else(|| Error::Config("model has no LWTA layer".into()))
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = &ckpt.model;
    let layer = match &a.layer {
        Some(name) => find_layer(model, name)?,
        None => default_layer(model)?,
    };
    let test = test_split(&data_dir(&a.common))?;
    let stats = winner_stats(model, layer, &test, Some(a.blocks))?;
    for c in stats.empty_classes() {
        eprintln!("warning: class {c} has no examples; its rows are uniform");
    }
    let overlap = overlap_matrix(&stats);
    create_dir(&a.out)?;
    write_file(&a.out.join(WINNERS_FILE), &stats.to_csv())?;
    write_file(&a.out.join(OVERLAP_FILE), &matrix_csv(&overlap))?;
    let c = overlap.len();
    let off: f64 = (0..c).flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| overlap[i][j]).sum();
    println!(
        "layer {} ({} blocks): mean off-diagonal overlap {:.4}",
        layer_names(model)[layer],
        stats.blocks,
        if c > 1 { off / (c * (c - 1)) as f64 } else { 1.0 }
    );
    Ok(())
}

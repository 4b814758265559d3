use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::ExperimentConfig;
use super::sweep::{reference_config, run_experiment, train_reference};
use super::train::evaluate;
use crate::data::load_idx;
use crate::error::Error;
use crate::importance::{estimate, Estimator, GradientSource, ImportanceTable};
use crate::nn::{build_reference, checkpoint, Model};
use crate::pruning::{compact, rank_global_with, PruneMask, RankOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "neuroprune", version, about = "Channel importance estimation and structured pruning")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and the sweep seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when omitted (required for `train`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured model and save a checkpoint.
    Train,
    /// Write an importance table as CSV.
    Importance(ImportanceArgs),
    /// Rank channels, write the prune plan, optionally save a compacted model.
    Prune(PruneArgs),
    /// Run the full train / estimate / prune / evaluate grid.
    Sweep(SweepArgs),
    /// Report test accuracy of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// IDX images file; the configured training split when omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX labels file matching `--images`.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ImportanceArgs {
    /// Model checkpoint; an untrained reference model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "taylorfo_sq")]
    estimator: String,
    /// `loss` or `random`.
    #[arg(long, default_value = "loss")]
    source: String,
    /// Scale output-gradient rows to unit norm.
    #[arg(long)]
    normalize: bool,
    /// Number of leading examples to use; all when omitted.
    #[arg(long)]
    data_size: Option<usize>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Importance table CSV.
    #[arg(long)]
    table: PathBuf,
    /// Number of channels to prune.
    #[arg(long, conflicts_with = "fraction")]
    count: Option<usize>,
    /// Fraction of prunable channels to prune.
    #[arg(long)]
    fraction: Option<f64>,
    /// Where to save the compacted model.
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Normalise scores by each site's maximum before ranking.
    #[arg(long)]
    per_site_normalize: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Sweep this trained model instead of training one per seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// IDX images; the configured test split when omitted.
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn emit(out: &Option<PathBuf>, stdout: &mut dyn Write, bytes: &[u8]) -> Outcome {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into()),
        None => stdout.write_all(bytes).map_err(|e| Error::io("<stdout>", e).into()),
    }
}

fn load_model(path: &Path) -> Result<Model<f32>, Error> {
    checkpoint::load(path)
}

fn run_command(cli: Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Outcome {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.sweep.seeds = vec![seed];
    }
    let seed = cfg.train.seed;
    match cli.command {
        Command::Train => {
            let out = cli.out.ok_or_else(|| Failure::Usage("`train` needs --out for the checkpoint".into()))?;
            let (train_set, test_set) = cfg.dataset.load()?;
            let run = train_reference(&cfg, &train_set, seed)?;
            for e in &run.log {
                let _ = writeln!(stderr, "epoch {} loss {:.4} train accuracy {:.4}", e.epoch + 1, e.loss, e.accuracy);
            }
            let acc = evaluate(&run.model, &test_set, cfg.sweep.eval_batch_size)?;
            let _ = writeln!(stderr, "test accuracy {acc:.4}");
            checkpoint::save(&run.model, &out)?;
        }
        Command::Importance(args) => {
            let estimator = Estimator::from_name(&args.estimator).map_err(|e| Failure::Usage(e.to_string()))?;
            let source = GradientSource::from_name(&args.source, args.normalize, seed)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let data = match &args.data.images {
                Some(images) => load_idx(images, args.data.labels.as_deref())?,
                None => cfg.dataset.load()?.0,
            };
            let model = match &args.checkpoint {
                Some(p) => load_model(p)?,
                None => {
                    let mut rc = reference_config(&data, seed)?;
                    if rc.num_classes == 0 {
                        if let crate::harness::DatasetSpec::Glyphs { spec, .. } = &cfg.dataset {
                            rc.num_classes = spec.num_classes;
                        }
                    }
                    build_reference(&cfg.model, &rc)?
                }
            };
            let d = args.data_size.unwrap_or(data.len());
            let table = estimate(&model, &data, d, estimator, &source, args.batch_size)?;
            emit(&cli.out, stdout, table.to_csv_string()?.as_bytes())?;
        }
        Command::Prune(args) => {
            let model = load_model(&args.checkpoint)?;
            let table = ImportanceTable::load(&args.table)?;
            let n = model.prunable_channels();
            let p = match (args.count, args.fraction) {
                (Some(c), None) => c,
                (None, Some(f)) if (0.0..=1.0).contains(&f) => (f * n as f64).round() as usize,
                (None, Some(f)) => return Err(Failure::Usage(format!("fraction {f} outside [0, 1]"))),
                _ => return Err(Failure::Usage("`prune` needs --count or --fraction".into())),
            };
            let options = RankOptions {
                per_site_max_normalize: args.per_site_normalize,
            };
            let plan = rank_global_with(&table, p, options)?;
            let mask = PruneMask::from_plan(&model, &plan)?;
            let mut buf = Vec::new();
            plan.write_csv(&mut buf)?;
            emit(&cli.out, stdout, &buf)?;
            for (site, channel) in &plan.skipped {
                let _ = writeln!(stderr, "kept last channel {channel} of site {site}");
            }
            if let Some(path) = &args.model_out {
                let small = compact(&model, &mask)?;
                let _ = writeln!(
                    stderr,
                    "pruned {p} of {n} channels; parameters {} -> {}",
                    model.param_count(),
                    small.param_count()
                );
                checkpoint::save(&small, path)?;
            }
        }
        Command::Sweep(args) => {
            let model = args.checkpoint.as_deref().map(load_model).transpose()?;
            let result = run_experiment(&cfg, model.as_ref())?;
            emit(&cli.out, stdout, result.to_csv_string()?.as_bytes())?;
        }
        Command::Eval(args) => {
            let model = load_model(&args.checkpoint)?;
            let data = match (&args.images, &args.labels) {
                (Some(i), Some(l)) => load_idx(i, Some(l))?,
                _ => cfg.dataset.load()?.1,
            };
            let acc = evaluate(&model, &data, cfg.sweep.eval_batch_size)?;
            emit(&cli.out, stdout, format!("{}\n", crate::importance::format_score(acc)).as_bytes())?;
        }
    }
    Ok(())
}

/// Runs the command line and returns the process exit code: 0 success,
/// 1 usage, 2 configuration, 3 runtime. Errors go to `stderr`.
pub fn run_with<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run_command(cli, stdout, stderr) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(stderr, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Lib(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Config { .. } => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

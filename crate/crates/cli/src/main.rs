use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use intrabatch::batching::{load_dataset, save_dataset, LabeledDataset, Side};
use intrabatch::config::{InferMode, RunConfig};
use intrabatch::gradcheck::GradCheckOptions;
use intrabatch::inference::RetrievalIndex;
use intrabatch::model::{read_checkpoint, write_checkpoint, Model};
use intrabatch::pipeline;
use intrabatch::{ErrorClass, OpKind, Result};

const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERICAL: u8 = 5;

#[derive(Parser)]
#[command(
    name = "intrabatch",
    version,
    about = "Metric learning with intra-batch message passing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Key-value config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path; `<out_dir>/model.ckpt` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write embeddings of one side of the split as a feature file.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        side: SideArg,
        /// Falls back to `infer.mode` from the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@K and NMI of an embedding file or of a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            conflicts_with = "checkpoint",
            required_unless_present = "checkpoint"
        )]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        side: SideArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Report path; `<out_dir>/report.txt` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter group on one batch.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Corrupt the backward rule of this op (e.g. `matmul`).
        #[arg(long, value_parser = parse_op)]
        fault: Option<OpKind>,
    },
    /// Write the configured synthetic blobs as a feature file.
    MakeBlobs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Train,
    Test,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Side {
        match s {
            SideArg::Train => Side::Train,
            SideArg::Test => Side::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Backbone,
    MpnReciprocal,
}

impl From<ModeArg> for InferMode {
    fn from(m: ModeArg) -> InferMode {
        match m {
            ModeArg::Backbone => InferMode::Backbone,
            ModeArg::MpnReciprocal => InferMode::MpnReciprocal,
        }
    }
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::parse(s).ok_or_else(|| {
        let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown op `{s}`, expected one of {}", known.join(", "))
    })
}

fn load_config(common: &Common, fallback: fn() -> RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => fallback(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, LabeledDataset)> {
    let model = read_checkpoint(BufReader::new(File::open(path)?))?;
    let ds = pipeline::load_data(cfg)?;
    pipeline::check_compatible(cfg, &model, &ds)?;
    Ok((model, ds))
}

fn side_index(
    cfg: &RunConfig,
    checkpoint: &Path,
    side: SideArg,
    mode: Option<ModeArg>,
) -> Result<RetrievalIndex> {
    let (model, ds) = load_model(cfg, checkpoint)?;
    let split = pipeline::split(cfg, &ds)?;
    let part = ds.side(&split, side.into())?;
    let mode = mode.map_or(cfg.infer_mode, InferMode::from);
    pipeline::embed(cfg, &model, &part, mode)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = load_config(&common, RunConfig::default)?;
            let out = out.unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
            let ds = pipeline::load_data(&cfg)?;
            let split = pipeline::split(&cfg, &ds)?;
            let log_path = out.with_extension("log");
            drop(create(&log_path)?);
            let mut log_err = None;
            let outcome = pipeline::train_with(&cfg, &ds, &split, |e| {
                println!("{e}");
                let res = OpenOptions::new()
                    .append(true)
                    .open(&log_path)
                    .and_then(|mut f| writeln!(f, "{e}"));
                if let Err(err) = res {
                    log_err.get_or_insert(err);
                }
            })?;
            if let Some(err) = log_err {
                return Err(err.into());
            }
            let mut w = create(&out)?;
            write_checkpoint(&outcome.model, &mut w)?;
            w.flush()?;
            println!("wrote {}", out.display());
        }
        Command::Embed {
            common,
            checkpoint,
            side,
            mode,
            out,
        } => {
            let cfg = load_config(&common, RunConfig::default)?;
            let index = side_index(&cfg, &checkpoint, side, mode)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_dataset(&index.to_dataset()?, &out)?;
            println!(
                "wrote {} embeddings of width {} to {}",
                index.len(),
                index.dim(),
                out.display()
            );
        }
        Command::Evaluate {
            common,
            embeddings,
            checkpoint,
            side,
            mode,
            out,
        } => {
            let cfg = load_config(&common, RunConfig::default)?;
            let index = match (embeddings, checkpoint) {
                (Some(path), _) => {
                    let ds = load_dataset(&path)?;
                    RetrievalIndex::new(ds.features().clone(), ds.labels().to_vec())?
                }
                (None, Some(ckpt)) => side_index(&cfg, &ckpt, side, mode)?,
                (None, None) => unreachable!("clap requires one source"),
            };
            let report = pipeline::evaluate_index(&cfg, &index)?.render();
            print!("{report}");
            let out = out.unwrap_or_else(|| cfg.out_dir.join("report.txt"));
            let mut w = create(&out)?;
            w.write_all(report.as_bytes())?;
            w.flush()?;
        }
        Command::Gradcheck {
            common,
            step,
            tolerance,
            fault,
        } => {
            let cfg = load_config(&common, RunConfig::gradcheck_default)?;
            let opts = GradCheckOptions {
                step,
                tolerance,
                fault,
            };
            let check = pipeline::gradcheck_model(&cfg, opts)?;
            print!("{}", check.render());
            if !check.passed() {
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
        Command::MakeBlobs { common, out } => {
            let cfg = load_config(&common, RunConfig::default)?;
            let ds = pipeline::synthetic_data(&cfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} rows of width {} to {}",
                ds.len(),
                ds.dim(),
                out.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err.class() {
                ErrorClass::Config => EXIT_CONFIG,
                ErrorClass::Data => EXIT_DATA,
                ErrorClass::Numerical => EXIT_NUMERICAL,
            })
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpseg_core::dataset::{decode_panoptic_file, read_rgb_png, write_rgb_png, ClassTable, SyntheticConfig};
use vpseg_core::kv::KvDoc;
use vpseg_core::pipeline::{render_overlay, run_eval, run_infer, run_synth, run_train, RunConfig, CHECKPOINT_FILE};
use vpseg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "vpseg", version, about = "Video panoptic segmentation with query propagation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (output file for `overlay`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset; writes checkpoint.bin and train.log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Track every sequence and write panoptic PNGs plus track ledgers.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.bin in the configured output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root to run on; defaults to the configured dataset.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Score predicted panoptic maps against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class table; defaults to the configured one or the built-in table.
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from `synth.*` keys.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<PathBuf>,
    },
    /// Blend a panoptic map over its frame.
    Overlay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        frame: PathBuf,
        #[arg(long)]
        panoptic: PathBuf,
        #[arg(long)]
        classes: Option<PathBuf>,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn class_table(explicit: Option<&Path>, common: &Common) -> Result<ClassTable> {
    if let Some(p) = explicit {
        return ClassTable::load(p);
    }
    match &common.config {
        Some(_) => run_config(common)?.classes(),
        None => Ok(ClassTable::default()),
    }
}

fn required_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = run_config(&common)?;
            let outcome = run_train(&cfg, |rec| println!("{rec}"))?;
            println!("checkpoint={}", outcome.checkpoint.display());
        }
        Command::Infer { common, checkpoint, input } => {
            let cfg = run_config(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE));
            let input = input.unwrap_or_else(|| cfg.dataset_root.clone());
            for seq in run_infer(&cfg, &ckpt, &input, &cfg.output_dir)? {
                println!("sequence={} frames={} tracks={}", seq.name, seq.maps.len(), seq.ledger.rows.len());
            }
        }
        Command::Eval { common, pred, gt, classes } => {
            let classes = class_table(classes.as_deref(), &common)?;
            let report = run_eval(&pred, &gt, &classes, common.out.as_deref())?;
            println!("{}", report.machine_line());
        }
        Command::Synth { common, classes } => {
            let table = match &classes {
                Some(p) => ClassTable::load(p)?,
                None => ClassTable::default(),
            };
            let mut cfg = match &common.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    SyntheticConfig::from_kv(&KvDoc::parse(&text)?)?
                }
                None => SyntheticConfig::default(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let out = required_out(&common)?;
            let data = run_synth(&cfg, &table, out)?;
            println!("sequences={} root={}", data.len(), out.display());
        }
        Command::Overlay { common, frame, panoptic, classes } => {
            let table = class_table(classes.as_deref(), &common)?;
            let image = read_rgb_png(&frame)?;
            let map = decode_panoptic_file(&panoptic)?;
            let out = required_out(&common)?;
            write_rgb_png(out, &render_overlay(&image, &map, &table)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.class());
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use discseg::cli::{self, ExperimentConfig, SegmenterInit, Split, KEYS};

/// Optic-disc segmentation with a localization-pretrained encoder.
#[derive(Parser)]
#[command(name = "discseg", version)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root (overrides out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for the sweep (overrides jobs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic localization and segmentation datasets.
    Gen {
        /// Replace an existing, non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain the encoder as a centroid regressor.
    TrainLocalizer,
    /// Cross-validate one segmentation scheme on the full training folds.
    TrainSegmenter(SegArgs),
    /// Compare both schemes across training-set fractions.
    Sweep {
        /// Localizer checkpoint (default <out>/localizer/localizer.ckpt).
        #[arg(long)]
        localizer: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a named split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// loc-train, loc-val, loc-test, seg-all or seg-fold<K>.
        #[arg(long)]
        split: String,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SegArgs {
    /// Freeze the encoder of this localizer checkpoint and train a decoder.
    #[arg(long, value_name = "CKPT")]
    pretrained: Option<PathBuf>,
    /// Train the whole U-net from random initialization.
    #[arg(long)]
    baseline: bool,
}

fn keys_help() -> String {
    let mut s = String::from("Config keys:\n");
    for (k, doc) in KEYS {
        s.push_str(&format!("  {k:<22} {doc}\n"));
    }
    s
}

fn run(args: Cli) -> discseg::Result<cli::Metrics> {
    let mut cfg = ExperimentConfig::default();
    if let Some(p) = &args.config {
        cfg.apply_file(p)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    if let Some(j) = args.jobs {
        cfg.sweep.jobs = j;
    }
    match args.command {
        Command::Gen { force } => cli::cmd_gen(&cfg, force),
        Command::TrainLocalizer => cli::cmd_train_localizer(&cfg),
        Command::TrainSegmenter(seg) => {
            let init = match seg.pretrained {
                Some(p) => SegmenterInit::Pretrained(p),
                None => SegmenterInit::Baseline,
            };
            cli::cmd_train_segmenter(&cfg, &init)
        }
        Command::Sweep { localizer } => cli::cmd_sweep(&cfg, localizer.as_deref()),
        Command::Eval { ckpt, split } => {
            let split: Split = split.parse()?;
            cli::cmd_eval(&cfg, &ckpt, split)
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command()
        .after_long_help(keys_help())
        .try_get_matches();
    let args = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(a) => a,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            e.exit()
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(args) {
        Ok(metrics) => {
            for (k, v) in metrics {
                println!("{k}={v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let text = e.to_string().replace('\n', " ");
            let msg = text.split_once(": ").map_or(text.as_str(), |p| p.1);
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}

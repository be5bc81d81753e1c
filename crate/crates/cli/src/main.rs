use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loggraph_cli::config::RunConfig;
use loggraph_cli::pipeline;
use loggraph_core::synth::SynthConfig;
use loggraph_core::{Error, Result};

/// Graph-based log anomaly detection.
#[derive(Parser)]
#[command(name = "loggraph", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Raw log file (overrides `data.logs`).
    #[arg(long)]
    logs: Option<PathBuf>,
    /// Per-line 0/1 label file (overrides `data.labels`).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Root seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(l) = &self.logs {
            cfg.data.logs = l.clone();
        }
        if let Some(l) = &self.labels {
            cfg.data.labels = Some(l.clone());
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let cfg = cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic HDFS-style corpus.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        event_types: usize,
        #[arg(long, default_value_t = 2500)]
        sequences: usize,
        /// Events per sequence.
        #[arg(long, default_value_t = 40)]
        length: usize,
        #[arg(long, default_value_t = 0.1)]
        anomaly_rate: f64,
        #[arg(long, default_value_t = 2)]
        successors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mine templates and write the event-id stream.
    Parse {
        #[command(flatten)]
        common: Common,
        /// Continue from a saved template store.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Window the event stream and write graph datasets.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the training graphs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Graph file to evaluate (default: the test split).
        #[arg(long)]
        graphs: Option<PathBuf>,
    },
    /// Write per-graph anomaly scores.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graphs: Option<PathBuf>,
        /// Score file (default: scores.jsonl in the output directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run parse, build, train and eval.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            out,
            event_types,
            sequences,
            length,
            anomaly_rate,
            successors,
            seed,
        } => {
            let cfg = SynthConfig {
                event_types,
                sequences,
                sequence_length: length,
                anomaly_rate,
                successors,
                seed,
            };
            let s = pipeline::run_synth(&out, &cfg)?;
            println!(
                "wrote {} lines in {} sequences ({} anomalous) to {}",
                s.lines,
                s.sequences,
                s.anomalous_sequences,
                out.display()
            );
        }
        Command::Parse { common, templates } => {
            let cfg = common.load()?;
            let s = pipeline::run_parse(&cfg, templates.as_deref())?;
            println!(
                "parsed {} lines: {} events, {} skipped, {} templates",
                s.lines, s.accepted, s.skipped, s.templates
            );
        }
        Command::Build { common } => {
            let s = pipeline::run_build(&common.load()?)?;
            println!(
                "built {} graphs: {} train ({} anomalous), {} test ({} anomalous)",
                s.sequences, s.train, s.train_anomalous, s.test, s.test_anomalous
            );
        }
        Command::Train { common } => {
            let s = pipeline::run_train(&common.load()?)?;
            println!(
                "trained {} epochs; best epoch {} (validation loss {:.6})",
                s.epochs_run, s.best_epoch, s.best_val_loss
            );
        }
        Command::Eval {
            common,
            checkpoint,
            graphs,
        } => {
            let m = pipeline::run_eval(&common.load()?, checkpoint.as_deref(), graphs.as_deref())?;
            println!("precision {:.4} recall {:.4} f1 {:.4}", m.precision, m.recall, m.f1);
        }
        Command::Predict {
            common,
            checkpoint,
            graphs,
            output,
        } => {
            let s = pipeline::run_predict(
                &common.load()?,
                checkpoint.as_deref(),
                graphs.as_deref(),
                output.as_deref(),
            )?;
            println!("scored {} graphs", s.len());
        }
        Command::Run { common } => {
            let m = pipeline::run_all(&common.load()?)?;
            println!("precision {:.4} recall {:.4} f1 {:.4}", m.precision, m.recall, m.f1);
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_user_error() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

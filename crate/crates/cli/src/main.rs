use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use tgraph::exec::Execution;
use tgraph::pipeline::{self, GenerateOptions, PipelineError, RunConfig, CONFIG_ENV};

/// Temporal relation extraction with a graph-based biaffine model.
///
/// Settings come from a TOML config file, then `--set key=value`
/// overrides, then command flags; later sources win.
#[derive(Parser, Debug)]
#[command(name = "tgraph", version, propagate_version = true)]
struct Cli {
    /// Config file (TOML). Unknown keys are errors.
    #[arg(short, long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set model.lstm_hidden=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Log more (repeat for trace output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut an annotated corpus into training windows.
    Preprocess {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Window file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON summary to write.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train a model on a window file.
    Train {
        #[arg(long)]
        windows: Option<PathBuf>,
        /// Annotated dev corpus for picking the best epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Final checkpoint to write.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where to keep the best-dev checkpoint.
        #[arg(long)]
        best: Option<PathBuf>,
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict temporal graphs for documents.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Predictions file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also project to event pairs (input must carry events).
        #[arg(long)]
        events: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a predictions file against a gold corpus.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Tab-separated report to write.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure inference throughput in sentences per second.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// JSON report to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic corpus with learnable relation patterns.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Leave out events and relations.
        #[arg(long)]
        raw: bool,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Thread limit for inference.
    #[arg(long)]
    workers: Option<usize>,
    /// Run inference on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn apply(&self, workers: &mut Option<usize>, execution: &mut Execution) {
        if self.workers.is_some() {
            *workers = self.workers;
        }
        if self.sequential {
            *execution = Execution::Sequential;
        }
    }
}

fn set<T>(slot: &mut Option<T>, flag: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = flag {
        *slot = Some(v.clone());
    }
}

fn apply_flags(config: &mut RunConfig, command: &Command) {
    let p = &mut config.paths;
    match command {
        Command::Preprocess {
            corpus,
            out,
            summary,
        } => {
            set(&mut p.corpus, corpus);
            set(&mut p.windows, out);
            set(&mut p.summary, summary);
        }
        Command::Train {
            windows,
            dev,
            checkpoint,
            best,
            loss_curve,
            epochs,
            seed,
        } => {
            set(&mut p.windows, windows);
            set(&mut p.dev_corpus, dev);
            set(&mut p.checkpoint, checkpoint);
            set(&mut p.best_checkpoint, best);
            set(&mut p.loss_curve, loss_curve);
            set(&mut config.train.epochs, epochs);
            if let Some(s) = seed {
                config.train.seed = *s;
            }
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            events,
            run,
        } => {
            set(&mut p.checkpoint, checkpoint);
            set(&mut p.input, input);
            set(&mut p.predictions, out);
            config.predict.events |= events;
            run.apply(&mut config.predict.workers, &mut config.predict.execution);
        }
        Command::Eval {
            predictions,
            gold,
            report,
        } => {
            set(&mut p.predictions, predictions);
            set(&mut p.gold, gold);
            set(&mut p.report, report);
        }
        Command::Bench {
            checkpoint,
            input,
            out,
            repetitions,
            run,
        } => {
            set(&mut p.checkpoint, checkpoint);
            set(&mut p.input, input);
            set(&mut p.bench_report, out);
            if let Some(r) = repetitions {
                config.bench.repetitions = *r;
            }
            run.apply(&mut config.bench.workers, &mut config.bench.execution);
        }
        Command::Generate { .. } | Command::Config => {}
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    apply_flags(&mut config, &cli.command);
    config.validate()?;

    match &cli.command {
        Command::Preprocess { .. } => {
            let s = pipeline::cmd_preprocess(&config)?;
            println!(
                "{} documents -> {} windows ({} skipped, {} TLINKs dropped)",
                s.documents, s.windows, s.skipped_windows, s.dropped_tlinks
            );
            for (label, count) in &s.label_histogram {
                println!("  {label:<14} {count}");
            }
        }
        Command::Train { .. } => {
            let r = pipeline::cmd_train(&config)?;
            for e in &r.epochs {
                let dev = e.dev_f1.map_or(String::new(), |f| format!("  dev_f1 {f:.4}"));
                println!(
                    "epoch {:>3}  steps {:>6}  arc {:.5}  rel {:.5}  joint {:.5}{dev}",
                    e.epoch + 1,
                    e.steps,
                    e.mean_arc,
                    e.mean_rel,
                    e.mean_joint
                );
            }
            if let (Some(epoch), Some(f1)) = (r.best_epoch, r.best_dev_f1) {
                println!("best dev F1 {f1:.4} at epoch {}", epoch + 1);
            }
        }
        Command::Predict { .. } => {
            let s = pipeline::cmd_predict(&config)?;
            println!(
                "{} documents, {} windows ({} skipped), {} token edges",
                s.documents, s.windows, s.skipped_windows, s.token_edges
            );
            if let Some(n) = s.event_pairs {
                println!("{n} event pairs with a relation");
            }
        }
        Command::Eval { .. } => {
            let report = pipeline::cmd_eval(&config)?;
            print!("{}", report.to_table());
        }
        Command::Bench { .. } => {
            let report = pipeline::cmd_bench(&config)?;
            print!("{}", report.to_text());
        }
        Command::Generate {
            out,
            docs,
            seed,
            raw,
        } => {
            let opts = GenerateOptions {
                documents: *docs,
                seed: *seed,
                raw: *raw,
            };
            let n = pipeline::cmd_generate(&config, &opts, out)?;
            println!("wrote {n} documents to {}", out.display());
        }
        Command::Config => print!("{}", config.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

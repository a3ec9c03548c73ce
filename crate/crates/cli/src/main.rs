use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use echoqa::dataset::{AugmentationSpec, Split};
use echoqa::model::{ModelConfig, TrainConfig};
use echoqa::phantom::DegradationMix;
use echoqa::rubric::Rubric;
use echoqa_cli::commands::{self, ServeArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "echoqa", version, about = "Echo cine-loop quality scoring pipeline")]
struct Cli {
    /// Rubric TOML to use instead of the built-in table.
    #[arg(long, global = true)]
    rubric: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    /// Small streams that train on a CPU.
    Desk,
    /// Full-width streams and the slower learning rate.
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom dataset.
    Generate {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Share of clips drawn poor, average and optimum per attribute.
        #[arg(long, num_args = 3, value_names = ["POOR", "AVERAGE", "OPTIMUM"])]
        mix: Option<Vec<f64>>,
    },
    /// Record a 60:20:20 split in the manifest.
    Split {
        #[arg(long, env = "ECHOQA_DATASET")]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the train split, early-stopping on val.
    Train {
        #[arg(long, env = "ECHOQA_DATASET")]
        data: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random shifts, rotations and flips on training clips.
        #[arg(long)]
        augment: bool,
    },
    /// Accuracy table on one split; optionally writes the JSON report.
    Evaluate {
        #[arg(long, env = "ECHOQA_DATASET")]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Four scores for one clip directory of frame_*.pgm files.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clip: PathBuf,
    },
    /// Inference latency per frame.
    Bench {
        #[arg(long, env = "ECHOQA_DATASET")]
        data: PathBuf,
        /// Untrained default model when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        /// Print the stats as JSON instead of one line.
        #[arg(long)]
        json: bool,
    },
    /// HTTP service for the annotation tool.
    Serve {
        #[arg(long, env = "ECHOQA_DATASET")]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Annotation log; defaults to annotations.jsonl in the dataset.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, env = "ECHOQA_PORT", default_value_t = 8080)]
        port: u16,
    },
}

fn run(cli: Cli) -> echoqa::Result<()> {
    let rubric = match &cli.rubric {
        Some(p) => Rubric::load(p)?,
        None => Rubric::default(),
    };
    match cli.command {
        Command::Generate { count, seed, out, mix } => {
            let mix = match mix.as_deref() {
                Some(&[poor, average, optimum]) => DegradationMix { poor, average, optimum },
                _ => DegradationMix::uniform(),
            };
            println!("{}", commands::generate(&out, count, seed, &mix, &rubric)?);
        }
        Command::Split { data, seed } => println!("{}", commands::split(&data, seed)?),
        Command::Train {
            data,
            out,
            log,
            scale,
            epochs,
            lr,
            batch,
            patience,
            seed,
            augment,
        } => {
            let (model, base) = match scale {
                Scale::Desk => (ModelConfig::default(), TrainConfig::default()),
                Scale::Paper => (ModelConfig::paper_scale(), TrainConfig::paper()),
            };
            let train = TrainConfig {
                base_lr: lr.unwrap_or(base.base_lr),
                max_epochs: epochs.unwrap_or(base.max_epochs),
                patience: patience.unwrap_or(base.patience),
                batch_size: batch,
                seed,
                augmentation: augment.then(AugmentationSpec::default),
                ..base
            };
            let args = TrainArgs { data, out, log, model, train };
            println!("{}", commands::train(&args)?);
        }
        Command::Evaluate { data, model, split, out } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let (_, table) = commands::evaluate_split(&data, &model, split, out.as_deref())?;
            print!("{table}");
        }
        Command::Score { model, clip } => print!("{}", commands::score(&model, &clip, &rubric)?),
        Command::Bench {
            data,
            model,
            reps,
            batch,
            json,
        } => {
            let stats = commands::bench(model.as_deref(), &data, reps, batch)?;
            if json {
                println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
            } else {
                println!("{}", stats.line());
            }
        }
        Command::Serve {
            data,
            model,
            annotations,
            port,
        } => {
            let rt = tokio::runtime::Runtime::new().map_err(|e| echoqa::Error::Config(format!("runtime: {e}")))?;
            rt.block_on(commands::serve(
                ServeArgs {
                    data,
                    model,
                    annotations,
                    port,
                },
                rubric,
            ))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

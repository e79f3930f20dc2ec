//! `mindsem`: synthetic data, caption corpora, training, evaluation, ROI maps
//! and 2AFC comparisons from one binary.

mod commands;
mod runlog;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mindsem::nncore::Real;
use mindsem::Error;

use commands::{
    CaptionArgs, ClientKind, EvalArgs, Globals, JudgeKind, Outcome, RendererArgs, TrainArgs, TwoAfcArgs,
};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(name = "mindsem", version, about = "Semantic fMRI-to-image decoding on a synthetic world")]
struct Cli {
    /// Overrides the seed of the config in use.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Floating-point precision used for training and inference.
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: Precision,
    /// Concurrent in-flight caption requests.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSONL file that receives one record per invocation.
    #[arg(long, global = true, default_value = "runs.jsonl")]
    run_log: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write a dataset.
    GenData {
        /// JSON with optional `world` and `dataset` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the multi-granularity caption corpus.
    GenCaptions {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "mock")]
        client: ClientKind,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// Comma-separated word budgets.
        #[arg(long, value_delimiter = ',')]
        budget_list: Option<Vec<u32>>,
        /// Caption only the first N stimuli.
        #[arg(long)]
        limit: Option<usize>,
        /// Cache directory (default: `<out>/cache`).
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the encoder stack, then a renderer on its outputs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        captions: Option<PathBuf>,
        /// JSON with optional `train` and `renderer` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `semantic_only` or `full`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        renderer_epochs: Option<usize>,
        #[arg(long)]
        mixco: bool,
        /// `cc`, `v30`, `v45`, `v60`, `v75` or `full`.
        #[arg(long)]
        granularity: Option<String>,
        /// Comma-separated modules to keep fixed (`swm`, `sse`, `ssv`).
        #[arg(long, value_delimiter = ',')]
        freeze: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refit a renderer for an existing checkpoint.
    TrainRenderer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train on ground-truth embeddings instead of encoder outputs.
        #[arg(long)]
        teacher_forcing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the test split and score it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        renderer: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxel importance maps, one checkpoint per granularity.
    RoiMap {
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-alternative forced choice between two sets of renders.
    #[command(name = "2afc")]
    TwoAfc {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        subject: usize,
        #[arg(long, value_enum, default_value = "feature")]
        judge: JudgeKind,
        #[arg(long, default_value_t = 1)]
        judges: usize,
        #[arg(long)]
        sentinel_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::GenCaptions { .. } => "gen-captions",
            Command::Train { .. } => "train",
            Command::TrainRenderer { .. } => "train-renderer",
            Command::Eval { .. } => "eval",
            Command::RoiMap { .. } => "roi-map",
            Command::TwoAfc { .. } => "2afc",
        }
    }
}

fn run<T: Real>(g: &Globals, command: Command) -> mindsem::Result<Outcome> {
    match command {
        Command::GenData { config, out } => commands::gen_data(g, config.as_deref(), &out),
        Command::GenCaptions {
            data,
            client,
            endpoint,
            model,
            budget_list,
            limit,
            cache,
            config,
            out,
        } => commands::gen_captions(
            g,
            CaptionArgs {
                data: &data,
                client,
                endpoint,
                model,
                budgets: budget_list,
                limit,
                cache,
                config: config.as_deref(),
                out: &out,
            },
        ),
        Command::Train {
            data,
            captions,
            config,
            mode,
            epochs,
            renderer_epochs,
            mixco,
            granularity,
            freeze,
            out,
        } => commands::train_cmd::<T>(
            g,
            TrainArgs {
                data: &data,
                captions: captions.as_deref(),
                config: config.as_deref(),
                mode,
                epochs,
                renderer_epochs,
                mixco,
                granularity,
                freeze,
                out: &out,
            },
        ),
        Command::TrainRenderer {
            checkpoint,
            data,
            captions,
            config,
            epochs,
            teacher_forcing,
            out,
        } => commands::train_renderer::<T>(
            g,
            RendererArgs {
                checkpoint: &checkpoint,
                data: &data,
                captions: captions.as_deref(),
                config: config.as_deref(),
                epochs,
                teacher_forcing,
                out: &out,
            },
        ),
        Command::Eval {
            checkpoint,
            renderer,
            data,
            captions,
            out,
        } => commands::eval_cmd::<T>(EvalArgs {
            checkpoint: &checkpoint,
            renderer: &renderer,
            data: &data,
            captions: captions.as_deref(),
            out: &out,
        }),
        Command::RoiMap { checkpoint, out } => commands::roi_map::<T>(&checkpoint, &out),
        Command::TwoAfc {
            a,
            b,
            data,
            subject,
            judge,
            judges,
            sentinel_every,
            out,
        } => commands::two_afc(
            g,
            TwoAfcArgs {
                a: &a,
                b: &b,
                data: &data,
                subject,
                judge,
                judges,
                sentinel_every,
                out: &out,
            },
        ),
    }
}

/// 2 for bad configuration, 3 for missing inputs, 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parameter { .. } | Error::Mode(_) => 2,
        Error::MissingInput(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let globals = Globals {
        seed: cli.seed,
        threads: cli.threads,
    };
    let subcommand = cli.command.name();
    let started = runlog::now();
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&globals, cli.command),
        Precision::F64 => run::<f64>(&globals, cli.command),
    };
    let (record, code) = match result {
        Ok(o) => (
            runlog::RunRecord {
                subcommand: subcommand.into(),
                config_hash: o.config_hash,
                seed: o.seed,
                started,
                finished: runlog::now(),
                artifacts: o.artifacts,
                version: env!("CARGO_PKG_VERSION").into(),
                status: "ok".into(),
                details: o.details,
            },
            0,
        ),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            let code = exit_code(&e);
            (
                runlog::RunRecord {
                    subcommand: subcommand.into(),
                    config_hash: String::new(),
                    seed: cli.seed.unwrap_or(0),
                    started,
                    finished: runlog::now(),
                    artifacts: Vec::new(),
                    version: env!("CARGO_PKG_VERSION").into(),
                    status: format!("error (exit {code}): {e}"),
                    details: serde_json::Value::Null,
                },
                code,
            )
        }
    };
    if let Err(e) = runlog::append(&cli.run_log, &record) {
        eprintln!("warning: could not append to {}: {e}", cli.run_log.display());
    }
    ExitCode::from(code)
}

//! `qtod`: batch runs, evaluation, benchmarks, dataset tooling and an interactive chat.

mod chat;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use qtod_core::backends::BackendError;
use qtod_core::data::DataError;
use qtod_core::eval::EvalError;
use qtod_core::kb::KbError;
use qtod_core::pipeline::PipelineError;
use qtod_core::retriever::RetrieverError;

use config::PipelineArgs;

/// Invalid input or configuration supplied by the user.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug, Parser)]
#[command(
    name = "qtod",
    version,
    about = "Query-driven task-oriented dialogue engine"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Which dialogues to read.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory with train/validation/test JSONL files, or a single JSONL file.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Partition to use when --dataset is a directory.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvertFormat {
    Smd,
    Camrest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KnowledgeSource {
    /// Records retrieved with the gold query.
    Retrieved,
    /// Annotated gold records.
    Gold,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline over a dataset and write per-turn results.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Directory that receives one subdirectory per run.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Score a results file, or run and score when no results are given.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Results JSONL written by `qtod run`.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Knowledge base whose entities are matched instead of each session's own.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate while growing every session KB with distractor records.
    BenchKb {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Distractor pool; defaults to the merged KB of the whole dataset.
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Explicit KB sizes; overrides --min-exp/--max-exp.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, default_value_t = 3)]
        min_exp: u32,
        #[arg(long, default_value_t = 10)]
        max_exp: u32,
        /// entity_f1 or recall, for the CSV metric column.
        #[arg(long, default_value = "entity_f1")]
        metric: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Evaluate once per top-n value.
    Topn {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        n_values: Vec<usize>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Merge single-domain sessions from several datasets into cross-domain sessions.
    BuildCrossdomain {
        /// Source dataset as NAME=DIR; repeatable.
        #[arg(long = "source", required = true)]
        sources: Vec<String>,
        /// smd-camrest, smd-camrest-mwoz, or a JSON recipe file.
        #[arg(long, default_value = "smd-camrest-mwoz")]
        recipe: String,
        #[arg(long, default_value_t = 600)]
        count: usize,
        /// Train, validation and test weights.
        #[arg(long, value_delimiter = ',', default_value = "400,100,100")]
        ratio: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a dataset whose train partition is a seeded fraction of the original.
    Fewshot {
        /// Dataset directory.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write query and response training pairs as JSONL.
    ExportTraining {
        /// Dataset directory or JSONL file.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, value_enum, default_value = "retrieved")]
        knowledge: KnowledgeSource,
        #[arg(long, default_value_t = qtod_core::pipeline::DEFAULT_TOP_N)]
        top_n: usize,
        #[arg(long, default_value_t = qtod_core::pipeline::DEFAULT_MAX_INPUT_TOKENS)]
        max_input_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interactive session over one knowledge base.
    Chat {
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Knowledge base JSON file.
        #[arg(long, conflicts_with = "dataset")]
        kb: Option<PathBuf>,
        /// Borrow the KB of a session from this dataset.
        #[arg(long, requires = "session")]
        dataset: Option<PathBuf>,
        #[arg(long)]
        session: Option<String>,
    },
    /// Print corpus statistics as JSON.
    Stats {
        /// Dataset directory or JSONL file.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Generate the synthetic query-annotated corpus.
    Synth {
        #[arg(long, default_value_t = 300)]
        dialogues: usize,
        #[arg(long, default_value_t = qtod_core::synth::MAX_KB_SIZE)]
        kb_size: usize,
        #[arg(long, default_value_t = 0.5)]
        revision_prob: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "8,1,1")]
        ratio: Vec<usize>,
        /// Also write a distractor pool of this many records to pool.json.
        #[arg(long)]
        pool_size: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a raw corpus to the JSONL dialogue format.
    Convert {
        #[arg(long, value_enum)]
        format: ConvertFormat,
        #[arg(long)]
        input: PathBuf,
        /// CamRest database file.
        #[arg(long, required_if_eq("format", "camrest"))]
        db: Option<PathBuf>,
        /// Output JSONL file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Run {
            data,
            pipeline,
            out,
        } => commands::run(&data, &pipeline, &out),
        Command::Eval {
            data,
            pipeline,
            results,
            lexicon,
            out,
        } => commands::eval(
            &data,
            &pipeline,
            results.as_deref(),
            lexicon.as_deref(),
            &out,
        ),
        Command::BenchKb {
            data,
            pipeline,
            pool,
            sizes,
            min_exp,
            max_exp,
            metric,
            out,
        } => commands::bench_kb(
            &data,
            &pipeline,
            pool.as_deref(),
            sizes,
            (min_exp, max_exp),
            &metric,
            &out,
        ),
        Command::Topn {
            data,
            pipeline,
            n_values,
            out,
        } => commands::topn(&data, &pipeline, &n_values, &out),
        Command::BuildCrossdomain {
            sources,
            recipe,
            count,
            ratio,
            seed,
            out,
        } => commands::build_crossdomain(&sources, &recipe, count, &ratio, seed, &out),
        Command::Fewshot {
            dataset,
            fraction,
            seed,
            out,
        } => commands::fewshot(&dataset, fraction, seed, &out),
        Command::ExportTraining {
            dataset,
            split,
            knowledge,
            top_n,
            max_input_tokens,
            out,
        } => commands::export_training(
            &DataArgs { dataset, split },
            knowledge,
            top_n,
            max_input_tokens,
            &out,
        ),
        Command::Chat {
            pipeline,
            kb,
            dataset,
            session,
        } => chat::run(
            &pipeline,
            kb.as_deref(),
            dataset.as_deref(),
            session.as_deref(),
        ),
        Command::Stats { dataset } => commands::stats(&dataset),
        Command::Synth {
            dialogues,
            kb_size,
            revision_prob,
            seed,
            ratio,
            pool_size,
            out,
        } => commands::synth(
            dialogues,
            kb_size,
            revision_prob,
            seed,
            &ratio,
            pool_size,
            &out,
        ),
        Command::Convert {
            format,
            input,
            db,
            out,
        } => commands::convert(format, &input, db.as_deref(), &out),
    }
}

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_TRANSPORT: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

/// Transport failures anywhere in the chain win; then server faults; then user errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    let backend = err
        .chain()
        .filter_map(|c| c.downcast_ref::<BackendError>())
        .next();
    match backend {
        Some(b) if b.is_transport() => return EXIT_TRANSPORT,
        Some(BackendError::Server { .. } | BackendError::Protocol(_) | BackendError::Other(_)) => {
            return EXIT_INTERNAL
        }
        _ => {}
    }
    let validation = err.chain().any(|c| {
        c.is::<Usage>()
            || c.is::<DataError>()
            || c.is::<KbError>()
            || c.is::<PipelineError>()
            || c.is::<RetrieverError>()
            || c.is::<BackendError>()
            || matches!(
                c.downcast_ref::<EvalError>(),
                Some(EvalError::Misaligned { .. } | EvalError::Invalid(_))
            )
    });
    if validation {
        EXIT_VALIDATION
    } else {
        EXIT_INTERNAL
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn exit_codes_follow_the_error_class() {
        let transport = anyhow::Error::new(PipelineError::Backend {
            stage: qtod_core::pipeline::Stage::Query,
            source: BackendError::Timeout(Duration::from_secs(1)),
        });
        assert_eq!(exit_code(&transport), EXIT_TRANSPORT);
        let server = anyhow::Error::new(BackendError::Server {
            status: 500,
            message: "x".into(),
        });
        assert_eq!(exit_code(&server), EXIT_INTERNAL);
        let usage = anyhow::Error::new(Usage("bad flag".into())).context("loading");
        assert_eq!(exit_code(&usage), EXIT_VALIDATION);
        let misaligned = anyhow::Error::new(EvalError::Misaligned {
            sessions: vec!["a".into()],
        });
        assert_eq!(exit_code(&misaligned), EXIT_VALIDATION);
        assert_eq!(exit_code(&anyhow::anyhow!("bug")), EXIT_INTERNAL);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

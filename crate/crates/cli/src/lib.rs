//! The `qaroute` command line. [`run`] parses arguments, dispatches to a
//! subcommand and maps failures to exit codes: 1 for invalid input or
//! configuration, 2 for provider or transport failures.

mod commands;
mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qaroute_core::agents::AgentError;
use qaroute_core::kg::KgError;
use qaroute_core::providers::ProviderError;
use qaroute_core::retrieval::RetrievalError;
use qaroute_core::state::StateError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_PROVIDER: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "qaroute",
    version,
    about = "Answer / ask / abstain routing for grounded question answering"
)]
pub struct Cli {
    /// Engine configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Use deterministic local providers; no network access.
    #[arg(long, global = true)]
    pub offline: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration with the origin of every value.
    Config,
    /// Convert, balance, populate and validate dataset samples.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Build or query the chunk index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Build and inspect the decision-weighted knowledge graph.
    #[command(subcommand)]
    Kg(KgCmd),
    /// Generate planner finetuning data.
    #[command(subcommand)]
    Ftdata(FtdataCmd),
    /// Route every sample in a file and write decision records.
    Route(RouteArgs),
    /// Print the evidence signals, fired gate rule and action for a query.
    Decide(DecideArgs),
    /// Score decision records.
    Eval(EvalArgs),
    /// Interactive multi-turn session.
    Repl(EngineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Sharc,
    Quac,
    Hotpotqa,
    ContractNli,
}

#[derive(Debug, Subcommand)]
pub enum IngestCmd {
    /// Map a dataset file in its published format to sample JSONL.
    Convert {
        #[arg(long)]
        source: SourceArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop records with unmappable labels instead of failing.
        #[arg(long)]
        skip_invalid: bool,
    },
    /// Dialogue-atomic sampling toward the action mix.
    Balance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON balance targets; defaults to the configured ones.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Where to write the shortfall report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fill known and missing variables with the chat model.
    Populate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Reuse samples already in the checkpoint.
        #[arg(long, requires = "checkpoint")]
        resume: bool,
    },
    /// Check every line against the sample schema.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GranularityArg {
    Coarse,
    Fine,
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    /// Chunk the context documents of a sample file and index them.
    Build {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "coarse")]
        granularity: GranularityArg,
    },
    /// Hybrid retrieval with reranking for one query.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        top_m: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    #[value(name = "post")]
    Post,
}

#[derive(Debug, Subcommand)]
pub enum KgCmd {
    /// Run the construction phases up to `--phase` and save the graph.
    Build {
        /// Index directory whose chunks feed extraction.
        #[arg(long, conflicts_with = "chunks")]
        index: Option<PathBuf>,
        /// Chunk JSONL, as an alternative to an index.
        #[arg(long)]
        chunks: Option<PathBuf>,
        /// Sample JSONL for reinforcement; needed from phase 3 on.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "post")]
        phase: PhaseArg,
    },
    /// Load a hand-written `subject<TAB>relation<TAB>object<TAB>weight` file.
    Import {
        #[arg(long)]
        tsv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Node, edge and per-phase counts.
    Stats {
        #[arg(long)]
        graph: PathBuf,
    },
    /// Best product-of-weights path score between two nodes.
    Path {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        #[arg(long, default_value_t = qaroute_core::kg::DEFAULT_MAX_HOPS)]
        max_hops: usize,
    },
}

#[derive(Debug, Subcommand)]
pub enum FtdataCmd {
    /// Render, filter, split and serialize finetuning samples.
    Build {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for chat, template and report files.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EngineArgs {
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RouterArg {
    /// The finetuned planner decides.
    Planner,
    /// The threshold gate decides.
    Gate,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    /// Process a whole sample file (the only supported mode).
    #[arg(long, required = true)]
    pub batch: bool,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, value_enum, default_value = "planner")]
    pub router: RouterArg,
}

#[derive(Debug, Args)]
pub struct DecideArgs {
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Comma-separated known variables.
    #[arg(long, value_delimiter = ',')]
    pub known: Vec<String>,
    /// Comma-separated missing variables.
    #[arg(long, value_delimiter = ',')]
    pub missing: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// JSONL of `{"id", "correct"}` verdicts for committed answers.
    #[arg(long)]
    pub judge_file: Option<PathBuf>,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let provider = cause.downcast_ref::<ProviderError>().is_some()
            || cause
                .downcast_ref::<AgentError>()
                .is_some_and(AgentError::is_provider)
            || matches!(
                cause.downcast_ref::<RetrievalError>(),
                Some(RetrievalError::Provider(_))
            )
            || matches!(cause.downcast_ref::<KgError>(), Some(KgError::Provider(_)))
            || matches!(
                cause.downcast_ref::<StateError>(),
                Some(StateError::Provider(_))
            );
        if provider {
            return EXIT_PROVIDER;
        }
    }
    EXIT_INVALID
}

/// Runs the command line with explicit streams, returning the exit code.
pub fn run_with<I, T>(
    argv: I,
    stdin: &mut dyn std::io::BufRead,
    stdout: &mut dyn std::io::Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli, stdin, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdin = std::io::stdin();
    let mut lock = stdin.lock();
    let mut out = std::io::stdout();
    run_with(argv, &mut lock, &mut out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_failures_map_to_two() {
        let e = anyhow::Error::new(ProviderError::Config("x".into())).context("while deciding");
        assert_eq!(exit_code(&e), EXIT_PROVIDER);
        let e = anyhow::Error::new(KgError::UnknownNode("n".into()));
        assert_eq!(exit_code(&e), EXIT_INVALID);
        assert_eq!(exit_code(&anyhow::anyhow!("bad input")), EXIT_INVALID);
    }

    #[test]
    fn batch_flag_is_required_for_route() {
        let r = Cli::try_parse_from(["qaroute", "route", "--in", "a", "--out", "b"]);
        assert!(r.is_err());
        let r = Cli::try_parse_from([
            "qaroute", "route", "--batch", "--in", "a", "--out", "b", "--router", "gate",
        ]);
        assert!(matches!(
            r.unwrap().command,
            Command::Route(RouteArgs {
                router: RouterArg::Gate,
                ..
            })
        ));
    }

    #[test]
    fn list_flags_split_on_commas() {
        let cli = Cli::try_parse_from([
            "qaroute",
            "decide",
            "--query",
            "q",
            "--known",
            "a,b",
            "--missing",
            "c",
        ])
        .unwrap();
        let Command::Decide(d) = cli.command else {
            panic!()
        };
        assert_eq!(d.known, ["a", "b"]);
        assert_eq!(d.missing, ["c"]);
    }
}

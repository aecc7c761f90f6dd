//! `humt`: score texts for human-like tone and social perception, analyze
//! preference data, and build tone-filtered preference datasets.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial success (some rows
//! failed or were skipped; outputs hold the rest).

mod analysis;
mod common;
mod dataset;
mod discover;
mod score;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde_json::json;

use humt_core::backend::ScoreCache;

use common::{GlobalOpts, Settings, Status};

#[derive(Debug, Parser)]
#[command(name = "humt", version, about = "Human-like tone scoring and analysis")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score texts on one or more tone dimensions.
    Score(score::ScoreArgs),
    /// Compare scores of chosen vs. rejected responses.
    AnalyzePrefs(analysis::AnalyzePrefsArgs),
    /// Pairwise correlations between dimensions.
    Correlate(analysis::CorrelateArgs),
    /// Agreement and score validity against human annotations.
    Validate(analysis::ValidateArgs),
    /// Lexicon categories over-represented in high- vs. low-scoring texts.
    Lexicon(analysis::LexiconArgs),
    /// Proportion of texts containing given terms.
    Term(analysis::TermArgs),
    /// Build a preference-optimization dataset from scored pairs.
    BuildDpo(dataset::BuildDpoArgs),
    /// Select prompts where two models' scores differ by more than ε.
    EpsilonFilter(dataset::EpsilonFilterArgs),
    /// Ingest, de-duplicate, moderate, and split a corpus.
    Prepare(dataset::PrepareArgs),
    /// Tally implicit speakers via mask filling.
    Discover(discover::DiscoverArgs),
    /// Cluster prompts into topics by embedding.
    Topics(discover::TopicsArgs),
    /// Inspect or delete a score cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// List registered dimensions and their phrase sets.
    Dimensions,
}

#[derive(Debug, Subcommand)]
enum CacheAction {
    Stats {
        #[arg(long)]
        cache: PathBuf,
    },
    Purge {
        #[arg(long)]
        cache: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Status> {
    let settings = Settings::resolve(&cli.global)?;
    match &cli.command {
        Command::Score(a) => score::run(a, settings),
        Command::AnalyzePrefs(a) => analysis::analyze_prefs(a, settings),
        Command::Correlate(a) => analysis::correlate(a, settings),
        Command::Validate(a) => analysis::validate(a, settings),
        Command::Lexicon(a) => analysis::lexicon(a, settings),
        Command::Term(a) => analysis::term(a, settings),
        Command::BuildDpo(a) => dataset::build_dpo(a, settings),
        Command::EpsilonFilter(a) => dataset::epsilon(a, settings),
        Command::Prepare(a) => dataset::prepare(a, settings),
        Command::Discover(a) => discover::discover(a, settings),
        Command::Topics(a) => discover::topics(a, settings),
        Command::Cache { action: CacheAction::Stats { cache } } => {
            let c = ScoreCache::open(cache)?;
            println!("{}", serde_json::to_string_pretty(&c.stats())?);
            Ok(Status::Success)
        }
        Command::Cache { action: CacheAction::Purge { cache } } => {
            let removed = ScoreCache::purge(cache)?;
            println!("{}", json!({ "path": cache, "removed": removed }));
            Ok(Status::Success)
        }
        Command::Dimensions => {
            for spec in settings.registry()?.iter() {
                println!(
                    "{}\t{}\t{}\t{}",
                    spec.name(),
                    spec.aggregation().as_str(),
                    spec.positive_phrases().join(" | "),
                    spec.negative_phrases().join(" | ")
                );
            }
            Ok(Status::Success)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

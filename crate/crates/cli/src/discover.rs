use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde_json::json;

use humt_core::corpus::dedup;
use humt_core::discovery::{
    cluster_speakers, implicit_speakers, topic_clusters, SpeakerOptions, DEFAULT_EXEMPLARS, DEFAULT_FILL_K,
    DEFAULT_VOCAB_TOP,
};

use crate::common::{report_rejections, write_atomic, Backend, ManifestBuilder, Settings, Status, TextInput};

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub input: TextInput,
    /// Fills kept per text.
    #[arg(long, default_value_t = DEFAULT_FILL_K)]
    pub fill_k: usize,
    /// Words kept in the table.
    #[arg(long, default_value_t = DEFAULT_VOCAB_TOP)]
    pub vocab_top: usize,
    /// Also cluster the discovered words into this many groups (needs
    /// --seed and an embedding-capable backend).
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn discover(args: &DiscoverArgs, settings: Settings) -> Result<Status> {
    if args.clusters.is_some() && args.seed.is_none() {
        bail!("--clusters needs --seed");
    }
    let loaded = args.input.load()?;
    report_rejections(Some(&args.out), &loaded.rejections)?;
    let backend = Backend::open(&settings)?;
    let texts: Vec<(&str, &str)> = loaded.texts.iter().map(|t| (t.text_id.as_str(), t.text.as_str())).collect();
    let options = SpeakerOptions {
        fill_k: args.fill_k,
        vocab_top: args.vocab_top,
        truncation_limit: settings.truncation_limit,
        jobs: settings.jobs,
    };
    let table = implicit_speakers(&texts, backend.model(), &options)?;
    let clusters = match (args.clusters, args.seed) {
        (Some(k), Some(seed)) => Some(cluster_speakers(&table, backend.model(), k, seed)?),
        _ => None,
    };
    let mut bytes = serde_json::to_vec_pretty(&json!({ "speakers": table, "word_clusters": clusters }))?;
    bytes.push(b'\n');
    write_atomic(&args.out, &bytes)?;
    let mut mb = ManifestBuilder::start("discover");
    mb.config(
        &settings,
        json!({
            "fill_k": args.fill_k,
            "vocab_top": args.vocab_top,
            "clusters": args.clusters,
            "seed": args.seed,
            "fields": args.input.fields,
            "pairs": args.input.pairs,
        }),
    )
    .input(&args.input.input)
    .inputs(settings.input_files());
    mb.finish(
        &args.out,
        &[&args.out],
        Some(backend.descriptor()),
        json!({ "texts": texts.len(), "skipped": table.skipped.len(), "cache": backend.cache_summary() }),
    )?;
    if !table.skipped.is_empty() {
        eprintln!("{} text(s) skipped after backend errors", table.skipped.len());
    }
    Ok(Status::partial_if(!table.skipped.is_empty() || !loaded.rejections.is_empty()))
}

#[derive(Debug, Args)]
pub struct TopicsArgs {
    #[command(flatten)]
    pub input: TextInput,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    /// Nearest prompts listed per topic.
    #[arg(long, default_value_t = DEFAULT_EXEMPLARS)]
    pub exemplars: usize,
    /// JSON clustering report.
    #[arg(long)]
    pub out: PathBuf,
    /// Exemplar listing as TSV.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
}

pub fn topics(args: &TopicsArgs, settings: Settings) -> Result<Status> {
    let (prompts, rejected) = if args.input.pairs {
        let (pairs, rejections) = args.input.load_pairs()?;
        report_rejections(Some(&args.out), &rejections)?;
        let (unique, _) = dedup(pairs);
        (unique.into_iter().map(|p| p.prompt).collect::<Vec<_>>(), rejections.len())
    } else {
        let loaded = args.input.load()?;
        report_rejections(Some(&args.out), &loaded.rejections)?;
        (loaded.texts.into_iter().map(|t| t.text).collect(), loaded.rejections.len())
    };
    let backend = Backend::open(&settings)?;
    let report = topic_clusters(&prompts, backend.model(), args.k, args.seed, args.exemplars)?;
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    write_atomic(&args.out, &bytes)?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(p) = &args.tsv {
        write_atomic(p, report.exemplars_tsv().as_bytes())?;
        outputs.push(p);
    }
    let mut mb = ManifestBuilder::start("topics");
    mb.config(
        &settings,
        json!({ "k": args.k, "seed": args.seed, "exemplars": args.exemplars, "fields": args.input.fields, "pairs": args.input.pairs }),
    )
    .input(&args.input.input)
    .inputs(settings.input_files());
    mb.finish(
        &args.out,
        &outputs,
        Some(backend.descriptor()),
        json!({ "prompts": prompts.len(), "iterations": report.clustering.iterations, "inertia": report.clustering.inertia }),
    )?;
    Ok(Status::partial_if(rejected > 0))
}

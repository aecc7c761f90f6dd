use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use serde_json::json;

use humt_core::corpus::{
    dedup, moderation_filter, split, write_pairs_jsonl, write_texts_jsonl, FailurePolicy, ModerationClient,
    ModerationOptions, PassThrough, PromptKeyed, RemoteModeration, Side,
};
use humt_core::dumt::{
    attach_scores, build, dpo_jsonl_bytes, epsilon_filter, BuildConfig, BuildManifest, EpsilonDirection, Variant,
    EPSILON_DIRECTION_NOTE, SAMPLER_NAME,
};

use crate::common::{
    file_digest, load_pairs, report_rejections, sha256_hex, write_atomic, write_json, ManifestBuilder, ScoreTable,
    Settings, Status, TextInput,
};

#[derive(Debug, Args)]
pub struct BuildDpoArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_name = "ROLE=COL,...")]
    pub fields: Option<String>,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "humt")]
    pub dimension: String,
    /// Margin threshold t (strict).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Number of pairs to sample.
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// tone, random, or maxtone.
    #[arg(long, default_value = "tone")]
    pub variant: Variant,
    /// Drop pairs lacking a score instead of failing.
    #[arg(long)]
    pub allow_missing: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build_dpo(args: &BuildDpoArgs, settings: Settings) -> Result<Status> {
    let (pairs, rejections) = load_pairs(&args.pairs, args.fields.as_deref())?;
    report_rejections(Some(&args.out), &rejections)?;
    let scores = ScoreTable::load(&args.scores)?;
    scores.require_dimension(&args.dimension)?;
    let column: BTreeMap<String, f64> = scores
        .ids
        .iter()
        .filter_map(|id| scores.get(id, &args.dimension).map(|v| (id.clone(), v)))
        .collect();
    let (pool, missing) = attach_scores(&pairs, &column);
    if !missing.is_empty() {
        if !args.allow_missing {
            bail!(
                "{} pair(s) lack scores (first: {}); rerun with --allow-missing to drop them",
                missing.len(),
                missing[0]
            );
        }
        eprintln!("dropping {} pair(s) without scores", missing.len());
    }
    let config = BuildConfig { epsilon: settings.epsilon, ..BuildConfig::new(args.threshold, args.count, args.seed) };
    let built = build(args.variant, &pool, &config)?;
    let bytes = dpo_jsonl_bytes(&built.pairs);
    write_atomic(&args.out, &bytes)?;

    let mut input_digests = BTreeMap::new();
    input_digests.insert(args.pairs.display().to_string(), file_digest(&args.pairs)?);
    input_digests.insert(args.scores.display().to_string(), file_digest(&args.scores)?);
    let build_manifest = BuildManifest {
        variant: args.variant,
        config,
        sampler: SAMPLER_NAME.into(),
        pool_size: built.pool_size,
        eligible: built.eligible,
        emitted: built.pairs.len(),
        input_digests,
        output_digest: sha256_hex(&bytes),
    };
    let mut mb = ManifestBuilder::start("build-dpo");
    mb.config(
        &settings,
        json!({
            "dimension": args.dimension,
            "threshold": args.threshold,
            "count": args.count,
            "seed": args.seed,
            "variant": args.variant,
            "allow_missing": args.allow_missing,
            "fields": args.fields,
        }),
    )
    .input(&args.pairs)
    .input(&args.scores);
    mb.finish(
        &args.out,
        &[&args.out],
        None,
        json!({ "build": build_manifest, "missing_scores": missing.len(), "rejections": rejections.len() }),
    )?;
    eprintln!(
        "{} pool {}, eligible {}, emitted {}",
        serde_json::to_value(args.variant)?.as_str().unwrap_or_default(),
        built.pool_size,
        built.eligible,
        built.pairs.len()
    );
    Ok(Status::partial_if(!missing.is_empty() || !rejections.is_empty()))
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum DirectionArg {
    /// Keep prompts where baseline − reduced > ε.
    BaselineMinusReduced,
    /// Keep prompts where reduced − baseline > ε.
    ReducedMinusBaseline,
}

impl From<DirectionArg> for EpsilonDirection {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::BaselineMinusReduced => EpsilonDirection::BaselineMinusReduced,
            DirectionArg::ReducedMinusBaseline => EpsilonDirection::ReducedMinusBaseline,
        }
    }
}

#[derive(Debug, Args)]
pub struct EpsilonFilterArgs {
    /// Scores of the tone-reduced model's outputs, keyed by prompt.
    #[arg(long)]
    pub reduced: PathBuf,
    /// Scores of the baseline model's outputs, keyed by prompt.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long, default_value = "humt")]
    pub dimension: String,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum, default_value = "baseline-minus-reduced")]
    pub direction: DirectionArg,
    /// JSONL of kept prompts with both scores.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn epsilon(args: &EpsilonFilterArgs, mut settings: Settings) -> Result<Status> {
    if let Some(e) = args.epsilon {
        settings.epsilon = e;
    }
    let load = |p: &PathBuf| -> Result<BTreeMap<String, f64>> {
        let t = ScoreTable::load(p)?;
        t.require_dimension(&args.dimension)?;
        Ok(t.ids.iter().filter_map(|id| t.get(id, &args.dimension).map(|v| (id.clone(), v))).collect())
    };
    let reduced = load(&args.reduced)?;
    let baseline = load(&args.baseline)?;
    let direction: EpsilonDirection = args.direction.into();
    let kept = epsilon_filter(&reduced, &baseline, settings.epsilon, direction)?;
    let shared = reduced.keys().filter(|k| baseline.contains_key(*k)).count();
    let mut bytes = Vec::new();
    for p in &kept {
        let (a, b) = (reduced[p], baseline[p]);
        serde_json::to_writer(&mut bytes, &json!({ "prompt": p, "reduced": a, "baseline": b, "baseline_minus_reduced": b - a }))?;
        bytes.push(b'\n');
    }
    write_atomic(&args.out, &bytes)?;
    let mut mb = ManifestBuilder::start("epsilon-filter");
    mb.config(&settings, json!({ "dimension": args.dimension, "direction": direction }))
        .input(&args.reduced)
        .input(&args.baseline);
    mb.finish(
        &args.out,
        &[&args.out],
        None,
        json!({
            "shared_prompts": shared,
            "kept": kept.len(),
            "kept_fraction": kept.len() as f64 / shared as f64,
            "direction_note": EPSILON_DIRECTION_NOTE,
        }),
    )?;
    eprintln!("kept {} of {} shared prompt(s)", kept.len(), shared);
    Ok(Status::Success)
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub input: TextInput,
    /// Drop records whose whitespace-normalized prompt (or text) repeats.
    #[arg(long)]
    pub dedup: bool,
    /// Moderation endpoint (POST {"input"} → results[0].flagged).
    #[arg(long, env = "HUMT_MODERATION_ENDPOINT")]
    pub moderation_endpoint: Option<String>,
    /// Drop records whose moderation call keeps failing (default keeps them).
    #[arg(long)]
    pub drop_unmoderated: bool,
    /// Fraction of prompts in the train split.
    #[arg(long)]
    pub split_ratio: Option<f64>,
    /// Required with --split-ratio.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for records.jsonl, train.jsonl, test.jsonl, split.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Kept records, flagged ids, and (id, reason) moderation failures.
type Moderated<T> = (Vec<T>, Vec<String>, Vec<(String, String)>);

/// Train records, test records, and the serialized split.
type SplitOutput<T> = (Vec<T>, Vec<T>, serde_json::Value);

fn moderate<T: humt_core::corpus::Moderatable>(
    records: Vec<T>,
    args: &PrepareArgs,
) -> Result<Moderated<T>> {
    let client: Box<dyn ModerationClient> = match &args.moderation_endpoint {
        Some(url) => Box::new(RemoteModeration::new(url, std::env::var("HUMT_API_KEY").ok())?),
        None => Box::new(PassThrough),
    };
    let on_failure = if args.drop_unmoderated { FailurePolicy::Drop } else { FailurePolicy::KeepWithWarning };
    let out = moderation_filter(records, client.as_ref(), ModerationOptions { on_failure, ..Default::default() });
    Ok((out.kept, out.flagged, out.failed))
}

fn split_records<T: PromptKeyed + Clone>(records: &[T], args: &PrepareArgs) -> Result<Option<SplitOutput<T>>> {
    let Some(ratio) = args.split_ratio else { return Ok(None) };
    let Some(seed) = args.seed else { bail!("--split-ratio needs --seed") };
    let s = split(records, ratio, seed)?;
    let (train, test) = records.iter().cloned().partition(|r| s.side(r.record_id()) == Some(Side::Train));
    Ok(Some((train, test, serde_json::to_value(&s)?)))
}

pub fn prepare(args: &PrepareArgs, settings: Settings) -> Result<Status> {
    std::fs::create_dir_all(&args.out_dir)?;
    let records_path = args.out_dir.join("records.jsonl");
    let mut outputs = vec![records_path.clone()];
    let details;
    let partial;
    if args.input.pairs {
        let (pairs, rejections) = args.input.load_pairs()?;
        report_rejections(Some(&records_path), &rejections)?;
        let (pairs, removed) = if args.dedup { dedup(pairs) } else { (pairs, 0) };
        let (pairs, flagged, failed) = moderate(pairs, args)?;
        write_pairs_jsonl(&records_path, &pairs)?;
        if let Some((train, test, s)) = split_records(&pairs, args)? {
            write_pairs_jsonl(&args.out_dir.join("train.jsonl"), &train)?;
            write_pairs_jsonl(&args.out_dir.join("test.jsonl"), &test)?;
            write_json(&args.out_dir.join("split.json"), &s)?;
            outputs.extend(["train.jsonl", "test.jsonl", "split.json"].map(|f| args.out_dir.join(f)));
        }
        partial = !rejections.is_empty() || !failed.is_empty();
        details = json!({ "kept": pairs.len(), "rejected": rejections.len(), "duplicates_removed": removed, "flagged": flagged, "moderation_failed": failed });
    } else {
        let loaded = args.input.load()?;
        report_rejections(Some(&records_path), &loaded.rejections)?;
        let (texts, removed) = if args.dedup { dedup(loaded.texts) } else { (loaded.texts, 0) };
        let (texts, flagged, failed) = moderate(texts, args)?;
        write_texts_jsonl(&records_path, &texts)?;
        if let Some((train, test, s)) = split_records(&texts, args)? {
            write_texts_jsonl(&args.out_dir.join("train.jsonl"), &train)?;
            write_texts_jsonl(&args.out_dir.join("test.jsonl"), &test)?;
            write_json(&args.out_dir.join("split.json"), &s)?;
            outputs.extend(["train.jsonl", "test.jsonl", "split.json"].map(|f| args.out_dir.join(f)));
        }
        partial = !loaded.rejections.is_empty() || !failed.is_empty();
        details = json!({ "kept": texts.len(), "rejected": loaded.rejections.len(), "duplicates_removed": removed, "flagged": flagged, "moderation_failed": failed });
    }
    let mut mb = ManifestBuilder::start("prepare");
    mb.config(
        &settings,
        json!({
            "pairs": args.input.pairs,
            "fields": args.input.fields,
            "dedup": args.dedup,
            "moderation": args.moderation_endpoint.is_some(),
            "split_ratio": args.split_ratio,
            "seed": args.seed,
        }),
    )
    .input(&args.input.input);
    let refs: Vec<&std::path::Path> = outputs.iter().map(PathBuf::as_path).collect();
    mb.finish(&records_path, &refs, None, details)?;
    Ok(Status::partial_if(partial))
}

use std::collections::HashMap;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde_json::json;

use humt_core::tone::{score_batch, Aggregation, BatchOptions, ToneScore};

use crate::common::{report_rejections, write_atomic, Backend, ManifestBuilder, ScoreTable, Settings, Status, TextInput};

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: TextInput,
    /// Comma-separated dimension names, or `all`.
    #[arg(long, default_value = "humt")]
    pub dimensions: String,
    /// Phrase aggregation: `sum` (log-sum-exp) or `mean`.
    #[arg(long)]
    pub mode: Option<Aggregation>,
    /// Repeated evaluations per phrase (stochastic backends).
    #[arg(long)]
    pub repetitions: Option<u32>,
    /// Characters of each text kept before scoring.
    #[arg(long)]
    pub truncate: Option<usize>,
    /// Output path: `.jsonl` for one score object per line, anything else
    /// for a wide TSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the long JSONL form here.
    #[arg(long)]
    pub jsonl: Option<PathBuf>,
    /// Stop at the first failing row.
    #[arg(long)]
    pub fail_fast: bool,
}

pub fn run(args: &ScoreArgs, mut settings: Settings) -> Result<Status> {
    if let Some(m) = args.mode {
        settings.mode = Some(m);
    }
    if let Some(r) = args.repetitions {
        settings.repetitions = r;
    }
    if let Some(t) = args.truncate {
        settings.truncation_limit = t;
    }
    let specs = settings.dimensions(&args.dimensions)?;
    let config = settings.scoring()?;
    let loaded = args.input.load()?;
    let rejection_file = report_rejections(Some(&args.out), &loaded.rejections)?;
    let backend = Backend::open(&settings)?;

    let texts: Vec<(&str, &str)> = loaded.texts.iter().map(|t| (t.text_id.as_str(), t.text.as_str())).collect();
    let outcome = score_batch(
        &texts,
        &specs,
        &config,
        backend.model(),
        BatchOptions { jobs: settings.jobs, fail_fast: args.fail_fast },
    )?;

    let mut table = ScoreTable::new(specs.iter().map(|s| s.name().to_string()).collect());
    let mut failures = Vec::new();
    for row in &outcome.rows {
        if let Err(e) = &row.result {
            log::error!("{e}");
            failures.push(json!({ "text_id": row.text_id, "dimension": row.dimension, "error": e.to_string() }));
        }
    }
    if args.fail_fast {
        if let Some(row) = outcome.rows.iter().find(|r| r.result.is_err()) {
            let e = row.result.as_ref().unwrap_err();
            anyhow::bail!("scoring {:?} on {}: {e}", row.text_id, row.dimension);
        }
    }
    // input order, then dimension order as selected
    let by_key: HashMap<(&str, &str), &ToneScore> =
        outcome.scores().map(|s| ((s.text_id.as_str(), s.dimension.as_str()), s)).collect();
    let mut long = Vec::new();
    for (id, _) in &texts {
        table.touch(id);
        for spec in &specs {
            if let Some(&s) = by_key.get(&(*id, spec.name())) {
                table.insert(id, spec.name(), s.value);
                long.push(s);
            }
        }
    }
    let mut jsonl = Vec::new();
    for s in &long {
        serde_json::to_writer(&mut jsonl, s)?;
        jsonl.push(b'\n');
    }

    let is_jsonl = args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("jsonl"));
    if is_jsonl {
        write_atomic(&args.out, &jsonl)?;
    } else {
        write_atomic(&args.out, table.to_tsv()?.as_bytes())?;
    }
    let mut outputs = vec![args.out.as_path()];
    if let Some(p) = &args.jsonl {
        write_atomic(p, &jsonl)?;
        outputs.push(p);
    }
    if let Some(p) = &rejection_file {
        outputs.push(p);
    }

    let mut mb = ManifestBuilder::start("score");
    mb.config(
        &settings,
        json!({
            "dimensions": specs.iter().map(|s| s.name()).collect::<Vec<_>>(),
            "aggregation": specs.iter().map(|s| s.aggregation()).collect::<Vec<_>>(),
            "format": args.input.format,
            "fields": args.input.fields,
            "pairs": args.input.pairs,
        }),
    )
    .input(&args.input.input)
    .inputs(settings.input_files());
    mb.finish(
        &args.out,
        &outputs,
        Some(backend.descriptor()),
        json!({
            "texts": texts.len(),
            "scores": long.len(),
            "rejections": loaded.rejections.len(),
            "failures": failures,
            "cache": backend.cache_summary(),
        }),
    )?;
    eprintln!(
        "scored {} text(s) × {} dimension(s): {} ok, {} failed, {} rejected at ingest",
        texts.len(),
        specs.len(),
        long.len(),
        failures.len(),
        loaded.rejections.len()
    );
    Ok(Status::partial_if(!failures.is_empty() || !loaded.rejections.is_empty()))
}

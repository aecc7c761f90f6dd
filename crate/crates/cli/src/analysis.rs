use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use humt_core::stats::{
    chi_square_independence, correlation_matrix, fleiss_kappa, matched_mean_diff, quartile_lexicon_association,
    sign_agreement_table, term_proportion, welch_t, ChiSquareOptions, Lexicon, ScoredText, StatsError, TermMatch,
};

use crate::common::{emit_json, load_pairs, report_rejections, ManifestBuilder, ScoreTable, Settings, Status, TextInput};

fn outcome<T: Serialize>(r: Result<T, StatsError>) -> Value {
    match r {
        Ok(v) => serde_json::to_value(v).expect("report serializes"),
        Err(e) => json!({ "error": e.to_string() }),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    crate::common::write_atomic(path, &bytes)
}

fn finish_manifest(mb: &ManifestBuilder, out: Option<&Path>, extra: &[&Path], details: Value) -> Result<()> {
    if let Some(out) = out {
        let mut outputs = vec![out];
        outputs.extend_from_slice(extra);
        mb.finish(out, &outputs, None, details)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct AnalyzePrefsArgs {
    /// Preference pairs (JSONL or CSV).
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_name = "ROLE=COL,...")]
    pub fields: Option<String>,
    /// Scores produced by `humt score --pairs`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "humt")]
    pub dimension: String,
    /// Also report per `topic` group.
    #[arg(long)]
    pub by_topic: bool,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot-ready CSV, one row per group.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn analyze_prefs(args: &AnalyzePrefsArgs, settings: Settings) -> Result<Status> {
    let (pairs, rejections) = load_pairs(&args.pairs, args.fields.as_deref())?;
    report_rejections(args.out.as_deref(), &rejections)?;
    let scores = ScoreTable::load(&args.scores)?;
    scores.require_dimension(&args.dimension)?;

    let mut missing = Vec::new();
    let mut groups: BTreeMap<Option<String>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut overall = (Vec::new(), Vec::new());
    for p in &pairs {
        match (scores.get(&p.chosen_id(), &args.dimension), scores.get(&p.rejected_id(), &args.dimension)) {
            (Some(c), Some(r)) => {
                overall.0.push(c);
                overall.1.push(r);
                if args.by_topic {
                    let g = groups.entry(p.topic.clone()).or_default();
                    g.0.push(c);
                    g.1.push(r);
                }
            }
            _ => missing.push(p.pair_id.clone()),
        }
    }
    if !missing.is_empty() {
        eprintln!("{} pair(s) lack scores on both sides: {}", missing.len(), preview(&missing));
    }
    let overall_report = matched_mean_diff(&overall.0, &overall.1);
    let mut csv_rows = Vec::new();
    let mut push_row = |group: &str, r: &Result<humt_core::stats::MeanDiffReport, StatsError>| {
        if let Ok(r) = r {
            csv_rows.push(vec![
                group.to_string(),
                r.n.to_string(),
                r.mean_a.to_string(),
                r.mean_b.to_string(),
                r.diff.to_string(),
                r.percent_likelihood_diff.to_string(),
                r.test.statistic.to_string(),
                r.test.degrees_of_freedom.to_string(),
                r.test.p_value.to_string(),
                r.ci95_halfwidth.to_string(),
            ]);
        }
    };
    push_row("overall", &overall_report);
    let mut by_topic = BTreeMap::new();
    for (topic, (c, r)) in &groups {
        let name = topic.clone().unwrap_or_else(|| "(none)".to_string());
        let rep = matched_mean_diff(c, r);
        push_row(&name, &rep);
        by_topic.insert(name, outcome(rep));
    }
    if let Err(e) = &overall_report {
        bail!("overall comparison failed: {e}");
    }
    let report = json!({
        "dimension": args.dimension,
        "sides": { "a": "chosen", "b": "rejected" },
        "pairs": pairs.len(),
        "missing_pairs": missing,
        "overall": outcome(overall_report),
        "by_topic": if args.by_topic { json!(by_topic) } else { Value::Null },
    });
    emit_json(args.out.as_deref(), &report)?;
    if let Some(p) = &args.csv {
        write_csv(
            p,
            &["group", "n", "mean_chosen", "mean_rejected", "diff", "percent_likelihood_diff", "t", "df", "p_value", "ci95_halfwidth"],
            &csv_rows,
        )?;
    }
    let mut mb = ManifestBuilder::start("analyze-prefs");
    mb.config(&settings, json!({ "dimension": args.dimension, "by_topic": args.by_topic, "fields": args.fields }))
        .input(&args.pairs)
        .input(&args.scores);
    finish_manifest(&mb, args.out.as_deref(), &args.csv.iter().map(PathBuf::as_path).collect::<Vec<_>>(), json!({ "missing": missing.len() }))?;
    Ok(Status::partial_if(!missing.is_empty() || !rejections.is_empty()))
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(10).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 10 {
        s.push_str(", ...");
    }
    s
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Dimensions to correlate (default: every dimension in the file).
    #[arg(long)]
    pub dimensions: Option<String>,
    /// Benjamini-Hochberg level.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot-ready CSV with every ordered pair, diagonal included.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn correlate(args: &CorrelateArgs, mut settings: Settings) -> Result<Status> {
    if let Some(a) = args.alpha {
        settings.alpha = a;
    }
    let scores = ScoreTable::load(&args.scores)?;
    let dims: Vec<String> = match &args.dimensions {
        Some(d) => d.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None => scores.dimensions.clone(),
    };
    for d in &dims {
        scores.require_dimension(d)?;
    }
    if dims.len() < 2 {
        bail!("need at least two dimensions, got {}", dims.len());
    }
    let shared: Vec<&String> = scores.ids.iter().filter(|id| dims.iter().all(|d| scores.get(id, d).is_some())).collect();
    if shared.len() < 3 {
        bail!("only {} text(s) have scores on every dimension; need ≥ 3", shared.len());
    }
    let columns: Vec<(String, Vec<f64>)> =
        dims.iter().map(|d| (d.clone(), shared.iter().map(|id| scores.get(id, d).unwrap()).collect())).collect();
    let report = correlation_matrix(&columns, settings.alpha)?;
    let dropped = scores.ids.len() - shared.len();
    emit_json(args.out.as_deref(), &json!({ "texts": shared.len(), "dropped_incomplete": dropped, "report": report }))?;
    if let Some(p) = &args.csv {
        let mut rows = Vec::new();
        for a in &dims {
            for b in &dims {
                let (r, p_raw, p_adj, reject) = match report.entry(a, b) {
                    Some(e) => (e.r, e.p_raw, e.p_adjusted, e.reject),
                    None => (1.0, 0.0, 0.0, true),
                };
                rows.push(vec![a.clone(), b.clone(), r.to_string(), p_raw.to_string(), p_adj.to_string(), reject.to_string()]);
            }
        }
        write_csv(p, &["a", "b", "r", "p_raw", "p_adjusted", "reject"], &rows)?;
    }
    let mut mb = ManifestBuilder::start("correlate");
    mb.config(&settings, json!({ "dimensions": dims })).input(&args.scores);
    finish_manifest(&mb, args.out.as_deref(), &args.csv.iter().map(PathBuf::as_path).collect::<Vec<_>>(), json!({ "texts": shared.len() }))?;
    Ok(Status::Success)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    item_id: String,
    dimension: String,
    labels: Vec<Label>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Label {
    Bool(bool),
    Int(u8),
}

impl Label {
    fn positive(&self) -> Result<bool> {
        match self {
            Label::Bool(b) => Ok(*b),
            Label::Int(0) => Ok(false),
            Label::Int(1) => Ok(true),
            Label::Int(n) => bail!("label {n} is not 0 or 1"),
        }
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// JSONL: `{"item_id", "dimension", "labels": [0/1 per rater]}` per line.
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub scores: PathBuf,
    /// Apply Yates' continuity correction to the χ² test.
    #[arg(long)]
    pub yates: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn validate(args: &ValidateArgs, settings: Settings) -> Result<Status> {
    let text = std::fs::read_to_string(&args.annotations)
        .with_context(|| format!("reading annotations {}", args.annotations.display()))?;
    let mut by_dim: BTreeMap<String, Vec<(String, Vec<bool>)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let a: Annotation = serde_json::from_str(line).with_context(|| format!("annotations line {}", i + 1))?;
        let labels = a.labels.iter().map(Label::positive).collect::<Result<Vec<_>>>().with_context(|| format!("annotations line {}", i + 1))?;
        by_dim.entry(a.dimension).or_default().push((a.item_id, labels));
    }
    if by_dim.is_empty() {
        bail!("no annotations in {}", args.annotations.display());
    }
    let scores = ScoreTable::load(&args.scores)?;

    let mut sections = BTreeMap::new();
    let mut any_missing = false;
    for (dim, items) in &by_dim {
        let raters = items[0].1.len();
        if let Some((id, l)) = items.iter().find(|(_, l)| l.len() != raters) {
            bail!("dimension {dim}: item {id:?} has {} labels, expected {raters}", l.len());
        }
        let counts: Vec<Vec<u64>> = items
            .iter()
            .map(|(_, l)| {
                let pos = l.iter().filter(|&&x| x).count() as u64;
                vec![l.len() as u64 - pos, pos]
            })
            .collect();
        let kappa = fleiss_kappa(&counts);

        let mut majority = Vec::new();
        let mut values = Vec::new();
        let mut ties = 0usize;
        let mut missing = Vec::new();
        for ((id, _), c) in items.iter().zip(&counts) {
            let Some(v) = scores.get(id, dim) else {
                missing.push(id.clone());
                continue;
            };
            match (c[1] * 2).cmp(&(raters as u64)) {
                std::cmp::Ordering::Greater => majority.push(true),
                std::cmp::Ordering::Less => majority.push(false),
                std::cmp::Ordering::Equal => {
                    ties += 1;
                    continue;
                }
            }
            values.push(v);
        }
        any_missing |= !missing.is_empty();
        let table = sign_agreement_table(&majority, &values);
        let chi = table.clone().and_then(|t| chi_square_independence(t, ChiSquareOptions { yates: args.yates }));
        let pos: Vec<f64> = majority.iter().zip(&values).filter(|(l, _)| **l).map(|(_, v)| *v).collect();
        let neg: Vec<f64> = majority.iter().zip(&values).filter(|(l, _)| !**l).map(|(_, v)| *v).collect();
        sections.insert(
            dim.clone(),
            json!({
                "items": items.len(),
                "raters": raters,
                "fleiss_kappa": outcome(kappa),
                "majority_ties_excluded": ties,
                "missing_scores": missing,
                "sign_agreement": {
                    "table": outcome(table),
                    "rows": ["label positive", "label negative"],
                    "columns": ["score > 0", "score <= 0"],
                    "test": outcome(chi),
                },
                "mean_score_by_label": {
                    "positive_n": pos.len(),
                    "negative_n": neg.len(),
                    "test": outcome(welch_t(&pos, &neg)),
                },
            }),
        );
    }
    emit_json(args.out.as_deref(), &json!({ "dimensions": sections }))?;
    let mut mb = ManifestBuilder::start("validate");
    mb.config(&settings, json!({ "yates": args.yates })).input(&args.annotations).input(&args.scores);
    finish_manifest(&mb, args.out.as_deref(), &[], Value::Null)?;
    Ok(Status::partial_if(any_missing))
}

fn scored_texts(input: &TextInput, scores: &ScoreTable, dimension: &str) -> Result<(Vec<ScoredText>, Vec<String>, usize)> {
    let loaded = input.load()?;
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for t in loaded.texts {
        match scores.get(&t.text_id, dimension) {
            Some(score) => out.push(ScoredText { text_id: t.text_id, text: t.text, score }),
            None => missing.push(t.text_id),
        }
    }
    if !missing.is_empty() {
        eprintln!("{} text(s) have no {dimension} score: {}", missing.len(), preview(&missing));
    }
    Ok((out, missing, loaded.rejections.len()))
}

#[derive(Debug, Args)]
pub struct LexiconArgs {
    #[command(flatten)]
    pub input: TextInput,
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, default_value = "humt")]
    pub dimension: String,
    /// Lexicon file: `category<TAB>word,word,prefix*` per line.
    #[arg(long)]
    pub lexicon: PathBuf,
    /// Drop categories whose p-value exceeds this.
    #[arg(long)]
    pub max_p: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn lexicon(args: &LexiconArgs, settings: Settings) -> Result<Status> {
    let scores = ScoreTable::load(&args.scores)?;
    scores.require_dimension(&args.dimension)?;
    let lex = Lexicon::load(&args.lexicon)?;
    let (texts, missing, rejected) = scored_texts(&args.input, &scores, &args.dimension)?;
    let assoc = quartile_lexicon_association(&texts, &lex, args.max_p)?;
    emit_json(
        args.out.as_deref(),
        &json!({ "dimension": args.dimension, "texts": texts.len(), "quartile_size": texts.len() / 4, "categories": assoc }),
    )?;
    if let Some(p) = &args.csv {
        let rows: Vec<Vec<String>> = assoc
            .iter()
            .map(|a| {
                let (t, df, pv) = a.test.map_or((String::new(), String::new(), String::new()), |t| {
                    (t.statistic.to_string(), t.degrees_of_freedom.to_string(), t.p_value.to_string())
                });
                vec![a.category.clone(), a.mean_rate_top.to_string(), a.mean_rate_bottom.to_string(), t, df, pv]
            })
            .collect();
        write_csv(p, &["category", "mean_rate_top", "mean_rate_bottom", "t", "df", "p_value"], &rows)?;
    }
    let mut mb = ManifestBuilder::start("lexicon");
    mb.config(&settings, json!({ "dimension": args.dimension, "max_p": args.max_p, "fields": args.input.fields, "pairs": args.input.pairs }))
        .input(&args.input.input)
        .input(&args.scores)
        .input(&args.lexicon);
    finish_manifest(&mb, args.out.as_deref(), &args.csv.iter().map(PathBuf::as_path).collect::<Vec<_>>(), json!({ "missing": missing.len() }))?;
    Ok(Status::partial_if(!missing.is_empty() || rejected > 0))
}

#[derive(Debug, Args)]
pub struct TermArgs {
    #[command(flatten)]
    pub input: TextInput,
    /// Term to count; repeat for several.
    #[arg(long = "term", required = true)]
    pub terms: Vec<String>,
    #[arg(long, default_value = "token")]
    pub match_mode: TermMatchArg,
    /// With --scores, also report proportions in the top and bottom score
    /// quartiles.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long, default_value = "humt")]
    pub dimension: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum TermMatchArg {
    Token,
    Substring,
}

impl From<TermMatchArg> for TermMatch {
    fn from(a: TermMatchArg) -> Self {
        match a {
            TermMatchArg::Token => TermMatch::Token,
            TermMatchArg::Substring => TermMatch::Substring,
        }
    }
}

pub fn term(args: &TermArgs, settings: Settings) -> Result<Status> {
    let mode: TermMatch = args.match_mode.into();
    let partial;
    let mut results = Vec::new();
    let (all_texts, quartiles) = match &args.scores {
        Some(p) => {
            let scores = ScoreTable::load(p)?;
            scores.require_dimension(&args.dimension)?;
            let (mut texts, missing, rejected) = scored_texts(&args.input, &scores, &args.dimension)?;
            partial = !missing.is_empty() || rejected > 0;
            texts.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.text_id.cmp(&b.text_id)));
            let q = texts.len() / 4;
            let bottom: Vec<String> = texts[..q].iter().map(|t| t.text.clone()).collect();
            let top: Vec<String> = texts[texts.len() - q..].iter().map(|t| t.text.clone()).collect();
            let all: Vec<String> = texts.into_iter().map(|t| t.text).collect();
            (all, Some((top, bottom)))
        }
        None => {
            let loaded = args.input.load()?;
            partial = !loaded.rejections.is_empty();
            (loaded.texts.into_iter().map(|t| t.text).collect(), None)
        }
    };
    for t in &args.terms {
        let overall = term_proportion(&all_texts, t, mode)?;
        let (top, bottom) = match &quartiles {
            Some((top, bottom)) if !top.is_empty() => {
                (Some(term_proportion(top, t, mode)?), Some(term_proportion(bottom, t, mode)?))
            }
            _ => (None, None),
        };
        results.push(json!({ "term": t, "proportion": overall, "top_quartile": top, "bottom_quartile": bottom }));
    }
    emit_json(
        args.out.as_deref(),
        &json!({ "texts": all_texts.len(), "mode": mode, "dimension": args.scores.as_ref().map(|_| &args.dimension), "terms": results }),
    )?;
    let mut mb = ManifestBuilder::start("term");
    mb.config(&settings, json!({ "terms": args.terms, "mode": mode, "dimension": args.dimension, "fields": args.input.fields }))
        .input(&args.input.input)
        .inputs(args.scores.clone());
    finish_manifest(&mb, args.out.as_deref(), &[], Value::Null)?;
    Ok(Status::partial_if(partial))
}

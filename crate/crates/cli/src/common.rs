use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use humt_core::backend::{CachedBackend, RemoteBackend, RemoteConfig};
use humt_core::corpus::{
    ingest_pairs, ingest_texts, pair_response_texts, write_rejections_jsonl, FieldMapping, InputFormat, PreferencePair,
    Rejection, TextRecord,
};
use humt_core::tone::{Aggregation, DimensionSpec, Registry, ScoringConfig, DEFAULT_TRUNCATION};
use humt_core::{BackendDescriptor, LanguageModel, TableBackend};

/// Command result when no fatal error occurred.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Some rows failed or were skipped; outputs hold the rest.
    Partial,
}

impl Status {
    pub fn partial_if(cond: bool) -> Self {
        if cond {
            Status::Partial
        } else {
            Status::Success
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalOpts {
    /// TOML file with defaults for the options below.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// `table:PATH` (JSON probability table) or `remote` (HUMT_* env vars).
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Persistent score cache file.
    #[arg(long, global = true, value_name = "PATH")]
    pub cache: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file with extra `[[dimension]]` definitions.
    #[arg(long, global = true, value_name = "PATH")]
    pub dimensions_file: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    backend: Option<String>,
    cache: Option<PathBuf>,
    jobs: Option<usize>,
    dimensions_file: Option<PathBuf>,
    truncation_limit: Option<usize>,
    repetitions: Option<u32>,
    mode: Option<String>,
    alpha: Option<f64>,
    epsilon: Option<f64>,
}

/// Flags merged over the config file over built-in defaults.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub backend: Option<String>,
    pub cache: Option<PathBuf>,
    pub jobs: usize,
    pub dimensions_file: Option<PathBuf>,
    pub truncation_limit: usize,
    pub repetitions: u32,
    pub mode: Option<Aggregation>,
    pub alpha: f64,
    pub epsilon: f64,
    #[serde(skip)]
    pub config_path: Option<PathBuf>,
}

impl Settings {
    pub fn resolve(g: &GlobalOpts) -> Result<Self> {
        let file: FileConfig = match &g.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        let mode = file.mode.as_deref().map(str::parse::<Aggregation>).transpose().map_err(|e| anyhow!("{e}"))?;
        let s = Settings {
            backend: g.backend.clone().or(file.backend),
            cache: g.cache.clone().or(file.cache),
            jobs: g.jobs.or(file.jobs).unwrap_or(1),
            dimensions_file: g.dimensions_file.clone().or(file.dimensions_file),
            truncation_limit: file.truncation_limit.unwrap_or(DEFAULT_TRUNCATION),
            repetitions: file.repetitions.unwrap_or(1),
            mode,
            alpha: file.alpha.unwrap_or(0.001),
            epsilon: file.epsilon.unwrap_or(0.02),
            config_path: g.config.clone(),
        };
        if s.jobs == 0 {
            bail!("--jobs must be ≥ 1");
        }
        Ok(s)
    }

    pub fn registry(&self) -> Result<Registry> {
        let mut r = Registry::builtin();
        if let Some(p) = &self.dimensions_file {
            r.extend_from_file(p)?;
        }
        Ok(r)
    }

    /// Dimensions named by `selection`, with the configured aggregation
    /// mode applied when one is set.
    pub fn dimensions(&self, selection: &str) -> Result<Vec<DimensionSpec>> {
        let specs = self.registry()?.select(selection)?;
        Ok(match self.mode {
            Some(m) => specs.into_iter().map(|s| s.with_aggregation(m)).collect(),
            None => specs,
        })
    }

    pub fn scoring(&self) -> Result<ScoringConfig> {
        Ok(ScoringConfig::new(self.truncation_limit, self.repetitions)?)
    }

    /// Files whose content shapes results.
    pub fn input_files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.config_path.iter().chain(&self.dimensions_file).cloned().collect();
        if let Some(p) = self.backend.as_deref().and_then(|b| b.strip_prefix("table:")) {
            v.push(PathBuf::from(p));
        }
        v
    }
}

pub enum Backend {
    Plain(Box<dyn LanguageModel>),
    Cached(CachedBackend<Box<dyn LanguageModel>>),
}

impl Backend {
    pub fn open(settings: &Settings) -> Result<Self> {
        let spec = settings
            .backend
            .as_deref()
            .ok_or_else(|| anyhow!("no backend configured; pass --backend table:PATH or --backend remote"))?;
        let inner: Box<dyn LanguageModel> = if let Some(path) = spec.strip_prefix("table:") {
            Box::new(TableBackend::from_json_path(Path::new(path)).with_context(|| format!("loading table {path}"))?)
        } else if spec == "remote" {
            Box::new(RemoteBackend::new(RemoteConfig::from_env())?)
        } else {
            bail!("unknown backend {spec:?}; expected table:PATH or remote");
        };
        Ok(match &settings.cache {
            Some(p) => Backend::Cached(
                CachedBackend::open(inner, p).with_context(|| format!("opening cache {}", p.display()))?,
            ),
            None => Backend::Plain(inner),
        })
    }

    pub fn model(&self) -> &dyn LanguageModel {
        match self {
            Backend::Plain(b) => b.as_ref(),
            Backend::Cached(c) => c,
        }
    }

    pub fn descriptor(&self) -> BackendDescriptor {
        self.model().descriptor().clone()
    }

    pub fn cache_summary(&self) -> Value {
        match self {
            Backend::Plain(_) => Value::Null,
            Backend::Cached(c) => json!({ "hits": c.hits(), "misses": c.misses(), "entries": c.cache().len() }),
        }
    }
}

/// Where texts come from for commands that read a corpus.
#[derive(Debug, Clone, Args)]
pub struct TextInput {
    /// JSONL or CSV corpus.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<InputFormat>,
    /// Column mapping, e.g. `text=output,text_id=prompt`.
    #[arg(long, value_name = "ROLE=COL,...")]
    pub fields: Option<String>,
    /// Treat the input as preference pairs and use both responses, with ids
    /// `<pair_id>:chosen` and `<pair_id>:rejected`.
    #[arg(long)]
    pub pairs: bool,
}

pub struct LoadedTexts {
    pub texts: Vec<TextRecord>,
    pub rejections: Vec<Rejection>,
}

impl TextInput {
    fn mapping(&self) -> Result<FieldMapping> {
        Ok(match &self.fields {
            Some(f) => FieldMapping::parse(f)?,
            None => FieldMapping::new(),
        })
    }

    pub fn load(&self) -> Result<LoadedTexts> {
        let format = self.format.unwrap_or_else(|| InputFormat::from_path(&self.input));
        let source = source_name(&self.input);
        let mapping = self.mapping()?;
        if self.pairs {
            let ing = ingest_pairs(&self.input, format, &mapping, &source)?;
            Ok(LoadedTexts { texts: pair_response_texts(&ing.records), rejections: ing.rejections })
        } else {
            let ing = ingest_texts(&self.input, format, &mapping, &source)?;
            Ok(LoadedTexts { texts: ing.records, rejections: ing.rejections })
        }
    }

    pub fn load_pairs(&self) -> Result<(Vec<PreferencePair>, Vec<Rejection>)> {
        let format = self.format.unwrap_or_else(|| InputFormat::from_path(&self.input));
        let ing = ingest_pairs(&self.input, format, &self.mapping()?, &source_name(&self.input))?;
        Ok((ing.records, ing.rejections))
    }
}

/// File stem used as the record source and id prefix.
pub fn source_name(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string()
}

pub fn load_pairs(path: &Path, fields: Option<&str>) -> Result<(Vec<PreferencePair>, Vec<Rejection>)> {
    TextInput { input: path.to_path_buf(), format: None, fields: fields.map(str::to_string), pairs: true }.load_pairs()
}

/// Logs rejections and writes them next to `out` when there are any.
pub fn report_rejections(out: Option<&Path>, rejections: &[Rejection]) -> Result<Option<PathBuf>> {
    if rejections.is_empty() {
        return Ok(None);
    }
    for r in rejections {
        log::warn!("input line {} rejected: {}", r.line, r.reason);
    }
    eprintln!("{} input record(s) rejected", rejections.len());
    let Some(out) = out else { return Ok(None) };
    let path = sibling(out, "rejections.jsonl");
    write_rejections_jsonl(&path, rejections)?;
    Ok(Some(path))
}

/// `<out>.<suffix>` in the same directory.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
    tmp.as_file().sync_all().with_context(|| format!("syncing {}", path.display()))?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Writes `value` to `out`, or pretty-prints it to stdout.
pub fn emit_json(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Provenance written next to a command's primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub config: Value,
    /// SHA-256 of the canonical (sorted-key) JSON of `config`.
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub backend: Option<BackendDescriptor>,
    pub started_at_unix_ms: u128,
    pub finished_at_unix_ms: u128,
    pub outputs: BTreeMap<String, String>,
    pub details: Value,
}

pub struct ManifestBuilder {
    command: String,
    config: Value,
    inputs: Vec<PathBuf>,
    started: u128,
}

impl ManifestBuilder {
    pub fn start(command: &str) -> Self {
        Self { command: command.into(), config: Value::Null, inputs: Vec::new(), started: unix_ms() }
    }

    /// Effective parameters; output paths excluded so reruns into other
    /// locations share a digest.
    pub fn config(&mut self, settings: &Settings, args: Value) -> &mut Self {
        self.config = json!({ "settings": settings, "args": args });
        self
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn inputs(&mut self, paths: impl IntoIterator<Item = PathBuf>) -> &mut Self {
        self.inputs.extend(paths);
        self
    }

    /// Writes `<primary>.manifest.json` for the given outputs.
    pub fn finish(
        &self,
        primary: &Path,
        outputs: &[&Path],
        backend: Option<BackendDescriptor>,
        details: Value,
    ) -> Result<PathBuf> {
        let canonical = serde_json::to_vec(&self.config)?;
        let mut input_digests = BTreeMap::new();
        for p in &self.inputs {
            input_digests.insert(p.display().to_string(), file_digest(p)?);
        }
        let mut out_digests = BTreeMap::new();
        for p in outputs {
            out_digests.insert(p.display().to_string(), file_digest(p)?);
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config: self.config.clone(),
            config_digest: sha256_hex(&canonical),
            input_digests,
            backend,
            started_at_unix_ms: self.started,
            finished_at_unix_ms: unix_ms(),
            outputs: out_digests,
            details,
        };
        let path = sibling(primary, "manifest.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }
}

/// Scores keyed by text id and dimension, read from either output format
/// of `humt score`.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    pub dimensions: Vec<String>,
    /// Text ids in file order.
    pub ids: Vec<String>,
    values: BTreeMap<String, BTreeMap<String, f64>>,
}

pub const NA: &str = "NA";

impl ScoreTable {
    pub fn new(dimensions: Vec<String>) -> Self {
        Self { dimensions, ..Self::default() }
    }

    pub fn insert(&mut self, text_id: &str, dimension: &str, value: f64) {
        if !self.values.contains_key(text_id) {
            self.ids.push(text_id.to_string());
        }
        if !self.dimensions.iter().any(|d| d == dimension) {
            self.dimensions.push(dimension.to_string());
        }
        self.values.entry(text_id.to_string()).or_default().insert(dimension.to_string(), value);
    }

    /// Registers an id whose scores all failed so it still gets a row.
    pub fn touch(&mut self, text_id: &str) {
        if !self.values.contains_key(text_id) {
            self.ids.push(text_id.to_string());
            self.values.insert(text_id.to_string(), BTreeMap::new());
        }
    }

    pub fn get(&self, text_id: &str, dimension: &str) -> Option<f64> {
        self.values.get(text_id).and_then(|m| m.get(dimension)).copied()
    }

    pub fn has_dimension(&self, dimension: &str) -> bool {
        self.dimensions.iter().any(|d| d == dimension)
    }

    pub fn require_dimension(&self, dimension: &str) -> Result<()> {
        if !self.has_dimension(dimension) {
            bail!("scores have no dimension {dimension:?}; available: {}", self.dimensions.join(", "));
        }
        Ok(())
    }

    /// Reads a wide TSV (`text_id` + one column per dimension, `NA` for
    /// missing) or long JSONL (one score object per line); the format is
    /// detected from the first non-blank byte.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scores {}", path.display()))?;
        let parsed = if text.trim_start().starts_with('{') { Self::parse_jsonl(&text) } else { Self::parse_tsv(&text) };
        parsed.with_context(|| format!("parsing scores {}", path.display()))
    }

    fn parse_jsonl(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            text_id: String,
            dimension: String,
            value: f64,
        }
        let mut t = Self::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Row = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
            if t.get(&row.text_id, &row.dimension).is_some() {
                bail!("line {}: duplicate score for {:?} / {}", i + 1, row.text_id, row.dimension);
            }
            t.insert(&row.text_id, &row.dimension, row.value);
        }
        Ok(t)
    }

    fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| anyhow!("empty file"))?;
        let mut cols = header.split('\t');
        if cols.next() != Some("text_id") {
            bail!("first column must be text_id");
        }
        let mut t = Self::new(cols.map(str::to_string).collect());
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != t.dimensions.len() + 1 {
                bail!("line {}: {} cells, expected {}", i + 2, cells.len(), t.dimensions.len() + 1);
            }
            if t.values.contains_key(cells[0]) {
                bail!("line {}: duplicate text id {:?}", i + 2, cells[0]);
            }
            t.touch(cells[0]);
            for (d, cell) in t.dimensions.clone().iter().zip(&cells[1..]) {
                if *cell != NA {
                    let v: f64 = cell.parse().with_context(|| format!("line {}: bad value {cell:?}", i + 2))?;
                    t.insert(cells[0], d, v);
                }
            }
        }
        Ok(t)
    }

    pub fn to_tsv(&self) -> Result<String> {
        use std::fmt::Write as _;
        let mut out = String::from("text_id");
        for d in &self.dimensions {
            write!(out, "\t{d}")?;
        }
        out.push('\n');
        for id in &self.ids {
            if id.contains(['\t', '\n', '\r']) {
                bail!("text id {id:?} contains a tab or newline; write JSONL instead");
            }
            out.push_str(id);
            for d in &self.dimensions {
                match self.get(id, d) {
                    Some(v) => write!(out, "\t{v}")?,
                    None => write!(out, "\t{NA}")?,
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

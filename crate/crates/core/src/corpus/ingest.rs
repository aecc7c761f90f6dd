use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{normalize_whitespace, CorpusError, PreferencePair, TextRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Jsonl,
    Csv,
}

impl InputFormat {
    /// `.csv` means CSV, anything else JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        }
    }
}

impl std::str::FromStr for InputFormat {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(InputFormat::Jsonl),
            "csv" => Ok(InputFormat::Csv),
            other => Err(CorpusError::InvalidArgument(format!("unknown format {other:?}"))),
        }
    }
}

/// Maps record roles (`prompt`, `chosen`, `text`, ...) to input column or
/// key names. Unmapped roles use their own name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FieldMapping {
    columns: BTreeMap<String, String>,
}

impl FieldMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn map(mut self, role: impl Into<String>, column: impl Into<String>) -> Self {
        self.columns.insert(role.into(), column.into());
        self
    }

    /// Parses `role=column` pairs separated by commas.
    pub fn parse(spec: &str) -> Result<Self, CorpusError> {
        let mut m = Self::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (role, col) = item
                .split_once('=')
                .ok_or_else(|| CorpusError::InvalidArgument(format!("mapping entry {item:?} is not role=column")))?;
            m = m.map(role.trim(), col.trim());
        }
        Ok(m)
    }

    pub fn column<'a>(&'a self, role: &'a str) -> &'a str {
        self.columns.get(role).map(String::as_str).unwrap_or(role)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested<T> {
    pub records: Vec<T>,
    pub rejections: Vec<Rejection>,
}

type Row = Map<String, Value>;

fn read_bytes(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Parses rows with their 1-based line numbers.
fn read_rows(path: &Path, format: InputFormat) -> Result<Vec<(u64, Row)>, CorpusError> {
    let bytes = read_bytes(path)?;
    match format {
        InputFormat::Jsonl => parse_jsonl_rows(path, &bytes),
        InputFormat::Csv => parse_csv_rows(path, &bytes),
    }
}

fn parse_jsonl_rows(path: &Path, bytes: &[u8]) -> Result<Vec<(u64, Row)>, CorpusError> {
    let mut rows = Vec::new();
    let mut offset = 0usize;
    for (idx, raw) in bytes.split(|&b| b == b'\n').enumerate() {
        let line_no = idx as u64 + 1;
        let malformed = |reason: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            byte_offset: offset as u64,
            reason,
        };
        let line = std::str::from_utf8(raw).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            byte_offset: (offset + e.valid_up_to()) as u64,
            reason: "invalid UTF-8".into(),
        })?;
        let trimmed = line.trim_end_matches('\r');
        if !trimmed.trim().is_empty() {
            match serde_json::from_str::<Value>(trimmed) {
                Ok(Value::Object(map)) => rows.push((line_no, map)),
                Ok(_) => return Err(malformed("line is not a JSON object".into())),
                Err(e) => return Err(malformed(e.to_string())),
            }
        }
        offset += raw.len() + 1;
    }
    Ok(rows)
}

fn parse_csv_rows(path: &Path, bytes: &[u8]) -> Result<Vec<(u64, Row)>, CorpusError> {
    let malformed = |e: csv::Error| {
        let (line, byte_offset) = e.position().map(|p| (p.line(), p.byte())).unwrap_or((0, 0));
        CorpusError::Malformed { path: path.to_path_buf(), line, byte_offset, reason: e.to_string() }
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader.headers().map_err(malformed)?.clone();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(malformed)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        // CSV has no nulls; an empty cell means the field is absent
        let row: Row = headers
            .iter()
            .zip(rec.iter())
            .map(|(h, v)| (h.to_string(), if v.is_empty() { Value::Null } else { Value::String(v.to_string()) }))
            .collect();
        rows.push((line, row));
    }
    Ok(rows)
}

fn scalar_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn optional_field(row: &Row, column: &str) -> Result<Option<String>, String> {
    match row.get(column) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => scalar_string(v).map(Some).ok_or_else(|| format!("field {column:?} is not a scalar")),
    }
}

fn required_text(row: &Row, column: &str) -> Result<String, String> {
    match row.get(column) {
        None | Some(Value::Null) => Err(format!("missing field {column:?}")),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(format!("field {column:?} is not a string")),
    }
}

fn demographics(row: &Row, column: &str) -> Result<Option<BTreeMap<String, String>>, String> {
    let obj = match row.get(column) {
        None | Some(Value::Null) => return Ok(None),
        Some(Value::String(s)) if s.trim().is_empty() => return Ok(None),
        Some(Value::String(s)) => serde_json::from_str::<Value>(s).map_err(|e| format!("demographics: {e}"))?,
        Some(v) => v.clone(),
    };
    let Value::Object(map) = obj else {
        return Err(format!("field {column:?} is not an object"));
    };
    map.into_iter()
        .map(|(k, v)| {
            let s = scalar_string(&v).unwrap_or_else(|| v.to_string());
            Ok((k, s))
        })
        .collect::<Result<_, String>>()
        .map(Some)
}

fn convert_pair(row: &Row, line: u64, mapping: &FieldMapping, source: &str) -> Result<PreferencePair, String> {
    let prompt = required_text(row, mapping.column("prompt"))?;
    let chosen = required_text(row, mapping.column("chosen"))?;
    let rejected = required_text(row, mapping.column("rejected"))?;
    if prompt.trim().is_empty() {
        return Err("empty prompt".into());
    }
    if normalize_whitespace(&chosen) == normalize_whitespace(&rejected) {
        return Err("chosen and rejected are identical after whitespace normalization".into());
    }
    let source = optional_field(row, mapping.column("source"))?.unwrap_or_else(|| source.to_string());
    let pair_id = optional_field(row, mapping.column("pair_id"))?.unwrap_or_else(|| format!("{source}:{line}"));
    Ok(PreferencePair {
        pair_id,
        prompt,
        chosen,
        rejected,
        source,
        topic: optional_field(row, mapping.column("topic"))?,
        demographics: demographics(row, mapping.column("demographics"))?,
        model_chosen: optional_field(row, mapping.column("model_chosen"))?,
        model_rejected: optional_field(row, mapping.column("model_rejected"))?,
    })
}

fn convert_text(row: &Row, line: u64, mapping: &FieldMapping, source: &str) -> Result<TextRecord, String> {
    let text_col = mapping.column("text");
    let id_col = mapping.column("text_id");
    let source_col = mapping.column("source");
    let text = required_text(row, text_col)?;
    let source = optional_field(row, source_col)?.unwrap_or_else(|| source.to_string());
    let text_id = optional_field(row, id_col)?.unwrap_or_else(|| format!("{source}:{line}"));
    let extra = row
        .iter()
        .filter(|(k, _)| k.as_str() != text_col && k.as_str() != id_col && k.as_str() != source_col)
        .map(|(k, v)| (k.clone(), scalar_string(v).unwrap_or_else(|| v.to_string())))
        .collect();
    Ok(TextRecord { text_id, text, source, extra })
}

fn collect<T>(
    rows: Vec<(u64, Row)>,
    convert: impl Fn(&Row, u64) -> Result<T, String>,
    id_of: impl Fn(&T) -> &str,
) -> Ingested<T> {
    let mut records = Vec::new();
    let mut rejections = Vec::new();
    let mut ids = HashSet::new();
    for (line, row) in rows {
        match convert(&row, line) {
            Ok(rec) => {
                let id = id_of(&rec).to_string();
                if ids.insert(id.clone()) {
                    records.push(rec);
                } else {
                    rejections.push(Rejection { line, id: Some(id), reason: "duplicate id".into() });
                }
            }
            Err(reason) => rejections.push(Rejection { line, id: None, reason }),
        }
    }
    Ingested { records, rejections }
}

/// Reads preference pairs. Every input row yields one record or one
/// rejection; a file that cannot be parsed at all is an error.
pub fn ingest_pairs(
    path: &Path,
    format: InputFormat,
    mapping: &FieldMapping,
    source: &str,
) -> Result<Ingested<PreferencePair>, CorpusError> {
    let rows = read_rows(path, format)?;
    Ok(collect(rows, |r, l| convert_pair(r, l, mapping, source), |p| &p.pair_id))
}

pub fn ingest_texts(
    path: &Path,
    format: InputFormat,
    mapping: &FieldMapping,
    source: &str,
) -> Result<Ingested<TextRecord>, CorpusError> {
    let rows = read_rows(path, format)?;
    Ok(collect(rows, |r, l| convert_text(r, l, mapping, source), |t| &t.text_id))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T], to_value: impl Fn(&T) -> Value) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut out, &to_value(item)).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<(), CorpusError> {
    write_lines(path, pairs, |p| serde_json::to_value(p).expect("pair serializes"))
}

/// Texts are written flat: extra metadata becomes top-level string keys so
/// the file re-ingests with the default mapping.
pub fn write_texts_jsonl(path: &Path, texts: &[TextRecord]) -> Result<(), CorpusError> {
    write_lines(path, texts, |t| {
        let mut m = Map::new();
        for (k, v) in &t.extra {
            m.insert(k.clone(), Value::String(v.clone()));
        }
        m.insert("text_id".into(), Value::String(t.text_id.clone()));
        m.insert("text".into(), Value::String(t.text.clone()));
        m.insert("source".into(), Value::String(t.source.clone()));
        Value::Object(m)
    })
}

pub fn write_rejections_jsonl(path: &Path, rejections: &[Rejection]) -> Result<(), CorpusError> {
    write_lines(path, rejections, |r| serde_json::to_value(r).expect("rejection serializes"))
}

pub fn read_jsonl_pairs(path: &Path, source: &str) -> Result<Ingested<PreferencePair>, CorpusError> {
    ingest_pairs(path, InputFormat::Jsonl, &FieldMapping::new(), source)
}

pub fn read_jsonl_texts(path: &Path, source: &str) -> Result<Ingested<TextRecord>, CorpusError> {
    ingest_texts(path, InputFormat::Jsonl, &FieldMapping::new(), source)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    #[test]
    fn jsonl_three_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"prompt\":\"p1\",\"chosen\":\"a\",\"rejected\":\"b\"}\n{\"prompt\":\"p2\",\"chosen\":\"a\",\"rejected\":\"b\"}\n{\"prompt\":\"p3\",\"chosen\":\"a\",\"rejected\":\"b\"}\n",
        );
        let out = ingest_pairs(&p, InputFormat::Jsonl, &FieldMapping::new(), "prism").unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(out.records[1].pair_id, "prism:2");
    }

    #[test]
    fn missing_field_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.jsonl",
            "{\"prompt\":\"p1\",\"chosen\":\"a\",\"rejected\":\"b\"}\n{\"prompt\":\"p2\",\"chosen\":\"a\"}\n{\"prompt\":\"p3\",\"chosen\":\"a\",\"rejected\":\"b\"}\n",
        );
        let out = ingest_pairs(&p, InputFormat::Jsonl, &FieldMapping::new(), "s").unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.rejections.len(), 1);
        assert_eq!(out.rejections[0].line, 2);
        assert!(out.rejections[0].reason.contains("rejected"));
    }

    #[test]
    fn malformed_json_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.jsonl", "{\"text\":\"ok\"}\n{not json\n");
        match ingest_texts(&p, InputFormat::Jsonl, &FieldMapping::new(), "s") {
            Err(CorpusError::Malformed { line, byte_offset, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(byte_offset, 14);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_sides_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.jsonl", "{\"prompt\":\"p\",\"chosen\":\"same  answer\",\"rejected\":\" same answer\"}\n");
        let out = ingest_pairs(&p, InputFormat::Jsonl, &FieldMapping::new(), "s").unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.rejections.len(), 1);
    }

    #[test]
    fn csv_with_remapped_headers_matches_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let j = write(
            dir.path(),
            "a.jsonl",
            "{\"id\":\"1\",\"prompt\":\"hi, there\",\"chosen\":\"x\",\"rejected\":\"y\",\"topic\":\"greet\"}\n{\"id\":\"2\",\"prompt\":\"q\",\"chosen\":\"x \\\"quoted\\\"\",\"rejected\":\"z\"}\n",
        );
        let c = write(
            dir.path(),
            "a.csv",
            "ID,Question,Good,Bad,Topic\n1,\"hi, there\",x,y,greet\n2,q,\"x \"\"quoted\"\"\",z,\n",
        );
        let jm = FieldMapping::new().map("pair_id", "id");
        let cm = FieldMapping::parse("pair_id=ID, prompt=Question, chosen=Good, rejected=Bad, topic=Topic").unwrap();
        let a = ingest_pairs(&j, InputFormat::Jsonl, &jm, "src").unwrap();
        let b = ingest_pairs(&c, InputFormat::Csv, &cm, "src").unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn text_extra_fields_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.jsonl", "{\"text_id\":\"a\",\"text\":\"hello\",\"lang\":\"en\",\"n\":3}\n");
        let out = read_jsonl_texts(&p, "c4").unwrap();
        assert_eq!(out.records[0].extra.get("n").map(String::as_str), Some("3"));
        let q = dir.path().join("t2.jsonl");
        write_texts_jsonl(&q, &out.records).unwrap();
        assert_eq!(read_jsonl_texts(&q, "other").unwrap().records, out.records);
    }
}

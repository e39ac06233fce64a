//! Dataset loaders: categorical tweet files (tab- or comma-separated) and
//! VAD sentence files.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::{VAD_MAX, VAD_MIN};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: header mismatch: expected [{expected}], found [{found}]")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: u64, reason: String },
    #[error("{path}:{line}: {reason}")]
    Range { path: PathBuf, line: u64, reason: String },
    #[error("{path}: invalid label schema: {reason}")]
    LabelSchema { path: PathBuf, reason: String },
}

/// Ordered label names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    names: Vec<String>,
}

// Conventional label orders; the upstream datasets define the authoritative
// column lists.
const AIT_LABELS: [&str; 11] = [
    "anger",
    "anticipation",
    "disgust",
    "fear",
    "joy",
    "love",
    "optimism",
    "pessimism",
    "sadness",
    "surprise",
    "trust",
];
const SENWAVE_LABELS: [&str; 11] = [
    "optimistic",
    "thankful",
    "empathetic",
    "pessimistic",
    "anxious",
    "sad",
    "annoyed",
    "denial",
    "official report",
    "surprise",
    "joking",
];

impl LabelSchema {
    pub fn new(names: Vec<String>) -> Result<Self, String> {
        if names.is_empty() {
            return Err("no labels".into());
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(format!("label {} is empty", i + 1));
            }
            if names[..i].iter().any(|m| m.eq_ignore_ascii_case(n)) {
                return Err(format!("duplicate label {n:?}"));
            }
        }
        Ok(Self { names })
    }

    pub fn ait() -> Self {
        Self::new(AIT_LABELS.iter().map(|s| s.to_string()).collect()).expect("static schema")
    }

    pub fn senwave() -> Self {
        Self::new(SENWAVE_LABELS.iter().map(|s| s.to_string()).collect()).expect("static schema")
    }

    /// One name per non-blank line.
    pub fn parse(source: &str) -> Result<Self, String> {
        Self::new(
            source
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|reason| DataError::LabelSchema {
            path: path.to_path_buf(),
            reason,
        })
    }

    pub fn to_file_string(&self) -> String {
        self.names.iter().map(|n| format!("{n}\n")).collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n.eq_ignore_ascii_case(name.trim()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatFormat {
    AitTsv,
    SenwaveCsv,
}

impl CatFormat {
    /// `.tsv` files are read as tab-separated, anything else as CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => CatFormat::AitTsv,
            _ => CatFormat::SenwaveCsv,
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            CatFormat::AitTsv => b'\t',
            CatFormat::SenwaveCsv => b',',
        }
    }
}

impl FromStr for CatFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ait_tsv" => Ok(CatFormat::AitTsv),
            "senwave_csv" => Ok(CatFormat::SenwaveCsv),
            _ => Err(format!("unknown format {s:?} (expected ait_tsv or senwave_csv)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledTweet {
    pub id: String,
    pub text: String,
    pub labels: Vec<u8>,
    pub timestamp: Option<NaiveDate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "dev" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VadSentence {
    pub id: String,
    pub split: Split,
    pub v: f64,
    pub a: f64,
    pub d: f64,
    pub text: String,
}

impl VadSentence {
    pub fn scores(&self) -> [f64; 3] {
        [self.v, self.a, self.d]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectKind {
    Parse,
    Range,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub line: u64,
    pub kind: RejectKind,
    pub reason: String,
}

/// Accepted records plus every rejected data row.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub rejected: Vec<Rejection>,
}

impl<T> Loaded<T> {
    /// Fails on the first rejected row.
    pub fn strict(self, path: &Path) -> Result<Vec<T>, DataError> {
        match self.rejected.into_iter().next() {
            None => Ok(self.records),
            Some(r) => {
                let (path, line, reason) = (path.to_path_buf(), r.line, r.reason);
                Err(match r.kind {
                    RejectKind::Parse => DataError::Parse { path, line, reason },
                    RejectKind::Range => DataError::Range { path, line, reason },
                })
            }
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    if buf.starts_with(&[0xEF, 0xBB, 0xBF]) {
        buf.drain(..3);
    }
    Ok(buf)
}

fn reader(bytes: &[u8], delimiter: u8, quoting: bool) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .quoting(quoting)
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes)
}

/// Reads the header row; row errors later on are per-line rejections.
fn header(
    records: &mut csv::StringRecordsIter<'_, &[u8]>,
    path: &Path,
) -> Result<Vec<String>, DataError> {
    match records.next() {
        None => Ok(Vec::new()),
        Some(Ok(r)) => Ok(r.iter().map(|c| c.trim().to_string()).collect()),
        Some(Err(e)) => Err(DataError::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: format!("unreadable header: {e}"),
        }),
    }
}

fn row_error_line(e: &csv::Error) -> u64 {
    e.position().map_or(0, csv::Position::line)
}

fn schema_error(path: &Path, expected: &[String], found: &[String]) -> DataError {
    DataError::Schema {
        path: path.to_path_buf(),
        expected: expected.join(", "),
        found: found.join(", "),
    }
}

fn parse_date(s: &str) -> Result<NaiveDate, String> {
    // Accept a bare date or a date-time whose first ten characters are the date.
    let head = s.get(..10).unwrap_or(s);
    NaiveDate::parse_from_str(head, "%Y-%m-%d")
        .ok()
        .filter(|_| s.len() == 10 || matches!(s.as_bytes().get(10), Some(b'T' | b' ')))
        .ok_or_else(|| format!("invalid date {s:?}"))
}

/// Lenient categorical reader: header problems are fatal, bad rows are
/// collected in `rejected`.
pub fn read_categorical(
    path: &Path,
    format: CatFormat,
    schema: &LabelSchema,
) -> Result<Loaded<LabeledTweet>, DataError> {
    let bytes = read_bytes(path)?;
    let mut rdr = reader(&bytes, format.delimiter(), format == CatFormat::SenwaveCsv);
    let mut rows = rdr.records();
    let found = header(&mut rows, path)?;

    let has_ts = format == CatFormat::SenwaveCsv
        && found.get(2).is_some_and(|c| c.eq_ignore_ascii_case("timestamp"));
    let mut expected: Vec<String> = vec!["ID".into(), "Tweet".into()];
    if has_ts {
        expected.push("Timestamp".into());
    }
    expected.extend(schema.names().iter().cloned());
    let matches = found.len() == expected.len()
        && found.iter().zip(&expected).all(|(f, e)| f.eq_ignore_ascii_case(e));
    if !matches {
        return Err(schema_error(path, &expected, &found));
    }
    let first_label = if has_ts { 3 } else { 2 };

    let mut out = Loaded {
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for row in rows {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(Rejection {
                    line: row_error_line(&e),
                    kind: RejectKind::Parse,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, csv::Position::line);
        let reject = |reason: String| Rejection {
            line,
            kind: RejectKind::Parse,
            reason,
        };
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() != expected.len() {
            out.rejected.push(reject(format!(
                "expected {} fields, found {}",
                expected.len(),
                row.len()
            )));
            continue;
        }
        let mut labels = Vec::with_capacity(schema.len());
        let mut bad = None;
        for (j, cell) in row.iter().skip(first_label).enumerate() {
            match cell.trim() {
                "0" => labels.push(0),
                "1" => labels.push(1),
                other => {
                    bad = Some(format!("label {:?} has non-binary value {other:?}", schema.names()[j]));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            out.rejected.push(reject(reason));
            continue;
        }
        let timestamp = if has_ts {
            match row[2].trim() {
                "" => None,
                s => match parse_date(s) {
                    Ok(d) => Some(d),
                    Err(reason) => {
                        out.rejected.push(reject(reason));
                        continue;
                    }
                },
            }
        } else {
            None
        };
        out.records.push(LabeledTweet {
            id: row[0].to_string(),
            text: row[1].to_string(),
            labels,
            timestamp,
        });
    }
    Ok(out)
}

/// Strict categorical loader: any rejected row is an error.
pub fn load_categorical(path: &Path, format: CatFormat, schema: &LabelSchema) -> Result<Vec<LabeledTweet>, DataError> {
    read_categorical(path, format, schema)?.strict(path)
}

pub const VAD_HEADER: [&str; 6] = ["id", "split", "V", "A", "D", "text"];

pub fn read_vad(path: &Path) -> Result<Loaded<VadSentence>, DataError> {
    let bytes = read_bytes(path)?;
    let mut rdr = reader(&bytes, b',', true);
    let mut rows = rdr.records();
    let found = header(&mut rows, path)?;
    let expected: Vec<String> = VAD_HEADER.iter().map(|s| s.to_string()).collect();
    if found.len() != 6 || !found.iter().zip(&expected).all(|(f, e)| f.eq_ignore_ascii_case(e)) {
        return Err(schema_error(path, &expected, &found));
    }
    let mut out = Loaded {
        records: Vec::new(),
        rejected: Vec::new(),
    };
    for row in rows {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                out.rejected.push(Rejection {
                    line: row_error_line(&e),
                    kind: RejectKind::Parse,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, csv::Position::line);
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        let parsed = (|| {
            if row.len() != 6 {
                return Err((RejectKind::Parse, format!("expected 6 fields, found {}", row.len())));
            }
            let split: Split = row[1].parse().map_err(|e| (RejectKind::Parse, e))?;
            let mut s = [0.0; 3];
            for (k, name) in ["V", "A", "D"].iter().enumerate() {
                let v: f64 = row[2 + k]
                    .trim()
                    .parse()
                    .map_err(|_| (RejectKind::Parse, format!("{name} is not a number: {:?}", &row[2 + k])))?;
                if !(VAD_MIN..=VAD_MAX).contains(&v) {
                    return Err((RejectKind::Range, format!("{name}={v} outside [{VAD_MIN}, {VAD_MAX}]")));
                }
                s[k] = v;
            }
            Ok(VadSentence {
                id: row[0].to_string(),
                split,
                v: s[0],
                a: s[1],
                d: s[2],
                text: row[5].to_string(),
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err((kind, reason)) => out.rejected.push(Rejection { line, kind, reason }),
        }
    }
    Ok(out)
}

pub fn load_vad(path: &Path) -> Result<Vec<VadSentence>, DataError> {
    read_vad(path)?.strict(path)
}

pub fn by_split(data: &[VadSentence], split: Split) -> Vec<VadSentence> {
    data.iter().filter(|r| r.split == split).cloned().collect()
}

/// Train rows followed by validation rows, each in file order.
pub fn merge_train_val(data: &[VadSentence]) -> Vec<VadSentence> {
    let mut out = by_split(data, Split::Train);
    out.extend(by_split(data, Split::Val));
    out
}

pub fn write_categorical<W: Write>(
    w: W,
    format: CatFormat,
    schema: &LabelSchema,
    records: &[LabeledTweet],
) -> Result<(), csv::Error> {
    let with_ts = format == CatFormat::SenwaveCsv && records.iter().any(|r| r.timestamp.is_some());
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(format.delimiter())
        .quote_style(match format {
            CatFormat::AitTsv => csv::QuoteStyle::Never,
            CatFormat::SenwaveCsv => csv::QuoteStyle::Necessary,
        })
        .from_writer(w);
    let mut head = vec!["ID".to_string(), "Tweet".to_string()];
    if with_ts {
        head.push("Timestamp".into());
    }
    head.extend(schema.names().iter().cloned());
    wtr.write_record(&head)?;
    for r in records {
        let mut row = vec![r.id.clone(), r.text.clone()];
        if with_ts {
            row.push(r.timestamp.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default());
        }
        row.extend(r.labels.iter().map(|b| b.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_vad<W: Write>(w: W, records: &[VadSentence]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(VAD_HEADER)?;
    for r in records {
        wtr.write_record([
            r.id.clone(),
            r.split.to_string(),
            r.v.to_string(),
            r.a.to_string(),
            r.d.to_string(),
            r.text.clone(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

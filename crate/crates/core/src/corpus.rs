//! Record model and file formats: line-delimited caption corpora, shard
//! manifests and tab-separated concreteness annotation files.

use std::borrow::Borrow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: duplicate id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Annotation {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("invalid annotation set: {0}")]
    InvalidAnnotations(String),
    #[error("invalid shard manifest: {0}")]
    InvalidManifest(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("shard size must be at least 1")]
    ZeroShardSize,
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

/// How readers and record-level transforms react to bad input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReadMode {
    /// Abort on the first problem.
    #[default]
    Strict,
    /// Skip the offending line or record and count it.
    Lenient,
}

/// One corpus item: a caption, an optional pointer to its image, and any
/// number of named scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, caption: impl Into<String>) -> Self {
        CaptionRecord {
            id: id.into(),
            caption: caption.into(),
            image_ref: None,
            scores: BTreeMap::new(),
        }
    }

    pub fn with_score(mut self, name: impl Into<String>, value: f64) -> Self {
        self.scores.insert(name.into(), value);
        self
    }

    pub fn score(&self, name: &str) -> Option<f64> {
        self.scores.get(name).copied()
    }

    /// Checks the per-record invariants (uniqueness is a corpus property and
    /// is checked by the reader).
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidRecord {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        if self.caption.trim().is_empty() {
            return Err(invalid("empty caption".into()));
        }
        for (name, &value) in &self.scores {
            if !(0.0..=1.0).contains(&value) {
                return Err(invalid(format!("score {name:?}={value} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// Streaming reader over a line-delimited corpus file.
///
/// In strict mode the iterator yields an error for the first malformed line or
/// duplicate id and then stops. In lenient mode malformed lines are skipped
/// (see [`CorpusReader::skipped`]); duplicate ids are passed through and
/// counted, so callers that need last-wins semantics should use
/// [`read_corpus`].
pub struct CorpusReader<R> {
    path: PathBuf,
    reader: R,
    mode: ReadMode,
    line: usize,
    buf: Vec<u8>,
    seen: HashSet<String>,
    skipped: usize,
    duplicates: usize,
    done: bool,
}

impl CorpusReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, mode: ReadMode) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
        Ok(Self::from_reader(path, BufReader::new(file), mode))
    }
}

impl<R: BufRead> CorpusReader<R> {
    pub fn from_reader(path: impl Into<PathBuf>, reader: R, mode: ReadMode) -> Self {
        CorpusReader {
            path: path.into(),
            reader,
            mode,
            line: 0,
            buf: Vec::new(),
            seen: HashSet::new(),
            skipped: 0,
            duplicates: 0,
            done: false,
        }
    }

    /// Number of malformed lines skipped so far (lenient mode).
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Number of records whose id had already been seen (lenient mode).
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn parse_line(&self, bytes: &[u8]) -> Result<CaptionRecord, String> {
        let text = std::str::from_utf8(bytes).map_err(|e| format!("invalid UTF-8: {e}"))?;
        let text = if self.line == 1 {
            text.strip_prefix('\u{feff}').unwrap_or(text)
        } else {
            text
        };
        let record: CaptionRecord = serde_json::from_str(text).map_err(|e| e.to_string())?;
        record.validate().map_err(|e| e.to_string())?;
        Ok(record)
    }
}

impl<R: BufRead> Iterator for CorpusReader<R> {
    type Item = Result<CaptionRecord, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => {
                    self.done = true;
                    return None;
                }
                Ok(_) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(CorpusError::io(&self.path, e)));
                }
            }
            self.line += 1;
            let bytes = trim_line_end(&self.buf);
            if bytes.iter().all(u8::is_ascii_whitespace) {
                continue;
            }
            let record = match self.parse_line(bytes) {
                Ok(r) => r,
                Err(reason) => match self.mode {
                    ReadMode::Strict => {
                        self.done = true;
                        return Some(Err(CorpusError::Malformed {
                            path: self.path.clone(),
                            line: self.line,
                            reason,
                        }));
                    }
                    ReadMode::Lenient => {
                        self.skipped += 1;
                        continue;
                    }
                },
            };
            if !self.seen.insert(record.id.clone()) {
                match self.mode {
                    ReadMode::Strict => {
                        self.done = true;
                        return Some(Err(CorpusError::DuplicateId {
                            path: self.path.clone(),
                            line: self.line,
                            id: record.id,
                        }));
                    }
                    ReadMode::Lenient => self.duplicates += 1,
                }
            }
            return Some(Ok(record));
        }
        None
    }
}

fn trim_line_end(buf: &[u8]) -> &[u8] {
    let mut end = buf.len();
    if end > 0 && buf[end - 1] == b'\n' {
        end -= 1;
        if end > 0 && buf[end - 1] == b'\r' {
            end -= 1;
        }
    }
    &buf[..end]
}

/// A fully materialized corpus read.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusRead {
    pub records: Vec<CaptionRecord>,
    pub skipped: usize,
    pub duplicates: usize,
}

/// Reads a whole corpus file. Lenient mode resolves duplicate ids by keeping
/// the last occurrence (at the position where it occurred).
pub fn read_corpus(path: impl AsRef<Path>, mode: ReadMode) -> Result<CorpusRead, CorpusError> {
    let mut reader = CorpusReader::open(path, mode)?;
    let mut records = Vec::new();
    for record in reader.by_ref() {
        records.push(record?);
    }
    if reader.duplicates() > 0 {
        let mut last: HashMap<&str, usize> = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            last.insert(r.id.as_str(), i);
        }
        let keep: Vec<bool> = records
            .iter()
            .enumerate()
            .map(|(i, r)| last[r.id.as_str()] == i)
            .collect();
        let mut idx = 0;
        records.retain(|_| {
            idx += 1;
            keep[idx - 1]
        });
    }
    Ok(CorpusRead {
        records,
        skipped: reader.skipped(),
        duplicates: reader.duplicates(),
    })
}

/// Buffered line-delimited record writer.
pub struct RecordWriter<W: Write> {
    path: PathBuf,
    out: W,
    count: usize,
}

impl RecordWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CorpusError::io(path, e))?;
        Ok(RecordWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            count: 0,
        })
    }
}

impl<W: Write> RecordWriter<W> {
    pub fn from_writer(path: impl Into<PathBuf>, out: W) -> Self {
        RecordWriter {
            path: path.into(),
            out,
            count: 0,
        }
    }

    pub fn write(&mut self, record: &CaptionRecord) -> Result<(), CorpusError> {
        self.write_value(record)
    }

    /// Writes any serializable value as one line.
    pub fn write_value<T: Serialize>(&mut self, value: &T) -> Result<(), CorpusError> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out
            .write_all(b"\n")
            .map_err(|e| CorpusError::io(&self.path, e))?;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<usize, CorpusError> {
        self.out.flush().map_err(|e| CorpusError::io(&self.path, e))?;
        Ok(self.count)
    }
}

/// Writes records one per line and returns how many were written.
pub fn write_corpus<I>(records: I, path: impl AsRef<Path>) -> Result<usize, CorpusError>
where
    I: IntoIterator,
    I::Item: Borrow<CaptionRecord>,
{
    let mut writer = RecordWriter::create(path)?;
    for record in records {
        writer.write(record.borrow())?;
    }
    writer.finish()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shard_paths: Vec<PathBuf>,
    pub records_per_shard: Vec<usize>,
    pub total: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl ShardManifest {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.shard_paths.len() != self.records_per_shard.len() {
            return Err(CorpusError::InvalidManifest(format!(
                "{} paths but {} counts",
                self.shard_paths.len(),
                self.records_per_shard.len()
            )));
        }
        let sum: usize = self.records_per_shard.iter().sum();
        if sum != self.total {
            return Err(CorpusError::InvalidManifest(format!(
                "total {} != sum of shard counts {sum}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        let manifest: ShardManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CorpusError::io(path, e))
    }
}

/// Splits a record stream, in order, into files of `shard_size` records
/// (the last one possibly smaller) under `out_dir`, and writes
/// `manifest.json` next to them.
pub fn shard<I>(records: I, shard_size: usize, out_dir: impl AsRef<Path>) -> Result<ShardManifest, CorpusError>
where
    I: IntoIterator,
    I::Item: Borrow<CaptionRecord>,
{
    if shard_size == 0 {
        return Err(CorpusError::ZeroShardSize);
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| CorpusError::io(out_dir, e))?;

    let mut manifest = ShardManifest {
        shard_paths: Vec::new(),
        records_per_shard: Vec::new(),
        total: 0,
    };
    let mut current: Option<RecordWriter<BufWriter<File>>> = None;
    for record in records {
        if current.as_ref().is_none_or(|w| w.count() == shard_size) {
            if let Some(w) = current.take() {
                manifest.records_per_shard.push(w.finish()?);
            }
            let path = out_dir.join(format!("shard-{:05}.jsonl", manifest.shard_paths.len()));
            current = Some(RecordWriter::create(&path)?);
            manifest.shard_paths.push(path);
        }
        if let Some(w) = current.as_mut() {
            w.write(record.borrow())?;
        }
        manifest.total += 1;
    }
    if let Some(w) = current.take() {
        manifest.records_per_shard.push(w.finish()?);
    }
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Human concreteness labels on a bounded ordinal scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    scale_min: i64,
    scale_max: i64,
    labels: BTreeMap<String, f64>,
}

impl AnnotationSet {
    pub fn new(scale_min: i64, scale_max: i64, labels: BTreeMap<String, f64>) -> Result<Self, CorpusError> {
        if scale_min >= scale_max {
            return Err(CorpusError::InvalidAnnotations(format!(
                "scale min {scale_min} must be below max {scale_max}"
            )));
        }
        for (id, &label) in &labels {
            if !(scale_min as f64..=scale_max as f64).contains(&label) {
                return Err(CorpusError::InvalidAnnotations(format!(
                    "label {label} for {id:?} outside [{scale_min}, {scale_max}]"
                )));
            }
        }
        Ok(AnnotationSet {
            scale_min,
            scale_max,
            labels,
        })
    }

    pub fn scale_min(&self) -> i64 {
        self.scale_min
    }

    pub fn scale_max(&self) -> i64 {
        self.scale_max
    }

    pub fn labels(&self) -> &BTreeMap<String, f64> {
        &self.labels
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.labels.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reads an annotation file:
///
/// ```text
/// # scale 0 3
/// id<TAB>score
/// a<TAB>0
/// b<TAB>3
/// ```
pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let err = |line: usize, reason: String| CorpusError::Annotation {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut scale: Option<(i64, i64)> = None;
    let mut header_seen = false;
    let mut labels = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((min, max)) = scale else {
            scale = Some(parse_scale(line).ok_or_else(|| {
                err(lineno, "first line must declare the scale as `# scale <min> <max>`".into())
            })?);
            if let Some((min, max)) = scale {
                if min >= max {
                    return Err(err(lineno, format!("scale min {min} must be below max {max}")));
                }
            }
            continue;
        };
        if !header_seen {
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols != ["id", "score"] {
                return Err(err(lineno, "expected header `id<TAB>score`".into()));
            }
            header_seen = true;
            continue;
        }
        let (id, value) = line
            .split_once('\t')
            .ok_or_else(|| err(lineno, "expected `id<TAB>score`".into()))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(err(lineno, "empty id".into()));
        }
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|e| err(lineno, format!("bad score {value:?}: {e}")))?;
        if !(min as f64..=max as f64).contains(&value) {
            return Err(err(lineno, format!("score {value} outside scale [{min}, {max}]")));
        }
        if labels.insert(id.to_string(), value).is_some() {
            return Err(err(lineno, format!("duplicate id {id:?}")));
        }
    }
    let (min, max) = scale.ok_or_else(|| err(0, "missing `# scale <min> <max>` declaration".into()))?;
    AnnotationSet::new(min, max, labels)
}

fn parse_scale(line: &str) -> Option<(i64, i64)> {
    let rest = line.trim().strip_prefix('#')?;
    let mut parts = rest.split_whitespace();
    if parts.next()? != "scale" {
        return None;
    }
    let min = parts.next()?.parse().ok()?;
    let max = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((min, max))
}

pub fn write_annotations(set: &AnnotationSet, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut text = format!("# scale {} {}\nid\tscore\n", set.scale_min, set.scale_max);
    for (id, label) in &set.labels {
        text.push_str(&format!("{id}\t{label}\n"));
    }
    fs::write(path, text).map_err(|e| CorpusError::io(path, e))
}

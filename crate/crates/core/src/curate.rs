//! Budgeted corpus selection (top-k, threshold, seeded random, stacked
//! prefilters), distillation-set emission and seeded corpus splits.
//!
//! Selections are one-pass and memory-bounded: top-k and random keep at most
//! `k` records in a min-heap, thresholds stream. Per-shard partial results
//! merge in any order to the same answer, because every record has a unique
//! rank (score descending, then id ascending, then position). Selected
//! records are returned in corpus order.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaptionRecord, CorpusError, CorpusReader, ReadMode, RecordWriter};
use crate::hashing::{fnv1a64, mix64};

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("invalid selection spec: {0}")]
    Spec(String),
    #[error("record {id:?} has no score {score:?}")]
    MissingScore { id: String, score: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("record {id:?}: target {value} must lie strictly inside (0,1) for logit space")]
    TargetOutOfRange { id: String, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("spec file: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    TopK,
    Threshold,
    Random,
}

/// A selection, optionally stacked on top of a prefilter that runs first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub method: SelectionMethod,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub score_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefilter: Option<Box<SelectionSpec>>,
}

impl SelectionSpec {
    pub fn top_k(score_name: &str, k: usize) -> Self {
        SelectionSpec {
            method: SelectionMethod::TopK,
            score_name: score_name.into(),
            k: Some(k),
            theta: None,
            seed: None,
            prefilter: None,
        }
    }

    pub fn threshold(score_name: &str, theta: f64) -> Self {
        SelectionSpec {
            method: SelectionMethod::Threshold,
            score_name: score_name.into(),
            k: None,
            theta: Some(theta),
            seed: None,
            prefilter: None,
        }
    }

    pub fn random(k: usize, seed: u64) -> Self {
        SelectionSpec {
            method: SelectionMethod::Random,
            score_name: String::new(),
            k: Some(k),
            theta: None,
            seed: Some(seed),
            prefilter: None,
        }
    }

    pub fn with_prefilter(mut self, prefilter: SelectionSpec) -> Self {
        self.prefilter = Some(Box::new(prefilter));
        self
    }

    pub fn validate(&self) -> Result<(), CurateError> {
        let bad = |m: &str| Err(CurateError::Spec(m.to_string()));
        match self.method {
            SelectionMethod::TopK => {
                if self.k.is_none_or(|k| k < 1) {
                    return bad("top_k requires k >= 1");
                }
                if self.score_name.is_empty() {
                    return bad("top_k requires a score name");
                }
            }
            SelectionMethod::Threshold => {
                if !self.theta.is_some_and(f64::is_finite) {
                    return bad("threshold requires a finite theta");
                }
                if self.score_name.is_empty() {
                    return bad("threshold requires a score name");
                }
            }
            SelectionMethod::Random => {
                if self.k.is_none_or(|k| k < 1) {
                    return bad("random requires k >= 1");
                }
                if self.seed.is_none() {
                    return bad("random requires a seed");
                }
            }
        }
        match &self.prefilter {
            Some(p) => p.validate(),
            None => Ok(()),
        }
    }

    /// Stages in execution order: innermost prefilter first.
    fn stages(&self) -> Vec<&SelectionSpec> {
        let mut stages = vec![self];
        let mut cur = self;
        while let Some(p) = cur.prefilter.as_deref() {
            stages.push(p);
            cur = p;
        }
        stages.reverse();
        stages
    }

    fn is_bounded(&self) -> bool {
        self.method != SelectionMethod::Threshold
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, CurateError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CurateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let spec: SelectionSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CurateError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|source| CurateError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// (source index, record index within the source)
type Position = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
struct TotalF64(f64);

impl Eq for TotalF64 {}

impl PartialOrd for TotalF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TotalF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Larger is better.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Rank {
    Score(TotalF64, Reverse<String>),
    Random(Reverse<u64>, Reverse<String>),
}

#[derive(Debug)]
struct Entry {
    rank: Rank,
    pos: Position,
    record: CaptionRecord,
}

impl Entry {
    fn key(&self) -> (&Rank, Reverse<Position>) {
        (&self.rank, Reverse(self.pos))
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Random-selection key: a seeded hash of the record id.
pub fn random_key(seed: u64, id: &str) -> u64 {
    mix64(fnv1a64(id.as_bytes()) ^ mix64(seed))
}

/// Keeps the `k` best entries seen so far.
#[derive(Debug)]
struct BestK {
    k: usize,
    heap: BinaryHeap<Reverse<Entry>>,
    offered: usize,
}

impl BestK {
    fn new(k: usize) -> Self {
        BestK {
            k,
            heap: BinaryHeap::with_capacity(k.min(1 << 20) + 1),
            offered: 0,
        }
    }

    fn offer(&mut self, entry: Entry) {
        self.offered += 1;
        self.insert(entry);
    }

    fn insert(&mut self, entry: Entry) {
        if self.heap.len() < self.k {
            self.heap.push(Reverse(entry));
        } else if let Some(Reverse(worst)) = self.heap.peek() {
            if entry > *worst {
                self.heap.pop();
                self.heap.push(Reverse(entry));
            }
        }
    }

    fn merge(&mut self, other: BestK) {
        self.offered += other.offered;
        for Reverse(entry) in other.heap {
            self.insert(entry);
        }
    }

    fn into_corpus_order(self) -> Vec<(Position, CaptionRecord)> {
        let mut out: Vec<_> = self.heap.into_iter().map(|Reverse(e)| (e.pos, e.record)).collect();
        out.sort_by_key(|(pos, _)| *pos);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionOutcome {
    pub records: Vec<CaptionRecord>,
    /// Records dropped because they lacked a score a stage needed.
    pub missing_score: usize,
    /// Malformed lines skipped while reading (lenient file reads).
    pub malformed: usize,
    pub warnings: Vec<String>,
}

struct Stage<'a> {
    spec: &'a SelectionSpec,
}

impl Stage<'_> {
    /// `Ok(None)` means the record is skipped (lenient, score missing).
    fn score(&self, record: &CaptionRecord, mode: ReadMode, missing: &mut usize) -> Result<Option<f64>, CurateError> {
        if self.spec.method == SelectionMethod::Random {
            return Ok(Some(0.0));
        }
        match record.score(&self.spec.score_name) {
            Some(s) => Ok(Some(s)),
            None if mode == ReadMode::Lenient => {
                *missing += 1;
                Ok(None)
            }
            None => Err(CurateError::MissingScore {
                id: record.id.clone(),
                score: self.spec.score_name.clone(),
            }),
        }
    }

    fn passes_threshold(&self, score: f64) -> bool {
        self.spec.theta.is_some_and(|theta| score >= theta)
    }

    fn entry(&self, score: f64, pos: Position, record: CaptionRecord) -> Entry {
        let rank = match self.spec.method {
            SelectionMethod::Random => Rank::Random(
                Reverse(random_key(self.spec.seed.unwrap_or_default(), &record.id)),
                Reverse(record.id.clone()),
            ),
            _ => Rank::Score(TotalF64(score), Reverse(record.id.clone())),
        };
        Entry { rank, pos, record }
    }

    fn collector(&self) -> BestK {
        BestK::new(self.spec.k.unwrap_or(0))
    }

    fn warn_if_short(&self, collector: &BestK, warnings: &mut Vec<String>) {
        let k = self.spec.k.unwrap_or(0);
        if collector.offered < k {
            warnings.push(format!(
                "{} requested k={k} but only {} records were available; returning all",
                method_name(self.spec.method),
                collector.offered
            ));
        }
    }
}

fn method_name(m: SelectionMethod) -> &'static str {
    match m {
        SelectionMethod::TopK => "top_k",
        SelectionMethod::Threshold => "threshold",
        SelectionMethod::Random => "random",
    }
}

/// Output of scanning one source up to and including the first bounded
/// stage.
#[derive(Default)]
struct Partial {
    collector: Option<BestK>,
    passed: Vec<(Position, CaptionRecord)>,
    missing: usize,
    malformed: usize,
}

struct Plan<'a> {
    stages: Vec<Stage<'a>>,
    first_bounded: Option<usize>,
    mode: ReadMode,
}

impl<'a> Plan<'a> {
    fn new(spec: &'a SelectionSpec, mode: ReadMode) -> Result<Self, CurateError> {
        spec.validate()?;
        let stages: Vec<Stage<'a>> = spec.stages().into_iter().map(|spec| Stage { spec }).collect();
        let first_bounded = stages.iter().position(|s| s.spec.is_bounded());
        Ok(Plan {
            stages,
            first_bounded,
            mode,
        })
    }

    fn scan<I>(&self, src: usize, records: I) -> Result<Partial, CurateError>
    where
        I: IntoIterator<Item = Result<CaptionRecord, CurateError>>,
    {
        let leading = self.first_bounded.unwrap_or(self.stages.len());
        let mut partial = Partial {
            collector: self.first_bounded.map(|i| self.stages[i].collector()),
            ..Default::default()
        };
        'records: for (idx, record) in records.into_iter().enumerate() {
            let record = record?;
            for stage in &self.stages[..leading] {
                match stage.score(&record, self.mode, &mut partial.missing)? {
                    Some(s) if stage.passes_threshold(s) => {}
                    _ => continue 'records,
                }
            }
            let pos = (src, idx);
            match (self.first_bounded, partial.collector.as_mut()) {
                (Some(i), Some(collector)) => {
                    let stage = &self.stages[i];
                    if let Some(s) = stage.score(&record, self.mode, &mut partial.missing)? {
                        collector.offer(stage.entry(s, pos, record));
                    }
                }
                _ => partial.passed.push((pos, record)),
            }
        }
        Ok(partial)
    }

    fn finish(&self, partials: Vec<Partial>) -> Result<SelectionOutcome, CurateError> {
        let mut outcome = SelectionOutcome::default();
        let mut collector: Option<BestK> = None;
        let mut items = Vec::new();
        for p in partials {
            outcome.missing_score += p.missing;
            outcome.malformed += p.malformed;
            items.extend(p.passed);
            if let Some(c) = p.collector {
                match collector.as_mut() {
                    Some(acc) => acc.merge(c),
                    None => collector = Some(c),
                }
            }
        }
        let Some(first) = self.first_bounded else {
            outcome.records = items.into_iter().map(|(_, r)| r).collect();
            return Ok(outcome);
        };
        let collector = collector.unwrap_or_else(|| self.stages[first].collector());
        self.stages[first].warn_if_short(&collector, &mut outcome.warnings);
        let mut items = collector.into_corpus_order();

        for stage in &self.stages[first + 1..] {
            if stage.spec.is_bounded() {
                let mut c = stage.collector();
                for (pos, record) in items {
                    if let Some(s) = stage.score(&record, self.mode, &mut outcome.missing_score)? {
                        c.offer(stage.entry(s, pos, record));
                    }
                }
                stage.warn_if_short(&c, &mut outcome.warnings);
                items = c.into_corpus_order();
            } else {
                let mut kept = Vec::with_capacity(items.len());
                for (pos, record) in items {
                    if let Some(s) = stage.score(&record, self.mode, &mut outcome.missing_score)? {
                        if stage.passes_threshold(s) {
                            kept.push((pos, record));
                        }
                    }
                }
                items = kept;
            }
        }
        outcome.records = items.into_iter().map(|(_, r)| r).collect();
        Ok(outcome)
    }
}

/// Selects from an in-memory record stream.
pub fn select<I>(records: I, spec: &SelectionSpec, mode: ReadMode) -> Result<SelectionOutcome, CurateError>
where
    I: IntoIterator<Item = CaptionRecord>,
{
    let plan = Plan::new(spec, mode)?;
    let partial = plan.scan(0, records.into_iter().map(Ok))?;
    plan.finish(vec![partial])
}

/// Selects from corpus files (shards), scanning up to `workers` files in
/// parallel. The result does not depend on `workers`.
pub fn select_files<P>(paths: &[P], spec: &SelectionSpec, mode: ReadMode, workers: usize) -> Result<SelectionOutcome, CurateError>
where
    P: AsRef<Path> + Sync,
{
    let plan = Plan::new(spec, mode)?;
    let scan_file = |src: usize| -> Result<Partial, CurateError> {
        let mut reader = CorpusReader::open(&paths[src], mode)?;
        let mut partial = plan.scan(src, reader.by_ref().map(|r| r.map_err(CurateError::from)))?;
        partial.malformed = reader.skipped();
        Ok(partial)
    };
    let partials = run_indexed(paths.len(), workers, scan_file)?;
    plan.finish(partials)
}

/// Runs `job(0..n)` on up to `workers` threads and returns results in index
/// order; the first error (by index) wins.
pub fn run_indexed<T, E, F>(n: usize, workers: usize, job: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, E>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                if i >= n {
                    break;
                }
                let result = job(i);
                slots.lock().expect("worker panicked")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|slot| slot.expect("every index is processed"))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingBudget {
    /// Corpus size before filtering (M).
    pub dataset_size: u64,
    /// Fixed number of training iterations (N).
    pub iterations: u64,
    pub batch_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochPlan {
    pub epochs: f64,
    pub steps: u64,
}

/// With a fixed iteration budget, a smaller selection is simply revisited
/// more often.
pub fn plan_epochs(budget: &TrainingBudget, selected_count: u64) -> Result<EpochPlan, CurateError> {
    if budget.dataset_size < 1 || budget.iterations < 1 || budget.batch_size < 1 {
        return Err(CurateError::Budget("dataset_size, iterations and batch_size must be >= 1".into()));
    }
    if selected_count < 1 {
        return Err(CurateError::Budget("selected_count must be >= 1".into()));
    }
    Ok(EpochPlan {
        epochs: budget.iterations as f64 * budget.batch_size as f64 / selected_count as f64,
        steps: budget.iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpace {
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationPair {
    pub caption: String,
    pub target: f64,
}

/// Sidecar written next to a distillation set so trainers know what the
/// targets mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationMeta {
    pub target_score: String,
    pub target_space: TargetSpace,
    pub count: usize,
    pub skipped: usize,
}

pub fn distillation_meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn distillation_target(record: &CaptionRecord, value: f64, space: TargetSpace) -> Result<f64, CurateError> {
    match space {
        TargetSpace::Probability => Ok(value),
        TargetSpace::Logit if value > 0.0 && value < 1.0 => Ok((value / (1.0 - value)).ln()),
        TargetSpace::Logit => Err(CurateError::TargetOutOfRange {
            id: record.id.clone(),
            value,
        }),
    }
}

/// Writes `{caption, target}` lines plus a `<out>.meta.json` sidecar and
/// returns the number of pairs written.
pub fn emit_distillation_set<I>(
    records: I,
    target_score: &str,
    target_space: TargetSpace,
    out: impl AsRef<Path>,
    mode: ReadMode,
) -> Result<DistillationMeta, CurateError>
where
    I: IntoIterator<Item = CaptionRecord>,
{
    let out = out.as_ref();
    let mut writer = RecordWriter::create(out)?;
    let mut skipped = 0;
    for record in records {
        let Some(value) = record.score(target_score) else {
            if mode == ReadMode::Lenient {
                skipped += 1;
                continue;
            }
            return Err(CurateError::MissingScore {
                id: record.id,
                score: target_score.to_string(),
            });
        };
        let target = distillation_target(&record, value, target_space)?;
        writer.write_value(&DistillationPair {
            caption: record.caption,
            target,
        })?;
    }
    let meta = DistillationMeta {
        target_score: target_score.to_string(),
        target_space,
        count: writer.finish()?,
        skipped,
    };
    let meta_path = distillation_meta_path(out);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&meta_path, text).map_err(|source| CurateError::Io { path: meta_path, source })?;
    Ok(meta)
}

/// Part sizes by largest remainder: floors of `n * f_i`, with leftover units
/// going to the largest fractional parts (lower index first on ties).
pub fn split_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>, CurateError> {
    if fractions.is_empty() {
        return Err(CurateError::Fractions("no fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(f.is_finite() && **f > 0.0)) {
        return Err(CurateError::Fractions(format!("fraction {f} must be positive")));
    }
    let sum: f64 = fractions.iter().sum();
    if sum > 1.0 + 1e-9 {
        return Err(CurateError::Fractions(format!("fractions sum to {sum} > 1")));
    }
    let total = if (sum - 1.0).abs() <= 1e-9 {
        n
    } else {
        ((n as f64 * sum).round() as usize).min(n)
    };
    let quotas: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    if assigned > total {
        return Err(CurateError::Fractions("rounding overflow".into()));
    }
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    let remainder = |i: usize| quotas[i] - sizes[i] as f64;
    order.sort_by(|&i, &j| remainder(j).total_cmp(&remainder(i)).then(i.cmp(&j)));
    for &i in order.iter().cycle().take(total - assigned) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Seeded, disjoint partition of `records`; each part keeps corpus order.
pub fn split_corpus(records: Vec<CaptionRecord>, fractions: &[f64], seed: u64) -> Result<Vec<Vec<CaptionRecord>>, CurateError> {
    let sizes = split_sizes(records.len(), fractions)?;
    let mut perm: Vec<usize> = (0..records.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut part_of = vec![usize::MAX; records.len()];
    let mut offset = 0;
    for (part, &size) in sizes.iter().enumerate() {
        for &idx in &perm[offset..offset + size] {
            part_of[idx] = part;
        }
        offset += size;
    }
    let mut parts: Vec<Vec<CaptionRecord>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (record, part) in records.into_iter().zip(part_of) {
        if part != usize::MAX {
            parts[part].push(record);
        }
    }
    Ok(parts)
}

//! Caption-length standardization of reconstruction similarities.
//!
//! Short captions reconstruct more easily than long ones, so raw similarities
//! carry a length bias. For every caption length the fitted model maps the
//! similarity into logit space, z-scores it against that length's statistics
//! and maps `target_mu + target_sigma * z` back through the inverse logit, so
//! every length ends up with the same Logit-Normal(`target_mu`,
//! `target_sigma`) distribution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CaptionRecord, ReadMode};
use crate::metrics::Similarity;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StandardizeError {
    #[error("cannot fit a standardizer on zero samples")]
    Empty,
    #[error("caption length must be positive")]
    ZeroLength,
    #[error("similarity {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("model has no fitted statistics")]
    Unfitted,
    #[error("record {id:?} has no score {score:?}")]
    MissingScore { id: String, score: String },
    #[error("unsupported model format_version {0}")]
    Version(u32),
    #[error("model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// The logit-space transform applied before standardizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    /// `ln(p / (1 - p))`, inverted by the logistic function.
    #[default]
    Standard,
    /// `ln(1 / (1 - p))`, inverted by `1 - exp(-v)` with negative `v`
    /// clamped to zero.
    PaperLiteral,
}

impl Transform {
    pub fn forward(self, p: f64) -> f64 {
        match self {
            Transform::Standard => (p / (1.0 - p)).ln(),
            Transform::PaperLiteral => -(-p).ln_1p(),
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            Transform::Standard => sigmoid(v),
            Transform::PaperLiteral => -(-v.max(0.0)).exp_m1(),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How caption length is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthUnit {
    /// Whitespace-separated tokens.
    #[default]
    Words,
    /// Unicode scalar values.
    Chars,
}

impl LengthUnit {
    pub fn measure(self, caption: &str) -> usize {
        match self {
            LengthUnit::Words => caption.split_whitespace().count(),
            LengthUnit::Chars => caption.chars().count(),
        }
    }
}

/// Running count/mean/M2 statistics of transformed similarities. Partial
/// statistics from separate shards merge exactly (Chan et al. update).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LengthBucketStats {
    pub count: u64,
    pub mean_t: f64,
    /// Population standard deviation.
    pub std_t: f64,
    #[serde(skip)]
    m2: f64,
}

impl LengthBucketStats {
    pub fn push(&mut self, t: f64) {
        self.count += 1;
        let delta = t - self.mean_t;
        self.mean_t += delta / self.count as f64;
        self.m2 += delta * (t - self.mean_t);
        self.refresh_std();
    }

    pub fn merge(&mut self, other: &LengthBucketStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (n1, n2) = (self.count as f64, other.count as f64);
        let n = n1 + n2;
        let delta = other.mean_t - self.mean_t;
        self.mean_t += delta * n2 / n;
        self.m2 += other.m2_or_derived() + delta * delta * n1 * n2 / n;
        self.count += other.count;
        self.refresh_std();
    }

    fn m2_or_derived(&self) -> f64 {
        if self.m2 == 0.0 && self.std_t > 0.0 {
            // loaded from disk, where only std_t is persisted
            self.std_t * self.std_t * self.count as f64
        } else {
            self.m2
        }
    }

    fn refresh_std(&mut self) {
        self.std_t = if self.count == 0 {
            0.0
        } else {
            (self.m2.max(0.0) / self.count as f64).sqrt()
        };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizerConfig {
    pub transform: Transform,
    pub target_mu: f64,
    pub target_sigma: f64,
    pub clamp_eps: f64,
    pub min_bucket_count: u64,
    pub length_unit: LengthUnit,
}

impl Default for StandardizerConfig {
    fn default() -> Self {
        StandardizerConfig {
            transform: Transform::Standard,
            target_mu: 0.5,
            target_sigma: 1.0,
            clamp_eps: 1e-4,
            min_bucket_count: 20,
            length_unit: LengthUnit::Words,
        }
    }
}

impl StandardizerConfig {
    pub fn validate(&self) -> Result<(), StandardizeError> {
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 0.5) {
            return Err(StandardizeError::Config(format!(
                "clamp_eps {} not in (0, 0.5)",
                self.clamp_eps
            )));
        }
        if !(self.target_sigma > 0.0 && self.target_sigma.is_finite()) {
            return Err(StandardizeError::Config(format!(
                "target_sigma {} must be positive",
                self.target_sigma
            )));
        }
        if !self.target_mu.is_finite() {
            return Err(StandardizeError::Config("target_mu must be finite".into()));
        }
        if self.min_bucket_count < 1 {
            return Err(StandardizeError::Config("min_bucket_count must be >= 1".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.clamp_eps, 1.0 - self.clamp_eps)
    }

    fn to_t(self, p: f64) -> f64 {
        self.transform.forward(self.clamp(p))
    }
}

/// Streaming accumulator for [`fit_standardizer`]; one per shard worker,
/// combined with [`StandardizerFit::merge`].
#[derive(Debug, Clone)]
pub struct StandardizerFit {
    config: StandardizerConfig,
    buckets: BTreeMap<usize, LengthBucketStats>,
}

impl StandardizerFit {
    pub fn new(config: StandardizerConfig) -> Result<Self, StandardizeError> {
        config.validate()?;
        Ok(StandardizerFit {
            config,
            buckets: BTreeMap::new(),
        })
    }

    pub fn push(&mut self, length: usize, p: f64) -> Result<(), StandardizeError> {
        if length == 0 {
            return Err(StandardizeError::ZeroLength);
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(StandardizeError::OutOfRange(p));
        }
        let t = self.config.to_t(p);
        self.buckets.entry(length).or_default().push(t);
        Ok(())
    }

    pub fn merge(&mut self, other: &StandardizerFit) {
        for (len, stats) in &other.buckets {
            self.buckets.entry(*len).or_default().merge(stats);
        }
    }

    pub fn finish(self) -> Result<StandardizationModel, StandardizeError> {
        if self.buckets.is_empty() {
            return Err(StandardizeError::Empty);
        }
        let mut global = LengthBucketStats::default();
        for stats in self.buckets.values() {
            global.merge(stats);
        }
        Ok(StandardizationModel {
            format_version: FORMAT_VERSION,
            config: self.config,
            buckets: self.buckets,
            global,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationModel {
    pub format_version: u32,
    #[serde(flatten)]
    pub config: StandardizerConfig,
    pub buckets: BTreeMap<usize, LengthBucketStats>,
    pub global: LengthBucketStats,
}

pub fn fit_standardizer<I>(samples: I, config: StandardizerConfig) -> Result<StandardizationModel, StandardizeError>
where
    I: IntoIterator<Item = (usize, Similarity)>,
{
    let mut fit = StandardizerFit::new(config)?;
    for (length, p) in samples {
        fit.push(length, p.value())?;
    }
    fit.finish()
}

impl StandardizationModel {
    /// Statistics used for a given length: the length's own bucket when it is
    /// large enough, else the pooled statistics.
    pub fn stats_for(&self, caption_length: usize) -> &LengthBucketStats {
        match self.buckets.get(&caption_length) {
            Some(b) if b.count >= self.config.min_bucket_count => b,
            _ => &self.global,
        }
    }

    pub fn standardize(&self, caption_length: usize, p: f64) -> Result<f64, StandardizeError> {
        if self.global.count == 0 {
            return Err(StandardizeError::Unfitted);
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(StandardizeError::OutOfRange(p));
        }
        let stats = self.stats_for(caption_length);
        let t = self.config.to_t(p);
        let z = if stats.std_t > 0.0 {
            (t - stats.mean_t) / stats.std_t
        } else {
            0.0
        };
        let out = self
            .config
            .transform
            .inverse(self.config.target_mu + self.config.target_sigma * z);
        Ok(match self.config.transform {
            // keep the standard transform's output strictly inside (0, 1)
            Transform::Standard => out.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
            Transform::PaperLiteral => out,
        })
    }

    pub fn standardize_score(&self, caption_length: usize, p: Similarity) -> Result<Similarity, StandardizeError> {
        let out = self.standardize(caption_length, p.value())?;
        Similarity::new(out).map_err(|_| StandardizeError::OutOfRange(out))
    }

    pub fn caption_length(&self, caption: &str) -> usize {
        self.config.length_unit.measure(caption)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, StandardizeError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| StandardizeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let model: StandardizationModel = serde_json::from_str(&text)?;
        if model.format_version != FORMAT_VERSION {
            return Err(StandardizeError::Version(model.format_version));
        }
        model.config.validate()?;
        Ok(model)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), StandardizeError> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|source| StandardizeError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Name of the score written by [`standardize_corpus`].
pub fn standardized_name(score_name: &str) -> String {
    format!("{score_name}_std")
}

/// Adds `<score_name>_std` to every record. Records lacking the score abort
/// the stream in strict mode and are dropped (and counted) in lenient mode.
pub struct StandardizeCorpus<'m, I> {
    records: I,
    model: &'m StandardizationModel,
    score_name: String,
    out_name: String,
    mode: ReadMode,
    skipped: usize,
    failed: bool,
}

pub fn standardize_corpus<'m, I>(
    records: I,
    score_name: &str,
    model: &'m StandardizationModel,
    mode: ReadMode,
) -> StandardizeCorpus<'m, I::IntoIter>
where
    I: IntoIterator<Item = CaptionRecord>,
{
    StandardizeCorpus {
        records: records.into_iter(),
        model,
        score_name: score_name.to_string(),
        out_name: standardized_name(score_name),
        mode,
        skipped: 0,
        failed: false,
    }
}

impl<I> StandardizeCorpus<'_, I> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<I: Iterator<Item = CaptionRecord>> Iterator for StandardizeCorpus<'_, I> {
    type Item = Result<CaptionRecord, StandardizeError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        for mut record in self.records.by_ref() {
            let Some(p) = record.score(&self.score_name) else {
                if self.mode == ReadMode::Lenient {
                    self.skipped += 1;
                    continue;
                }
                self.failed = true;
                return Some(Err(StandardizeError::MissingScore {
                    id: record.id,
                    score: self.score_name.clone(),
                }));
            };
            let length = self.model.caption_length(&record.caption).max(1);
            return Some(match self.model.standardize(length, p) {
                Ok(v) => {
                    record.scores.insert(self.out_name.clone(), v);
                    Ok(record)
                }
                Err(e) => {
                    self.failed = true;
                    Err(e)
                }
            });
        }
        None
    }
}

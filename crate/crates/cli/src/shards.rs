//! Input expansion and shard-parallel record streaming.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use concreteness_core::corpus::{CorpusReader, RecordWriter};
use concreteness_core::curate::run_indexed;
use concreteness_core::{CaptionRecord, CorpusError, ReadMode};

/// Expands a glob into a sorted list of files. A pattern that names an
/// existing file is taken literally.
pub fn expand(pattern: &str) -> Result<Vec<PathBuf>> {
    let literal = Path::new(pattern);
    if literal.is_file() {
        return Ok(vec![literal.to_path_buf()]);
    }
    let mut paths = Vec::new();
    for entry in glob::glob(pattern).with_context(|| format!("bad glob {pattern:?}"))? {
        let path = entry?;
        if path.is_file() {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        bail!("no input files match {pattern:?}");
    }
    paths.sort();
    Ok(paths)
}

/// Record stream over several files in order. The first read error ends the
/// stream and is kept for [`Records::finish`].
pub struct Records {
    paths: std::vec::IntoIter<PathBuf>,
    mode: ReadMode,
    current: Option<CorpusReader<io::BufReader<File>>>,
    error: Option<CorpusError>,
    malformed: usize,
}

impl Records {
    pub fn new(paths: Vec<PathBuf>, mode: ReadMode) -> Self {
        Records {
            paths: paths.into_iter(),
            mode,
            current: None,
            error: None,
            malformed: 0,
        }
    }

    /// Malformed lines skipped so far.
    pub fn malformed(&self) -> usize {
        self.malformed + self.current.as_ref().map_or(0, |r| r.skipped())
    }

    pub fn finish(self) -> Result<usize, CorpusError> {
        let malformed = self.malformed();
        match self.error {
            Some(e) => Err(e),
            None => Ok(malformed),
        }
    }
}

impl Iterator for Records {
    type Item = CaptionRecord;

    fn next(&mut self) -> Option<CaptionRecord> {
        if self.error.is_some() {
            return None;
        }
        loop {
            if let Some(reader) = self.current.as_mut() {
                match reader.next() {
                    Some(Ok(record)) => return Some(record),
                    Some(Err(e)) => {
                        self.error = Some(e);
                        return None;
                    }
                    None => {
                        self.malformed += reader.skipped();
                        self.current = None;
                    }
                }
            }
            let path = self.paths.next()?;
            match CorpusReader::open(&path, self.mode) {
                Ok(reader) => self.current = Some(reader),
                Err(e) => {
                    self.error = Some(e);
                    return None;
                }
            }
        }
    }
}

/// What one shard contributed to a parallel rewrite.
#[derive(Debug, Default, Clone, Copy)]
pub struct ShardTally {
    pub written: usize,
    pub skipped: usize,
    pub malformed: usize,
}

impl std::ops::AddAssign for ShardTally {
    fn add_assign(&mut self, other: ShardTally) {
        self.written += other.written;
        self.skipped += other.skipped;
        self.malformed += other.malformed;
    }
}

pub fn part_path(output: &Path, index: usize) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(format!(".part-{index:05}"));
    PathBuf::from(name)
}

/// Rewrites every input shard through `job` on up to `workers` threads, then
/// concatenates the per-shard outputs into `output` in input order.
pub fn rewrite_shards<F>(paths: &[PathBuf], output: &Path, workers: usize, job: F) -> Result<ShardTally>
where
    F: Fn(usize, &Path, &mut RecordWriter<BufWriter<File>>) -> Result<ShardTally> + Sync,
{
    let parts: Vec<PathBuf> = (0..paths.len()).map(|i| part_path(output, i)).collect();
    let result = run_indexed(paths.len(), workers, |i| -> Result<ShardTally> {
        let mut writer = RecordWriter::create(&parts[i])?;
        let mut tally = job(i, &paths[i], &mut writer)?;
        tally.written = writer.finish()?;
        Ok(tally)
    })
    .and_then(|tallies| {
        let mut out = BufWriter::new(File::create(output).with_context(|| output.display().to_string())?);
        let mut total = ShardTally::default();
        for (part, tally) in parts.iter().zip(tallies) {
            let mut input = File::open(part).with_context(|| part.display().to_string())?;
            io::copy(&mut input, &mut out)?;
            total += tally;
        }
        io::Write::flush(&mut out)?;
        Ok(total)
    });
    for part in &parts {
        let _ = fs::remove_file(part);
    }
    result
}

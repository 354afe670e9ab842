//! Dataset generation, range partitioning, sorting and validation.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::record::{key_hash, key_of, map_shard_name, record_for, shard_range, Key, Record, KEY_LEN, RECORD_LEN};
use crate::app_master::list_shards;
use crate::error::{Error, Result};

const IO_BUF: usize = 1 << 20;

/// Writes rows `[start, end)` to `path`.
pub fn write_rows(path: &Path, seed: u64, start: u64, end: u64) -> Result<()> {
    let f = File::create(path).map_err(Error::path_io(path))?;
    let mut w = BufWriter::with_capacity(IO_BUF, f);
    for row in start..end {
        w.write_all(&record_for(seed, row))?;
    }
    w.into_inner().map_err(|e| e.into_error())?.sync_data()?;
    Ok(())
}

/// Generates `total_rows` records into `num_mappers` shard files in one process.
pub fn teragen(total_rows: u64, num_mappers: u32, seed: u64, output_dir: &Path) -> Result<Vec<PathBuf>> {
    if num_mappers == 0 {
        return Err(Error::InvalidJobSpec("num_mappers must be at least 1".into()));
    }
    if output_dir.exists() {
        return Err(Error::OutputExists(output_dir.into()));
    }
    fs::create_dir_all(output_dir).map_err(Error::path_io(output_dir))?;
    (0..num_mappers)
        .map(|i| {
            let (s, e) = shard_range(total_rows, num_mappers, i);
            let path = output_dir.join(map_shard_name(i));
            write_rows(&path, seed, s, e)?;
            Ok(path)
        })
        .collect()
}

fn check_len(path: &Path) -> Result<u64> {
    let len = fs::metadata(path).map_err(Error::path_io(path))?.len();
    if len % RECORD_LEN as u64 != 0 {
        return Err(Error::MalformedRecord {
            file: path.into(),
            offset: len - len % RECORD_LEN as u64,
        });
    }
    Ok(len / RECORD_LEN as u64)
}

/// Streams the records of one file.
pub struct RecordReader {
    inner: BufReader<File>,
    path: PathBuf,
    remaining: u64,
    offset: u64,
}

impl RecordReader {
    pub fn open(path: &Path) -> Result<RecordReader> {
        let remaining = check_len(path)?;
        let f = File::open(path).map_err(Error::path_io(path))?;
        Ok(RecordReader {
            inner: BufReader::with_capacity(IO_BUF, f),
            path: path.into(),
            remaining,
            offset: 0,
        })
    }

    pub fn len(&self) -> u64 {
        self.remaining
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }

    pub fn next_record(&mut self) -> Result<Option<Record>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        let mut rec = [0u8; RECORD_LEN];
        self.inner.read_exact(&mut rec).map_err(|_| Error::MalformedRecord {
            file: self.path.clone(),
            offset: self.offset,
        })?;
        self.remaining -= 1;
        self.offset += RECORD_LEN as u64;
        Ok(Some(rec))
    }
}

/// Split points for range partitioning across `num_reducers`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPoints {
    pub keys: Vec<Key>,
    /// The sample held fewer distinct keys than reducers, so some split
    /// points repeat and some reducers will receive nothing.
    pub degenerate: bool,
}

impl SplitPoints {
    /// Index of the first split point greater than `key`.
    pub fn partition(&self, key: &[u8]) -> usize {
        partition(&self.keys, key)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.keys.concat()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SplitPoints> {
        if !bytes.len().is_multiple_of(KEY_LEN) {
            return Err(Error::Protocol(format!("split file of {} bytes is not a key multiple", bytes.len())));
        }
        let keys: Vec<Key> = bytes.chunks(KEY_LEN).map(|c| c.try_into().expect("chunk length")).collect();
        Ok(SplitPoints {
            keys,
            degenerate: false,
        })
    }
}

pub fn partition(splits: &[Key], key: &[u8]) -> usize {
    splits.partition_point(|s| s.as_slice() <= key)
}

/// Samples every `stride`-th record across the input (shard order), where
/// the stride spreads `sample_size` picks evenly over all records.
pub fn sample_split_points(input_dir: &Path, num_reducers: u32, sample_size: u64) -> Result<SplitPoints> {
    if num_reducers == 0 {
        return Err(Error::InvalidJobSpec("num_reducers must be at least 1".into()));
    }
    if num_reducers == 1 {
        return Ok(SplitPoints {
            keys: Vec::new(),
            degenerate: false,
        });
    }
    let shards = list_shards(input_dir)?;
    let counts: Vec<u64> = shards.iter().map(|p| check_len(p)).collect::<Result<_>>()?;
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::MissingInput(input_dir.into()));
    }
    let want = sample_size.clamp(1, total);
    let stride = total / want;
    let mut sample: Vec<Key> = Vec::with_capacity(want as usize);
    let mut base = 0u64;
    let mut next = 0u64;
    for (path, &n) in shards.iter().zip(&counts) {
        let mut f = File::open(path).map_err(Error::path_io(path))?;
        while next < base + n && (sample.len() as u64) < want {
            f.seek(SeekFrom::Start((next - base) * RECORD_LEN as u64))?;
            let mut key = [0u8; KEY_LEN];
            f.read_exact(&mut key)?;
            sample.push(key);
            next += stride;
        }
        base += n;
    }
    sample.sort_unstable();
    let s = sample.len();
    let keys: Vec<Key> = (1..num_reducers as usize).map(|j| sample[j * s / num_reducers as usize]).collect();
    let mut distinct = sample.clone();
    distinct.dedup();
    let degenerate = distinct.len() < num_reducers as usize;
    if degenerate {
        warn!(
            "degenerate partition: {} distinct sampled key(s) for {num_reducers} reducers",
            distinct.len()
        );
    }
    Ok(SplitPoints { keys, degenerate })
}

/// Sorts the records of `inputs` (read in order) by key, keeping input
/// order among equal keys. Data beyond `budget_bytes` is spilled as sorted
/// runs under `spill_dir` and merged. Returns the number of records written.
pub fn sort_records<W: Write>(
    inputs: &[PathBuf],
    budget_bytes: usize,
    spill_dir: &Path,
    out: W,
    mut on_open: impl FnMut(&Path),
) -> Result<u64> {
    let cap = (budget_bytes / RECORD_LEN).max(1);
    let mut buf: Vec<Record> = Vec::new();
    let mut runs: Vec<PathBuf> = Vec::new();
    for path in inputs {
        on_open(path);
        let mut r = RecordReader::open(path)?;
        while let Some(rec) = r.next_record()? {
            buf.push(rec);
            if buf.len() >= cap {
                runs.push(spill(&mut buf, spill_dir, runs.len())?);
            }
        }
    }
    let mut w = BufWriter::with_capacity(IO_BUF, out);
    let written;
    if runs.is_empty() {
        buf.sort_by(|a, b| key_of(a).cmp(key_of(b)));
        for rec in &buf {
            w.write_all(rec)?;
        }
        written = buf.len() as u64;
    } else {
        if !buf.is_empty() {
            runs.push(spill(&mut buf, spill_dir, runs.len())?);
        }
        written = merge_runs(&runs, &mut w)?;
        for run in &runs {
            let _ = fs::remove_file(run);
        }
    }
    w.flush()?;
    Ok(written)
}

fn spill(buf: &mut Vec<Record>, dir: &Path, n: usize) -> Result<PathBuf> {
    buf.sort_by(|a, b| key_of(a).cmp(key_of(b)));
    fs::create_dir_all(dir).map_err(Error::path_io(dir))?;
    let path = dir.join(format!("spill-{n:04}"));
    let mut w = BufWriter::with_capacity(IO_BUF, File::create(&path).map_err(Error::path_io(&path))?);
    for rec in buf.iter() {
        w.write_all(rec)?;
    }
    w.flush()?;
    buf.clear();
    Ok(path)
}

fn merge_runs<W: Write>(runs: &[PathBuf], w: &mut W) -> Result<u64> {
    let mut readers: Vec<RecordReader> = runs.iter().map(|p| RecordReader::open(p)).collect::<Result<_>>()?;
    let mut heads: Vec<Option<Record>> = Vec::with_capacity(readers.len());
    let mut heap = BinaryHeap::new();
    for (i, r) in readers.iter_mut().enumerate() {
        let head = r.next_record()?;
        if let Some(rec) = &head {
            heap.push(Reverse((key_array(rec), i)));
        }
        heads.push(head);
    }
    let mut n = 0;
    // equal keys pop in run order, and runs are in input order
    while let Some(Reverse((_, i))) = heap.pop() {
        let rec = heads[i].take().expect("head present while queued");
        w.write_all(&rec)?;
        n += 1;
        if let Some(next) = readers[i].next_record()? {
            heap.push(Reverse((key_array(&next), i)));
            heads[i] = Some(next);
        }
    }
    Ok(n)
}

fn key_array(rec: &Record) -> Key {
    rec[..KEY_LEN].try_into().expect("key length")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub sorted: bool,
    pub rows: u64,
    pub key_checksum: u64,
    pub partitions: usize,
    /// First out-of-order record, as (file, byte offset).
    pub first_violation: Option<(PathBuf, u64)>,
}

/// Checks order within and across partitions (files in index order) and
/// computes the order-independent key checksum.
pub fn teravalidate(output_dir: &Path) -> Result<ValidationReport> {
    let files = list_shards(output_dir)?;
    let mut report = ValidationReport {
        sorted: true,
        rows: 0,
        key_checksum: 0,
        partitions: files.len(),
        first_violation: None,
    };
    let mut prev: Option<Key> = None;
    for path in &files {
        let mut r = RecordReader::open(path)?;
        let mut offset = 0u64;
        while let Some(rec) = r.next_record()? {
            let key = key_array(&rec);
            if let Some(p) = prev {
                if key < p && report.first_violation.is_none() {
                    report.sorted = false;
                    report.first_violation = Some((path.clone(), offset));
                }
            }
            prev = Some(key);
            report.rows += 1;
            report.key_checksum = report.key_checksum.wrapping_add(key_hash(&key));
            offset += RECORD_LEN as u64;
        }
    }
    Ok(report)
}

/// Checksum and row count of a generated dataset, ignoring order.
pub fn dataset_checksum(dir: &Path) -> Result<(u64, u64)> {
    let r = teravalidate(dir)?;
    Ok((r.rows, r.key_checksum))
}

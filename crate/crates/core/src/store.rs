//! Append-only time-series store: one newline-delimited JSON file per
//! series, an in-memory `(ts, offset, len)` index and a periodic index
//! checkpoint.
//!
//! Each record is written with a single `write_all` of a complete line.
//! A line without its trailing newline (a torn write) is invisible to
//! readers and is truncated away when the writer reopens the series.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::{KpiSample, LabeledSample, LoopEvent, Prediction, TruthRecord};

pub const RAW: &str = "raw";
pub const TRUTH: &str = "truth";
pub const LABELED: &str = "labeled";
pub const PREDICTIONS: &str = "predictions";
pub const EVENTS: &str = "events";

/// Appends between automatic index checkpoints.
const CHECKPOINT_EVERY: usize = 4096;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("series {series}: timestamp {ts} is older than last record {last}")]
    OutOfOrder { series: String, ts: u64, last: u64 },
    #[error("unknown series {0}")]
    UnknownSeries(String),
    #[error("invalid series name {0:?}")]
    InvalidName(String),
    #[error("invalid range [{0}, {1})")]
    InvalidRange(u64, u64),
    #[error("series {series}: corrupt record at byte {offset}: {msg}")]
    Corrupt { series: String, offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait Timestamped {
    fn timestamp_ms(&self) -> u64;
}

impl Timestamped for KpiSample {
    fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }
}

impl Timestamped for LabeledSample {
    fn timestamp_ms(&self) -> u64 {
        self.sample.timestamp_ms
    }
}

impl Timestamped for TruthRecord {
    fn timestamp_ms(&self) -> u64 {
        self.ts
    }
}

impl Timestamped for LoopEvent {
    fn timestamp_ms(&self) -> u64 {
        self.timestamp_ms
    }
}

impl Timestamped for Prediction {
    fn timestamp_ms(&self) -> u64 {
        self.ts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    ts: u64,
    offset: u64,
    len: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    bytes: u64,
    entries: Vec<Entry>,
}

#[derive(Deserialize)]
struct TsOnly {
    ts: u64,
}

#[derive(Debug)]
struct SeriesLog {
    data_path: PathBuf,
    index_path: PathBuf,
    index: Vec<Entry>,
    /// Bytes covered by `index`.
    end: u64,
    writer: Option<File>,
    since_checkpoint: usize,
}

impl SeriesLog {
    fn paths(root: &Path, name: &str) -> (PathBuf, PathBuf) {
        (root.join(format!("{name}.ndjson")), root.join(format!("{name}.idx")))
    }

    fn open(root: &Path, name: &str) -> Result<Self, StoreError> {
        let (data_path, index_path) = Self::paths(root, name);
        let mut log = SeriesLog { data_path, index_path, index: Vec::new(), end: 0, writer: None, since_checkpoint: 0 };
        log.load_checkpoint();
        log.scan(name)?;
        Ok(log)
    }

    fn load_checkpoint(&mut self) {
        let Ok(bytes) = fs::read(&self.index_path) else { return };
        let Ok(cp) = serde_json::from_slice::<Checkpoint>(&bytes) else { return };
        let file_len = fs::metadata(&self.data_path).map(|m| m.len()).unwrap_or(0);
        let consistent = cp.bytes <= file_len
            && cp.entries.last().map_or(cp.bytes == 0, |e| e.offset + e.len as u64 + 1 == cp.bytes);
        if consistent {
            self.index = cp.entries;
            self.end = cp.bytes;
        }
    }

    /// Indexes complete lines past `end`.
    fn scan(&mut self, name: &str) -> Result<(), StoreError> {
        let mut f = match File::open(&self.data_path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        f.seek(SeekFrom::Start(self.end))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        let mut pos = 0usize;
        while let Some(nl) = buf[pos..].iter().position(|&b| b == b'\n') {
            let line = &buf[pos..pos + nl];
            let offset = self.end + pos as u64;
            let ts = serde_json::from_slice::<TsOnly>(line)
                .map_err(|e| StoreError::Corrupt { series: name.into(), offset, msg: e.to_string() })?
                .ts;
            self.index.push(Entry { ts, offset, len: nl as u32 });
            pos += nl + 1;
        }
        self.end += pos as u64;
        Ok(())
    }

    fn writer(&mut self) -> Result<&mut File, StoreError> {
        if self.writer.is_none() {
            let f = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(&self.data_path)?;
            // Drop any torn tail so the next record starts on a fresh line.
            if f.metadata()?.len() > self.end {
                f.set_len(self.end)?;
            }
            let mut f = f;
            f.seek(SeekFrom::Start(self.end))?;
            self.writer = Some(f);
        }
        Ok(self.writer.as_mut().unwrap())
    }

    fn last_ts(&self) -> Option<u64> {
        self.index.last().map(|e| e.ts)
    }

    fn range(&self, t0: u64, t1: u64) -> std::ops::Range<usize> {
        let lo = self.index.partition_point(|e| e.ts < t0);
        let hi = self.index.partition_point(|e| e.ts < t1);
        lo..hi.max(lo)
    }

    fn checkpoint(&mut self) -> Result<(), StoreError> {
        let cp = Checkpoint { bytes: self.end, entries: self.index.clone() };
        let tmp = self.index_path.with_extension("idx.tmp");
        fs::write(&tmp, serde_json::to_vec(&cp).expect("checkpoint serializes"))?;
        fs::rename(&tmp, &self.index_path)?;
        self.since_checkpoint = 0;
        Ok(())
    }
}

/// Handle on a store directory. One writer per series; readers in other
/// processes call [`Store::refresh`] to pick up new records.
#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    series: BTreeMap<String, SeriesLog>,
}

fn check_name(name: &str) -> Result<(), StoreError> {
    let ok = !name.is_empty()
        && name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidName(name.into()))
    }
}

impl Store {
    /// Opens or creates a store, indexing every existing series.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut store = Store { root, series: BTreeMap::new() };
        store.discover()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn discover(&mut self) -> Result<(), StoreError> {
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("ndjson") {
                continue;
            }
            let Some(name) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else { continue };
            if check_name(&name).is_err() || self.series.contains_key(&name) {
                continue;
            }
            let log = SeriesLog::open(&self.root, &name)?;
            self.series.insert(name, log);
        }
        Ok(())
    }

    /// Picks up series and records written by other handles.
    pub fn refresh(&mut self) -> Result<(), StoreError> {
        for (name, log) in self.series.iter_mut() {
            if log.writer.is_none() {
                log.scan(name)?;
            }
        }
        self.discover()
    }

    /// Creates an empty series if it does not exist yet.
    pub fn create_series(&mut self, name: &str) -> Result<(), StoreError> {
        check_name(name)?;
        if !self.series.contains_key(name) {
            let mut log = SeriesLog::open(&self.root, name)?;
            log.writer()?;
            self.series.insert(name.to_owned(), log);
        }
        Ok(())
    }

    pub fn series_names(&self) -> impl Iterator<Item = &str> {
        self.series.keys().map(String::as_str)
    }

    fn log(&self, name: &str) -> Result<&SeriesLog, StoreError> {
        self.series.get(name).ok_or_else(|| StoreError::UnknownSeries(name.into()))
    }

    /// Appends one record, creating the series on first use. The record is
    /// visible to queries on this handle as soon as this returns.
    pub fn append<T: Serialize + Timestamped>(&mut self, name: &str, record: &T) -> Result<(), StoreError> {
        self.append_all(name, std::slice::from_ref(record))
    }

    /// Appends records in one write. Fails without writing anything if the
    /// batch is out of order.
    pub fn append_all<T: Serialize + Timestamped>(&mut self, name: &str, records: &[T]) -> Result<(), StoreError> {
        self.create_series(name)?;
        let log = self.series.get_mut(name).unwrap();
        let mut last = log.last_ts();
        let mut buf = Vec::new();
        let mut entries = Vec::with_capacity(records.len());
        for r in records {
            let ts = r.timestamp_ms();
            if let Some(l) = last.filter(|l| ts < *l) {
                return Err(StoreError::OutOfOrder { series: name.into(), ts, last: l });
            }
            last = Some(ts);
            let start = buf.len();
            serde_json::to_writer(&mut buf, r).expect("records serialize");
            entries.push(Entry { ts, offset: log.end + start as u64, len: (buf.len() - start) as u32 });
            buf.push(b'\n');
        }
        log.writer()?.write_all(&buf)?;
        log.end += buf.len() as u64;
        log.since_checkpoint += entries.len();
        log.index.extend(entries);
        if log.since_checkpoint >= CHECKPOINT_EVERY {
            log.checkpoint()?;
        }
        Ok(())
    }

    /// Records with `t0 <= ts < t1`, in append order.
    pub fn query_range<T: DeserializeOwned>(&self, name: &str, t0: u64, t1: u64) -> Result<Vec<T>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange(t0, t1));
        }
        let log = self.log(name)?;
        self.read_entries(name, log, log.range(t0, t1))
    }

    /// Every record in the series.
    pub fn query_all<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, StoreError> {
        let log = self.log(name)?;
        self.read_entries(name, log, 0..log.index.len())
    }

    /// The last `n` records.
    pub fn tail<T: DeserializeOwned>(&self, name: &str, n: usize) -> Result<Vec<T>, StoreError> {
        let log = self.log(name)?;
        let len = log.index.len();
        self.read_entries(name, log, len.saturating_sub(n)..len)
    }

    fn read_entries<T: DeserializeOwned>(
        &self,
        name: &str,
        log: &SeriesLog,
        range: std::ops::Range<usize>,
    ) -> Result<Vec<T>, StoreError> {
        let entries = &log.index[range];
        let (Some(first), Some(last)) = (entries.first(), entries.last()) else { return Ok(Vec::new()) };
        let span = (last.offset + last.len as u64 - first.offset) as usize;
        let mut buf = vec![0u8; span];
        let mut f = File::open(&log.data_path)?;
        f.seek(SeekFrom::Start(first.offset))?;
        f.read_exact(&mut buf)?;
        entries
            .iter()
            .map(|e| {
                let s = (e.offset - first.offset) as usize;
                serde_json::from_slice(&buf[s..s + e.len as usize]).map_err(|err| StoreError::Corrupt {
                    series: name.into(),
                    offset: e.offset,
                    msg: err.to_string(),
                })
            })
            .collect()
    }

    /// Number of records with `ts >= t0`.
    pub fn count_since(&self, name: &str, t0: u64) -> Result<usize, StoreError> {
        let log = self.log(name)?;
        Ok(log.index.len() - log.index.partition_point(|e| e.ts < t0))
    }

    pub fn len(&self, name: &str) -> Result<usize, StoreError> {
        Ok(self.log(name)?.index.len())
    }

    pub fn last_timestamp(&self, name: &str) -> Result<Option<u64>, StoreError> {
        Ok(self.log(name)?.last_ts())
    }

    /// Writes every index checkpoint and syncs data files to disk.
    pub fn flush(&mut self) -> Result<(), StoreError> {
        for log in self.series.values_mut() {
            if let Some(w) = log.writer.as_mut() {
                w.sync_data()?;
                log.checkpoint()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{Label, LoopEventKind};

    fn sample(ts: u64) -> KpiSample {
        KpiSample { timestamp_ms: ts, ul_snr: 20.0 + (ts % 7) as f64, ul_mcs: 19, ul_bitrate: 15.0, ul_bler: 0.02 }
    }

    #[test]
    fn read_your_write_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        s.append(RAW, &sample(100)).unwrap();
        assert_eq!(s.query_range::<KpiSample>(RAW, 100, 101).unwrap(), vec![sample(100)]);
        assert!(matches!(s.append(RAW, &sample(99)), Err(StoreError::OutOfOrder { ts: 99, last: 100, .. })));
        s.append(RAW, &sample(100)).unwrap();
        assert_eq!(s.len(RAW).unwrap(), 2);
    }

    #[test]
    fn half_open_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        s.append_all(RAW, &(0..10).map(|i| sample(i * 100)).collect::<Vec<_>>()).unwrap();
        assert!(s.query_range::<KpiSample>(RAW, 300, 300).unwrap().is_empty());
        let got: Vec<KpiSample> = s.query_range(RAW, 200, 500).unwrap();
        assert_eq!(got.iter().map(|r| r.timestamp_ms).collect::<Vec<_>>(), vec![200, 300, 400]);
        assert_eq!(s.query_range::<KpiSample>(RAW, 0, u64::MAX).unwrap().len(), 10);
        assert!(matches!(s.query_range::<KpiSample>(RAW, 5, 1), Err(StoreError::InvalidRange(5, 1))));
        assert!(matches!(s.query_range::<KpiSample>("nope", 0, 1), Err(StoreError::UnknownSeries(_))));
        assert!(matches!(s.count_since("nope", 0), Err(StoreError::UnknownSeries(_))));
    }

    #[test]
    fn count_since_tracks_appends() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        s.create_series(LABELED).unwrap();
        assert_eq!(s.count_since(LABELED, 0).unwrap(), 0);
        let mut prev = 0;
        for i in 0..50u64 {
            s.append(RAW, &sample(i * 10)).unwrap();
            let c = s.count_since(RAW, 0).unwrap();
            assert_eq!(c, i as usize + 1);
            assert!(c >= prev);
            prev = c;
        }
        assert_eq!(s.count_since(RAW, 250).unwrap(), 25);
    }

    #[test]
    fn torn_tail_is_ignored_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.append(RAW, &sample(1)).unwrap();
            s.append(RAW, &sample(2)).unwrap();
        }
        let path = dir.path().join("raw.ndjson");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"ts":3,"ul_snr":2"#).unwrap();
        drop(f);

        let mut s = Store::open(dir.path()).unwrap();
        assert_eq!(s.len(RAW).unwrap(), 2);
        s.append(RAW, &sample(4)).unwrap();
        let all: Vec<KpiSample> = s.query_all(RAW).unwrap();
        assert_eq!(all.iter().map(|r| r.timestamp_ms).collect::<Vec<_>>(), vec![1, 2, 4]);
        drop(s);
        assert_eq!(Store::open(dir.path()).unwrap().len(RAW).unwrap(), 3);
    }

    #[test]
    fn stale_checkpoint_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Store::open(dir.path()).unwrap();
            s.append_all(RAW, &(0..20).map(sample).collect::<Vec<_>>()).unwrap();
            s.flush().unwrap();
        }
        // Replace the data file with a shorter one behind the checkpoint's back.
        let mut s = Store::open(dir.path()).unwrap();
        assert_eq!(s.len(RAW).unwrap(), 20);
        drop(s);
        fs::write(dir.path().join("raw.ndjson"), b"{\"ts\":7}\n").unwrap();
        s = Store::open(dir.path()).unwrap();
        assert_eq!(s.len(RAW).unwrap(), 1);
    }

    #[test]
    fn reader_handle_sees_new_records_after_refresh() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = Store::open(dir.path()).unwrap();
        w.append(RAW, &sample(1)).unwrap();
        let mut r = Store::open(dir.path()).unwrap();
        w.append(RAW, &sample(2)).unwrap();
        w.append(EVENTS, &LoopEvent::new(2, LoopEventKind::RetrainStarted, None, "")).unwrap();
        assert_eq!(r.len(RAW).unwrap(), 1);
        r.refresh().unwrap();
        assert_eq!(r.len(RAW).unwrap(), 2);
        assert_eq!(r.len(EVENTS).unwrap(), 1);
    }

    #[test]
    fn typed_series_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path()).unwrap();
        let p = Prediction { ts: 5, label: Label::Interference, p1: 0.93, model_version: 2 };
        s.append(PREDICTIONS, &p).unwrap();
        s.append(TRUTH, &TruthRecord { ts: 5, label: Label::NoInterference }).unwrap();
        assert_eq!(s.tail::<Prediction>(PREDICTIONS, 3).unwrap(), vec![p]);
        assert!(matches!(s.append("Bad Name", &p), Err(StoreError::InvalidName(_))));
        assert_eq!(s.series_names().collect::<Vec<_>>(), vec![PREDICTIONS, TRUTH]);
    }
}

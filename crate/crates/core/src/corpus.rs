//! On-disk corpus of historical examples.
//!
//! Layout (all little-endian):
//!
//! ```text
//! header   32 bytes   "NRAC", u32 version, u64 record_count,
//!                     u32 feature_dim, u32 key_dim, u32 label_cardinality, u32 flags
//! keys     K·d f32    one key per record, record order
//! times    K   f64    one timestamp per record, record order
//! records  K × (f32[D] features, u32 label)
//! ```
//!
//! Records are sorted by timestamp, so time masks are index ranges. The key
//! and timestamp sidecar comes first so the resident [`KeyCache`] loads with
//! one contiguous read; features stay on disk and are fetched per index.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memprobe::{MemTag, MemoryProbe, Reservation, TrackedVec};

pub const MAGIC: [u8; 4] = *b"NRAC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_SIZE: u64 = 32;
pub const FLAG_LABEL_ONLY: u32 = 1;

/// One historical example.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub features: Vec<f32>,
    pub label: u32,
    pub timestamp: f64,
    pub key: Vec<f32>,
}

/// Dimensions shared by every record of a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    pub feature_dim: usize,
    pub key_dim: usize,
    pub label_cardinality: usize,
    /// Retrieval feeds only labels to the classifier.
    pub label_only: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusFileHeader {
    pub version: u32,
    pub record_count: u64,
    pub feature_dim: u32,
    pub key_dim: u32,
    pub label_cardinality: u32,
    pub flags: u32,
}

impl CorpusFileHeader {
    pub fn label_only(&self) -> bool {
        self.flags & FLAG_LABEL_ONLY != 0
    }

    /// Bytes of one feature + label record.
    pub fn record_size(&self) -> u64 {
        4 * u64::from(self.feature_dim) + 4
    }

    pub fn keys_offset(&self) -> u64 {
        HEADER_SIZE
    }

    pub fn times_offset(&self) -> u64 {
        HEADER_SIZE + self.record_count * 4 * u64::from(self.key_dim)
    }

    pub fn records_offset(&self) -> u64 {
        self.times_offset() + self.record_count * 8
    }

    pub fn file_len(&self) -> u64 {
        self.records_offset() + self.record_count * self.record_size()
    }

    fn to_bytes(self) -> [u8; HEADER_SIZE as usize] {
        let mut b = [0u8; HEADER_SIZE as usize];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..16].copy_from_slice(&self.record_count.to_le_bytes());
        b[16..20].copy_from_slice(&self.feature_dim.to_le_bytes());
        b[20..24].copy_from_slice(&self.key_dim.to_le_bytes());
        b[24..28].copy_from_slice(&self.label_cardinality.to_le_bytes());
        b[28..32].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    fn from_bytes(b: &[u8; HEADER_SIZE as usize], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCorpus {
            path: path.to_path_buf(),
            reason,
        };
        if b[0..4] != MAGIC {
            return Err(corrupt(format!("bad magic {:02x?}", &b[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
        let header = Self {
            version: u32_at(4),
            record_count: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
            feature_dim: u32_at(16),
            key_dim: u32_at(20),
            label_cardinality: u32_at(24),
            flags: u32_at(28),
        };
        if header.version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {}", header.version)));
        }
        if header.key_dim == 0 || header.label_cardinality == 0 {
            return Err(corrupt("key_dim and label_cardinality must be positive".into()));
        }
        Ok(header)
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::StorageFull {
            Error::DiskFull {
                path: path.to_path_buf(),
            }
        } else {
            Error::Io(e)
        }
    }
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn f32s_from(bytes: &[u8], out: &mut [f32]) {
    for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *o = f32::from_le_bytes(c.try_into().expect("4 bytes"));
    }
}

fn spill_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".spill");
    path.with_file_name(name)
}

/// Writes `records` to `path` in timestamp order.
///
/// Features are spooled to a temporary file next to `path` while keys,
/// timestamps and labels are collected, then the final file is assembled
/// sidecar-first.
pub fn build_corpus<I>(records: I, spec: CorpusSpec, path: &Path) -> Result<CorpusFileHeader>
where
    I: IntoIterator<Item = CorpusRecord>,
{
    if spec.key_dim == 0 || spec.label_cardinality == 0 {
        return Err(Error::invalid("corpus key_dim and label_cardinality must be positive"));
    }
    let ioe = io_err(path);
    let spill = spill_path(path);
    let result = (|| {
        let mut spill_out = BufWriter::with_capacity(1 << 20, File::create(&spill).map_err(&ioe)?);
        let mut keys: Vec<f32> = Vec::new();
        let mut times: Vec<f64> = Vec::new();
        let mut labels: Vec<u32> = Vec::new();
        let mut buf = Vec::with_capacity(4 * spec.feature_dim);
        for (i, rec) in records.into_iter().enumerate() {
            let bad = |reason: String| Error::InconsistentRecord {
                index: i as u64,
                reason,
            };
            if rec.features.len() != spec.feature_dim {
                return Err(bad(format!(
                    "feature dimension {} differs from {}",
                    rec.features.len(),
                    spec.feature_dim
                )));
            }
            if rec.key.len() != spec.key_dim {
                return Err(bad(format!("key dimension {} differs from {}", rec.key.len(), spec.key_dim)));
            }
            if rec.label as usize >= spec.label_cardinality {
                return Err(bad(format!(
                    "label {} outside cardinality {}",
                    rec.label, spec.label_cardinality
                )));
            }
            if !rec.timestamp.is_finite() {
                return Err(bad(format!("timestamp {} is not finite", rec.timestamp)));
            }
            buf.clear();
            put_f32s(&mut buf, &rec.features);
            spill_out.write_all(&buf).map_err(&ioe)?;
            keys.extend_from_slice(&rec.key);
            times.push(rec.timestamp);
            labels.push(rec.label);
        }
        spill_out.flush().map_err(&ioe)?;
        drop(spill_out);

        let n = times.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));

        let header = CorpusFileHeader {
            version: FORMAT_VERSION,
            record_count: n as u64,
            feature_dim: spec.feature_dim as u32,
            key_dim: spec.key_dim as u32,
            label_cardinality: spec.label_cardinality as u32,
            flags: if spec.label_only { FLAG_LABEL_ONLY } else { 0 },
        };
        let mut out = BufWriter::with_capacity(1 << 20, File::create(path).map_err(&ioe)?);
        out.write_all(&header.to_bytes()).map_err(&ioe)?;
        let d = spec.key_dim;
        let mut chunk = Vec::with_capacity(1 << 16);
        for &i in &order {
            chunk.clear();
            put_f32s(&mut chunk, &keys[i * d..(i + 1) * d]);
            out.write_all(&chunk).map_err(&ioe)?;
        }
        drop(keys);
        for &i in &order {
            out.write_all(&times[i].to_le_bytes()).map_err(&ioe)?;
        }
        let spill_in = File::open(&spill).map_err(&ioe)?;
        let width = 4 * spec.feature_dim;
        let mut feat = vec![0u8; width];
        for &i in &order {
            spill_in
                .read_exact_at(&mut feat, (i * width) as u64)
                .map_err(&ioe)?;
            out.write_all(&feat).map_err(&ioe)?;
            out.write_all(&labels[i].to_le_bytes()).map_err(&ioe)?;
        }
        out.flush().map_err(&ioe)?;
        let file = out.into_inner().map_err(|e| ioe(e.into_error()))?;
        let len = file.metadata()?.len();
        if len != header.file_len() {
            return Err(Error::CorruptCorpus {
                path: path.to_path_buf(),
                reason: format!("wrote {len} bytes, layout requires {}", header.file_len()),
            });
        }
        Ok(header)
    })();
    let _ = fs::remove_file(&spill);
    if result.is_err() {
        let _ = fs::remove_file(path);
    }
    result
}

/// Read-only handle onto a corpus file. Safe to share across threads.
#[derive(Debug)]
pub struct CorpusReader {
    file: File,
    header: CorpusFileHeader,
    path: PathBuf,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new().read(true).open(path)?;
        let mut raw = [0u8; HEADER_SIZE as usize];
        file.read_exact(&mut raw).map_err(|_| Error::CorruptCorpus {
            path: path.to_path_buf(),
            reason: "file shorter than header".into(),
        })?;
        let header = CorpusFileHeader::from_bytes(&raw, path)?;
        let len = file.seek(SeekFrom::End(0))?;
        if len != header.file_len() {
            return Err(Error::CorruptCorpus {
                path: path.to_path_buf(),
                reason: format!("file has {len} bytes, header implies {}", header.file_len()),
            });
        }
        Ok(Self {
            file,
            header,
            path: path.to_path_buf(),
        })
    }

    pub fn header(&self) -> &CorpusFileHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.header.record_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.header.record_count == 0
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(())
    }

    /// Reads the features and label of record `index` into `features`.
    pub fn read_payload(&self, index: usize, features: &mut [f32]) -> Result<u32> {
        self.check_index(index)?;
        let d = self.header.feature_dim as usize;
        debug_assert_eq!(features.len(), d);
        let mut raw = vec![0u8; 4 * d + 4];
        let offset = self.header.records_offset() + index as u64 * self.header.record_size();
        self.file.read_exact_at(&mut raw, offset)?;
        f32s_from(&raw[..4 * d], features);
        Ok(u32::from_le_bytes(raw[4 * d..].try_into().expect("4 bytes")))
    }

    /// Loads feature + label payloads for `indices` into a buffer charged to
    /// [`MemTag::Retrieved`]; features are laid out `[len(indices), D]`.
    pub fn fetch_payloads(&self, indices: &[usize], probe: &MemoryProbe) -> Result<FetchedPayloads> {
        let d = self.header.feature_dim as usize;
        let reservation = probe.reserve(MemTag::Retrieved, indices.len() * (4 * d + 4))?;
        let mut features = vec![0.0f32; indices.len() * d];
        let mut labels = Vec::with_capacity(indices.len());
        for (slot, &index) in indices.iter().enumerate() {
            labels.push(self.read_payload(index, &mut features[slot * d..(slot + 1) * d])?);
        }
        Ok(FetchedPayloads {
            features,
            labels,
            feature_dim: d,
            _reservation: reservation,
        })
    }

    fn read_key_and_time(&self, index: usize) -> Result<(Vec<f32>, f64)> {
        let d = self.header.key_dim as usize;
        let mut raw = vec![0u8; 4 * d];
        self.file
            .read_exact_at(&mut raw, self.header.keys_offset() + (index * 4 * d) as u64)?;
        let mut key = vec![0.0; d];
        f32s_from(&raw, &mut key);
        let mut t = [0u8; 8];
        self.file
            .read_exact_at(&mut t, self.header.times_offset() + index as u64 * 8)?;
        Ok((key, f64::from_le_bytes(t)))
    }
}

/// Payloads fetched for one retrieval pass; dropping releases the charge.
#[derive(Debug)]
pub struct FetchedPayloads {
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub feature_dim: usize,
    _reservation: Reservation,
}

/// Full records returned by [`fetch_records`], charged to
/// [`MemTag::Retrieved`] while alive.
#[derive(Debug)]
pub struct FetchedRecords {
    records: Vec<CorpusRecord>,
    _reservation: Reservation,
}

impl std::ops::Deref for FetchedRecords {
    type Target = [CorpusRecord];
    fn deref(&self) -> &[CorpusRecord] {
        &self.records
    }
}

impl FetchedRecords {
    pub fn into_vec(self) -> Vec<CorpusRecord> {
        self.records
    }
}

/// Reads exactly the requested records, in request order; duplicates are
/// returned as many times as requested.
pub fn fetch_records(reader: &CorpusReader, indices: &[usize], probe: &MemoryProbe) -> Result<FetchedRecords> {
    for &i in indices {
        reader.check_index(i)?;
    }
    let h = reader.header();
    let per = 4 * h.feature_dim as usize + 4 * h.key_dim as usize + 12;
    let reservation = probe.reserve(MemTag::Retrieved, indices.len() * per)?;
    let mut records = Vec::with_capacity(indices.len());
    for &i in indices {
        let mut features = vec![0.0; h.feature_dim as usize];
        let label = reader.read_payload(i, &mut features)?;
        let (key, timestamp) = reader.read_key_and_time(i)?;
        records.push(CorpusRecord {
            features,
            label,
            timestamp,
            key,
        });
    }
    Ok(FetchedRecords {
        records,
        _reservation: reservation,
    })
}

/// Resident keys and timestamps of a corpus, charged to [`MemTag::Keys`].
#[derive(Debug)]
pub struct KeyCache {
    keys: TrackedVec<f32>,
    timestamps: TrackedVec<f64>,
    key_dim: usize,
}

impl KeyCache {
    /// Builds a cache from in-memory rows; timestamps must be sorted.
    pub fn from_parts(keys: &[f32], timestamps: &[f64], key_dim: usize, probe: &MemoryProbe) -> Result<Self> {
        if key_dim == 0 || keys.len() != timestamps.len() * key_dim {
            return Err(Error::ShapeMismatch {
                op: "key cache",
                left: vec![timestamps.len(), key_dim],
                right: vec![keys.len()],
            });
        }
        if timestamps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("key cache timestamps must be sorted"));
        }
        let mut k = TrackedVec::filled(probe, MemTag::Keys, keys.len(), 0.0f32)?;
        k.copy_from_slice(keys);
        let mut t = TrackedVec::filled(probe, MemTag::Keys, timestamps.len(), 0.0f64)?;
        t.copy_from_slice(timestamps);
        Ok(Self {
            keys: k,
            timestamps: t,
            key_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn key(&self, n: usize) -> &[f32] {
        &self.keys[n * self.key_dim..(n + 1) * self.key_dim]
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Bytes of key and timestamp payload held resident.
    pub fn resident_bytes(&self) -> usize {
        self.keys.len() * 4 + self.timestamps.len() * 8
    }
}

/// Reads the key + timestamp sidecar; features are not touched.
pub fn load_key_cache(path: &Path, probe: &MemoryProbe) -> Result<KeyCache> {
    let reader = CorpusReader::open(path)?;
    let h = *reader.header();
    let n = h.record_count as usize;
    let d = h.key_dim as usize;
    let mut keys = TrackedVec::filled(probe, MemTag::Keys, n * d, 0.0f32)?;
    let mut times = TrackedVec::filled(probe, MemTag::Keys, n, 0.0f64)?;
    const CHUNK: usize = 1 << 20;
    let mut raw = vec![0u8; CHUNK];
    let mut offset = h.keys_offset();
    for dst in keys.chunks_mut(CHUNK / 4) {
        let bytes = &mut raw[..dst.len() * 4];
        reader.file.read_exact_at(bytes, offset)?;
        f32s_from(bytes, dst);
        offset += bytes.len() as u64;
    }
    for dst in times.chunks_mut(CHUNK / 8) {
        let bytes = &mut raw[..dst.len() * 8];
        reader.file.read_exact_at(bytes, offset)?;
        for (o, c) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
            *o = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
        offset += bytes.len() as u64;
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::CorruptCorpus {
            path: path.to_path_buf(),
            reason: "timestamps are not sorted".into(),
        });
    }
    Ok(KeyCache {
        keys,
        timestamps: times,
        key_dim: d,
    })
}

/// Records visible to a query at time `cutoff`. Because records are
/// timestamp-sorted the visible set is always a contiguous index range.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeMask {
    pub cutoff: f64,
    pub active: Range<usize>,
    pub len: usize,
}

impl TimeMask {
    pub fn all(len: usize) -> Self {
        Self {
            cutoff: f64::INFINITY,
            active: 0..len,
            len,
        }
    }

    pub fn contains(&self, n: usize) -> bool {
        self.active.contains(&n)
    }

    pub fn count(&self) -> usize {
        self.active.len()
    }

    /// Materialized boolean mask of length `len`.
    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|n| self.contains(n)).collect()
    }
}

/// Mask of records with `timestamp < t0` (strict).
pub fn time_mask(cache: &KeyCache, t0: f64) -> TimeMask {
    let hi = cache.timestamps().partition_point(|&t| t < t0);
    TimeMask {
        cutoff: t0,
        active: 0..hi,
        len: cache.len(),
    }
}

/// The most recent `window` records with `timestamp < t0`.
pub fn sliding_window(cache: &KeyCache, t0: f64, window: usize) -> Result<TimeMask> {
    if window == 0 {
        return Err(Error::invalid("sliding window must be at least 1"));
    }
    let mut mask = time_mask(cache, t0);
    mask.active.start = mask.active.end.saturating_sub(window);
    Ok(mask)
}

/// Header fields plus SHA-256 digests of each stored field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusInspection {
    pub header: CorpusFileHeader,
    pub file_len: u64,
    pub keys_sha256: String,
    pub timestamps_sha256: String,
    pub features_sha256: String,
    pub labels_sha256: String,
}

pub fn inspect_corpus(path: &Path) -> Result<CorpusInspection> {
    let reader = CorpusReader::open(path)?;
    let h = *reader.header();
    let hash_range = |start: u64, len: u64| -> Result<String> {
        let mut hasher = Sha256::new();
        let mut buf = vec![0u8; 1 << 20];
        let mut done = 0u64;
        while done < len {
            let n = (len - done).min(buf.len() as u64) as usize;
            reader.file.read_exact_at(&mut buf[..n], start + done)?;
            hasher.update(&buf[..n]);
            done += n as u64;
        }
        Ok(hex::encode(hasher.finalize()))
    };
    let keys_sha256 = hash_range(h.keys_offset(), h.times_offset() - h.keys_offset())?;
    let timestamps_sha256 = hash_range(h.times_offset(), h.records_offset() - h.times_offset())?;
    let mut feat = Sha256::new();
    let mut lab = Sha256::new();
    let rs = h.record_size() as usize;
    let per_chunk = ((1 << 20) / rs).max(1);
    let mut buf = vec![0u8; per_chunk * rs];
    let mut index = 0u64;
    while index < h.record_count {
        let count = (h.record_count - index).min(per_chunk as u64) as usize;
        let bytes = &mut buf[..count * rs];
        reader
            .file
            .read_exact_at(bytes, h.records_offset() + index * rs as u64)?;
        for rec in bytes.chunks_exact(rs) {
            feat.update(&rec[..rs - 4]);
            lab.update(&rec[rs - 4..]);
        }
        index += count as u64;
    }
    Ok(CorpusInspection {
        header: h,
        file_len: h.file_len(),
        keys_sha256,
        timestamps_sha256,
        features_sha256: hex::encode(feat.finalize()),
        labels_sha256: hex::encode(lab.finalize()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, t: f64, d_feat: usize, d_key: usize) -> CorpusRecord {
        CorpusRecord {
            features: (0..d_feat).map(|j| (i * 10 + j) as f32 * 0.5).collect(),
            label: (i % 2) as u32,
            timestamp: t,
            key: (0..d_key).map(|j| (i as f32) - j as f32).collect(),
        }
    }

    fn spec(d_feat: usize, d_key: usize) -> CorpusSpec {
        CorpusSpec {
            feature_dim: d_feat,
            key_dim: d_key,
            label_cardinality: 2,
            label_only: false,
        }
    }

    #[test]
    fn three_records_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nrac");
        let recs = vec![rec(0, 0.5, 3, 2), rec(1, 0.1, 3, 2), rec(2, 0.9, 3, 2)];
        let h = build_corpus(recs.clone(), spec(3, 2), &path).unwrap();
        assert_eq!(h.record_count, 3);
        assert_eq!(fs::metadata(&path).unwrap().len(), HEADER_SIZE + 3 * (4 * 3 + 4 * 2 + 8 + 4));

        let probe = MemoryProbe::new();
        let reader = CorpusReader::open(&path).unwrap();
        let got = fetch_records(&reader, &[0, 1, 2], &probe).unwrap();
        // Stored in timestamp order: 0.1, 0.5, 0.9.
        assert_eq!(&got[..], &[recs[1].clone(), recs[0].clone(), recs[2].clone()]);

        let cache = load_key_cache(&path, &probe).unwrap();
        for (n, r) in got.iter().enumerate() {
            assert_eq!(cache.key(n), r.key.as_slice());
            assert_eq!(cache.timestamps()[n].to_bits(), r.timestamp.to_bits());
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.nrac");
        let h = build_corpus(Vec::new(), spec(4, 2), &path).unwrap();
        assert_eq!(h.record_count, 0);
        let cache = load_key_cache(&path, &MemoryProbe::new()).unwrap();
        assert!(cache.is_empty());
        assert_eq!(time_mask(&cache, 1.0).count(), 0);
    }

    #[test]
    fn inconsistent_dimension_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nrac");
        let recs = vec![rec(0, 0.1, 3, 2), rec(1, 0.2, 4, 2)];
        let err = build_corpus(recs, spec(3, 2), &path).unwrap_err();
        assert!(matches!(err, Error::InconsistentRecord { index: 1, .. }), "{err}");
        assert!(!path.exists());
        assert!(!spill_path(&path).exists());
    }

    #[test]
    fn corrupt_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nrac");
        build_corpus(vec![rec(0, 0.1, 2, 2)], spec(2, 2), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_key_cache(&path, &MemoryProbe::new()),
            Err(Error::CorruptCorpus { .. })
        ));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        let err = CorpusReader::open(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn fetch_keeps_request_order_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nrac");
        let recs: Vec<_> = (0..8).map(|i| rec(i, i as f64 / 10.0, 2, 1)).collect();
        build_corpus(recs.clone(), spec(2, 1), &path).unwrap();
        let reader = CorpusReader::open(&path).unwrap();
        let probe = MemoryProbe::new();
        let got = fetch_records(&reader, &[5, 2, 5], &probe).unwrap();
        assert_eq!(&got[..], &[recs[5].clone(), recs[2].clone(), recs[5].clone()]);
        assert!(matches!(
            fetch_records(&reader, &[8], &probe),
            Err(Error::IndexOutOfRange { index: 8, len: 8 })
        ));
    }

    #[test]
    fn masks() {
        let probe = MemoryProbe::new();
        let cache = KeyCache::from_parts(&[0.0; 3], &[0.1, 0.5, 0.9], 1, &probe).unwrap();
        assert_eq!(time_mask(&cache, f64::NEG_INFINITY).to_bools(), vec![false; 3]);
        assert_eq!(time_mask(&cache, 2.0).to_bools(), vec![true; 3]);
        assert_eq!(time_mask(&cache, 0.5).to_bools(), vec![true, false, false]);

        let times: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let cache = KeyCache::from_parts(&[0.0; 10], &times, 1, &probe).unwrap();
        // Times 0.0..=0.7 precede 0.75, so the three most recent are 5, 6, 7.
        let w = sliding_window(&cache, 0.75, 3).unwrap();
        assert_eq!(w.active, 5..8);
        assert_eq!(sliding_window(&cache, 0.75, 1).unwrap().count(), 1);
        assert_eq!(sliding_window(&cache, 0.75, 100).unwrap(), time_mask(&cache, 0.75));
        assert!(sliding_window(&cache, 0.75, 0).is_err());
    }

    #[test]
    fn key_cache_accounting_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nrac");
        let recs: Vec<_> = (0..1000).map(|i| rec(i, i as f64, 3, 64)).collect();
        build_corpus(recs, spec(3, 64), &path).unwrap();
        let probe = MemoryProbe::new();
        let cache = load_key_cache(&path, &probe).unwrap();
        assert_eq!(cache.keys().len() * 4, 256_000);
        assert_eq!(probe.live(MemTag::Keys), 1000 * (4 * 64 + 8));
        assert_eq!(probe.live(MemTag::Retrieved), 0);
        let again = load_key_cache(&path, &probe).unwrap();
        assert_eq!(cache.keys(), again.keys());
    }

    #[test]
    fn inspection_reports_header_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.nrac");
        let b = dir.path().join("b.nrac");
        let recs: Vec<_> = (0..5).map(|i| rec(i, i as f64, 2, 2)).collect();
        build_corpus(recs.clone(), spec(2, 2), &a).unwrap();
        let mut changed = recs;
        changed[3].label = 0;
        build_corpus(changed, spec(2, 2), &b).unwrap();
        let (ia, ib) = (inspect_corpus(&a).unwrap(), inspect_corpus(&b).unwrap());
        assert_eq!(ia.header.record_count, 5);
        assert_eq!(ia.keys_sha256, ib.keys_sha256);
        assert_eq!(ia.features_sha256, ib.features_sha256);
        assert_ne!(ia.labels_sha256, ib.labels_sha256);
    }
}

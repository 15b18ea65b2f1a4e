//! Month-partitioned columnar feature store.
//!
//! Layout on disk: a root directory holding `schema.json`, `manifest.json`,
//! and one partition file per calendar month at `year=YYYY/month=MM/part.raxf`.
//!
//! RAXF partition format, little-endian throughout:
//!
//! ```text
//! magic "RAXF" | version u16 | schema_hash u64 | row_count u64
//! per feature column, in schema order:
//!     null bitmap, ceil(row_count/8) bytes, LSB-first, bit = 1 means present
//!     row_count values: f64 (Numeric) | u8 in {0,1} (Binary) | i32 (CategoricalCode)
//! collision_id column: row_count x u64 (two's-complement bits of the i64)
//! timestamp column:    row_count x i64 (seconds since Unix epoch, UTC)
//! label column:        row_count x u8
//! factors column, per row: u16 count, then per factor u32 byte length + UTF-8 bytes
//! CRC-32 of all preceding bytes, u32
//! ```
//!
//! Writers are single-process: a partition is staged to a temp file and
//! renamed into place, and the manifest is rewritten last, so readers see
//! either the old or the new state, never a torn file.

use crate::schema::{
    EventFeatureRow, FeatureKind, FeatureSchema, SchemaError, SeverityLabel, Timestamp,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"RAXF";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("store already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("schema hash mismatch: store has {store}, rows have {rows}")]
    SchemaMismatch { store: String, rows: String },
    #[error("row {collision_id} timestamp {timestamp:?} lies outside partition {year}-{month:02}")]
    TimestampOutsideMonth {
        collision_id: i64,
        timestamp: Timestamp,
        year: i32,
        month: u32,
    },
    #[error("row {collision_id} failed schema validation: {source}")]
    RowInvalid {
        collision_id: i64,
        #[source]
        source: SchemaError,
    },
    #[error("row {collision_id}: {what} not representable in its column type")]
    NotRepresentable { collision_id: i64, what: String },
    #[error("corrupt partition {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("manifest invalid: {0}")]
    ManifestInvalid(String),
    #[error("partition file missing: {0}")]
    MissingPartitionFile(PathBuf),
    #[error("store holds {available} rows, split needs {required}")]
    InsufficientRows { available: u64, required: u64 },
    #[error("{0}")]
    InvalidArg(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PartitionKey {
    pub year: i32,
    pub month: u32,
}

impl PartitionKey {
    pub fn new(year: i32, month: u32) -> Result<PartitionKey, StoreError> {
        if !(1..=12).contains(&month) {
            return Err(StoreError::InvalidArg(format!("month {month} not in 1..=12")));
        }
        Ok(PartitionKey { year, month })
    }

    pub fn of(ts: Timestamp) -> PartitionKey {
        PartitionKey {
            year: ts.year(),
            month: ts.month(),
        }
    }

    fn next(self) -> PartitionKey {
        if self.month == 12 {
            PartitionKey { year: self.year + 1, month: 1 }
        } else {
            PartitionKey { year: self.year, month: self.month + 1 }
        }
    }

    /// Half-open UTC second range [start, end) of this calendar month.
    pub fn bounds(self) -> (Timestamp, Timestamp) {
        let start = Timestamp::from_ymd_hms(self.year, self.month, 1, 0, 0, 0)
            .expect("valid partition month");
        let n = self.next();
        let end = Timestamp::from_ymd_hms(n.year, n.month, 1, 0, 0, 0).expect("valid month");
        (start, end)
    }

    fn rel_path(self) -> PathBuf {
        PathBuf::from(format!("year={}/month={:02}/part.raxf", self.year, self.month))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionEntry {
    pub year: i32,
    pub month: u32,
    pub row_count: u64,
    pub min_timestamp: i64,
    pub max_timestamp: i64,
    /// CRC-32 of the partition file minus its trailer, as 8 hex chars;
    /// equals the file's trailing checksum.
    pub checksum: String,
}

impl PartitionEntry {
    pub fn key(&self) -> PartitionKey {
        PartitionKey { year: self.year, month: self.month }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_hash: String,
    pub partitions: Vec<PartitionEntry>,
}

/// Rolling temporal split: the newest `n_test` events are the test set,
/// the `n_train` events immediately preceding them the training set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub n_test: u64,
    pub n_train: u64,
}

impl Default for SplitSpec {
    fn default() -> SplitSpec {
        SplitSpec { n_test: 5000, n_train: 20000 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.n_test == 0 || self.n_train == 0 {
            return Err(StoreError::InvalidArg(
                "n_test and n_train must both be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Total order used everywhere rows are sequenced in time.
pub fn chronological(a: &EventFeatureRow, b: &EventFeatureRow) -> std::cmp::Ordering {
    (a.timestamp, a.collision_id).cmp(&(b.timestamp, b.collision_id))
}

/// The in-memory split shared by `FeatureStore::temporal_split` and the
/// synthetic-benchmark harness. `rows` need not be sorted.
pub fn split_rows(
    mut rows: Vec<EventFeatureRow>,
    spec: &SplitSpec,
) -> Result<(Vec<EventFeatureRow>, Vec<EventFeatureRow>), StoreError> {
    spec.validate()?;
    let required = spec.n_train + spec.n_test;
    if (rows.len() as u64) < required {
        return Err(StoreError::InsufficientRows {
            available: rows.len() as u64,
            required,
        });
    }
    rows.sort_by(chronological);
    let test_start = rows.len() - spec.n_test as usize;
    let train_start = test_start - spec.n_train as usize;
    let test = rows.split_off(test_start);
    let train = rows.split_off(train_start);
    Ok((train, test))
}

pub struct FeatureStore {
    root: PathBuf,
    schema: FeatureSchema,
    manifest: Manifest,
}

impl FeatureStore {
    /// Initializes an empty store at `root`; refuses to overwrite one.
    pub fn create(root: &Path, schema: &FeatureSchema) -> Result<FeatureStore, StoreError> {
        if root.join("manifest.json").exists() {
            return Err(StoreError::AlreadyExists(root.to_path_buf()));
        }
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let store = FeatureStore {
            root: root.to_path_buf(),
            schema: schema.clone(),
            manifest: Manifest {
                schema_hash: schema.hash_hex(),
                partitions: Vec::new(),
            },
        };
        let schema_path = root.join("schema.json");
        atomic_write(&schema_path, schema.to_json().as_bytes())?;
        store.write_manifest()?;
        Ok(store)
    }

    /// Removes any existing store files under `root` (partitions, manifest,
    /// schema), then creates a fresh store. Non-store files are untouched.
    pub fn recreate(root: &Path, schema: &FeatureSchema) -> Result<FeatureStore, StoreError> {
        if root.exists() {
            let manifest = root.join("manifest.json");
            if manifest.exists() {
                fs::remove_file(&manifest).map_err(|e| io_err(&manifest, e))?;
            }
            let schema_file = root.join("schema.json");
            if schema_file.exists() {
                fs::remove_file(&schema_file).map_err(|e| io_err(&schema_file, e))?;
            }
            for entry in fs::read_dir(root).map_err(|e| io_err(root, e))? {
                let entry = entry.map_err(|e| io_err(root, e))?;
                let name = entry.file_name();
                if name.to_string_lossy().starts_with("year=") {
                    fs::remove_dir_all(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
                }
            }
        }
        FeatureStore::create(root, schema)
    }

    /// Opens an existing store, checking that the manifest is coherent and
    /// every listed partition file exists. Checksums are verified on read.
    pub fn open(root: &Path) -> Result<FeatureStore, StoreError> {
        let schema_json = fs::read_to_string(root.join("schema.json"))
            .map_err(|e| io_err(&root.join("schema.json"), e))?;
        let schema = FeatureSchema::from_json(&schema_json)
            .map_err(|e| StoreError::ManifestInvalid(format!("schema.json: {e}")))?;
        let manifest_json = fs::read_to_string(root.join("manifest.json"))
            .map_err(|e| io_err(&root.join("manifest.json"), e))?;
        let manifest: Manifest = serde_json::from_str(&manifest_json)
            .map_err(|e| StoreError::ManifestInvalid(e.to_string()))?;
        if manifest.schema_hash != schema.hash_hex() {
            return Err(StoreError::SchemaMismatch {
                store: manifest.schema_hash.clone(),
                rows: schema.hash_hex(),
            });
        }
        let mut seen = BTreeMap::new();
        for p in &manifest.partitions {
            PartitionKey::new(p.year, p.month)?;
            if p.min_timestamp > p.max_timestamp {
                return Err(StoreError::ManifestInvalid(format!(
                    "partition {}-{:02} has min_timestamp > max_timestamp",
                    p.year, p.month
                )));
            }
            if seen.insert(p.key(), ()).is_some() {
                return Err(StoreError::ManifestInvalid(format!(
                    "duplicate partition key {}-{:02}",
                    p.year, p.month
                )));
            }
            let path = root.join(p.key().rel_path());
            if !path.exists() {
                return Err(StoreError::MissingPartitionFile(path));
            }
        }
        Ok(FeatureStore {
            root: root.to_path_buf(),
            schema,
            manifest,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn total_rows(&self) -> u64 {
        self.manifest.partitions.iter().map(|p| p.row_count).sum()
    }

    /// Writes (or replaces) one month's partition.
    pub fn write_partition(
        &mut self,
        key: PartitionKey,
        rows: &[EventFeatureRow],
    ) -> Result<(), StoreError> {
        let (start, end) = key.bounds();
        for row in rows {
            if row.timestamp < start || row.timestamp >= end {
                return Err(StoreError::TimestampOutsideMonth {
                    collision_id: row.collision_id,
                    timestamp: row.timestamp,
                    year: key.year,
                    month: key.month,
                });
            }
            row.validate(&self.schema).map_err(|e| StoreError::RowInvalid {
                collision_id: row.collision_id,
                source: e,
            })?;
        }
        let bytes = encode_partition(&self.schema, rows)?;
        let checksum = crc32fast::hash(&bytes[..bytes.len() - 4]);

        let path = self.root.join(key.rel_path());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        atomic_write(&path, &bytes)?;

        let (min_ts, max_ts) = rows.iter().fold((i64::MAX, i64::MIN), |(lo, hi), r| {
            (lo.min(r.timestamp.0), hi.max(r.timestamp.0))
        });
        let entry = PartitionEntry {
            year: key.year,
            month: key.month,
            row_count: rows.len() as u64,
            min_timestamp: if rows.is_empty() { start.0 } else { min_ts },
            max_timestamp: if rows.is_empty() { start.0 } else { max_ts },
            checksum: format!("{checksum:08x}"),
        };
        self.manifest.partitions.retain(|p| p.key() != key);
        self.manifest.partitions.push(entry);
        self.manifest.partitions.sort_by_key(PartitionEntry::key);
        self.write_manifest()
    }

    /// Reads one partition, verifying its checksum against both the file
    /// trailer and the manifest.
    pub fn read_partition(&self, key: PartitionKey) -> Result<Vec<EventFeatureRow>, StoreError> {
        let entry = self
            .manifest
            .partitions
            .iter()
            .find(|p| p.key() == key)
            .ok_or_else(|| StoreError::InvalidArg(format!("no partition {}-{:02}", key.year, key.month)))?;
        let path = self.root.join(key.rel_path());
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        let expect = u32::from_str_radix(&entry.checksum, 16)
            .map_err(|_| StoreError::ManifestInvalid(format!("bad checksum string {}", entry.checksum)))?;
        let rows = decode_partition(&self.schema, &bytes, &path)?;
        let actual = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if actual != expect {
            return Err(StoreError::Corrupt {
                path,
                reason: format!("checksum {actual:08x} does not match manifest {expect:08x}"),
            });
        }
        if rows.len() as u64 != entry.row_count {
            return Err(StoreError::Corrupt {
                path,
                reason: format!("row count {} does not match manifest {}", rows.len(), entry.row_count),
            });
        }
        Ok(rows)
    }

    /// All rows with start <= t < end, ordered by (timestamp, collision_id).
    /// Only partitions whose month overlaps the window are read.
    pub fn query_window(
        &self,
        start: Timestamp,
        end: Timestamp,
    ) -> Result<Vec<EventFeatureRow>, StoreError> {
        if start > end {
            return Err(StoreError::InvalidArg(format!(
                "window start {} after end {}",
                start.0, end.0
            )));
        }
        let mut out = Vec::new();
        for entry in &self.manifest.partitions {
            let (p_start, p_end) = entry.key().bounds();
            if p_end <= start || p_start >= end {
                continue;
            }
            let rows = self.read_partition(entry.key())?;
            out.extend(
                rows.into_iter()
                    .filter(|r| r.timestamp >= start && r.timestamp < end),
            );
        }
        out.sort_by(chronological);
        Ok(out)
    }

    /// Latest `n_test` rows as test set, preceding `n_train` as training set.
    pub fn temporal_split(
        &self,
        spec: &SplitSpec,
    ) -> Result<(Vec<EventFeatureRow>, Vec<EventFeatureRow>), StoreError> {
        split_rows(self.all_rows()?, spec)
    }

    /// Rows of the newest `months` partition keys present in the manifest.
    pub fn rolling_window(&self, months: usize) -> Result<Vec<EventFeatureRow>, StoreError> {
        if months == 0 {
            return Err(StoreError::InvalidArg("rolling window needs months >= 1".into()));
        }
        let mut keys: Vec<PartitionKey> =
            self.manifest.partitions.iter().map(PartitionEntry::key).collect();
        keys.sort_unstable();
        let keep: Vec<PartitionKey> = keys.into_iter().rev().take(months).collect();
        let mut out = Vec::new();
        for key in keep {
            out.extend(self.read_partition(key)?);
        }
        out.sort_by(chronological);
        Ok(out)
    }

    pub fn all_rows(&self) -> Result<Vec<EventFeatureRow>, StoreError> {
        let mut out = Vec::new();
        for entry in &self.manifest.partitions {
            out.extend(self.read_partition(entry.key())?);
        }
        Ok(out)
    }

    /// Full checksum pass over every partition.
    pub fn verify_integrity(&self) -> Result<(), StoreError> {
        for entry in &self.manifest.partitions {
            self.read_partition(entry.key())?;
        }
        Ok(())
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        let json =
            serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        atomic_write(&self.root.join("manifest.json"), json.as_bytes())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a temp file in the target directory, fsyncs, then
/// renames over `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}

fn bitmap_from_missing(missing_col: &[bool]) -> Vec<u8> {
    let mut bm = vec![0u8; missing_col.len().div_ceil(8)];
    for (i, &miss) in missing_col.iter().enumerate() {
        if !miss {
            bm[i / 8] |= 1 << (i % 8);
        }
    }
    bm
}

/// Serializes rows to RAXF bytes, checksum trailer included.
pub fn encode_partition(
    schema: &FeatureSchema,
    rows: &[EventFeatureRow],
) -> Result<Vec<u8>, StoreError> {
    let n = rows.len();
    let mut buf = Vec::with_capacity(32 + n * (schema.len() * 9 + 24));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&schema.hash().to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());

    let mut missing_col = vec![false; n];
    for (j, desc) in schema.descriptors().iter().enumerate() {
        for (i, row) in rows.iter().enumerate() {
            missing_col[i] = row.missing[j];
        }
        buf.extend_from_slice(&bitmap_from_missing(&missing_col));
        match desc.kind {
            FeatureKind::Numeric => {
                for row in rows {
                    buf.extend_from_slice(&row.values[j].to_le_bytes());
                }
            }
            FeatureKind::Binary => {
                for row in rows {
                    let v = row.values[j];
                    if v != 0.0 && v != 1.0 {
                        return Err(StoreError::NotRepresentable {
                            collision_id: row.collision_id,
                            what: format!("{} = {v} as Binary", desc.name),
                        });
                    }
                    buf.push(v as u8);
                }
            }
            FeatureKind::CategoricalCode => {
                for row in rows {
                    let v = row.values[j];
                    if v.fract() != 0.0 || v < i32::MIN as f64 || v > i32::MAX as f64 {
                        return Err(StoreError::NotRepresentable {
                            collision_id: row.collision_id,
                            what: format!("{} = {v} as CategoricalCode", desc.name),
                        });
                    }
                    buf.extend_from_slice(&(v as i32).to_le_bytes());
                }
            }
        }
    }
    for row in rows {
        buf.extend_from_slice(&(row.collision_id as u64).to_le_bytes());
    }
    for row in rows {
        buf.extend_from_slice(&row.timestamp.0.to_le_bytes());
    }
    for row in rows {
        buf.push(row.label.as_index() as u8);
    }
    for row in rows {
        if row.factors.len() > u16::MAX as usize {
            return Err(StoreError::NotRepresentable {
                collision_id: row.collision_id,
                what: format!("{} factor strings", row.factors.len()),
            });
        }
        buf.extend_from_slice(&(row.factors.len() as u16).to_le_bytes());
        for s in &row.factors {
            buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
            buf.extend_from_slice(s.as_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        if self.pos + n > self.bytes.len() {
            return Err(StoreError::Corrupt {
                path: self.path.to_path_buf(),
                reason: format!("truncated: wanted {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, StoreError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn corrupt(&self, reason: impl Into<String>) -> StoreError {
        StoreError::Corrupt {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Parses RAXF bytes, verifying magic, version, schema hash, and the CRC-32
/// trailer.
pub fn decode_partition(
    schema: &FeatureSchema,
    bytes: &[u8],
    path: &Path,
) -> Result<Vec<EventFeatureRow>, StoreError> {
    if bytes.len() < 4 {
        return Err(StoreError::Corrupt {
            path: path.to_path_buf(),
            reason: "shorter than checksum trailer".into(),
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let trailer = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual = crc32fast::hash(body);
    if actual != trailer {
        return Err(StoreError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("checksum mismatch: computed {actual:08x}, trailer {trailer:08x}"),
        });
    }

    let mut cur = Cursor { bytes: body, pos: 0, path };
    if cur.take(4)? != MAGIC {
        return Err(cur.corrupt("bad magic"));
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(cur.corrupt(format!("unsupported format version {version}")));
    }
    let hash = cur.u64()?;
    if hash != schema.hash() {
        return Err(StoreError::SchemaMismatch {
            store: schema.hash_hex(),
            rows: format!("{hash:016x}"),
        });
    }
    let n = cur.u64()? as usize;

    let d = schema.len();
    let mut values = vec![0.0f64; n * d];
    let mut missing = vec![false; n * d];
    for (j, desc) in schema.descriptors().iter().enumerate() {
        let bitmap = cur.take(n.div_ceil(8))?.to_vec();
        for i in 0..n {
            let present = bitmap[i / 8] >> (i % 8) & 1 == 1;
            missing[i * d + j] = !present;
        }
        match desc.kind {
            FeatureKind::Numeric => {
                for i in 0..n {
                    values[i * d + j] = cur.f64()?;
                }
            }
            FeatureKind::Binary => {
                let col = cur.take(n)?;
                for i in 0..n {
                    match col[i] {
                        0 => values[i * d + j] = 0.0,
                        1 => values[i * d + j] = 1.0,
                        other => {
                            return Err(cur.corrupt(format!(
                                "binary column {} holds byte {other}",
                                desc.name
                            )))
                        }
                    }
                }
            }
            FeatureKind::CategoricalCode => {
                for i in 0..n {
                    let raw = i32::from_le_bytes(cur.take(4)?.try_into().unwrap());
                    values[i * d + j] = raw as f64;
                }
            }
        }
    }

    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(cur.u64()? as i64);
    }
    let mut timestamps = Vec::with_capacity(n);
    for _ in 0..n {
        timestamps.push(cur.i64()?);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let b = cur.take(1)?[0];
        let label = SeverityLabel::from_index(b as usize)
            .ok_or_else(|| cur.corrupt(format!("label byte {b}")))?;
        labels.push(label);
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let n_factors = cur.u16()? as usize;
        let mut factors = Vec::with_capacity(n_factors);
        for _ in 0..n_factors {
            let len = cur.u32()? as usize;
            let s = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| cur.corrupt("factor string is not UTF-8"))?;
            factors.push(s.to_string());
        }
        rows.push(EventFeatureRow {
            collision_id: ids[i],
            timestamp: Timestamp(timestamps[i]),
            label: labels[i],
            values: values[i * d..(i + 1) * d].to_vec(),
            missing: missing[i * d..(i + 1) * d].to_vec(),
            factors,
        });
    }
    if cur.pos != body.len() {
        return Err(cur.corrupt(format!(
            "{} trailing bytes after factors column",
            body.len() - cur.pos
        )));
    }
    Ok(rows)
}

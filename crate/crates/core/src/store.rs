//! On-disk corpus layout and persistence primitives.
//!
//! ```text
//! <root>/
//!   catalog.jsonl        concepts with filter status
//!   manifest.jsonl       pipeline run: header, representamens, descriptions, images, attempts
//!   images/<ab>/<sha256>.png
//!   annotations.jsonl    every label submission (latest per image/annotator wins)
//!   distractors.jsonl    distractor sets per target image
//!   items.jsonl          assembled multiple-choice items
//!   results/<model>.jsonl
//! ```
//!
//! Every `.jsonl` file is append-only with one JSON object per line. A
//! single writer holds `<file>.lock`; a torn final line left by a crash is
//! moved to `<file>.quarantine` the next time the file is opened for writing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchmark::MCQItem;
use crate::pipeline::{leakage_check, AttemptRecord, GeneratedImage, Leakage, RepresentamenSet, VisualDescription};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: &str, message: &str) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Schema checks run before a record is appended.
pub trait Validate {
    fn validate(&self) -> Result<(), Vec<FieldError>>;
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} is locked by another writer (remove {lock} if that process is gone)")]
    Locked { path: PathBuf, lock: PathBuf },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("record rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Schema(Vec<FieldError>),
    #[error("bytes do not decode as an image: {0}")]
    NotAnImage(String),
    #[error("hash collision at {0} with different content")]
    HashCollision(PathBuf),
    #[error("image {0} not found")]
    MissingImage(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Clock

/// Timestamp source for persisted records.
pub trait Clock: Send + Sync {
    fn now(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> String {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }
}

/// Always returns the same instant; used for reproducible manifests.
pub struct FixedClock(pub String);

impl FixedClock {
    /// Seconds since the Unix epoch, as used by `SOURCE_DATE_EPOCH`.
    pub fn from_epoch(secs: i64) -> Self {
        let t = chrono::DateTime::from_timestamp(secs, 0).unwrap_or_default();
        FixedClock(t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
    }
}

impl Clock for FixedClock {
    fn now(&self) -> String {
        self.0.clone()
    }
}

/// `FixedClock` when `SOURCE_DATE_EPOCH` is set, the system clock otherwise.
pub fn clock_from_env() -> Box<dyn Clock> {
    match std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        Some(secs) => Box::new(FixedClock::from_epoch(secs)),
        None => Box::new(SystemClock),
    }
}

// ---------------------------------------------------------------------------
// JSONL logs

struct LockFile(PathBuf);

impl LockFile {
    fn acquire(target: &Path) -> Result<Self, StoreError> {
        let lock = PathBuf::from(format!("{}.lock", target.display()));
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&lock) {
                Ok(mut f) => {
                    let _ = write!(f, "{}", std::process::id());
                    return Ok(LockFile(lock));
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    if lock_is_stale(&lock) {
                        log::warn!("removing stale lock {}", lock.display());
                        fs::remove_file(&lock).map_err(io_err(&lock))?;
                        continue;
                    }
                    return Err(StoreError::Locked {
                        path: target.to_path_buf(),
                        lock,
                    });
                }
                Err(e) => return Err(io_err(&lock)(e)),
            }
        }
        Err(StoreError::Locked {
            path: target.to_path_buf(),
            lock,
        })
    }
}

/// A lock is stale when it names a process that no longer exists.
fn lock_is_stale(lock: &Path) -> bool {
    let Ok(pid) = fs::read_to_string(lock).map(|s| s.trim().to_string()) else {
        return false;
    };
    let proc_root = Path::new("/proc");
    !pid.is_empty() && proc_root.is_dir() && !proc_root.join(&pid).exists()
}

impl Drop for LockFile {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Splits file contents into complete lines plus an unterminated tail.
fn split_complete(bytes: &[u8]) -> (&[u8], &[u8]) {
    match bytes.iter().rposition(|&b| b == b'\n') {
        Some(i) => bytes.split_at(i + 1),
        None => (&[][..], bytes),
    }
}

fn parse_lines<T: DeserializeOwned>(path: &Path, complete: &[u8]) -> Result<Vec<T>, StoreError> {
    let text = std::str::from_utf8(complete).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads every complete record of a JSONL file without taking the writer
/// lock. A torn trailing line is ignored; a missing file reads as empty.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let (complete, _) = split_complete(&bytes);
    parse_lines(path, complete)
}

/// Single-writer append-only JSONL file.
pub struct JsonlLog<T> {
    path: PathBuf,
    file: File,
    _lock: LockFile,
    _record: PhantomData<fn(T)>,
}

impl<T: Serialize + DeserializeOwned + Validate> JsonlLog<T> {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let lock = LockFile::acquire(path)?;
        let quarantined = quarantine_torn_tail(path)?;
        if quarantined > 0 {
            log::warn!("{}: quarantined {quarantined} bytes of a torn final line", path.display());
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(JsonlLog {
            path: path.to_path_buf(),
            file,
            _lock: lock,
            _record: PhantomData,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Validates, writes and syncs one record.
    pub fn append(&mut self, record: &T) -> Result<(), StoreError> {
        record.validate().map_err(StoreError::Schema)?;
        let mut line = serde_json::to_vec(record).map_err(|e| StoreError::Schema(vec![FieldError::new("<record>", &e.to_string())]))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }

    pub fn read_all(&self) -> Result<Vec<T>, StoreError> {
        read_jsonl(&self.path)
    }
}

/// Moves an unterminated final line to `<path>.quarantine`; returns the
/// number of bytes moved.
fn quarantine_torn_tail(path: &Path) -> Result<usize, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(io_err(path)(e)),
    };
    let (complete, tail) = split_complete(&bytes);
    if tail.is_empty() {
        return Ok(0);
    }
    let qpath = PathBuf::from(format!("{}.quarantine", path.display()));
    let mut q = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&qpath)
        .map_err(io_err(&qpath))?;
    q.write_all(tail).and_then(|_| q.write_all(b"\n")).map_err(io_err(&qpath))?;
    let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
    f.set_len(complete.len() as u64).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))?;
    Ok(tail.len())
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ManifestRecord {
    Header { schema_version: u32, run_id: String },
    Representamens(RepresentamenSet),
    Description(VisualDescription),
    Image(GeneratedImage),
    Attempt(AttemptRecord),
}

impl ManifestRecord {
    pub fn kind(&self) -> RecordKind {
        match self {
            ManifestRecord::Header { .. } => RecordKind::Header,
            ManifestRecord::Representamens(_) => RecordKind::Representamens,
            ManifestRecord::Description(_) => RecordKind::Description,
            ManifestRecord::Image(_) => RecordKind::Image,
            ManifestRecord::Attempt(_) => RecordKind::Attempt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Header,
    Representamens,
    Description,
    Image,
    Attempt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub ts: String,
    #[serde(flatten)]
    pub record: ManifestRecord,
}

impl Validate for ManifestEntry {
    fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errs = Vec::new();
        if self.ts.is_empty() {
            errs.push(FieldError::new("ts", "must be nonempty"));
        }
        let inner = match &self.record {
            ManifestRecord::Header { schema_version, run_id } => {
                let mut e = Vec::new();
                if *schema_version == 0 {
                    e.push(FieldError::new("schema_version", "must be positive"));
                }
                if run_id.is_empty() {
                    e.push(FieldError::new("run_id", "must be nonempty"));
                }
                if e.is_empty() {
                    Ok(())
                } else {
                    Err(e)
                }
            }
            ManifestRecord::Representamens(r) => r.validate(),
            ManifestRecord::Description(d) => d.validate(),
            ManifestRecord::Image(i) => i.validate(),
            ManifestRecord::Attempt(a) => a.validate(),
        };
        if let Err(e) = inner {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

pub fn filter_kind(entries: &[ManifestEntry], kind: RecordKind) -> Vec<&ManifestEntry> {
    entries.iter().filter(|e| e.record.kind() == kind).collect()
}

pub fn manifest_images(entries: &[ManifestEntry]) -> Vec<&GeneratedImage> {
    entries
        .iter()
        .filter_map(|e| match &e.record {
            ManifestRecord::Image(i) => Some(i),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Images

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content-addressed PNG store under `images/<first two hex>/<sha256>.png`.
#[derive(Debug, Clone)]
pub struct ImageStore {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ImageStore {
    pub fn new(root: &Path) -> Self {
        ImageStore { root: root.to_path_buf() }
    }

    /// Path relative to the corpus root.
    pub fn relative_path(id: &str) -> String {
        format!("images/{}/{id}.png", &id[..2.min(id.len())])
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(Self::relative_path(id))
    }

    /// Stores `bytes` and returns `(id, relative path)`. Identical bytes map to
    /// the same file.
    pub fn put(&self, bytes: &[u8]) -> Result<(String, String), StoreError> {
        image::load_from_memory(bytes).map_err(|e| StoreError::NotAnImage(e.to_string()))?;
        let id = sha256_hex(bytes);
        let rel = Self::relative_path(&id);
        let path = self.root.join(&rel);
        if path.exists() {
            let existing = fs::read(&path).map_err(io_err(&path))?;
            if existing != bytes {
                return Err(StoreError::HashCollision(path));
            }
            return Ok((id, rel));
        }
        let dir = path.parent().expect("image path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(
            ".tmp-{id}-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let write = || -> io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(io_err(&path))?;
        Ok((id, rel))
    }

    pub fn get(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.path_of(id);
        fs::read(&path).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                StoreError::MissingImage(id.to_string())
            } else {
                io_err(&path)(e)
            }
        })
    }

    /// Every stored `(id from file name, path)`.
    pub fn list(&self) -> Result<Vec<(String, PathBuf)>, StoreError> {
        let dir = self.root.join("images");
        let mut out = Vec::new();
        let Ok(shards) = fs::read_dir(&dir) else {
            return Ok(out);
        };
        for shard in shards {
            let shard = shard.map_err(io_err(&dir))?.path();
            if !shard.is_dir() {
                continue;
            }
            for f in fs::read_dir(&shard).map_err(io_err(&shard))? {
                let p = f.map_err(io_err(&shard))?.path();
                if p.extension().is_some_and(|e| e == "png") {
                    let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                    out.push((id, p));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Loads image bytes by id.
pub trait ImageSource: Send + Sync {
    fn load(&self, id: &str) -> Result<Vec<u8>, StoreError>;
}

impl ImageSource for ImageStore {
    fn load(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.get(id)
    }
}

impl ImageSource for BTreeMap<String, Vec<u8>> {
    fn load(&self, id: &str) -> Result<Vec<u8>, StoreError> {
        self.get(id).cloned().ok_or_else(|| StoreError::MissingImage(id.into()))
    }
}

// ---------------------------------------------------------------------------
// Corpus directory

#[derive(Debug, Clone)]
pub struct CorpusStore {
    root: PathBuf,
}

impl CorpusStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        Ok(CorpusStore { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn images(&self) -> ImageStore {
        ImageStore::new(&self.root)
    }
    pub fn catalog_path(&self) -> PathBuf {
        self.root.join("catalog.jsonl")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }
    pub fn annotations_path(&self) -> PathBuf {
        self.root.join("annotations.jsonl")
    }
    pub fn distractors_path(&self) -> PathBuf {
        self.root.join("distractors.jsonl")
    }
    pub fn items_path(&self) -> PathBuf {
        self.root.join("items.jsonl")
    }
    pub fn results_dir(&self) -> PathBuf {
        self.root.join("results")
    }
    pub fn results_path(&self, model: &str) -> PathBuf {
        let safe: String = model
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        self.results_dir().join(format!("{safe}.jsonl"))
    }

    pub fn read_manifest(&self) -> Result<Vec<ManifestEntry>, StoreError> {
        read_jsonl(&self.manifest_path())
    }
}

// ---------------------------------------------------------------------------
// Verification

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    HashMismatch,
    MissingFile,
    DanglingReference,
    Leakage,
    Unreadable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub images_checked: usize,
    pub descriptions_checked: usize,
    pub findings: Vec<Finding>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    fn push(&mut self, kind: FindingKind, detail: String) {
        self.findings.push(Finding { kind, detail });
    }
}

/// Checks image hashes, cross-record references and the leakage invariant
/// over every persisted description.
pub fn verify(store: &CorpusStore) -> VerifyReport {
    let mut report = VerifyReport::default();
    let images = store.images();

    let mut on_disk = BTreeSet::new();
    match images.list() {
        Ok(files) => {
            for (id, path) in files {
                report.images_checked += 1;
                match fs::read(&path) {
                    Ok(bytes) if sha256_hex(&bytes) == id => {
                        on_disk.insert(id);
                    }
                    Ok(_) => report.push(FindingKind::HashMismatch, format!("{} does not hash to {id}", path.display())),
                    Err(e) => report.push(FindingKind::Unreadable, format!("{}: {e}", path.display())),
                }
            }
        }
        Err(e) => report.push(FindingKind::Unreadable, e.to_string()),
    }

    let entries = match store.read_manifest() {
        Ok(e) => e,
        Err(e) => {
            report.push(FindingKind::Unreadable, e.to_string());
            Vec::new()
        }
    };
    let mut description_ids = BTreeSet::new();
    for e in &entries {
        if let ManifestRecord::Description(d) = &e.record {
            description_ids.insert(d.id.clone());
            report.descriptions_checked += 1;
            if d.leakage_passed {
                if let Leakage::Leaked(form) = leakage_check(&d.text, &d.concept) {
                    report.push(
                        FindingKind::Leakage,
                        format!("description {} for {:?} contains {form:?}", d.id, d.concept.as_str()),
                    );
                }
            }
        }
    }
    let mut image_ids = BTreeSet::new();
    for e in &entries {
        match &e.record {
            ManifestRecord::Image(img) => {
                image_ids.insert(img.id.clone());
                let path = store.root().join(&img.path);
                if !path.exists() {
                    report.push(FindingKind::MissingFile, format!("image {} missing at {}", img.id, img.path));
                } else if !on_disk.contains(&img.id) && path == images.path_of(&img.id) {
                    // Hash mismatch already reported for this file.
                } else if path != images.path_of(&img.id) {
                    report.push(
                        FindingKind::DanglingReference,
                        format!("image {} recorded at non-canonical path {}", img.id, img.path),
                    );
                }
                if !description_ids.contains(&img.description_id) {
                    report.push(
                        FindingKind::DanglingReference,
                        format!("image {} references unknown description {}", img.id, img.description_id),
                    );
                }
            }
            ManifestRecord::Attempt(a) => {
                if let Some(id) = &a.image_id {
                    if !entries.iter().any(|e| matches!(&e.record, ManifestRecord::Image(i) if &i.id == id)) {
                        report.push(
                            FindingKind::DanglingReference,
                            format!("attempt for {}/{} references unknown image {id}", a.concept, a.style),
                        );
                    }
                }
            }
            _ => {}
        }
    }

    match read_jsonl::<MCQItem>(&store.items_path()) {
        Ok(items) => {
            for item in items {
                if !image_ids.contains(&item.image_id) && !on_disk.contains(&item.image_id) {
                    report.push(
                        FindingKind::DanglingReference,
                        format!("item {} references unknown image {}", item.item_id, item.image_id),
                    );
                }
            }
        }
        Err(e) => report.push(FindingKind::Unreadable, e.to_string()),
    }
    report
}

//! Simulated object store.
//!
//! Stands in for S3 as the input source, the result sink and the channel for
//! oversized task payloads. Two interchangeable backends exist: an in-memory
//! map and a directory tree laid out as `<root>/<bucket>/<key>`, so that
//! datasets can be staged on disk by external tooling.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

/// Prefix of in-flight temp files in the disk backend; never listed.
const TMP_PREFIX: &str = ".flint-tmp-";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("no such object: {bucket}/{key}")]
    NoSuchObject { bucket: String, key: String },
    #[error("range [{offset}, {offset}+{length}) out of bounds for {bucket}/{key} of size {size}")]
    RangeOutOfBounds {
        bucket: String,
        key: String,
        offset: u64,
        length: u64,
        size: u64,
    },
    #[error("invalid object reference: {0}")]
    InvalidRef(String),
    #[error("store i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Location of one object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObjectRef {
    pub bucket: String,
    pub key: String,
}

impl ObjectRef {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Result<Self, StoreError> {
        let r = ObjectRef {
            bucket: bucket.into(),
            key: key.into(),
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.bucket.is_empty() || self.key.is_empty() {
            return Err(StoreError::InvalidRef(format!(
                "bucket and key must be non-empty (got {:?}/{:?})",
                self.bucket, self.key
            )));
        }
        if self.bucket.contains('/') || self.bucket.starts_with('.') {
            return Err(StoreError::InvalidRef(format!(
                "bad bucket name {:?}",
                self.bucket
            )));
        }
        let key_path = Path::new(&self.key);
        let clean = key_path
            .components()
            .all(|c| matches!(c, Component::Normal(_)));
        if !clean || self.key.ends_with('/') {
            return Err(StoreError::InvalidRef(format!("bad key {:?}", self.key)));
        }
        Ok(())
    }
}

impl std::fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

/// A byte range `[offset, offset + length)` of one object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectRange {
    #[serde(flatten)]
    pub object: ObjectRef,
    pub offset: u64,
    pub length: u64,
}

impl ObjectRange {
    pub fn new(object: ObjectRef, offset: u64, length: u64) -> Self {
        ObjectRange {
            object,
            offset,
            length,
        }
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

/// Optional injected per-call latency: `fixed + per_byte * len`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreLatency {
    pub fixed_ms: f64,
    pub per_byte_ns: f64,
}

impl StoreLatency {
    fn apply(&self, bytes: usize) {
        let total_ms = self.fixed_ms + self.per_byte_ns * bytes as f64 / 1e6;
        if total_ms > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(total_ms / 1e3));
        }
    }
}

type MemObjects = BTreeMap<(String, String), Arc<Vec<u8>>>;

enum Backend {
    Memory(RwLock<MemObjects>),
    Disk {
        root: PathBuf,
        tmp_counter: AtomicU64,
    },
}

/// Thread-safe object store handle.
pub struct ObjectStore {
    backend: Backend,
    latency: StoreLatency,
}

impl std::fmt::Debug for ObjectStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.backend {
            Backend::Memory(_) => f.write_str("ObjectStore(memory)"),
            Backend::Disk { root, .. } => write!(f, "ObjectStore(disk: {})", root.display()),
        }
    }
}

impl ObjectStore {
    pub fn in_memory() -> Self {
        ObjectStore {
            backend: Backend::Memory(RwLock::new(BTreeMap::new())),
            latency: StoreLatency::default(),
        }
    }

    /// Disk-backed store rooted at `root`; the directory is created if missing.
    pub fn on_disk(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ObjectStore {
            backend: Backend::Disk {
                root,
                tmp_counter: AtomicU64::new(0),
            },
            latency: StoreLatency::default(),
        })
    }

    pub fn with_latency(mut self, latency: StoreLatency) -> Self {
        self.latency = latency;
        self
    }

    pub fn put_object(&self, object: &ObjectRef, data: &[u8]) -> Result<(), StoreError> {
        object.validate()?;
        self.latency.apply(data.len());
        match &self.backend {
            Backend::Memory(map) => {
                map.write().insert(
                    (object.bucket.clone(), object.key.clone()),
                    Arc::new(data.to_vec()),
                );
            }
            Backend::Disk { root, tmp_counter } => {
                let path = object_path(root, object);
                let dir = path.parent().expect("object path has a parent");
                fs::create_dir_all(dir)?;
                // write-then-rename so readers see the old or new body, never a mix
                let n = tmp_counter.fetch_add(1, Ordering::Relaxed);
                let tmp = dir.join(format!("{TMP_PREFIX}{}-{n}", std::process::id()));
                {
                    let mut f = fs::File::create(&tmp)?;
                    f.write_all(data)?;
                    f.sync_data()?;
                }
                fs::rename(&tmp, &path)?;
            }
        }
        Ok(())
    }

    pub fn object_size(&self, object: &ObjectRef) -> Result<u64, StoreError> {
        object.validate()?;
        match &self.backend {
            Backend::Memory(map) => map
                .read()
                .get(&(object.bucket.clone(), object.key.clone()))
                .map(|d| d.len() as u64)
                .ok_or_else(|| no_such(object)),
            Backend::Disk { root, .. } => match fs::metadata(object_path(root, object)) {
                Ok(m) if m.is_file() => Ok(m.len()),
                Ok(_) => Err(no_such(object)),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(no_such(object)),
                Err(e) => Err(e.into()),
            },
        }
    }

    pub fn get_range(&self, range: &ObjectRange) -> Result<Vec<u8>, StoreError> {
        let object = &range.object;
        object.validate()?;
        let out = match &self.backend {
            Backend::Memory(map) => {
                let data = map
                    .read()
                    .get(&(object.bucket.clone(), object.key.clone()))
                    .cloned()
                    .ok_or_else(|| no_such(object))?;
                check_bounds(range, data.len() as u64)?;
                data[range.offset as usize..range.end() as usize].to_vec()
            }
            Backend::Disk { root, .. } => {
                let mut f = match fs::File::open(object_path(root, object)) {
                    Ok(f) => f,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                        return Err(no_such(object))
                    }
                    Err(e) => return Err(e.into()),
                };
                let size = f.metadata()?.len();
                check_bounds(range, size)?;
                f.seek(SeekFrom::Start(range.offset))?;
                let mut buf = vec![0u8; range.length as usize];
                f.read_exact(&mut buf)?;
                buf
            }
        };
        self.latency.apply(out.len());
        Ok(out)
    }

    pub fn get_object(&self, object: &ObjectRef) -> Result<Vec<u8>, StoreError> {
        let size = self.object_size(object)?;
        self.get_range(&ObjectRange::new(object.clone(), 0, size))
    }

    /// Deleting a missing object is not an error.
    pub fn delete_object(&self, object: &ObjectRef) -> Result<(), StoreError> {
        object.validate()?;
        match &self.backend {
            Backend::Memory(map) => {
                map.write()
                    .remove(&(object.bucket.clone(), object.key.clone()));
            }
            Backend::Disk { root, .. } => match fs::remove_file(object_path(root, object)) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e.into()),
            },
        }
        Ok(())
    }

    /// Keys under `prefix` in `bucket`, sorted by key, with their sizes.
    pub fn list_prefix(
        &self,
        bucket: &str,
        prefix: &str,
    ) -> Result<Vec<(String, u64)>, StoreError> {
        match &self.backend {
            Backend::Memory(map) => Ok(map
                .read()
                .iter()
                .filter(|((b, k), _)| b == bucket && k.starts_with(prefix))
                .map(|((_, k), v)| (k.clone(), v.len() as u64))
                .collect()),
            Backend::Disk { root, .. } => {
                let bucket_dir = root.join(bucket);
                if bucket.is_empty() || bucket.contains('/') || !bucket_dir.is_dir() {
                    return Ok(Vec::new());
                }
                let mut out = Vec::new();
                for entry in walkdir::WalkDir::new(&bucket_dir).min_depth(1) {
                    let entry = entry.map_err(|e| {
                        StoreError::Io(
                            e.into_io_error()
                                .unwrap_or_else(|| std::io::Error::other("directory walk failed")),
                        )
                    })?;
                    if !entry.file_type().is_file()
                        || entry.file_name().to_string_lossy().starts_with(TMP_PREFIX)
                    {
                        continue;
                    }
                    let rel = entry
                        .path()
                        .strip_prefix(&bucket_dir)
                        .expect("walk stays under bucket dir");
                    let key = rel
                        .components()
                        .map(|c| c.as_os_str().to_string_lossy())
                        .collect::<Vec<_>>()
                        .join("/");
                    if key.starts_with(prefix) {
                        out.push((
                            key,
                            entry
                                .metadata()
                                .map_err(|e| {
                                    StoreError::Io(e.into_io_error().unwrap_or_else(|| {
                                        std::io::Error::other("metadata failed")
                                    }))
                                })?
                                .len(),
                        ));
                    }
                }
                out.sort();
                Ok(out)
            }
        }
    }
}

fn object_path(root: &Path, object: &ObjectRef) -> PathBuf {
    let mut p = root.join(&object.bucket);
    for part in object.key.split('/') {
        p.push(part);
    }
    p
}

fn no_such(object: &ObjectRef) -> StoreError {
    StoreError::NoSuchObject {
        bucket: object.bucket.clone(),
        key: object.key.clone(),
    }
}

fn check_bounds(range: &ObjectRange, size: u64) -> Result<(), StoreError> {
    match range.offset.checked_add(range.length) {
        Some(end) if end <= size => Ok(()),
        _ => Err(StoreError::RangeOutOfBounds {
            bucket: range.object.bucket.clone(),
            key: range.object.key.clone(),
            offset: range.offset,
            length: range.length,
            size,
        }),
    }
}

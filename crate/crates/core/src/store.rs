//! Content-addressed store for encoder outputs and per-image pre-RoPE KV caches.
//!
//! Entries are keyed by the SHA-256 of an image's raw pixel bytes and tagged
//! with the fingerprint of the model that produced them. On disk a store is
//! a directory holding `manifest.json` and `blobs/<sha256>.bin`, where each
//! blob is little-endian `f32` data named by the digest of its own bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{KvTensors, ToyVlm};
use crate::sequence::Image;
use crate::tensor::Matrix;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_DIR: &str = "blobs";
const LOCK_FILE: &str = ".lock";
const FORMAT: &str = "vlcache-store";
const VERSION: u32 = 1;
const DIGEST: &str = "sha256";

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageHash([u8; 32]);

impl ImageHash {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for ImageHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ImageHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageHash({})", self.to_hex())
    }
}

impl FromStr for ImageHash {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 64 || s.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(Error::Input(format!("'{s}' is not a 64-char lowercase hex digest")));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| Error::Input(format!("bad digest '{s}': {e}")))?;
        Ok(Self(out))
    }
}

/// Digest of one image's raw pixel bytes.
pub fn hash_image(image: &Image) -> Result<ImageHash> {
    if image.pixels().is_empty() {
        return Err(Error::Input("cannot hash an empty pixel buffer".into()));
    }
    Ok(ImageHash::of_bytes(image.pixels()))
}

/// Digest of the concatenated pixel bytes of all images, in order.
pub fn hash_request(images: &[Image]) -> Result<ImageHash> {
    if images.is_empty() {
        return Err(Error::Input("cannot hash an empty image list".into()));
    }
    let mut h = Sha256::new();
    for img in images {
        if img.pixels().is_empty() {
            return Err(Error::Input("cannot hash an empty pixel buffer".into()));
        }
        h.update(img.pixels());
    }
    Ok(ImageHash(h.finalize().into()))
}

/// Identity and tensor shapes of the live model, checked on every get and put.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelStamp {
    pub fingerprint: u64,
    pub num_layers: usize,
    pub tokens_per_image: usize,
    pub model_dim: usize,
    pub kv_dim: usize,
}

impl ToyVlm {
    pub fn stamp(&self) -> ModelStamp {
        let c = self.config();
        ModelStamp {
            fingerprint: self.fingerprint(),
            num_layers: c.num_layers,
            tokens_per_image: c.tokens_per_image,
            model_dim: c.model_dim,
            kv_dim: c.kv_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCacheEntry {
    pub hash: ImageHash,
    /// `[T, d]`
    pub embeddings: Matrix,
    pub model_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheEntry {
    pub hash: ImageHash,
    /// Per-layer pre-RoPE K/V, `[L][T, kv_dim]`.
    pub kv: KvTensors,
    /// Position of the image's first token in the request that produced it.
    pub origin_position: usize,
    pub model_fingerprint: u64,
}

impl EncoderCacheEntry {
    fn check_shape(&self, stamp: &ModelStamp) -> std::result::Result<(), String> {
        if self.embeddings.shape() != (stamp.tokens_per_image, stamp.model_dim) {
            return Err(format!(
                "embeddings are {:?}, model needs [{}, {}]",
                self.embeddings.shape(),
                stamp.tokens_per_image,
                stamp.model_dim
            ));
        }
        if !self.embeddings.is_finite() {
            return Err("embeddings contain non-finite values".into());
        }
        Ok(())
    }
}

impl KvCacheEntry {
    fn check_shape(&self, stamp: &ModelStamp) -> std::result::Result<(), String> {
        let want = (stamp.tokens_per_image, stamp.kv_dim);
        if self.kv.keys.len() != stamp.num_layers
            || self.kv.values.len() != stamp.num_layers
            || self.kv.keys.iter().chain(&self.kv.values).any(|m| m.shape() != want)
        {
            return Err(format!(
                "KV tensors do not match [{}][{}, {}]",
                stamp.num_layers, want.0, want.1
            ));
        }
        if !self.kv.is_finite() {
            return Err("KV tensors contain non-finite values".into());
        }
        Ok(())
    }
}

fn check_fingerprint(key: &ImageHash, stored: u64, stamp: &ModelStamp) -> Result<()> {
    if stored != stamp.fingerprint {
        return Err(Error::StaleCache {
            key: key.to_hex(),
            stored,
            live: stamp.fingerprint,
        });
    }
    Ok(())
}

/// In-memory store; sharded maps let readers proceed while other keys are written.
#[derive(Debug, Default)]
pub struct CacheStore {
    encoder: DashMap<ImageHash, Arc<EncoderCacheEntry>>,
    kv: DashMap<ImageHash, Arc<KvCacheEntry>>,
}

impl CacheStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn encoder_len(&self) -> usize {
        self.encoder.len()
    }

    pub fn kv_len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty() && self.kv.is_empty()
    }

    pub fn put_encoder(&self, entry: EncoderCacheEntry, stamp: &ModelStamp) -> Result<()> {
        check_fingerprint(&entry.hash, entry.model_fingerprint, stamp)?;
        entry.check_shape(stamp).map_err(Error::Shape)?;
        self.encoder.insert(entry.hash, Arc::new(entry));
        Ok(())
    }

    /// `Ok(None)` is a miss; an entry from another model is a stale-cache error.
    pub fn get_encoder(&self, hash: &ImageHash, stamp: &ModelStamp) -> Result<Option<Arc<EncoderCacheEntry>>> {
        let Some(entry) = self.encoder.get(hash).map(|e| Arc::clone(e.value())) else {
            return Ok(None);
        };
        check_fingerprint(hash, entry.model_fingerprint, stamp)?;
        entry.check_shape(stamp).map_err(|reason| Error::Integrity {
            key: hash.to_hex(),
            reason,
        })?;
        Ok(Some(entry))
    }

    pub fn put_kv(&self, entry: KvCacheEntry, stamp: &ModelStamp) -> Result<()> {
        check_fingerprint(&entry.hash, entry.model_fingerprint, stamp)?;
        entry.check_shape(stamp).map_err(Error::Shape)?;
        self.kv.insert(entry.hash, Arc::new(entry));
        Ok(())
    }

    pub fn get_kv(&self, hash: &ImageHash, stamp: &ModelStamp) -> Result<Option<Arc<KvCacheEntry>>> {
        let Some(entry) = self.kv.get(hash).map(|e| Arc::clone(e.value())) else {
            return Ok(None);
        };
        check_fingerprint(hash, entry.model_fingerprint, stamp)?;
        entry.check_shape(stamp).map_err(|reason| Error::Integrity {
            key: hash.to_hex(),
            reason,
        })?;
        Ok(Some(entry))
    }

    pub fn encoder_keys(&self) -> Vec<ImageHash> {
        let mut keys: Vec<_> = self.encoder.iter().map(|e| *e.key()).collect();
        keys.sort();
        keys
    }

    pub fn kv_keys(&self) -> Vec<ImageHash> {
        let mut keys: Vec<_> = self.kv.iter().map(|e| *e.key()).collect();
        keys.sort();
        keys
    }

    /// Raw lookups without fingerprint checks, for persistence and inspection.
    pub fn encoder_entry(&self, hash: &ImageHash) -> Option<Arc<EncoderCacheEntry>> {
        self.encoder.get(hash).map(|e| Arc::clone(e.value()))
    }

    pub fn kv_entry(&self, hash: &ImageHash) -> Option<Arc<KvCacheEntry>> {
        self.kv.get(hash).map(|e| Arc::clone(e.value()))
    }

    /// Writes the store to `dir` (created if needed) under an exclusive lock.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = DirLock::acquire(dir)?;
        self.persist_locked(dir, &lock)
    }

    /// [`persist`](Self::persist) for a caller that already holds the lock on `dir`,
    /// e.g. across a load, update, write cycle.
    pub fn persist_locked(&self, dir: &Path, _lock: &DirLock) -> Result<()> {
        fs::create_dir_all(dir.join(BLOB_DIR)).map_err(|e| Error::io(dir, e))?;

        let mut manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            digest: DIGEST.into(),
            encoder: Vec::new(),
            kv: Vec::new(),
        };
        for key in self.encoder_keys() {
            let e = self.encoder_entry(&key).expect("listed key");
            let blob = write_blob(dir, &f32_bytes(e.embeddings.as_slice()))?;
            manifest.encoder.push(EncoderRecord {
                key: key.to_hex(),
                blob: blob.0,
                bytes: blob.1,
                rows: e.embeddings.rows(),
                cols: e.embeddings.cols(),
                fingerprint: format!("{:016x}", e.model_fingerprint),
            });
        }
        for key in self.kv_keys() {
            let e = self.kv_entry(&key).expect("listed key");
            let mut bytes = Vec::new();
            for (k, v) in e.kv.keys.iter().zip(&e.kv.values) {
                bytes.extend(f32_bytes(k.as_slice()));
                bytes.extend(f32_bytes(v.as_slice()));
            }
            let blob = write_blob(dir, &bytes)?;
            manifest.kv.push(KvRecord {
                key: key.to_hex(),
                blob: blob.0,
                bytes: blob.1,
                layers: e.kv.num_layers(),
                tokens: e.kv.seq_len(),
                kv_dim: e.kv.keys.first().map_or(0, Matrix::cols),
                origin_position: e.origin_position,
                fingerprint: format!("{:016x}", e.model_fingerprint),
            });
        }

        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Reads a persisted store, verifying every blob's length and digest.
    /// A directory without a manifest loads as an empty store.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Integrity {
            key: MANIFEST_FILE.into(),
            reason: e.to_string(),
        })?;
        if manifest.format != FORMAT || manifest.version != VERSION || manifest.digest != DIGEST {
            return Err(Error::Integrity {
                key: MANIFEST_FILE.into(),
                reason: format!(
                    "unsupported manifest {} v{} ({})",
                    manifest.format, manifest.version, manifest.digest
                ),
            });
        }

        let store = Self::new();
        for rec in manifest.encoder {
            let key = parse_key(&rec.key)?;
            let floats = read_blob(dir, &rec.key, &rec.blob, rec.bytes, rec.rows * rec.cols)?;
            let entry = EncoderCacheEntry {
                hash: key,
                embeddings: Matrix::from_vec(rec.rows, rec.cols, floats),
                model_fingerprint: parse_fingerprint(&rec.key, &rec.fingerprint)?,
            };
            store.encoder.insert(key, Arc::new(entry));
        }
        for rec in manifest.kv {
            let key = parse_key(&rec.key)?;
            let per = rec.tokens * rec.kv_dim;
            let floats = read_blob(dir, &rec.key, &rec.blob, rec.bytes, 2 * rec.layers * per)?;
            let mut keys = Vec::with_capacity(rec.layers);
            let mut values = Vec::with_capacity(rec.layers);
            for chunk in floats.chunks_exact(2 * per.max(1)).take(rec.layers) {
                keys.push(Matrix::from_vec(rec.tokens, rec.kv_dim, chunk[..per].to_vec()));
                values.push(Matrix::from_vec(rec.tokens, rec.kv_dim, chunk[per..2 * per].to_vec()));
            }
            let entry = KvCacheEntry {
                hash: key,
                kv: KvTensors { keys, values },
                origin_position: rec.origin_position,
                model_fingerprint: parse_fingerprint(&rec.key, &rec.fingerprint)?,
            };
            store.kv.insert(key, Arc::new(entry));
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    digest: String,
    encoder: Vec<EncoderRecord>,
    kv: Vec<KvRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderRecord {
    key: String,
    blob: String,
    bytes: usize,
    rows: usize,
    cols: usize,
    fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KvRecord {
    key: String,
    blob: String,
    bytes: usize,
    layers: usize,
    tokens: usize,
    kv_dim: usize,
    origin_position: usize,
    fingerprint: String,
}

fn parse_key(key: &str) -> Result<ImageHash> {
    key.parse().map_err(|_| Error::Integrity {
        key: key.to_string(),
        reason: "manifest key is not a lowercase sha256 hex digest".into(),
    })
}

fn parse_fingerprint(key: &str, s: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Integrity {
        key: key.to_string(),
        reason: format!("bad model fingerprint '{s}'"),
    })
}

fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn blob_path(dir: &Path, digest: &str) -> PathBuf {
    dir.join(BLOB_DIR).join(format!("{digest}.bin"))
}

fn write_blob(dir: &Path, bytes: &[u8]) -> Result<(String, usize)> {
    let digest = hex::encode(Sha256::digest(bytes));
    let path = blob_path(dir, &digest);
    let tmp = path.with_extension("bin.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    Ok((digest, bytes.len()))
}

fn read_blob(dir: &Path, key: &str, digest: &str, len: usize, floats: usize) -> Result<Vec<f32>> {
    let integrity = |reason: String| Error::Integrity {
        key: key.to_string(),
        reason,
    };
    if len != 4 * floats {
        return Err(integrity(format!("manifest declares {len} bytes for {floats} floats")));
    }
    let path = blob_path(dir, digest);
    let bytes = fs::read(&path).map_err(|e| integrity(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() != len {
        return Err(integrity(format!(
            "blob {digest} is {} bytes, manifest says {len}",
            bytes.len()
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != digest {
        return Err(integrity(format!("blob {digest} does not match its digest")));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Exclusive advisory lock: a `.lock` file created with `create_new`.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Setup(format!(
                "store {} is locked by another writer ({})",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Counts of entries per kind, keyed for display.
pub fn summary(store: &CacheStore) -> BTreeMap<&'static str, usize> {
    BTreeMap::from([("encoder", store.encoder_len()), ("kv", store.kv_len())])
}

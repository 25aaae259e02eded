//! On-disk cache of extracted object masks, one JSON file per source image
//! keyed by the SHA-256 of the image file. Files are written to a temporary
//! name and renamed into place so readers never see a torn record.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::backend::{extract_objects, TokenizerBackend};
use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::par;
use crate::scenegen::{DatasetManifest, ObjectAnnotation};

pub const INDEX_FILE: &str = "index.json";

pub fn image_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub image_hash: String,
    pub backend: TokenizerBackend,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub image_path: String,
    pub image_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub backend: TokenizerBackend,
    pub entries: Vec<CacheEntry>,
    /// Extractions executed by the run that produced this index.
    pub segmentations_run: usize,
}

fn record_path(cache_dir: &Path, hash: &str) -> PathBuf {
    cache_dir.join(format!("{hash}.json"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1.write_all(bytes).at(&tmp.0)?;
    tmp.1.sync_all().at(&tmp.0)?;
    drop(tmp.1);
    fs::rename(&tmp.0, path).at(path)
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(PathBuf, fs::File)> {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let name = target
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let p = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let f = fs::File::create(&p).at(&p)?;
    Ok((p, f))
}

fn read_record(path: &Path) -> Option<CacheRecord> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice(&bytes).ok()
}

/// Extracts objects for every manifest entry, skipping images whose record
/// already exists for the same backend.
pub fn preprocess_masks(
    manifest: &DatasetManifest,
    data_dir: &Path,
    backend: &TokenizerBackend,
    cache_dir: &Path,
) -> Result<CacheIndex> {
    fs::create_dir_all(cache_dir).at(cache_dir)?;
    let runs = AtomicUsize::new(0);
    let results = par::map_slice(&manifest.entries, |e| -> Result<CacheEntry> {
        let path = data_dir.join(&e.image_path);
        let bytes = fs::read(&path).at(&path)?;
        let hash = image_hash(&bytes);
        let rec_path = record_path(cache_dir, &hash);
        let fresh = read_record(&rec_path).is_some_and(|r| r.image_hash == hash && r.backend == *backend);
        if !fresh {
            let image = Image::decode_png(&bytes).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            let objects = extract_objects(&image, backend, Some(&e.objects))?;
            runs.fetch_add(1, Ordering::Relaxed);
            let rec = CacheRecord {
                image_hash: hash.clone(),
                backend: *backend,
                objects,
            };
            write_atomic(&rec_path, &serde_json::to_vec(&rec)?)?;
        }
        Ok(CacheEntry {
            image_path: e.image_path.clone(),
            image_hash: hash,
        })
    });
    let index = CacheIndex {
        backend: *backend,
        entries: results.into_iter().collect::<Result<_>>()?,
        segmentations_run: runs.into_inner(),
    };
    write_atomic(&cache_dir.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
    Ok(index)
}

/// Read side of the cache.
#[derive(Debug, Clone)]
pub struct ObjectCache {
    dir: PathBuf,
    pub index: CacheIndex,
}

impl ObjectCache {
    pub fn open(cache_dir: &Path) -> Result<Self> {
        let p = cache_dir.join(INDEX_FILE);
        let bytes = fs::read(&p).at(&p)?;
        Ok(Self {
            dir: cache_dir.to_path_buf(),
            index: serde_json::from_slice(&bytes)?,
        })
    }

    /// Objects of entry `i`, after checking that `image_bytes` still hashes to
    /// the value recorded at preprocessing time.
    pub fn objects(&self, i: usize, image_bytes: &[u8]) -> Result<Vec<ObjectAnnotation>> {
        let entry = self
            .index
            .entries
            .get(i)
            .ok_or_else(|| Error::Config(format!("cache index has no entry {i}")))?;
        let actual = image_hash(image_bytes);
        let path = record_path(&self.dir, &entry.image_hash);
        if actual != entry.image_hash {
            return Err(Error::StaleCache {
                path,
                recorded: entry.image_hash.clone(),
                actual,
            });
        }
        let bytes = fs::read(&path).at(&path)?;
        let rec: CacheRecord = serde_json::from_slice(&bytes)?;
        if rec.image_hash != actual {
            return Err(Error::StaleCache {
                path,
                recorded: rec.image_hash,
                actual,
            });
        }
        for o in &rec.objects {
            o.rle.decode()?;
        }
        Ok(rec.objects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            image_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

//! Content-addressed, write-once result cache.
//!
//! Layout: `<root>/<backend_id>/<op>/<sha256>.json` (metadata) next to
//! `<sha256>.bin` (payload). The key is SHA-256 over the backend id, the
//! operation name and the canonical request bytes. Entries are committed by
//! atomic rename without clobbering, so concurrent writers of the same key
//! are harmless; the metadata file appears last and marks the entry valid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Captioner, CompletionRequest, Embedder, ImageGenerator, PairScorer, Summarizer};
use crate::error::{Error, Result};
use crate::raster::ImagePayload;

#[derive(Debug, Default)]
pub struct CacheStats {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
}

impl CacheStats {
    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryMeta {
    backend_id: String,
    op: String,
    key: String,
    payload_len: usize,
    payload_sha256: String,
}

#[derive(Debug)]
pub struct ContentCache {
    root: PathBuf,
    stats: CacheStats,
}

fn path_component(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if cleaned.len() > 80 {
        // keep it readable but unique
        format!("{}_{}", &cleaned[..48], &hex::encode(Sha256::digest(s.as_bytes()))[..16])
    } else {
        cleaned
    }
}

impl ContentCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(ContentCache { root, stats: CacheStats::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn key(backend_id: &str, op: &str, request: &[u8]) -> String {
        let mut h = Sha256::new();
        for part in [backend_id.as_bytes(), op.as_bytes(), request] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        hex::encode(h.finalize())
    }

    fn entry_paths(&self, backend_id: &str, op: &str, key: &str) -> (PathBuf, PathBuf, PathBuf) {
        let dir = self.root.join(path_component(backend_id)).join(path_component(op));
        (dir.join(format!("{key}.json")), dir.join(format!("{key}.bin")), dir)
    }

    /// Cached payload for the request, if committed.
    pub fn get(&self, backend_id: &str, op: &str, request: &[u8]) -> Result<Option<Vec<u8>>> {
        let key = Self::key(backend_id, op, request);
        let (meta_path, bin_path, _) = self.entry_paths(backend_id, op, &key);
        if !meta_path.exists() {
            return Ok(None);
        }
        let meta: EntryMeta = serde_json::from_slice(&fs::read(&meta_path)?)?;
        let payload = fs::read(&bin_path)?;
        if meta.payload_len != payload.len() || meta.payload_sha256 != hex::encode(Sha256::digest(&payload)) {
            return Err(Error::Protocol(format!("cache entry {} is corrupt", bin_path.display())));
        }
        Ok(Some(payload))
    }

    pub fn put(&self, backend_id: &str, op: &str, request: &[u8], payload: &[u8]) -> Result<()> {
        let key = Self::key(backend_id, op, request);
        let (meta_path, bin_path, dir) = self.entry_paths(backend_id, op, &key);
        fs::create_dir_all(&dir)?;
        let meta = EntryMeta {
            backend_id: backend_id.to_string(),
            op: op.to_string(),
            key,
            payload_len: payload.len(),
            payload_sha256: hex::encode(Sha256::digest(payload)),
        };
        write_once(&dir, &bin_path, payload)?;
        write_once(&dir, &meta_path, &serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Returns the cached payload or computes, stores and returns it.
    /// Errors from `compute` are not cached.
    pub fn get_or_compute(
        &self,
        backend_id: &str,
        op: &str,
        request: &[u8],
        compute: impl FnOnce() -> Result<Vec<u8>>,
    ) -> Result<Vec<u8>> {
        if let Some(hit) = self.get(backend_id, op, request)? {
            self.stats.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.stats.misses.fetch_add(1, Ordering::Relaxed);
        let payload = compute()?;
        self.put(backend_id, op, request, &payload)?;
        Ok(payload)
    }
}

fn write_once(dir: &Path, target: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    match tmp.persist_noclobber(target) {
        Ok(_) => Ok(()),
        // another writer committed the same content first
        Err(e) if target.exists() => {
            drop(e);
            Ok(())
        }
        Err(e) => Err(e.error.into()),
    }
}

fn encode_frames(frames: &[&[u8]]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    for f in frames {
        out.extend_from_slice(&(f.len() as u64).to_le_bytes());
        out.extend_from_slice(f);
    }
    out
}

fn decode_frames(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    let bad = || Error::Protocol("malformed cached frame payload".into());
    let read_u64 = |b: &[u8], at: usize| -> Result<u64> {
        b.get(at..at + 8).map(|s| u64::from_le_bytes(s.try_into().unwrap())).ok_or_else(bad)
    };
    let n = read_u64(bytes, 0)? as usize;
    let mut at = 8;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u64(bytes, at)? as usize;
        at += 8;
        out.push(bytes.get(at..at + len).ok_or_else(bad)?.to_vec());
        at += len;
    }
    Ok(out)
}

fn f32s_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

/// Wraps any backend so every successful result goes through a [`ContentCache`].
#[derive(Debug, Clone)]
pub struct Cached<T> {
    inner: T,
    cache: Arc<ContentCache>,
}

impl<T> Cached<T> {
    pub fn new(inner: T, cache: Arc<ContentCache>) -> Self {
        Cached { inner, cache }
    }

    pub fn inner(&self) -> &T {
        &self.inner
    }
}

impl<T: Captioner> Captioner for Cached<T> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn caption(&self, image: &ImagePayload) -> Result<String> {
        let bytes = self.cache.get_or_compute(&self.backend_id(), "caption", image.bytes(), || {
            self.inner.caption(image).map(String::into_bytes)
        })?;
        String::from_utf8(bytes).map_err(|e| Error::Protocol(e.to_string()))
    }
}

impl<T: Summarizer> Summarizer for Cached<T> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>> {
        let req = serde_json::to_vec(request)?;
        let bytes = self.cache.get_or_compute(&self.backend_id(), "complete", &req, || {
            Ok(serde_json::to_vec(&self.inner.complete(request)?)?)
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn samples(&self) -> bool {
        self.inner.samples()
    }
}

impl<T: ImageGenerator> ImageGenerator for Cached<T> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn generate(&self, prompt: &str, q: usize, seed: u64) -> Result<Vec<ImagePayload>> {
        let req = serde_json::to_vec(&serde_json::json!({ "prompt": prompt, "q": q, "seed": seed }))?;
        let bytes = self.cache.get_or_compute(&self.backend_id(), "generate", &req, || {
            let imgs = self.inner.generate(prompt, q, seed)?;
            let frames: Vec<&[u8]> = imgs.iter().map(|i| i.bytes()).collect();
            Ok(encode_frames(&frames))
        })?;
        Ok(decode_frames(&bytes)?.into_iter().map(ImagePayload::from_bytes).collect())
    }
}

impl<T: Embedder> Embedder for Cached<T> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let bytes = self.cache.get_or_compute(&self.backend_id(), "embed_text", text.as_bytes(), || {
            Ok(f32s_to_bytes(&self.inner.embed_text(text)?))
        })?;
        Ok(bytes_to_f32s(&bytes))
    }

    fn embed_image(&self, image: &ImagePayload) -> Result<Vec<f32>> {
        let bytes = self.cache.get_or_compute(&self.backend_id(), "embed_image", image.bytes(), || {
            Ok(f32s_to_bytes(&self.inner.embed_image(image)?))
        })?;
        Ok(bytes_to_f32s(&bytes))
    }
}

impl<T: PairScorer> PairScorer for Cached<T> {
    fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    fn f1(&self, candidate: &str, reference: &str) -> Result<f64> {
        let req = serde_json::to_vec(&[candidate, reference])?;
        let bytes = self.cache.get_or_compute(&self.backend_id(), "pair_f1", &req, || {
            Ok(self.inner.f1(candidate, reference)?.to_le_bytes().to_vec())
        })?;
        let arr: [u8; 8] = bytes.as_slice().try_into().map_err(|_| Error::Protocol("corrupt cached score".into()))?;
        Ok(f64::from_le_bytes(arr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{caption_image, MockCaptioner, MockEmbedder, MockImageGenerator, MockWorld};
    use proptest::prelude::*;

    #[test]
    fn second_caption_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ContentCache::new(dir.path()).unwrap());
        let w = MockWorld::default();
        let c = Cached::new(MockCaptioner::new(w.clone()), cache.clone());
        let img = ImagePayload::encode_png(&w.render_tag("dog", [1; 32]));
        let a = caption_image(&c, "i", &img).unwrap();
        let b = caption_image(&c, "i", &img).unwrap();
        assert_eq!(a, b);
        assert_eq!((cache.stats().hits(), cache.stats().misses()), (1, 1));

        let key = ContentCache::key(&c.backend_id(), "caption", img.bytes());
        let dir = cache.root().join(path_component(&c.backend_id())).join("caption");
        assert!(dir.join(format!("{key}.json")).exists());
        assert!(dir.join(format!("{key}.bin")).exists());
    }

    #[test]
    fn generated_sets_and_embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ContentCache::new(dir.path()).unwrap());
        let w = MockWorld::default();
        let g = Cached::new(MockImageGenerator::new(w.clone()), cache.clone());
        let first = g.generate("striped cat", 3, 9).unwrap();
        assert_eq!(g.generate("striped cat", 3, 9).unwrap(), first);
        assert_eq!(first, MockImageGenerator::new(w.clone()).generate("striped cat", 3, 9).unwrap());
        let e = Cached::new(MockEmbedder::new(w.clone()), cache.clone());
        let v = e.embed_text("dog").unwrap();
        assert_eq!(e.embed_text("dog").unwrap(), v);
        assert_eq!(v, MockEmbedder::new(w).embed_text("dog").unwrap());
    }

    #[test]
    fn concurrent_writers_agree() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ContentCache::new(dir.path()).unwrap());
        std::thread::scope(|s| {
            for _ in 0..8 {
                let cache = cache.clone();
                s.spawn(move || cache.put("b", "op", b"req", b"payload").unwrap());
            }
        });
        assert_eq!(cache.get("b", "op", b"req").unwrap().unwrap(), b"payload");
    }

    #[test]
    fn errors_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ContentCache::new(dir.path()).unwrap();
        let r = cache.get_or_compute("b", "op", b"r", || Err(Error::BackendUnreachable("down".into())));
        assert!(r.is_err());
        assert_eq!(cache.get_or_compute("b", "op", b"r", || Ok(b"ok".to_vec())).unwrap(), b"ok");
    }

    proptest! {
        #[test]
        fn miss_and_hit_are_byte_identical(req in prop::collection::vec(any::<u8>(), 0..64),
                                           payload in prop::collection::vec(any::<u8>(), 0..256)) {
            let dir = tempfile::tempdir().unwrap();
            let cache = ContentCache::new(dir.path()).unwrap();
            let miss = cache.get_or_compute("b", "op", &req, || Ok(payload.clone())).unwrap();
            let hit = cache.get_or_compute("b", "op", &req, || unreachable!()).unwrap();
            prop_assert_eq!(&miss, &payload);
            prop_assert_eq!(miss, hit);
        }

        #[test]
        fn frames_round_trip(frames in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..32), 0..6)) {
            let refs: Vec<&[u8]> = frames.iter().map(|f| f.as_slice()).collect();
            prop_assert_eq!(decode_frames(&encode_frames(&refs)).unwrap(), frames);
        }
    }
}

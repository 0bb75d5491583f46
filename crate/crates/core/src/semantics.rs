//! Per-video semantics matrices (frames by proposals) and their on-disk cache.
//!
//! Cache file layout, little-endian throughout:
//!
//! ```text
//! "KPSC" | version u32 | kb_hash [32] | encoder_id (u32 len + utf8)
//!        | sampling_seed u64 | n u32 | m u32 | n*m f32 row-major | crc32 u32
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::encoder::{match_scores, DualEncoder, Embedding, FrameContent, MatchConfig};
use crate::fewshot::VideoRecord;
use crate::kb::{ContentHash, KnowledgeBase};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"KPSC";
const VERSION: u32 = 1;

/// Sampling seed marking a matrix that covers every frame of the video.
/// Sampled sequences are row selections of it.
pub const ALL_FRAMES: u64 = u64::MAX;

/// KB hash used when frames are fed to the model as raw embeddings.
pub fn raw_frames_hash() -> ContentHash {
    Sha256::digest(b"raw-frames").into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticsMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    pub kb_hash: ContentHash,
    pub encoder_id: String,
    pub sampling_seed: u64,
}

impl SemanticsMatrix {
    pub fn new(
        rows: usize,
        cols: usize,
        data: Vec<f32>,
        kb_hash: ContentHash,
        encoder_id: &str,
        sampling_seed: u64,
    ) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::invalid(format!(
                "semantics matrix {rows}x{cols} given {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite semantics value at {i}")));
        }
        Ok(SemanticsMatrix {
            rows,
            cols,
            data,
            kb_hash,
            encoder_id: encoder_id.to_owned(),
            sampling_seed,
        })
    }

    /// Stores `scores` at f32 precision.
    pub fn from_scores(scores: &Array2<f64>, kb_hash: ContentHash, encoder_id: &str, sampling_seed: u64) -> Result<Self> {
        let (rows, cols) = scores.dim();
        let data = scores.iter().map(|&v| v as f32).collect();
        SemanticsMatrix::new(rows, cols, data, kb_hash, encoder_id, sampling_seed)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(i, j)| f64::from(self.data[i * self.cols + j]))
    }

    pub fn select_rows(&self, indices: &[usize], sampling_seed: u64) -> Result<SemanticsMatrix> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!("row {i} out of {} frames", self.rows)));
            }
            data.extend_from_slice(self.row(i));
        }
        SemanticsMatrix::new(indices.len(), self.cols, data, self.kb_hash, &self.encoder_id, sampling_seed)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.encoder_id.len() + 4 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.kb_hash);
        buf.extend_from_slice(&(self.encoder_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(self.encoder_id.as_bytes());
        buf.extend_from_slice(&self.sampling_seed.to_le_bytes());
        buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<SemanticsMatrix> {
        let bad = |reason: &str| Error::Integrity {
            path: path.to_owned(),
            reason: reason.to_owned(),
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes.len() < 8 {
            return Err(bad("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let stored_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored_crc {
            return Err(bad("checksum mismatch"));
        }
        let kb_hash: ContentHash = r.take(32).ok_or_else(|| bad("truncated header"))?.try_into().expect("32 bytes");
        let id_len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let id = r.take(id_len).ok_or_else(|| bad("truncated encoder id"))?;
        let encoder_id = std::str::from_utf8(id).map_err(|_| bad("encoder id is not UTF-8"))?.to_owned();
        let seed = r.u64().ok_or_else(|| bad("truncated header"))?;
        let rows = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let cols = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let payload = r.take(rows * cols * 4).ok_or_else(|| bad("truncated data"))?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        SemanticsMatrix::new(rows, cols, data, kb_hash, &encoder_id, seed).map_err(|e| bad(&e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub video_id: String,
    pub kb_hash: ContentHash,
    pub encoder_id: String,
    pub sampling_seed: u64,
}

impl CacheKey {
    pub fn new(video_id: &str, kb_hash: ContentHash, encoder_id: &str, sampling_seed: u64) -> Result<Self> {
        if video_id.is_empty() || encoder_id.is_empty() {
            return Err(Error::invalid("cache keys need a video id and an encoder id"));
        }
        Ok(CacheKey {
            video_id: video_id.to_owned(),
            kb_hash,
            encoder_id: encoder_id.to_owned(),
            sampling_seed,
        })
    }

    fn file_name(&self) -> String {
        let mut h = Sha256::new();
        for part in [self.video_id.as_bytes(), self.encoder_id.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(self.sampling_seed.to_le_bytes());
        format!("{}.kpsc", hex::encode(h.finalize()))
    }
}

/// One file per key under `<root>/<kb hash>/`.
#[derive(Debug, Clone)]
pub struct SemanticsCache {
    root: PathBuf,
}

impl SemanticsCache {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(SemanticsCache { root: root.to_owned() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root.join(hex::encode(key.kb_hash)).join(key.file_name())
    }

    /// Writes to a temporary file in the target directory, then renames it
    /// into place.
    pub fn put(&self, key: &CacheKey, mat: &SemanticsMatrix) -> Result<PathBuf> {
        if mat.kb_hash != key.kb_hash || mat.encoder_id != key.encoder_id || mat.sampling_seed != key.sampling_seed {
            return Err(Error::invalid(format!(
                "semantics metadata does not match cache key for {}",
                key.video_id
            )));
        }
        let path = self.path_for(key);
        let dir = path.parent().expect("keyed path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.{}.{:?}.tmp",
            key.file_name(),
            std::process::id(),
            std::thread::current().id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&mat.encode())?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(&tmp, e));
        }
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// `None` when no file exists for `key`.
    pub fn get(&self, key: &CacheKey) -> Result<Option<SemanticsMatrix>> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mat = SemanticsMatrix::decode(&bytes, &path)?;
        if mat.kb_hash != key.kb_hash || mat.encoder_id != key.encoder_id || mat.sampling_seed != key.sampling_seed {
            return Err(Error::Integrity {
                path,
                reason: "stored metadata does not match the requested key".into(),
            });
        }
        Ok(Some(mat))
    }
}

/// What a video frame is turned into before the temporal model sees it.
enum Columns {
    /// Matching scores against every KB proposal.
    Knowledge { kb_hash: ContentHash, texts: Vec<Embedding> },
    /// The frame embedding itself.
    RawFrames,
}

/// Turns frames into semantics matrices. Proposal embeddings are computed
/// once, at construction.
pub struct SemanticsExtractor<'e> {
    encoder: &'e dyn DualEncoder,
    encoder_id: String,
    cfg: MatchConfig,
    columns: Columns,
}

impl<'e> SemanticsExtractor<'e> {
    pub fn new(kb: &KnowledgeBase, encoder: &'e dyn DualEncoder, cfg: MatchConfig) -> Result<Self> {
        if kb.is_empty() {
            return Err(Error::invalid("knowledge base is empty"));
        }
        let texts = encoder.embed_text(&kb.texts())?;
        Ok(SemanticsExtractor {
            encoder,
            encoder_id: encoder.id(),
            cfg,
            columns: Columns::Knowledge {
                kb_hash: *kb.content_hash(),
                texts,
            },
        })
    }

    pub fn raw_frames(encoder: &'e dyn DualEncoder) -> Self {
        SemanticsExtractor {
            encoder,
            encoder_id: encoder.id(),
            cfg: MatchConfig::default(),
            columns: Columns::RawFrames,
        }
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn kb_hash(&self) -> ContentHash {
        match &self.columns {
            Columns::Knowledge { kb_hash, .. } => *kb_hash,
            Columns::RawFrames => raw_frames_hash(),
        }
    }

    pub fn cols(&self) -> usize {
        match &self.columns {
            Columns::Knowledge { texts, .. } => texts.len(),
            Columns::RawFrames => self.encoder.dim(),
        }
    }

    pub fn extract(&self, frames: &[FrameContent], sampling_seed: u64) -> Result<SemanticsMatrix> {
        if frames.is_empty() {
            return Err(Error::invalid("no frames to extract"));
        }
        let emb = self.encoder.embed_frames(frames)?;
        let scores = match &self.columns {
            Columns::Knowledge { texts, .. } => match_scores(&emb, texts, &self.cfg)?,
            Columns::RawFrames => {
                let dim = self.encoder.dim();
                Array2::from_shape_fn((emb.len(), dim), |(i, j)| emb[i].values()[j])
            }
        };
        SemanticsMatrix::from_scores(&scores, self.kb_hash(), &self.encoder_id, sampling_seed)
    }
}

/// One-shot form of [`SemanticsExtractor::extract`].
pub fn extract_semantics(
    frames: &[FrameContent],
    kb: &KnowledgeBase,
    encoder: &dyn DualEncoder,
    cfg: MatchConfig,
    sampling_seed: u64,
) -> Result<SemanticsMatrix> {
    SemanticsExtractor::new(kb, encoder, cfg)?.extract(frames, sampling_seed)
}

/// Dense per-video semantics for training and evaluation, looked up in the
/// cache, then computed from frames if an extractor is available, then kept
/// in memory.
pub struct SemanticsStore<'e> {
    cache: Option<SemanticsCache>,
    extractor: Option<SemanticsExtractor<'e>>,
    kb_hash: ContentHash,
    encoder_id: String,
    memo: Mutex<HashMap<String, Arc<SemanticsMatrix>>>,
}

impl<'e> SemanticsStore<'e> {
    pub fn new(cache: Option<SemanticsCache>, extractor: SemanticsExtractor<'e>) -> Self {
        SemanticsStore {
            cache,
            kb_hash: extractor.kb_hash(),
            encoder_id: extractor.encoder_id().to_owned(),
            extractor: Some(extractor),
            memo: Mutex::new(HashMap::new()),
        }
    }

    /// A store that never computes; every video must already be cached.
    pub fn cache_only(cache: SemanticsCache, kb_hash: ContentHash, encoder_id: &str) -> Self {
        SemanticsStore {
            cache: Some(cache),
            extractor: None,
            kb_hash,
            encoder_id: encoder_id.to_owned(),
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn kb_hash(&self) -> ContentHash {
        self.kb_hash
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn dense(&self, video: &VideoRecord) -> Result<Arc<SemanticsMatrix>> {
        if let Some(m) = self.memo.lock().expect("memo lock").get(&video.video_id) {
            return Ok(m.clone());
        }
        let key = CacheKey::new(&video.video_id, self.kb_hash, &self.encoder_id, ALL_FRAMES)?;
        let cached = match &self.cache {
            Some(c) => c.get(&key)?,
            None => None,
        };
        let mat = match cached {
            Some(m) => m,
            None => {
                let ex = self.extractor.as_ref().ok_or_else(|| {
                    Error::invalid(format!("no cached semantics for video {}", video.video_id))
                })?;
                let m = ex.extract(&video.load_frames()?, ALL_FRAMES)?;
                if let Some(c) = &self.cache {
                    c.put(&key, &m)?;
                }
                m
            }
        };
        if mat.rows() != video.frame_count {
            return Err(Error::invalid(format!(
                "semantics for {} cover {} frames, manifest says {}",
                video.video_id,
                mat.rows(),
                video.frame_count
            )));
        }
        let mat = Arc::new(mat);
        self.memo
            .lock()
            .expect("memo lock")
            .insert(video.video_id.clone(), mat.clone());
        Ok(mat)
    }

    /// Rows of the dense matrix at `indices`, as model input.
    pub fn sequence(&self, video: &VideoRecord, indices: &[usize]) -> Result<Array2<f64>> {
        let dense = self.dense(video)?;
        let cols = dense.cols();
        let mut out = Array2::zeros((indices.len(), cols));
        for (r, &i) in indices.iter().enumerate() {
            if i >= dense.rows() {
                return Err(Error::invalid(format!("frame {i} out of range for {}", video.video_id)));
            }
            for (o, v) in out.row_mut(r).iter_mut().zip(dense.row(i)) {
                *o = f64::from(*v);
            }
        }
        Ok(out)
    }
}

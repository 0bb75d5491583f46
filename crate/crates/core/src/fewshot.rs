//! Video manifests, temporal sparse sampling, N-way K-shot episodes and the
//! multi-task evaluation loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::FrameContent;
use crate::{Error, Result};

pub const DEFAULT_SEGMENTS: usize = 16;
pub const DEFAULT_QUERIES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum FrameSource {
    /// One file per frame, in file-name order. `.txt` files are token bags,
    /// anything else is passed to the encoder as image bytes.
    Dir(PathBuf),
    Memory(Arc<Vec<FrameContent>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub class: String,
    pub frame_count: usize,
    pub frames: FrameSource,
}

impl VideoRecord {
    pub fn in_memory(video_id: &str, class: &str, frames: Vec<FrameContent>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid(format!("video {video_id} has no frames")));
        }
        Ok(VideoRecord {
            video_id: video_id.to_owned(),
            class: class.to_owned(),
            frame_count: frames.len(),
            frames: FrameSource::Memory(Arc::new(frames)),
        })
    }

    pub fn load_frames(&self) -> Result<Vec<FrameContent>> {
        let frames = match &self.frames {
            FrameSource::Memory(f) => f.as_ref().clone(),
            FrameSource::Dir(dir) => read_frame_dir(dir)?,
        };
        if frames.len() != self.frame_count {
            return Err(Error::invalid(format!(
                "video {} declares {} frames but has {}",
                self.video_id,
                self.frame_count,
                frames.len()
            )));
        }
        Ok(frames)
    }
}

fn read_frame_dir(dir: &Path) -> Result<Vec<FrameContent>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.is_file());
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            if p.extension().is_some_and(|e| e == "txt") {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                Ok(FrameContent::Tokens(text.split_whitespace().map(str::to_owned).collect()))
            } else {
                fs::read(&p).map(FrameContent::Image).map_err(|e| Error::io(&p, e))
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    video_id: String,
    class: String,
    frames_dir: PathBuf,
    frame_count: usize,
}

/// A set of videos. Class names are kept sorted so that labels derived from
/// them do not depend on line order.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    videos: Vec<VideoRecord>,
    by_class: BTreeMap<String, Vec<usize>>,
}

impl Manifest {
    pub fn new(videos: Vec<VideoRecord>) -> Result<Self> {
        let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        for (i, v) in videos.iter().enumerate() {
            if v.frame_count == 0 {
                return Err(Error::invalid(format!("video {} has no frames", v.video_id)));
            }
            if !seen.insert(v.video_id.as_str()) {
                return Err(Error::invalid(format!("duplicate video id {}", v.video_id)));
            }
            by_class.entry(v.class.clone()).or_default().push(i);
        }
        Ok(Manifest { videos, by_class })
    }

    /// JSON lines of `{video_id, class, frames_dir, frame_count}`; relative
    /// frame directories resolve against the manifest's directory.
    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut videos = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            if rec.frame_count == 0 {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    reason: format!("video {} has frame_count 0", rec.video_id),
                });
            }
            videos.push(VideoRecord {
                video_id: rec.video_id,
                class: rec.class,
                frame_count: rec.frame_count,
                frames: FrameSource::Dir(base.join(rec.frames_dir)),
            });
        }
        Manifest::new(videos)
    }

    /// Writes directory-backed records; in-memory videos cannot be written.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = String::new();
        for v in &self.videos {
            let FrameSource::Dir(dir) = &v.frames else {
                return Err(Error::invalid(format!("video {} has no frame directory", v.video_id)));
            };
            let rel = dir.strip_prefix(base).unwrap_or(dir).to_owned();
            let line = ManifestLine {
                video_id: v.video_id.clone(),
                class: v.class.clone(),
                frames_dir: rel,
                frame_count: v.frame_count,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn classes(&self) -> Vec<&str> {
        self.by_class.keys().map(String::as_str).collect()
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.by_class.keys().position(|c| c == class)
    }

    pub fn videos_of(&self, class: &str) -> &[usize] {
        self.by_class.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Keeps only videos of the listed classes; every listed class must exist.
    pub fn restrict(&self, classes: &[String]) -> Result<Manifest> {
        let missing: Vec<&str> = classes
            .iter()
            .filter(|c| !self.by_class.contains_key(c.as_str()))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("classes not in manifest: {}", missing.join(", "))));
        }
        let keep: std::collections::HashSet<&str> = classes.iter().map(String::as_str).collect();
        Manifest::new(
            self.videos
                .iter()
                .filter(|v| keep.contains(v.class.as_str()))
                .cloned()
                .collect(),
        )
    }
}

/// One class name per line; blank lines and `#` comments are skipped.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<String> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if out.iter().any(|c| c == line) {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                reason: format!("class {line} listed twice"),
            });
        }
        out.push(line.to_owned());
    }
    Ok(out)
}

/// Mixes `parts` into `base` with splitmix64 steps; used to give every
/// (epoch, item, sampling) its own stream.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Random(u64),
    Center,
}

/// Splits `len` frames into `segments` equal parts `[iL/n, (i+1)L/n)` and
/// takes one index from each. Empty parts (short videos) reuse their start,
/// clamped to the last frame.
pub fn sparse_sample(len: usize, segments: usize, mode: SamplingMode) -> Vec<usize> {
    assert!(len >= 1, "cannot sample an empty video");
    let mut rng = match mode {
        SamplingMode::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        SamplingMode::Center => None,
    };
    (0..segments)
        .map(|i| {
            let a = i * len / segments;
            let b = (i + 1) * len / segments;
            if b <= a {
                return a.min(len - 1);
            }
            match rng.as_mut() {
                Some(rng) => rng.random_range(a..b),
                None => (a + b) / 2,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledVideo {
    /// Index into [`Manifest::videos`].
    pub video: usize,
    /// Position of the video's class in [`Episode::classes`].
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<String>,
    pub support: Vec<LabeledVideo>,
    pub query: Vec<LabeledVideo>,
    pub seed: u64,
}

impl Episode {
    pub fn ways(&self) -> usize {
        self.classes.len()
    }
}

pub fn sample_episode(manifest: &Manifest, ways: usize, shots: usize, queries: usize, seed: u64) -> Result<Episode> {
    if ways == 0 || shots == 0 {
        return Err(Error::invalid("episodes need at least one way and one shot"));
    }
    let need = shots + queries;
    let eligible: Vec<&str> = manifest
        .classes()
        .into_iter()
        .filter(|c| manifest.videos_of(c).len() >= need)
        .collect();
    if eligible.len() < ways {
        return Err(Error::invalid(format!(
            "{ways}-way episodes need {ways} classes with at least {need} videos each, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, eligible.len(), ways);
    let mut episode = Episode {
        classes: Vec::with_capacity(ways),
        support: Vec::with_capacity(ways * shots),
        query: Vec::with_capacity(ways * queries),
        seed,
    };
    for (label, ci) in picked.iter().enumerate() {
        let class = eligible[ci];
        let pool = manifest.videos_of(class);
        let chosen = index::sample(&mut rng, pool.len(), need);
        for (j, vi) in chosen.iter().enumerate() {
            let item = LabeledVideo { video: pool[vi], label };
            if j < shots {
                episode.support.push(item);
            } else {
                episode.query.push(item);
            }
        }
        episode.classes.push(class.to_owned());
    }
    Ok(episode)
}

/// Anything that can fit a support set and label the queries of an episode.
pub trait EpisodeLearner: Sync {
    /// Predicted label for each query, in query order.
    fn predict_episode(&self, manifest: &Manifest, episode: &Episode) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            ways: 5,
            shots: 5,
            queries: DEFAULT_QUERIES,
            tasks: 500,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub mean_accuracy: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub task_accuracies: Vec<f64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub importance: Vec<ImportanceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub proposal: String,
    pub score: f64,
}

impl EvalReport {
    pub fn from_accuracies(protocol: EvalProtocol, task_accuracies: Vec<f64>) -> Self {
        let (mean_accuracy, ci95) = mean_ci95(&task_accuracies);
        EvalReport {
            protocol,
            mean_accuracy,
            ci95,
            task_accuracies,
            config: serde_json::Value::Null,
            importance: Vec::new(),
        }
    }
}

/// Mean and `1.96 * s / sqrt(t)` with the sample standard deviation; zero
/// width for a single task.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let t = values.len();
    if t == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / t as f64;
    if t == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
    (mean, 1.96 * var.sqrt() / (t as f64).sqrt())
}

/// Runs `protocol.tasks` episodes, task `t` seeded with `seed + t`. Tasks run
/// in parallel; the report lists them in task order.
pub fn evaluate(learner: &dyn EpisodeLearner, manifest: &Manifest, protocol: EvalProtocol) -> Result<EvalReport> {
    if protocol.tasks == 0 {
        return Err(Error::invalid("evaluation needs at least one task"));
    }
    let accs: Vec<Result<f64>> = (0..protocol.tasks)
        .into_par_iter()
        .map(|t| {
            let seed = protocol.seed.wrapping_add(t as u64);
            let ep = sample_episode(manifest, protocol.ways, protocol.shots, protocol.queries, seed)?;
            let preds = learner.predict_episode(manifest, &ep)?;
            if preds.len() != ep.query.len() {
                return Err(Error::invalid(format!(
                    "learner returned {} predictions for {} queries",
                    preds.len(),
                    ep.query.len()
                )));
            }
            let correct = preds.iter().zip(&ep.query).filter(|(p, q)| **p == q.label).count();
            Ok(if ep.query.is_empty() {
                0.0
            } else {
                correct as f64 / ep.query.len() as f64
            })
        })
        .collect();
    let accs = accs.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(protocol, accs))
}

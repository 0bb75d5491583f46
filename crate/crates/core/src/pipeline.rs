//! Glue between manifests, the semantics store and the temporal model.

use ndarray::{Array1, Array2};

use crate::encoder::{DualEncoder, MatchConfig};
use crate::fewshot::{derive_seed, sparse_sample, Episode, EpisodeLearner, Manifest, SamplingMode};
use crate::semantics::SemanticsStore;
use crate::tmn::{argmax, finetune_episode, EpisodeSchedule, SequenceSet, TmnModel, ZeroShot};
use crate::{Error, Result};

const HEAD_TAG: u64 = 0x4845_4144;
const SUPPORT_TAG: u64 = 0x5355_5050;
const QUERY_TAG: u64 = 0x5155_4552;

/// Every video of a manifest, labeled by its class's position in the sorted
/// class list, re-sampled on every request.
pub struct VideoSequences<'a> {
    manifest: &'a Manifest,
    store: &'a SemanticsStore<'a>,
    labels: Vec<usize>,
    segments: usize,
}

impl<'a> VideoSequences<'a> {
    pub fn new(manifest: &'a Manifest, store: &'a SemanticsStore<'a>, segments: usize) -> Self {
        let labels = manifest
            .videos()
            .iter()
            .map(|v| manifest.class_index(&v.class).expect("class from manifest"))
            .collect();
        VideoSequences {
            manifest,
            store,
            labels,
            segments,
        }
    }

    /// Fetches every dense matrix once, in parallel, so training does not
    /// stall on the first epoch.
    pub fn warm(&self) -> Result<()> {
        use rayon::prelude::*;
        self.manifest
            .videos()
            .par_iter()
            .try_for_each(|v| self.store.dense(v).map(|_| ()))
    }
}

impl SequenceSet for VideoSequences<'_> {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn sequence(&self, i: usize, seed: u64) -> Result<Array2<f64>> {
        let v = &self.manifest.videos()[i];
        self.store
            .sequence(v, &sparse_sample(v.frame_count, self.segments, SamplingMode::Random(seed)))
    }
}

/// The sampling plan for one video: a single center draw, or `count`
/// random draws.
pub fn samplings(count: usize, seed: u64) -> Vec<SamplingMode> {
    if count <= 1 {
        vec![SamplingMode::Center]
    } else {
        (0..count as u64).map(|s| SamplingMode::Random(derive_seed(seed, &[s]))).collect()
    }
}

/// Fine-tunes a head per episode on top of a base-trained model and labels
/// the queries by their averaged class distribution.
pub struct TmnLearner<'a> {
    pub model: &'a TmnModel,
    pub store: &'a SemanticsStore<'a>,
    pub schedule: EpisodeSchedule,
    pub segments: usize,
    /// Samplings averaged per query.
    pub samplings: usize,
    /// When set, support videos contribute one training row per sampling
    /// instead of a single center draw.
    pub resample_support: bool,
}

impl TmnLearner<'_> {
    fn draws(&self, manifest: &Manifest, video: usize, count: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
        let v = &manifest.videos()[video];
        samplings(count, seed)
            .into_iter()
            .map(|mode| self.store.sequence(v, &sparse_sample(v.frame_count, self.segments, mode)))
            .collect()
    }

    fn support(&self, manifest: &Manifest, episode: &Episode) -> Result<Vec<(Array2<f64>, usize)>> {
        let count = if self.resample_support { self.samplings } else { 1 };
        let mut out = Vec::new();
        for (i, item) in episode.support.iter().enumerate() {
            let seed = derive_seed(episode.seed, &[SUPPORT_TAG, i as u64]);
            for x in self.draws(manifest, item.video, count, seed)? {
                out.push((x, item.label));
            }
        }
        Ok(out)
    }

    /// Mean `|d logit / d input|` per input column, over the frames of every
    /// query, taken at each query's predicted class.
    pub fn importance(&self, manifest: &Manifest, episode: &Episode) -> Result<Array1<f64>> {
        let support = self.support(manifest, episode)?;
        let clf = finetune_episode(
            self.model,
            &support,
            episode.ways(),
            &self.schedule,
            derive_seed(episode.seed, &[HEAD_TAG]),
        )?;
        let mut total = Array1::zeros(self.model.config().input_dim);
        for (q, item) in episode.query.iter().enumerate() {
            let draws = self.draws(manifest, item.video, 1, derive_seed(episode.seed, &[QUERY_TAG, q as u64]))?;
            let x = &draws[0];
            let pred = argmax(clf.predict(&draws)?.as_slice().expect("contiguous"));
            let g = clf.input_gradient(x, pred)?;
            total += &g.mapv(f64::abs).mean_axis(ndarray::Axis(0)).expect("frames");
        }
        Ok(total / episode.query.len().max(1) as f64)
    }
}

impl EpisodeLearner for TmnLearner<'_> {
    fn predict_episode(&self, manifest: &Manifest, episode: &Episode) -> Result<Vec<usize>> {
        let support = self.support(manifest, episode)?;
        let clf = finetune_episode(
            self.model,
            &support,
            episode.ways(),
            &self.schedule,
            derive_seed(episode.seed, &[HEAD_TAG]),
        )?;
        episode
            .query
            .iter()
            .enumerate()
            .map(|(q, item)| {
                let seed = derive_seed(episode.seed, &[QUERY_TAG, q as u64]);
                let draws = self.draws(manifest, item.video, self.samplings, seed)?;
                Ok(argmax(clf.predict(&draws)?.as_slice().expect("contiguous")))
            })
            .collect()
    }
}

/// Frame-to-class-name matching with no training at all.
pub struct ZeroShotLearner<'e> {
    pub encoder: &'e dyn DualEncoder,
    pub cfg: MatchConfig,
    pub segments: usize,
    pub samplings: usize,
}

impl EpisodeLearner for ZeroShotLearner<'_> {
    fn predict_episode(&self, manifest: &Manifest, episode: &Episode) -> Result<Vec<usize>> {
        let prompts: Vec<String> = episode.classes.iter().map(|c| ZeroShot::prompt_for(c)).collect();
        let zs = ZeroShot::new(self.encoder, &prompts, self.cfg)?;
        episode
            .query
            .iter()
            .enumerate()
            .map(|(q, item)| {
                let modes = samplings(self.samplings, derive_seed(episode.seed, &[QUERY_TAG, q as u64]));
                zs.classify(&manifest.videos()[item.video], &modes, self.segments)
            })
            .collect()
    }
}

/// Base training set check: a model built for `classes` outputs must see
/// exactly that many classes.
pub fn check_class_count(manifest: &Manifest, classes: usize) -> Result<()> {
    let have = manifest.classes().len();
    if have != classes {
        return Err(Error::invalid(format!(
            "model has {classes} outputs but the training manifest has {have} classes"
        )));
    }
    Ok(())
}

use ndarray::Array1;

use super::train::argmax;
use crate::encoder::{match_scores, DualEncoder, Embedding, FrameContent, MatchConfig};
use crate::fewshot::{sparse_sample, SamplingMode, VideoRecord};
use crate::{Error, Result};

/// Classifies videos by matching frames directly against one text prompt
/// per class, with no knowledge base and no temporal model.
pub struct ZeroShot<'e> {
    encoder: &'e dyn DualEncoder,
    prompts: Vec<Embedding>,
    cfg: MatchConfig,
}

impl<'e> ZeroShot<'e> {
    pub fn new(encoder: &'e dyn DualEncoder, prompts: &[String], cfg: MatchConfig) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::invalid("zero-shot classification needs at least one class prompt"));
        }
        Ok(ZeroShot {
            encoder,
            prompts: encoder.embed_text(prompts)?,
            cfg,
        })
    }

    /// Class name as a prompt: underscores become spaces.
    pub fn prompt_for(class: &str) -> String {
        class.replace('_', " ")
    }

    /// Per-class score averaged over `frames`.
    pub fn scores(&self, frames: &[FrameContent]) -> Result<Array1<f64>> {
        if frames.is_empty() {
            return Err(Error::invalid("no frames to classify"));
        }
        let emb = self.encoder.embed_frames(frames)?;
        let s = match_scores(&emb, &self.prompts, &self.cfg)?;
        Ok(s.mean_axis(ndarray::Axis(0)).expect("non-empty"))
    }

    /// Averages frame scores over every sampling, then takes the argmax
    /// (lowest class index on ties).
    pub fn classify(&self, video: &VideoRecord, samplings: &[SamplingMode], segments: usize) -> Result<usize> {
        if samplings.is_empty() {
            return Err(Error::invalid("at least one sampling is required"));
        }
        let frames = video.load_frames()?;
        let mut total = Array1::zeros(self.prompts.len());
        for &mode in samplings {
            let picked: Vec<FrameContent> = sparse_sample(frames.len(), segments, mode)
                .into_iter()
                .map(|i| frames[i].clone())
                .collect();
            total += &self.scores(&picked)?;
        }
        total /= samplings.len() as f64;
        Ok(argmax(total.as_slice().expect("contiguous")))
    }
}

//! Temporal modeling network over per-frame semantics sequences.
//!
//! ```text
//! BN(m) -> Dropout -> [DepthwiseConv(K) -> Linear -> BN -> ReLU] x blocks
//!       -> +PositionalEmbedding -> MHSA (residual) -> mean over time -> Linear(d -> C)
//! ```
//!
//! The linear variant drops the temporal stack and keeps
//! `BN -> Dropout -> Linear(m -> d) -> mean -> head`.

mod checkpoint;
mod train;
mod zeroshot;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta, InputKind};
pub use train::{
    argmax, finetune_episode, train_base, BaseLog, BaseSchedule, EpisodeClassifier, EpisodeSchedule, SequenceSet,
    TrainSchedule,
};
pub use zeroshot::ZeroShot;

use crate::nn::{
    BatchNorm, DepthwiseConv, Dropout, Layer, Linear, MeanPool, Mode, MultiHeadSelfAttention, NnError, Param,
    PositionalEmbedding, Relu, Sequential, Tensor3,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// No temporal modeling: a per-frame linear map followed by pooling.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmnConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub heads: usize,
    pub dropout: f64,
    pub classes: usize,
    /// Positional table length; longer inputs reuse the last position.
    pub frames: usize,
    pub variant: Variant,
}

impl Default for TmnConfig {
    fn default() -> Self {
        TmnConfig {
            input_dim: 1,
            hidden_dim: 512,
            blocks: 2,
            kernel: 3,
            heads: 4,
            dropout: 0.05,
            classes: 1,
            frames: 16,
            variant: Variant::Full,
        }
    }
}

impl TmnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Nn(NnError::Config(m)));
        if self.input_dim == 0 || self.classes == 0 || self.hidden_dim == 0 || self.frames == 0 {
            return fail("input_dim, hidden_dim, classes and frames must be positive".into());
        }
        if self.variant == Variant::Full {
            if self.heads == 0 || self.hidden_dim % self.heads != 0 {
                return fail(format!(
                    "hidden_dim {} is not divisible by {} heads",
                    self.hidden_dim, self.heads
                ));
            }
            if self.kernel % 2 == 0 {
                return fail(format!("kernel size {} must be odd", self.kernel));
            }
            if self.blocks == 0 {
                return fail("at least one convolution block is required".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Multiply-adds of one forward pass over `n` frames, head included.
    pub fn flops(&self, n: usize) -> u64 {
        let (n, m, d, c) = (n as u64, self.input_dim as u64, self.hidden_dim as u64, self.classes as u64);
        let head = d * c;
        match self.variant {
            Variant::Linear => n * m * d + head,
            Variant::Full => {
                let k = self.kernel as u64;
                let mut total = 0;
                let mut width = m;
                for _ in 0..self.blocks {
                    total += n * width * k + n * width * d;
                    width = d;
                }
                total + 4 * n * d * d + 2 * n * n * d + head
            }
        }
    }
}

/// Backbone plus classification head.
#[derive(Clone)]
pub struct TmnModel {
    config: TmnConfig,
    backbone: Sequential,
    head: Linear,
}

impl TmnModel {
    pub fn new(config: TmnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut backbone = Sequential::new();
        backbone.push(BatchNorm::new("input_bn", c.input_dim));
        backbone.push(Dropout::new(c.dropout, rng.random())?);
        match c.variant {
            Variant::Full => {
                let mut width = c.input_dim;
                for b in 0..c.blocks {
                    backbone.push(DepthwiseConv::new(&format!("block{b}.conv"), c.kernel, width, &mut rng)?);
                    backbone.push(Linear::new(&format!("block{b}.proj"), width, c.hidden_dim, &mut rng));
                    backbone.push(BatchNorm::new(&format!("block{b}.bn"), c.hidden_dim));
                    backbone.push(Relu::new());
                    width = c.hidden_dim;
                }
                backbone.push(PositionalEmbedding::new("pos", c.frames, c.hidden_dim, &mut rng));
                backbone.push(MultiHeadSelfAttention::new("attn", c.hidden_dim, c.heads, &mut rng)?);
            }
            Variant::Linear => {
                backbone.push(Linear::new("proj", c.input_dim, c.hidden_dim, &mut rng));
            }
        }
        backbone.push(MeanPool::new());
        let head = Linear::new("head", c.hidden_dim, c.classes, &mut rng);
        Ok(TmnModel { config, backbone, head })
    }

    pub fn config(&self) -> &TmnConfig {
        &self.config
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn backbone_params(&self) -> Vec<&Param> {
        self.backbone.params()
    }

    /// Stacks equal-shape `[n, m]` sequences into a `[B, n, m]` batch.
    pub fn stack(&self, seqs: &[&Array2<f64>]) -> Result<Tensor3> {
        let first = seqs.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (n, m) = first.dim();
        if m != self.config.input_dim {
            return Err(Error::invalid(format!(
                "sequence has {m} features, model expects {}",
                self.config.input_dim
            )));
        }
        if n == 0 {
            return Err(Error::invalid("sequence has no frames"));
        }
        let mut out = Array3::zeros((seqs.len(), n, m));
        for (b, s) in seqs.iter().enumerate() {
            if s.dim() != (n, m) {
                return Err(Error::invalid(format!(
                    "batch mixes sequence shapes {:?} and {:?}",
                    (n, m),
                    s.dim()
                )));
            }
            out.index_axis_mut(Axis(0), b).assign(s);
        }
        Ok(out)
    }

    /// Eval-mode pooled features, `[B, d]`.
    pub fn embed(&self, x: &Tensor3) -> Result<Array2<f64>> {
        Ok(self.backbone.infer(x)?.index_axis_move(Axis(1), 0))
    }

    /// Eval-mode logits, `[B, C]`.
    pub fn logits(&self, x: &Tensor3) -> Result<Array2<f64>> {
        let h = self.backbone.infer(x)?;
        Ok(self.head.infer(&h)?.index_axis_move(Axis(1), 0))
    }

    pub(crate) fn backbone(&self) -> &Sequential {
        &self.backbone
    }
}

impl Layer for TmnModel {
    fn forward(&mut self, x: &Tensor3, mode: Mode) -> Result<Tensor3, NnError> {
        let h = self.backbone.forward(x, mode)?;
        self.head.forward(&h, mode)
    }

    fn backward(&mut self, grad_out: &Tensor3) -> Result<Tensor3, NnError> {
        let g = self.head.backward(grad_out)?;
        self.backbone.backward(&g)
    }

    fn infer(&self, x: &Tensor3) -> Result<Tensor3, NnError> {
        self.head.infer(&self.backbone.infer(x)?)
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    fn reseed(&mut self, seed: u64) {
        self.backbone.reseed(seed);
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

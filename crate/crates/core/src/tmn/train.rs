use ndarray::{Array1, Array2, ArrayD, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TmnModel;
use crate::fewshot::derive_seed;
use crate::nn::{softmax_cross_entropy, softmax_rows, zero_grads, Adam, Layer, Linear, Mode, SgdMomentum};
use crate::{Error, Result};

/// Labeled sequences that may be re-drawn with a different frame sampling
/// on every request.
pub trait SequenceSet: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, i: usize) -> usize;

    /// Sequence `i` drawn with sampling seed `seed`, `[n, m]`.
    fn sequence(&self, i: usize, seed: u64) -> Result<Array2<f64>>;
}

/// Fixed sequences; the seed is ignored.
impl SequenceSet for Vec<(Array2<f64>, usize)> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn label(&self, i: usize) -> usize {
        self[i].1
    }

    fn sequence(&self, i: usize, _seed: u64) -> Result<Array2<f64>> {
        Ok(self[i].0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseSchedule {
    pub lr: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for BaseSchedule {
    fn default() -> Self {
        BaseSchedule {
            lr: 0.001,
            milestones: vec![20, 30, 40],
            decay: 0.1,
            epochs: 50,
            momentum: 0.9,
            weight_decay: 0.001,
            batch_size: 32,
        }
    }
}

impl BaseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("base schedule needs positive epochs and batch size"));
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("learning-rate milestones must be ascending"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSchedule {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for EpisodeSchedule {
    fn default() -> Self {
        EpisodeSchedule {
            lr: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 10,
            weight_decay: 0.0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub base: BaseSchedule,
    pub episode: EpisodeSchedule,
}

#[derive(Debug, Clone)]
pub struct BaseLog {
    /// Mean training loss of each epoch, in train mode.
    pub epoch_losses: Vec<f64>,
    /// Eval-mode accuracy on one more draw of the training set.
    pub train_accuracy: f64,
    /// Final momentum buffers keyed by parameter name.
    pub velocity: Vec<(String, ArrayD<f64>)>,
}

fn fetch(data: &dyn SequenceSet, order: &[usize], seed: u64, tag: u64) -> Result<Vec<Array2<f64>>> {
    order
        .par_iter()
        .map(|&i| data.sequence(i, derive_seed(seed, &[tag, i as u64])))
        .collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn eval_accuracy(model: &TmnModel, seqs: &[Array2<f64>], labels: &[usize]) -> Result<f64> {
    let mut correct = 0;
    for (chunk, lab) in seqs.chunks(64).zip(labels.chunks(64)) {
        let refs: Vec<&Array2<f64>> = chunk.iter().collect();
        let logits = model.logits(&model.stack(&refs)?)?;
        for (row, &y) in logits.rows().into_iter().zip(lab) {
            if argmax(row.as_slice().expect("contiguous")) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / seqs.len() as f64)
}

/// Trains every layer with SGD-momentum and a step learning-rate schedule.
/// Deterministic for fixed `seed`.
pub fn train_base(model: &mut TmnModel, data: &dyn SequenceSet, schedule: &BaseSchedule, seed: u64) -> Result<BaseLog> {
    schedule.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("no training sequences"));
    }
    let classes = model.config().classes;
    let labels: Vec<usize> = (0..n).map(|i| data.label(i)).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    let mut opt = SgdMomentum::new(schedule.lr, schedule.momentum, schedule.weight_decay);
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..schedule.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, 0]));
        order.shuffle(&mut rng);
        let seqs = fetch(data, &order, seed, 1 + epoch as u64)?;
        opt.lr = schedule.lr_at(epoch);
        let mut total = 0.0;
        for (b, (chunk, idx)) in seqs
            .chunks(schedule.batch_size)
            .zip(order.chunks(schedule.batch_size))
            .enumerate()
        {
            let refs: Vec<&Array2<f64>> = chunk.iter().collect();
            let x = model.stack(&refs)?;
            if x.dim().0 * x.dim().1 < 2 {
                continue;
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            model.reseed(rng.random());
            zero_grads(model);
            let logits = model.forward(&x, Mode::Train)?.index_axis_move(Axis(1), 0);
            let (loss, grad) = softmax_cross_entropy(logits.view(), &y)?;
            model.backward(&grad.insert_axis(Axis(1)))?;
            let mut params: Vec<_> = model.params_mut().into_iter().filter(|p| p.trainable).collect();
            opt.step(&mut params)?;
            total += loss * y.len() as f64;
            log::trace!("epoch {epoch} batch {b} loss {loss:.5}");
        }
        let mean = total / n as f64;
        log::debug!("epoch {epoch} lr {:.2e} loss {mean:.5}", opt.lr);
        epoch_losses.push(mean);
    }
    let all: Vec<usize> = (0..n).collect();
    let seqs = fetch(data, &all, seed, u64::MAX)?;
    let train_accuracy = eval_accuracy(model, &seqs, &labels)?;
    let names: Vec<String> = model
        .params()
        .into_iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    let velocity = names.into_iter().zip(opt.velocity().iter().cloned()).collect();
    Ok(BaseLog {
        epoch_losses,
        train_accuracy,
        velocity,
    })
}

/// A frozen backbone with an episode-specific head.
#[derive(Clone)]
pub struct EpisodeClassifier<'m> {
    model: &'m TmnModel,
    head: Linear,
}

impl<'m> EpisodeClassifier<'m> {
    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn ways(&self) -> usize {
        self.head.d_out()
    }

    /// Softmax outputs for a stack of sequences, `[B, ways]`.
    pub fn probabilities(&self, seqs: &[&Array2<f64>]) -> Result<Array2<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(256) {
            let feats = self.model.embed(&self.model.stack(chunk)?)?;
            out.push(softmax_rows(self.head.infer_2d(&feats)?.view()));
        }
        let views: Vec<_> = out.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Mean class distribution over several samplings of one video.
    pub fn predict(&self, samplings: &[Array2<f64>]) -> Result<Array1<f64>> {
        let refs: Vec<&Array2<f64>> = samplings.iter().collect();
        let probs = self.probabilities(&refs)?;
        Ok(probs.mean_axis(Axis(0)).expect("at least one sampling"))
    }

    /// `d logit[class] / d input` for one sequence, eval mode, `[n, m]`.
    pub fn input_gradient(&self, seq: &Array2<f64>, class: usize) -> Result<Array2<f64>> {
        if class >= self.ways() {
            return Err(Error::invalid(format!("class {class} outside {} ways", self.ways())));
        }
        let mut backbone = self.model.backbone().clone();
        let mut head = self.head.clone();
        let x = self.model.stack(&[seq])?;
        let h = backbone.forward(&x, Mode::Eval)?;
        let logits = head.forward(&h, Mode::Eval)?;
        let mut g = ndarray::Array3::zeros(logits.raw_dim());
        g[[0, 0, class]] = 1.0;
        let gx = backbone.backward(&head.backward(&g)?)?;
        Ok(gx.index_axis_move(Axis(0), 0))
    }
}

/// Freezes `model` (eval-mode BN, no dropout) and fits a fresh
/// `Linear(d -> ways)` head on the support set with Adam.
pub fn finetune_episode<'m>(
    model: &'m TmnModel,
    support: &[(Array2<f64>, usize)],
    ways: usize,
    schedule: &EpisodeSchedule,
    seed: u64,
) -> Result<EpisodeClassifier<'m>> {
    if ways == 0 || schedule.batch_size == 0 {
        return Err(Error::invalid("episode needs at least one way and a positive batch size"));
    }
    let mut present = vec![false; ways];
    for (_, y) in support {
        *present
            .get_mut(*y)
            .ok_or_else(|| Error::invalid(format!("support label {y} outside {ways} ways")))? = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::invalid(format!("support set has no example of class {missing}")));
    }
    let refs: Vec<&Array2<f64>> = support.iter().map(|(x, _)| x).collect();
    let mut parts = Vec::new();
    for chunk in refs.chunks(256) {
        parts.push(model.embed(&model.stack(chunk)?)?);
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    let feats = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let d = feats.ncols();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (d as f64).sqrt();
    let weight = Array2::from_shape_simple_fn((d, ways), || rng.random_range(-bound..=bound));
    let mut head = Linear::from_parts("episode_head", weight, Array1::zeros(ways));
    let mut opt = Adam::new(schedule.lr, schedule.beta1, schedule.beta2);
    opt.weight_decay = schedule.weight_decay;

    let mut order: Vec<usize> = (0..support.len()).collect();
    for _ in 0..schedule.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(schedule.batch_size) {
            let x = feats.select(Axis(0), idx).insert_axis(Axis(1));
            let y: Vec<usize> = idx.iter().map(|&i| support[i].1).collect();
            head.weight.zero_grad();
            head.bias.zero_grad();
            let logits = head.forward(&x, Mode::Train)?.index_axis_move(Axis(1), 0);
            let (_, grad) = softmax_cross_entropy(logits.view(), &y)?;
            head.backward(&grad.insert_axis(Axis(1)))?;
            opt.step(&mut head.params_mut())?;
        }
    }
    Ok(EpisodeClassifier { model, head })
}

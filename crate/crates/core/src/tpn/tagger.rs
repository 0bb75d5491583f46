use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decode_bio, BioLabel, CaptionDocument, TokenFeatureProvider};
use crate::kb::Proposal;
use crate::nn::{softmax_cross_entropy, Adam, Layer, Linear, Mode, Tensor3};
use crate::{Error, Result};

const LABELS: usize = 5;

/// One linear layer from token features to the five BIO labels.
#[derive(Clone)]
pub struct Tagger {
    linear: Linear,
    feature_provider_id: String,
}

impl std::fmt::Debug for Tagger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tagger")
            .field("feature_provider_id", &self.feature_provider_id)
            .field("feature_dim", &self.feature_dim())
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaggerTraining {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TaggerTraining {
    fn default() -> Self {
        TaggerTraining {
            epochs: 200,
            lr: 1e-2,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct TaggerFile {
    feature_provider_id: String,
    feature_dim: usize,
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Tagger {
    pub fn init(features: &dyn TokenFeatureProvider, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tagger {
            linear: Linear::new("tagger", features.dim(), LABELS, &mut rng),
            feature_provider_id: features.id(),
        }
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>, feature_provider_id: &str) -> Result<Self> {
        if weight.ncols() != LABELS || bias.len() != LABELS {
            return Err(Error::invalid(format!("tagger output dimension must be {LABELS}")));
        }
        Ok(Tagger {
            linear: Linear::from_parts("tagger", weight, bias),
            feature_provider_id: feature_provider_id.to_owned(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.linear.d_in()
    }

    pub fn feature_provider_id(&self) -> &str {
        &self.feature_provider_id
    }

    pub fn weight(&self) -> Array2<f64> {
        self.linear.weight.value.clone().into_dimensionality().expect("2-d")
    }

    pub fn bias(&self) -> Array1<f64> {
        self.linear.bias.value.clone().into_dimensionality().expect("1-d")
    }

    fn check_provider(&self, features: &dyn TokenFeatureProvider) -> Result<()> {
        if features.dim() != self.feature_dim() {
            return Err(Error::invalid(format!(
                "feature provider {} yields {} features, tagger expects {}",
                features.id(),
                features.dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.linear.infer_2d(x)?)
    }

    /// Per-token argmax labels; ties go to the lowest label index.
    pub fn predict(&self, tokens: &[String], features: &dyn TokenFeatureProvider) -> Result<Vec<BioLabel>> {
        self.check_provider(features)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let logits = self.logits(&features.features(tokens))?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                BioLabel::from_index(best).expect("five outputs")
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = self.weight();
        let file = TaggerFile {
            feature_provider_id: self.feature_provider_id.clone(),
            feature_dim: self.feature_dim(),
            weight: w.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: self.bias().to_vec(),
        };
        let json = serde_json::to_vec(&file)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: TaggerFile = serde_json::from_slice(&bytes)?;
        let rows = file.weight.len();
        if rows != file.feature_dim || file.weight.iter().any(|r| r.len() != LABELS) {
            return Err(Error::Integrity {
                path: path.to_owned(),
                reason: "weight shape does not match the declared feature dimension".into(),
            });
        }
        let flat: Vec<f64> = file.weight.into_iter().flatten().collect();
        let weight = Array2::from_shape_vec((rows, LABELS), flat).expect("checked shape");
        Tagger::from_parts(weight, Array1::from(file.bias), &file.feature_provider_id)
    }
}

/// Full-batch Adam on mean per-token softmax cross-entropy.
pub fn train_tagger(
    docs: &[CaptionDocument],
    features: &dyn TokenFeatureProvider,
    hyper: TaggerTraining,
) -> Result<(Tagger, TrainingReport)> {
    if docs.is_empty() {
        return Err(Error::invalid("tagger training needs at least one document"));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for doc in docs {
        let doc_labels = doc
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("document {} is not annotated", doc.id)))?;
        if doc.tokens.is_empty() {
            continue;
        }
        rows.push(features.features(&doc.tokens));
        labels.extend(doc_labels.iter().map(|l| l.index()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("tagger training corpus has no tokens"));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let x2 = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
    let n = x2.nrows();
    let x = x2.into_shape_with_order((1, n, features.dim())).expect("contiguous");

    let mut tagger = Tagger::init(features, hyper.seed);
    let mut opt = Adam::new(hyper.lr, 0.9, 0.999);
    let loss_at = |tagger: &Tagger, x: &Tensor3| -> Result<(f64, f64)> {
        let logits = tagger.linear.infer(x)?.index_axis_move(Axis(0), 0);
        let (loss, _) = softmax_cross_entropy(logits.view(), &labels)?;
        let correct = logits
            .axis_iter(Axis(0))
            .zip(&labels)
            .filter(|(row, &y)| row.iter().all(|v| *v <= row[y]) && row.iter().take(y).all(|v| *v < row[y]))
            .count();
        Ok((loss, correct as f64 / labels.len() as f64))
    };
    let (initial_loss, _) = loss_at(&tagger, &x)?;
    for _ in 0..hyper.epochs {
        tagger.linear.weight.zero_grad();
        tagger.linear.bias.zero_grad();
        let logits = tagger.linear.forward(&x, Mode::Train)?.index_axis_move(Axis(0), 0);
        let (_, grad) = softmax_cross_entropy(logits.view(), &labels)?;
        tagger.linear.backward(&grad.insert_axis(Axis(0)))?;
        opt.step(&mut tagger.linear.params_mut())?;
    }
    let (final_loss, train_accuracy) = loss_at(&tagger, &x)?;
    Ok((
        tagger,
        TrainingReport {
            initial_loss,
            final_loss,
            train_accuracy,
        },
    ))
}

/// Tags `doc` with the argmax labels and returns its spans as proposals.
pub fn extract_proposals(
    doc: &CaptionDocument,
    tagger: &Tagger,
    features: &dyn TokenFeatureProvider,
) -> Result<Vec<Proposal>> {
    let labels = tagger.predict(&doc.tokens, features)?;
    let decoded = decode_bio(&labels, &doc.tokens)?;
    Ok(decoded
        .spans
        .into_iter()
        .map(|s| Proposal::extracted(s.text, s.level))
        .collect())
}

/// [`extract_proposals`] over many documents, in document order.
pub fn extract_all(
    docs: &[CaptionDocument],
    tagger: &Tagger,
    features: &dyn TokenFeatureProvider,
) -> Result<Vec<Proposal>> {
    let per_doc: Vec<Result<Vec<Proposal>>> = docs
        .par_iter()
        .map(|d| extract_proposals(d, tagger, features))
        .collect();
    let mut out = Vec::new();
    for r in per_doc {
        out.extend(r?);
    }
    Ok(out)
}

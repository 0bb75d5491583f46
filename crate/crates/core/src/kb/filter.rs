use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Proposal;
use crate::encoder::{HttpClientConfig, JsonClient};
use crate::text::tokenize;
use crate::{Error, Result};

const CHUNK: usize = 256;

/// Minimum masked-noun probability, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FilterThreshold(f64);

impl FilterThreshold {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("threshold {lambda} outside [0, 1]")));
        }
        Ok(FilterThreshold(lambda))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Scores how plausible `target` is in place of the mask in `masked`.
pub trait MaskedTokenScorer: Sync {
    fn probability(&self, masked: &str, target: &str) -> std::result::Result<f64, String>;

    /// Batched scoring; the default scores items one by one.
    fn probabilities(&self, items: &[(&str, &str)]) -> Vec<std::result::Result<f64, String>> {
        items.iter().map(|(m, t)| self.probability(m, t)).collect()
    }
}

/// Keeps template proposals whose masked noun scores at least `threshold`;
/// proposals without a mask pass through. Order is preserved.
pub fn filter_proposals(
    proposals: &[Proposal],
    scorer: &dyn MaskedTokenScorer,
    threshold: FilterThreshold,
) -> Result<Vec<Proposal>> {
    let verdicts: Vec<Vec<std::result::Result<bool, (usize, String)>>> = proposals
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let items: Vec<(usize, (&str, &str))> = chunk
                .iter()
                .enumerate()
                .filter_map(|(i, p)| {
                    let masked = p.masked_text.as_deref()?;
                    let target = p.masked_target().unwrap_or("");
                    Some((i, (masked, target)))
                })
                .collect();
            let scores = scorer.probabilities(&items.iter().map(|(_, it)| *it).collect::<Vec<_>>());
            let mut keep: Vec<std::result::Result<bool, (usize, String)>> = vec![Ok(true); chunk.len()];
            for ((i, _), score) in items.iter().zip(scores) {
                keep[*i] = match score {
                    Ok(p) if p.is_finite() => Ok(p >= threshold.0),
                    Ok(p) => Err((ci * CHUNK + i, format!("non-finite probability {p}"))),
                    Err(e) => Err((ci * CHUNK + i, e)),
                };
            }
            keep
        })
        .collect();
    let mut out = Vec::new();
    for (p, verdict) in proposals.iter().zip(verdicts.into_iter().flatten()) {
        match verdict {
            Ok(true) => out.push(p.clone()),
            Ok(false) => {}
            Err((idx, reason)) => {
                return Err(Error::Scorer {
                    text: proposals[idx].text.clone(),
                    reason,
                })
            }
        }
    }
    Ok(out)
}

/// Context-free stand-in for a masked language model: the probability of a
/// target is the product of its tokens' relative frequencies in a reference
/// corpus.
#[derive(Debug, Clone)]
pub struct UnigramScorer {
    counts: HashMap<String, u64>,
    total: u64,
}

impl UnigramScorer {
    pub fn from_corpus(text: &str) -> Self {
        let mut counts = HashMap::new();
        let mut total = 0;
        for t in tokenize(text) {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
        UnigramScorer { counts, total }
    }

    pub fn total_tokens(&self) -> u64 {
        self.total
    }
}

impl MaskedTokenScorer for UnigramScorer {
    fn probability(&self, _masked: &str, target: &str) -> std::result::Result<f64, String> {
        let tokens = tokenize(target);
        if tokens.is_empty() {
            return Err("empty mask target".into());
        }
        if self.total == 0 {
            return Ok(0.0);
        }
        Ok(tokens
            .iter()
            .map(|t| *self.counts.get(t).unwrap_or(&0) as f64 / self.total as f64)
            .product())
    }
}

#[derive(Serialize)]
struct MaskItem<'a> {
    masked: &'a str,
    target: &'a str,
}

#[derive(Serialize)]
struct MaskRequest<'a> {
    items: Vec<MaskItem<'a>>,
}

#[derive(Deserialize)]
struct MaskResponse {
    probabilities: Vec<f64>,
}

/// Masked-LM scorer served over HTTP:
/// `POST /v1/mask_prob {"items":[{"masked","target"}]}` ->
/// `{"probabilities":[f64]}`.
#[derive(Debug, Clone)]
pub struct HttpMaskScorer {
    client: JsonClient,
}

impl HttpMaskScorer {
    pub fn new(endpoint: &str, cfg: HttpClientConfig) -> Self {
        HttpMaskScorer {
            client: JsonClient::new(endpoint, cfg),
        }
    }
}

impl MaskedTokenScorer for HttpMaskScorer {
    fn probability(&self, masked: &str, target: &str) -> std::result::Result<f64, String> {
        self.probabilities(&[(masked, target)]).remove(0)
    }

    fn probabilities(&self, items: &[(&str, &str)]) -> Vec<std::result::Result<f64, String>> {
        if items.is_empty() {
            return Vec::new();
        }
        let req = MaskRequest {
            items: items
                .iter()
                .map(|(masked, target)| MaskItem { masked, target })
                .collect(),
        };
        match self.client.call::<_, MaskResponse>("/v1/mask_prob", Some(&req), 0) {
            Ok(resp) if resp.probabilities.len() == items.len() => resp.probabilities.into_iter().map(Ok).collect(),
            Ok(resp) => {
                let msg = format!(
                    "service returned {} probabilities for {} items",
                    resp.probabilities.len(),
                    items.len()
                );
                vec![Err(msg); items.len()]
            }
            Err(e) => vec![Err(e.to_string()); items.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::{generate_template_proposals, BodyPartState, Level, ObjectNoun};

    fn sample() -> Vec<Proposal> {
        let states = vec![
            BodyPartState::new("hand", "hold", true).unwrap(),
            BodyPartState::new("head", "nod", false).unwrap(),
        ];
        let nouns: Vec<ObjectNoun> = ["cup", "ball", "tree"]
            .iter()
            .map(|n| ObjectNoun::new(n).unwrap())
            .collect();
        let mut out = generate_template_proposals(&states, &nouns).unwrap();
        out.push(Proposal::extracted("do a cartwheel", Level::Instance));
        out
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let scorer = UnigramScorer::from_corpus("cup");
        let ps = sample();
        let out = filter_proposals(&ps, &scorer, FilterThreshold::new(0.0).unwrap()).unwrap();
        assert_eq!(out, ps);
    }

    #[test]
    fn unit_threshold_keeps_only_unmasked() {
        let scorer = UnigramScorer::from_corpus("cup ball ball tree");
        let out = filter_proposals(&sample(), &scorer, FilterThreshold::new(1.0).unwrap()).unwrap();
        let texts: Vec<_> = out.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, vec!["Human's head nod", "do a cartwheel"]);
    }

    #[test]
    fn threshold_compares_inclusively() {
        // ball = 2/4, cup = tree = 1/4
        let scorer = UnigramScorer::from_corpus("cup ball ball tree");
        let out = filter_proposals(&sample(), &scorer, FilterThreshold::new(0.5).unwrap()).unwrap();
        assert!(out.iter().any(|p| p.text == "Human's hand hold the ball"));
        assert!(!out.iter().any(|p| p.text.ends_with("cup")));
    }

    #[test]
    fn threshold_range_is_checked() {
        assert!(FilterThreshold::new(1.0 + 1e-9).is_err());
        assert!(FilterThreshold::new(-0.1).is_err());
    }

    struct Failing;
    impl MaskedTokenScorer for Failing {
        fn probability(&self, _: &str, target: &str) -> std::result::Result<f64, String> {
            if target == "ball" {
                Err("boom".into())
            } else {
                Ok(1.0)
            }
        }
    }

    #[test]
    fn scorer_failure_names_the_proposal() {
        let err = filter_proposals(&sample(), &Failing, FilterThreshold::new(0.1).unwrap()).unwrap_err();
        match err {
            Error::Scorer { text, reason } => {
                assert_eq!(text, "Human's hand hold the ball");
                assert_eq!(reason, "boom");
            }
            other => panic!("unexpected {other}"),
        }
    }
}

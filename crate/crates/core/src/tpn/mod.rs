//! Text proposal network: a per-token BIO tagger over pluggable token
//! features, and the decoder that turns tag sequences into action phrases.

mod features;
mod io;
mod tagger;

use serde::{Deserialize, Serialize};

pub use features::{HashedWindowFeatures, TokenFeatureProvider};
pub use io::{read_annotations, read_caption_file};
pub use tagger::{extract_all, extract_proposals, train_tagger, Tagger, TaggerTraining, TrainingReport};

use crate::kb::Level;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioLabel {
    O,
    BInst,
    IInst,
    BPart,
    IPart,
}

impl BioLabel {
    pub const ALL: [BioLabel; 5] = [
        BioLabel::O,
        BioLabel::BInst,
        BioLabel::IInst,
        BioLabel::BPart,
        BioLabel::IPart,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().replace('_', "-").as_str() {
            "O" => Some(BioLabel::O),
            "B-INST" => Some(BioLabel::BInst),
            "I-INST" => Some(BioLabel::IInst),
            "B-PART" => Some(BioLabel::BPart),
            "I-PART" => Some(BioLabel::IPart),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BioLabel::O => "O",
            BioLabel::BInst => "B-INST",
            BioLabel::IInst => "I-INST",
            BioLabel::BPart => "B-PART",
            BioLabel::IPart => "I-PART",
        }
    }

    fn span_level(self) -> Option<(Level, bool)> {
        match self {
            BioLabel::O => None,
            BioLabel::BInst => Some((Level::Instance, true)),
            BioLabel::IInst => Some((Level::Instance, false)),
            BioLabel::BPart => Some((Level::Part, true)),
            BioLabel::IPart => Some((Level::Part, false)),
        }
    }
}

/// A caption split into tokens, optionally with gold labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionDocument {
    pub id: String,
    pub tokens: Vec<String>,
    pub labels: Option<Vec<BioLabel>>,
}

impl CaptionDocument {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, labels: Option<Vec<BioLabel>>) -> Result<Self> {
        let id = id.into();
        if let Some(l) = &labels {
            if l.len() != tokens.len() {
                return Err(Error::invalid(format!(
                    "document {id}: {} labels for {} tokens",
                    l.len(),
                    tokens.len()
                )));
            }
        }
        if let Some(t) = tokens.iter().find(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
            return Err(Error::invalid(format!("document {id}: bad token {t:?}")));
        }
        Ok(CaptionDocument { id, tokens, labels })
    }
}

/// Half-open token range `[start, end)` tagged as one action phrase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedSpan {
    pub start: usize,
    pub end: usize,
    pub level: Level,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Decoded {
    pub spans: Vec<ExtractedSpan>,
    /// Positions where an `I` tag had no matching open span and started one.
    pub repairs: Vec<usize>,
}

/// Decodes BIO tags into maximal spans. An `I-X` that follows `O` or a
/// span of another type opens a new `X` span and is recorded as a repair.
pub fn decode_bio(labels: &[BioLabel], tokens: &[String]) -> Result<Decoded> {
    if labels.len() != tokens.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} tokens",
            labels.len(),
            tokens.len()
        )));
    }
    let mut out = Decoded::default();
    let mut open: Option<(usize, Level)> = None;
    let close = |open: &mut Option<(usize, Level)>, end: usize, out: &mut Decoded| {
        if let Some((start, level)) = open.take() {
            out.spans.push(ExtractedSpan {
                start,
                end,
                level,
                text: tokens[start..end].join(" "),
            });
        }
    };
    for (i, label) in labels.iter().enumerate() {
        match label.span_level() {
            None => close(&mut open, i, &mut out),
            Some((level, true)) => {
                close(&mut open, i, &mut out);
                open = Some((i, level));
            }
            Some((level, false)) => {
                if open.map(|(_, l)| l) != Some(level) {
                    close(&mut open, i, &mut out);
                    log::debug!("bio repair: {} at {i} opens a span", label.as_str());
                    out.repairs.push(i);
                    open = Some((i, level));
                }
            }
        }
    }
    close(&mut open, labels.len(), &mut out);
    Ok(out)
}

/// Writes spans back as `B` followed by `I` tags over `len` tokens.
pub fn encode_spans(spans: &[ExtractedSpan], len: usize) -> Vec<BioLabel> {
    let mut labels = vec![BioLabel::O; len];
    for s in spans {
        let (b, i) = match s.level {
            Level::Part => (BioLabel::BPart, BioLabel::IPart),
            _ => (BioLabel::BInst, BioLabel::IInst),
        };
        labels[s.start] = b;
        for l in &mut labels[s.start + 1..s.end] {
            *l = i;
        }
    }
    labels
}

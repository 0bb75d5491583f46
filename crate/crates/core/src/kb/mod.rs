//! Action knowledge base: template proposals filtered by a masked-token
//! scorer, merged with extracted caption phrases, deduplicated and hashed.

mod corpus;
mod filter;
mod template;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use corpus::{read_nouns, read_states, BodyPartState, ObjectNoun};
pub use filter::{
    filter_proposals, FilterThreshold, HttpMaskScorer, MaskedTokenScorer, UnigramScorer,
};
pub use template::generate_template_proposals;

use crate::text::normalize_ws;
use crate::{Error, Result};

pub const MASK_TOKEN: &str = "[MASK]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Template,
    Tpn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Basic,
    Instance,
    Part,
}

/// One textual action description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub text: String,
    pub source: Source,
    pub level: Level,
    /// The text with its object replaced by [`MASK_TOKEN`]; only template
    /// proposals built from transitive states carry one.
    #[serde(default, skip_serializing)]
    pub masked_text: Option<String>,
}

impl Proposal {
    pub fn extracted(text: impl Into<String>, level: Level) -> Self {
        Proposal {
            text: text.into(),
            source: Source::Tpn,
            level,
            masked_text: None,
        }
    }

    /// The words hidden behind the mask, recovered by aligning
    /// `masked_text` against `text`.
    pub fn masked_target(&self) -> Option<&str> {
        let masked = self.masked_text.as_deref()?;
        let (prefix, suffix) = masked.split_once(MASK_TOKEN)?;
        self.text
            .strip_prefix(prefix)?
            .strip_suffix(suffix)
            .filter(|t| !t.is_empty())
    }
}

pub type ContentHash = [u8; 32];

/// Deduplicated proposals in lexicographic text order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    proposals: Vec<Proposal>,
    content_hash: ContentHash,
}

/// SHA-256 of the proposal texts joined by `\n`.
pub fn content_hash<'a>(texts: impl IntoIterator<Item = &'a str>) -> ContentHash {
    let mut hasher = Sha256::new();
    for (i, t) in texts.into_iter().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(t.as_bytes());
    }
    hasher.finalize().into()
}

/// Unions proposal sets. Texts are compared after whitespace
/// normalization and the first occurrence keeps its metadata.
pub fn build_kb<'a>(sets: impl IntoIterator<Item = &'a [Proposal]>) -> KnowledgeBase {
    let mut seen = HashSet::new();
    let mut proposals = Vec::new();
    for set in sets {
        for p in set {
            let text = normalize_ws(&p.text);
            if text.is_empty() || !seen.insert(text.clone()) {
                continue;
            }
            proposals.push(Proposal { text, ..p.clone() });
        }
    }
    proposals.sort_by(|a, b| a.text.cmp(&b.text));
    let content_hash = content_hash(proposals.iter().map(|p| p.text.as_str()));
    KnowledgeBase {
        proposals,
        content_hash,
    }
}

#[derive(Serialize, Deserialize)]
struct KbRecord {
    text: String,
    source: Source,
    level: Level,
}

pub fn hash_path(kb_path: &Path) -> PathBuf {
    let mut s = kb_path.as_os_str().to_owned();
    s.push(".hash");
    PathBuf::from(s)
}

impl KnowledgeBase {
    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn texts(&self) -> Vec<String> {
        self.proposals.iter().map(|p| p.text.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn content_hash(&self) -> &ContentHash {
        &self.content_hash
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.content_hash)
    }

    /// Keeps only proposals from `source`, rehashing the result.
    pub fn only_source(&self, source: Source) -> KnowledgeBase {
        let kept: Vec<Proposal> = self
            .proposals
            .iter()
            .filter(|p| p.source == source)
            .cloned()
            .collect();
        build_kb([kept.as_slice()])
    }

    /// JSON lines (`text`, `source`, `level`) plus a sibling `.hash` file
    /// holding the hex digest.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_proposals_jsonl(&self.proposals, path)?;
        fs::write(hash_path(path), format!("{}\n", self.hash_hex())).map_err(|e| Error::io(hash_path(path), e))
    }

    /// Reads a knowledge-base file, canonicalizes it, and checks the
    /// sibling `.hash` file when one exists.
    pub fn read_jsonl(path: &Path) -> Result<KnowledgeBase> {
        let proposals = read_proposals_jsonl(path)?;
        let kb = build_kb([proposals.as_slice()]);
        let hp = hash_path(path);
        if hp.exists() {
            let stored = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
            if stored.trim() != kb.hash_hex() {
                return Err(Error::Integrity {
                    path: path.to_owned(),
                    reason: format!(
                        "content hash {} does not match {}",
                        kb.hash_hex(),
                        stored.trim()
                    ),
                });
            }
        }
        Ok(kb)
    }
}

pub fn write_proposals_jsonl(proposals: &[Proposal], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for p in proposals {
        let rec = KbRecord {
            text: p.text.clone(),
            source: p.source,
            level: p.level,
        };
        serde_json::to_writer(&mut buf, &rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_proposals_jsonl(path: &Path) -> Result<Vec<Proposal>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: KbRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(Proposal {
            text: rec.text,
            source: rec.source,
            level: rec.level,
            masked_text: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpn(texts: &[&str]) -> Vec<Proposal> {
        texts.iter().map(|t| Proposal::extracted(*t, Level::Part)).collect()
    }

    #[test]
    fn disjoint_sets_are_merged_and_sorted() {
        let a = tpn(&["zip up", "b", "m"]);
        let b = tpn(&["a", "c", "y", "n"]);
        let kb = build_kb([a.as_slice(), b.as_slice()]);
        assert_eq!(kb.len(), 7);
        assert_eq!(kb.texts(), vec!["a", "b", "c", "m", "n", "y", "zip up"]);
    }

    #[test]
    fn shared_text_is_kept_once_with_first_metadata() {
        let a = vec![Proposal::extracted("kick  a ball", Level::Instance)];
        let b = vec![
            Proposal::extracted(" kick a ball ", Level::Part),
            Proposal::extracted("jump", Level::Part),
        ];
        let kb = build_kb([a.as_slice(), b.as_slice()]);
        assert_eq!(kb.len(), 2);
        assert_eq!(kb.proposals()[1].text, "kick a ball");
        assert_eq!(kb.proposals()[1].level, Level::Instance);
    }

    #[test]
    fn hash_is_sha256_of_newline_joined_texts() {
        let a = tpn(&["walk", "clap hands", "nod"]);
        let mut b = a.clone();
        b.reverse();
        let kb1 = build_kb([a.as_slice()]);
        let kb2 = build_kb([b.as_slice()]);
        assert_eq!(kb1.content_hash(), kb2.content_hash());
        let by_hand: [u8; 32] = Sha256::digest(b"clap hands\nnod\nwalk").into();
        assert_eq!(kb1.content_hash(), &by_hand);
    }

    #[test]
    fn masked_target_recovers_object() {
        let p = Proposal {
            text: "Human's hand hold the tea cup".into(),
            source: Source::Template,
            level: Level::Basic,
            masked_text: Some("Human's hand hold the [MASK]".into()),
        };
        assert_eq!(p.masked_target(), Some("tea cup"));
        assert_eq!(Proposal::extracted("x", Level::Part).masked_target(), None);
    }

    #[test]
    fn jsonl_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.jsonl");
        let kb = build_kb([tpn(&["wave", "bow"]).as_slice()]);
        kb.write_jsonl(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"text\":\"bow\",\"source\":\"tpn\",\"level\":\"part\"}\n{\"text\":\"wave\",\"source\":\"tpn\",\"level\":\"part\"}\n"
        );
        assert_eq!(KnowledgeBase::read_jsonl(&path).unwrap(), kb);
        fs::write(&path, "{\"text\":\"bow\",\"source\":\"tpn\",\"level\":\"part\"}\n").unwrap();
        assert!(matches!(
            KnowledgeBase::read_jsonl(&path),
            Err(Error::Integrity { .. })
        ));
    }
}

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// A body part paired with a state verb phrase, e.g. `hand` / `put on`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyPartState {
    pub body_part: String,
    pub state_phrase: String,
    pub transitive: bool,
}

impl BodyPartState {
    pub fn new(body_part: &str, state_phrase: &str, transitive: bool) -> Result<Self> {
        let check = |field: &str, v: &str| {
            if v.trim().is_empty() || v.contains('\n') || v.contains('\r') {
                Err(Error::invalid(format!("{field} must be a non-empty single line, got {v:?}")))
            } else if v != v.to_lowercase() {
                Err(Error::invalid(format!("{field} must be lowercase, got {v:?}")))
            } else {
                Ok(())
            }
        };
        check("body part", body_part)?;
        check("state phrase", state_phrase)?;
        Ok(BodyPartState {
            body_part: body_part.trim().to_owned(),
            state_phrase: state_phrase.trim().to_owned(),
            transitive,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ObjectNoun(String);

impl ObjectNoun {
    pub fn new(text: &str) -> Result<Self> {
        let t = text.trim();
        if t.is_empty() || t.contains('\n') || t.contains('\r') {
            return Err(Error::invalid(format!("noun must be a non-empty single line, got {text:?}")));
        }
        Ok(ObjectNoun(t.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Returns the noun texts that occur more than once, sorted.
pub(crate) fn duplicate_nouns(nouns: &[ObjectNoun]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for n in nouns {
        if !seen.insert(n.as_str()) {
            dups.insert(n.as_str().to_owned());
        }
    }
    dups.into_iter().collect()
}

/// `body_part<TAB>state_phrase<TAB>transitive(0|1)` per line.
pub fn read_states(path: &Path) -> Result<Vec<BodyPartState>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [part, phrase, flag] = fields[..] else {
            return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let transitive = match flag.trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(format!("transitive flag must be 0 or 1, got {other:?}"))),
        };
        out.push(BodyPartState::new(part, phrase, transitive).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

/// One noun or noun phrase per line; blank lines are skipped.
pub fn read_nouns(path: &Path) -> Result<Vec<ObjectNoun>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(ObjectNoun::new)
        .collect()
}

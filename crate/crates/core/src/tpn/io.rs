use std::fs;
use std::path::Path;

use super::{BioLabel, CaptionDocument};
use crate::text::tokenize;
use crate::{Error, Result};

/// `token<TAB>label` per line, blank line between documents. Documents are
/// named `<file>#<n>` with `n` counting from 1.
pub fn read_annotations(path: &Path) -> Result<Vec<CaptionDocument>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut docs = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<BioLabel>, docs: &mut Vec<CaptionDocument>| -> Result<()> {
        if !tokens.is_empty() {
            let id = format!("{name}#{}", docs.len() + 1);
            docs.push(CaptionDocument::new(id, std::mem::take(tokens), Some(std::mem::take(labels)))?);
        }
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels, &mut docs)?;
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            reason: format!("document {name}#{}: {reason}", docs.len() + 1),
        };
        let (token, label) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected token<TAB>label".into()))?;
        let label = BioLabel::parse(label).ok_or_else(|| parse_err(format!("unknown label {label:?}")))?;
        let token = token.trim();
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(parse_err(format!("bad token {token:?}")));
        }
        tokens.push(token.to_owned());
        labels.push(label);
    }
    flush(&mut tokens, &mut labels, &mut docs)?;
    Ok(docs)
}

/// A caption file is one unannotated document.
pub fn read_caption_file(path: &Path) -> Result<CaptionDocument> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CaptionDocument::new(path.display().to_string(), tokenize(&text), None)
}

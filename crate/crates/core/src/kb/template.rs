use rayon::prelude::*;

use super::corpus::duplicate_nouns;
use super::{BodyPartState, Level, ObjectNoun, Proposal, Source, MASK_TOKEN};
use crate::{Error, Result};

/// Fills `Human's {part} {state} the {noun}` for every transitive state and
/// noun, and `Human's {part} {state}` once per intransitive state. Output
/// follows state order, then noun order.
pub fn generate_template_proposals(
    states: &[BodyPartState],
    nouns: &[ObjectNoun],
) -> Result<Vec<Proposal>> {
    let dups = duplicate_nouns(nouns);
    if !dups.is_empty() {
        return Err(Error::invalid(format!("duplicate nouns: {}", dups.join(", "))));
    }
    let per_state: Vec<Vec<Proposal>> = states
        .par_iter()
        .map(|s| {
            let subject = format!("Human's {} {}", s.body_part, s.state_phrase);
            if !s.transitive {
                return vec![Proposal {
                    text: subject,
                    source: Source::Template,
                    level: Level::Basic,
                    masked_text: None,
                }];
            }
            let masked = format!("{subject} the {MASK_TOKEN}");
            nouns
                .iter()
                .map(|n| Proposal {
                    text: format!("{subject} the {}", n.as_str()),
                    source: Source::Template,
                    level: Level::Basic,
                    masked_text: Some(masked.clone()),
                })
                .collect()
        })
        .collect();
    Ok(per_state.into_iter().flatten().collect())
}

//! Token-bag video datasets with known structure, for end-to-end checks
//! with the toy encoder.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{FrameContent, ToyEncoder};
use crate::fewshot::{FrameSource, Manifest, VideoRecord};
use crate::kb::{BodyPartState, ObjectNoun};
use crate::{Error, Result};

/// Tokens shown by frames of the two motifs.
pub const MOTIF_X: [&str; 3] = ["hand", "hold", "ball"];
pub const MOTIF_Y: [&str; 3] = ["foot", "kick", "cup"];

/// Held-out order patterns, one bit per segment (1 = motif X). Each has four
/// segments of either motif, so all classes share the same frame multiset.
const TEST_PATTERNS: [u8; 5] = [0b1111_0000, 0b0000_1111, 0b1010_1010, 0b0101_0101, 0b1100_0011];

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub base_classes: Vec<String>,
    pub test_classes: Vec<String>,
}

impl SyntheticDataset {
    pub fn base(&self) -> Result<Manifest> {
        self.manifest.restrict(&self.base_classes)
    }

    pub fn test(&self) -> Result<Manifest> {
        self.manifest.restrict(&self.test_classes)
    }

    /// Writes `frames/<video>/<nnn>.txt`, `manifest.jsonl`, `base.txt` and
    /// `test.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(self.manifest.len());
        for v in self.manifest.videos() {
            let vdir = dir.join("frames").join(&v.video_id);
            fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            for (i, f) in v.load_frames()?.iter().enumerate() {
                let FrameContent::Tokens(tokens) = f else {
                    return Err(Error::invalid("synthetic frames are token bags"));
                };
                let p = vdir.join(format!("{i:03}.txt"));
                fs::write(&p, tokens.join(" ")).map_err(|e| Error::io(&p, e))?;
            }
            records.push(VideoRecord {
                frames: FrameSource::Dir(vdir),
                ..v.clone()
            });
        }
        Manifest::new(records)?.write_jsonl(&dir.join("manifest.jsonl"))?;
        for (name, classes) in [("base.txt", &self.base_classes), ("test.txt", &self.test_classes)] {
            let p = dir.join(name);
            fs::write(&p, classes.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderCodedSpec {
    pub base_classes: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub segments: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for OrderCodedSpec {
    fn default() -> Self {
        OrderCodedSpec {
            base_classes: 20,
            videos_per_class: 40,
            frames: 16,
            segments: 8,
            distractors: 2,
            seed: 17,
        }
    }
}

fn pattern_name(bits: u8, segments: usize) -> String {
    (0..segments)
        .map(|s| if bits >> (segments - 1 - s) & 1 == 1 { "hold" } else { "kick" })
        .collect::<Vec<_>>()
        .join("_")
}

fn distractor_pool() -> Vec<String> {
    (0..40).map(|i| format!("w{i:02}")).collect()
}

/// Classes differ only in the temporal order of motif X and motif Y
/// segments. Every frame also carries `distractors` random filler tokens.
pub fn order_coded(spec: &OrderCodedSpec) -> Result<SyntheticDataset> {
    if spec.segments != 8 {
        return Err(Error::invalid("order-coded patterns use 8 segments"));
    }
    if spec.frames < spec.segments || spec.videos_per_class == 0 {
        return Err(Error::invalid("need at least one frame per segment and one video per class"));
    }
    let balanced: Vec<u8> = (0u16..256)
        .map(|b| b as u8)
        .filter(|b| b.count_ones() == 4 && !TEST_PATTERNS.contains(b))
        .collect();
    if spec.base_classes > balanced.len() {
        return Err(Error::invalid(format!(
            "at most {} base patterns are available",
            balanced.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut base = balanced;
    base.shuffle(&mut rng);
    base.truncate(spec.base_classes);

    let pool = distractor_pool();
    let mut videos = Vec::new();
    let mut make = |bits: u8, rng: &mut ChaCha8Rng| -> Result<String> {
        let class = pattern_name(bits, spec.segments);
        for v in 0..spec.videos_per_class {
            let frames = (0..spec.frames)
                .map(|f| {
                    let seg = f * spec.segments / spec.frames;
                    let motif = if bits >> (spec.segments - 1 - seg) & 1 == 1 {
                        &MOTIF_X
                    } else {
                        &MOTIF_Y
                    };
                    let mut tokens: Vec<String> = motif.iter().map(|t| t.to_string()).collect();
                    tokens.extend((0..spec.distractors).map(|_| pool.choose(rng).expect("pool").clone()));
                    FrameContent::Tokens(tokens)
                })
                .collect();
            videos.push(VideoRecord::in_memory(&format!("{class}-{v:03}"), &class, frames)?);
        }
        Ok(class)
    };
    let test_classes = TEST_PATTERNS
        .iter()
        .map(|&b| make(b, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let base_classes = base.iter().map(|&b| make(b, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        manifest: Manifest::new(videos)?,
        base_classes,
        test_classes,
    })
}

/// Body-part states and nouns whose templates give a 60-proposal knowledge
/// base covering both motifs: 3 transitive states x 19 nouns + 3
/// intransitive states.
pub fn order_coded_corpus() -> (Vec<BodyPartState>, Vec<ObjectNoun>) {
    let states = [
        ("hand", "hold", true),
        ("foot", "kick", true),
        ("arm", "throw", true),
        ("body", "jump", false),
        ("head", "nod", false),
        ("arm", "wave", false),
    ]
    .iter()
    .map(|(b, s, t)| BodyPartState::new(b, s, *t).expect("valid state"))
    .collect();
    let nouns = [
        "ball", "cup", "bed", "door", "box", "chair", "bottle", "book", "phone", "table", "bag", "rope",
        "stick", "hat", "shoe", "towel", "plate", "pen", "knife",
    ]
    .iter()
    .map(|n| ObjectNoun::new(n).expect("valid noun"))
    .collect();
    (states, nouns)
}

pub fn write_corpus(states: &[BodyPartState], nouns: &[ObjectNoun], dir: &Path) -> Result<()> {
    let tsv: String = states
        .iter()
        .map(|s| format!("{}\t{}\t{}\n", s.body_part, s.state_phrase, u8::from(s.transitive)))
        .collect();
    let list: String = nouns.iter().map(|n| format!("{}\n", n.as_str())).collect();
    for (name, text) in [("states.tsv", tsv), ("nouns.txt", list)] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTokenSpec {
    pub base_classes: usize,
    pub test_classes: usize,
    pub videos_per_class: usize,
    pub frames: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for NamedTokenSpec {
    fn default() -> Self {
        NamedTokenSpec {
            base_classes: 5,
            test_classes: 10,
            videos_per_class: 10,
            frames: 16,
            distractors: 2,
            seed: 17,
        }
    }
}

/// Class `c` is named `verb_noun` and each of its frames shows both words
/// plus filler. Words are chosen so that no two share a toy-encoder bucket,
/// which makes a class's own prompt the unique best match.
pub fn named_token(spec: &NamedTokenSpec, encoder: &ToyEncoder) -> Result<SyntheticDataset> {
    let classes = spec.base_classes + spec.test_classes;
    let needed = 2 * classes + 20;
    let mut used = HashSet::new();
    let mut words = Vec::new();
    let mut i = 0;
    while words.len() < needed {
        let w = format!("tok{i}");
        i += 1;
        if used.insert(encoder.bucket(&w)) {
            words.push(w);
        }
        if i > 100_000 {
            return Err(Error::invalid("encoder too narrow for a collision-free vocabulary"));
        }
    }
    let (names, filler) = words.split_at(2 * classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::new();
    let mut class_names = Vec::new();
    for c in 0..classes {
        let (a, b) = (&names[2 * c], &names[2 * c + 1]);
        let class = format!("{a}_{b}");
        for v in 0..spec.videos_per_class {
            let frames = (0..spec.frames)
                .map(|_| {
                    let mut tokens = vec![a.clone(), b.clone()];
                    tokens.extend((0..spec.distractors).map(|_| filler.choose(&mut rng).expect("filler").clone()));
                    tokens.shuffle(&mut rng);
                    if rng.random_bool(0.25) {
                        tokens.retain(|t| t != b);
                    }
                    FrameContent::Tokens(tokens)
                })
                .collect();
            videos.push(VideoRecord::in_memory(&format!("{class}-{v:03}"), &class, frames)?);
        }
        class_names.push(class);
    }
    let test_classes = class_names.split_off(spec.base_classes);
    Ok(SyntheticDataset {
        manifest: Manifest::new(videos)?,
        base_classes: class_names,
        test_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::generate_template_proposals;

    #[test]
    fn order_classes_share_frame_multisets() {
        let ds = order_coded(&OrderCodedSpec {
            base_classes: 3,
            videos_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(ds.test_classes.len(), 5);
        assert_eq!(ds.manifest.len(), 16);
        for v in ds.manifest.videos() {
            let frames = v.load_frames().unwrap();
            let x = frames
                .iter()
                .filter(|f| matches!(f, FrameContent::Tokens(t) if t[1] == "hold"))
                .count();
            assert_eq!(x, 8, "{}", v.video_id);
        }
        let test: HashSet<_> = ds.test_classes.iter().collect();
        assert!(ds.base_classes.iter().all(|c| !test.contains(c)));
    }

    #[test]
    fn corpus_gives_sixty_proposals() {
        let (s, n) = order_coded_corpus();
        assert_eq!(generate_template_proposals(&s, &n).unwrap().len(), 60);
    }

    #[test]
    fn named_vocabulary_has_no_bucket_collisions() {
        let enc = ToyEncoder::default();
        let ds = named_token(&NamedTokenSpec::default(), &enc).unwrap();
        let mut buckets = HashSet::new();
        for c in ds.base_classes.iter().chain(&ds.test_classes) {
            for w in c.split('_') {
                assert!(buckets.insert(enc.bucket(w)));
            }
        }
    }

    #[test]
    fn write_produces_a_readable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = order_coded(&OrderCodedSpec {
            base_classes: 1,
            videos_per_class: 1,
            ..Default::default()
        })
        .unwrap();
        ds.write(dir.path()).unwrap();
        let m = Manifest::read_jsonl(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.videos()[0].load_frames().unwrap(), ds.manifest.videos()[0].load_frames().unwrap());
    }
}

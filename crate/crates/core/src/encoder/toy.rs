use super::{DualEncoder, Embedding, EncoderError, FrameContent};
use crate::text::{fnv1a64, tokenize};

pub const TOY_DIM: usize = 256;

/// Deterministic hashed bag-of-tokens encoder. Text and token-bag frames go
/// through the same hashing, so a frame showing token `t` matches any text
/// mentioning `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyEncoder {
    dim: usize,
}

impl Default for ToyEncoder {
    fn default() -> Self {
        ToyEncoder { dim: TOY_DIM }
    }
}

impl ToyEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "toy encoder dimension must be positive");
        ToyEncoder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token) % self.dim as u64) as usize
    }

    /// Integer counts first, normalization last, so the result does not
    /// depend on token order.
    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Embedding {
        let mut counts = vec![0u32; self.dim];
        for t in tokens {
            counts[self.bucket(t.as_ref())] += 1;
        }
        Embedding::normalized(counts.into_iter().map(f64::from).collect())
    }
}

impl DualEncoder for ToyEncoder {
    fn id(&self) -> String {
        format!("toy-fnv1a-d{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, texts: &[String]) -> Result<Vec<Embedding>, EncoderError> {
        Ok(texts.iter().map(|t| self.embed_tokens(&tokenize(t))).collect())
    }

    fn embed_frames(&self, frames: &[FrameContent]) -> Result<Vec<Embedding>, EncoderError> {
        frames
            .iter()
            .map(|f| match f {
                FrameContent::Tokens(tokens) => {
                    let lowered: Vec<String> = tokens.iter().flat_map(|t| tokenize(t)).collect();
                    Ok(self.embed_tokens(&lowered))
                }
                FrameContent::Image(_) => Err(EncoderError::Unsupported(
                    "the toy encoder only reads token-bag frames".into(),
                )),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text(enc: &ToyEncoder, s: &str) -> Embedding {
        enc.embed_text(&[s.to_owned()]).unwrap().remove(0)
    }

    #[test]
    fn deterministic_and_order_free() {
        let enc = ToyEncoder::default();
        assert_eq!(text(&enc, "hold the ball"), text(&enc, "hold the ball"));
        let ab = text(&enc, "a b");
        assert_eq!(ab, text(&enc, "b a"));
        // direct construction: one count at each token's bucket
        let mut expected = vec![0.0; TOY_DIM];
        expected[enc.bucket("a")] += 1.0;
        expected[enc.bucket("b")] += 1.0;
        assert_ne!(enc.bucket("a"), enc.bucket("b"));
        let r = 2f64.sqrt();
        expected.iter_mut().for_each(|v| *v /= r);
        assert_eq!(ab.values(), &expected[..]);
    }

    #[test]
    fn empty_inputs_are_zero() {
        let enc = ToyEncoder::default();
        assert!(text(&enc, "").is_zero());
        let frames = enc.embed_frames(&[FrameContent::Tokens(vec![])]).unwrap();
        assert!(frames[0].is_zero());
    }

    #[test]
    fn frame_and_text_share_hashing() {
        let enc = ToyEncoder::default();
        let f = enc.embed_frames(&[FrameContent::tokens(&["ball"])]).unwrap().remove(0);
        assert_eq!(f.cosine(&text(&enc, "ball")).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_collision_free_bags_are_orthogonal() {
        let enc = ToyEncoder::default();
        let (a, b) = (["hand", "ball"], ["foot", "cup"]);
        let mut buckets: Vec<usize> = a.iter().chain(&b).map(|t| enc.bucket(t)).collect();
        buckets.sort_unstable();
        buckets.dedup();
        assert_eq!(buckets.len(), 4, "vocabulary must be collision-free");
        let fa = enc.embed_frames(&[FrameContent::tokens(&a)]).unwrap().remove(0);
        let fb = enc.embed_frames(&[FrameContent::tokens(&b)]).unwrap().remove(0);
        assert_eq!(fa.cosine(&fb).unwrap(), 0.0);
    }

    #[test]
    fn images_are_unsupported() {
        let enc = ToyEncoder::default();
        assert!(enc.embed_frames(&[FrameContent::Image(vec![1, 2])]).is_err());
    }
}

use ndarray::Array2;

use crate::encoder::ToyEncoder;

/// Supplies one feature row per token.
pub trait TokenFeatureProvider: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn features(&self, tokens: &[String]) -> Array2<f64>;
}

/// Hashed one-hot token codes for the token and its two neighbours,
/// concatenated as `[prev | token | next]`, zero past either edge.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedWindowFeatures {
    encoder: ToyEncoder,
}

impl HashedWindowFeatures {
    pub fn new(hash_dim: usize) -> Self {
        HashedWindowFeatures {
            encoder: ToyEncoder::new(hash_dim),
        }
    }

    /// Inverse of [`TokenFeatureProvider::id`].
    pub fn from_id(id: &str) -> Option<Self> {
        let w: usize = id.strip_prefix("hashed-window3-d")?.parse().ok()?;
        (w > 0).then(|| HashedWindowFeatures::new(w))
    }

    fn width(&self) -> usize {
        use crate::encoder::DualEncoder;
        self.encoder.dim()
    }
}

impl TokenFeatureProvider for HashedWindowFeatures {
    fn id(&self) -> String {
        format!("hashed-window3-d{}", self.width())
    }

    fn dim(&self) -> usize {
        3 * self.width()
    }

    fn features(&self, tokens: &[String]) -> Array2<f64> {
        let w = self.width();
        let mut out = Array2::zeros((tokens.len(), 3 * w));
        for (i, _) in tokens.iter().enumerate() {
            for (slot, offset) in [-1isize, 0, 1].into_iter().enumerate() {
                let j = i as isize + offset;
                if j < 0 || j >= tokens.len() as isize {
                    continue;
                }
                let bucket = self.encoder.bucket(&tokens[j as usize].to_lowercase());
                out[[i, slot * w + bucket]] = 1.0;
            }
        }
        out
    }
}

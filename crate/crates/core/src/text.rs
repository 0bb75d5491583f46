//! Tokenization and hashing shared by the proposal tagger and the toy encoder.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the UTF-8 bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Lowercases, drops punctuation other than apostrophes, and splits on
/// whitespace. Tokens made only of apostrophes are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '\'')
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| t.chars().any(|c| c != '\''))
        .map(str::to_owned)
        .collect()
}

/// Trims and collapses internal whitespace runs to a single space.
pub fn normalize_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64("foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn tokenize_keeps_apostrophes() {
        assert_eq!(
            tokenize("Human's HAND, put-on the cup!"),
            vec!["human's", "hand", "puton", "the", "cup"]
        );
        assert!(tokenize(" ' , ").is_empty());
    }

    #[test]
    fn whitespace_collapse() {
        assert_eq!(normalize_ws("  a \t b\n c "), "a b c");
    }
}

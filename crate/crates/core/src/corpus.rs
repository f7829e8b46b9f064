//! Byte-level corpus ingestion.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

/// Vocabulary size of the byte tokenizer.
pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`tokenize`]; invalid UTF-8 is replaced lossily.
pub fn detokenize(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// One token sequence per non-empty line, each truncated to `max_len`.
pub fn parse_corpus(text: &str, max_len: usize) -> Result<Vec<Vec<u32>>> {
    ensure!(max_len > 0, Config, "maximum sequence length must be positive");
    let docs: Vec<Vec<u32>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut t = tokenize(l);
            t.truncate(max_len);
            t
        })
        .collect();
    ensure!(!docs.is_empty(), Input, "corpus contains no documents");
    Ok(docs)
}

pub fn load_corpus(path: impl AsRef<Path>, max_len: usize) -> Result<Vec<Vec<u32>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, max_len)
}

/// Splits off the last tenth of the documents (at least one) for evaluation.
pub fn split_holdout(docs: &[Vec<u32>]) -> Result<(&[Vec<u32>], &[Vec<u32>])> {
    ensure!(docs.len() >= 2, Input, "need at least two documents to hold one out, got {}", docs.len());
    let held = (docs.len() / 10).max(1);
    Ok(docs.split_at(docs.len() - held))
}

const WORDS: &[&str] = &[
    "the", "cache", "layer", "value", "key", "token", "model", "memory", "window", "signal", "group", "head",
    "stream", "vector", "record", "report", "north", "river", "stone", "light", "market", "garden", "paper",
    "engine", "number", "letter", "silver", "orange", "winter", "summer", "quiet", "rapid", "under", "over",
    "between", "across", "and", "or", "with", "from", "into", "a", "of", "to", "in", "is", "was", "will",
];

/// Deterministic pseudo-prose: `docs` lines of roughly `chars` bytes each.
pub fn synthetic_corpus(seed: u64, docs: usize, chars: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for _ in 0..docs {
        let mut line = String::new();
        while line.len() < chars {
            if !line.is_empty() {
                line.push(if rng.random_range(0..12) == 0 { '.' } else { ' ' });
                if line.ends_with('.') {
                    line.push(' ');
                }
            }
            line.push_str(WORDS[rng.random_range(0..WORDS.len())]);
            if rng.random_range(0..20) == 0 {
                line.push_str(&rng.random_range(0..1000).to_string());
            }
        }
        line.truncate(chars);
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Exactly `len` tokens of generated prose.
pub fn synthetic_tokens(seed: u64, len: usize) -> Vec<u32> {
    let mut tokens = tokenize(&synthetic_corpus(seed, 1, len + 16));
    tokens.retain(|&t| t != u32::from(b'\n'));
    tokens.resize(len, u32::from(b' '));
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_ids() {
        assert_eq!(tokenize("ab"), vec![97, 98]);
    }

    #[test]
    fn empty_lines_skipped_and_truncated() {
        let docs = parse_corpus("abc\n\nhello world\n", 5).unwrap();
        assert_eq!(docs, vec![tokenize("abc"), tokenize("hello")]);
    }

    #[test]
    fn empty_corpus_and_missing_file() {
        assert!(matches!(parse_corpus("\n\n", 8), Err(Error::Input(_))));
        assert!(matches!(load_corpus("/nonexistent/corpus.txt", 8), Err(Error::Io { .. })));
    }

    #[test]
    fn holdout_is_last_tenth() {
        let docs: Vec<Vec<u32>> = (0..25).map(|i| vec![i]).collect();
        let (train, held) = split_holdout(&docs).unwrap();
        assert_eq!(train.len(), 23);
        assert_eq!(held, &docs[23..]);
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = synthetic_corpus(3, 4, 100);
        assert_eq!(a, synthetic_corpus(3, 4, 100));
        assert_ne!(a, synthetic_corpus(4, 4, 100));
        assert_eq!(parse_corpus(&a, 512).unwrap().len(), 4);
    }

    proptest! {
        #[test]
        fn ascii_round_trip(s in "[ -~]{0,64}") {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}

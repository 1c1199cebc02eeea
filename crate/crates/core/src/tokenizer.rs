//! Character-level and small byte-pair tokenizers with a dense vocabulary.
//!
//! Each token has an original id (the Unicode scalar value for characters,
//! `0x110000 + merge index` for merged pairs). Only tokens that occur in the
//! corpus are kept and they are renumbered densely in order of original id.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MERGE_BASE: u32 = 0x11_0000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Scheme {
    #[default]
    Char,
    SimpleBpe {
        merges: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    /// Dense id -> token text.
    pub tokens: Vec<String>,
    /// Dense id -> original id.
    pub original_ids: Vec<u32>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Original id -> dense id.
    pub fn remap(&self) -> BTreeMap<u32, u32> {
        self.original_ids.iter().enumerate().map(|(d, &o)| (o, d as u32)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.tokens[i as usize].as_str()).collect()
    }
}

/// Tokenizes `text`, returning the dense ids and the vocabulary.
pub fn tokenize(text: &str, scheme: Scheme) -> Result<(Vec<u32>, Vocab)> {
    if text.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut seq: Vec<u32> = text.chars().map(|c| c as u32).collect();
    let mut strings: HashMap<u32, String> = seq.iter().map(|&c| (c, char::from_u32(c).unwrap().to_string())).collect();

    if let Scheme::SimpleBpe { merges } = scheme {
        for m in 0..merges {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
            // most frequent pair, lowest pair on ties
            let Some((&pair, &count)) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
                break;
            };
            if count < 2 {
                break;
            }
            let new_id = MERGE_BASE + m as u32;
            strings.insert(new_id, format!("{}{}", strings[&pair.0], strings[&pair.1]));
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            seq = out;
        }
    }

    let mut occurring: Vec<u32> = seq.clone();
    occurring.sort_unstable();
    occurring.dedup();
    let dense: HashMap<u32, u32> = occurring.iter().enumerate().map(|(d, &o)| (o, d as u32)).collect();
    let ids = seq.iter().map(|o| dense[o]).collect();
    let vocab = Vocab { tokens: occurring.iter().map(|o| strings[o].clone()).collect(), original_ids: occurring };
    Ok((ids, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_round_trip() {
        let (ids, vocab) = tokenize("abab", Scheme::Char).unwrap();
        assert_eq!(ids, vec![0, 1, 0, 1]);
        assert_eq!(vocab.tokens, vec!["a", "b"]);
        assert_eq!(vocab.decode(&ids), "abab");
    }

    #[test]
    fn vocab_counts_distinct_chars() {
        let text = "the quick brown fox jumps over a lazy dog";
        let (_, vocab) = tokenize(text, Scheme::Char).unwrap();
        // 26 letters and the space
        assert_eq!(vocab.len(), 27);
    }

    #[test]
    fn empty_text_is_an_error() {
        assert!(matches!(tokenize("", Scheme::Char), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn bpe_round_trip_and_merges() {
        let text = "low lower lowest low low slow";
        let (ids, vocab) = tokenize(text, Scheme::SimpleBpe { merges: 10 }).unwrap();
        assert_eq!(vocab.decode(&ids), text);
        assert!(ids.len() < text.chars().count());
        assert!(vocab.tokens.iter().any(|t| t.chars().count() > 1));
    }

    #[test]
    fn remap_is_a_bijection() {
        let (ids, vocab) = tokenize("héllo wörld", Scheme::Char).unwrap();
        let remap = vocab.remap();
        assert_eq!(remap.len(), vocab.len());
        let mut dense: Vec<u32> = remap.values().copied().collect();
        dense.sort_unstable();
        assert_eq!(dense, (0..vocab.len() as u32).collect::<Vec<_>>());
        assert!(ids.iter().all(|&i| (i as usize) < vocab.len()));
        assert_eq!(remap[&('é' as u32)], vocab.tokens.iter().position(|t| t == "é").unwrap() as u32);
    }
}

//! Subword vocabulary with greedy longest-match tokenization.
//!
//! Ids 0..=4 are always the special tokens `[PAD] [UNK] [CLS] [SEP] [MASK]`,
//! in that order. Continuation pieces carry a `##` prefix in the vocabulary
//! but not in raw text; the first piece of a word is stored bare. Tokenizing
//! raw text never produces a special id: a word that happens to spell a
//! special token falls back to `[UNK]` like any other unmatched word.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, TfsError};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Prefix marking a piece that continues the previous piece within a word.
pub const CONTINUATION: &str = "##";

/// Token table mapping between piece strings and dense ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// One tokenized text: piece ids plus a flag per piece marking the first
/// piece of each original whitespace word.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub word_boundaries: Vec<bool>,
}

impl Vocabulary {
    /// Builds a vocabulary from explicit non-special tokens, prepending the
    /// five specials. Errors on duplicates.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, tok) in all.iter().enumerate() {
            if tok.is_empty() {
                return Err(TfsError::Data(format!("empty token at id {i}")));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(TfsError::Data(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Counts whitespace-separated tokens of `corpus` and keeps those seen at
    /// least `min_count` times, most frequent first (ties lexicographic),
    /// truncated to `max_size` total entries including the specials.
    /// Tokens spelling a special are skipped; `##`-prefixed strings are
    /// admissible and enter the table as continuation pieces.
    pub fn build<'a, I>(corpus: I, min_count: usize, max_size: Option<usize>) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if let Some(cap) = max_size {
            if cap < SPECIAL_TOKENS.len() {
                return Err(TfsError::Config(format!(
                    "max_size {cap} cannot hold the {} special tokens",
                    SPECIAL_TOKENS.len()
                )));
            }
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for tok in line.split_whitespace() {
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            ranked.truncate(cap - SPECIAL_TOKENS.len());
        }
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn raw_text_piece(&self, piece: &str) -> Option<u32> {
        self.index
            .get(piece)
            .copied()
            .filter(|&id| id as usize >= SPECIAL_TOKENS.len())
    }

    /// Greedy longest-match tokenization of whitespace-separated words. A
    /// word with any unmatched remainder becomes a single `[UNK]`.
    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let mut out = TokenizedText { ids: Vec::new(), word_boundaries: Vec::new() };
        for word in text.split_whitespace() {
            self.tokenize_word(word, &mut out);
        }
        out
    }

    fn tokenize_word(&self, word: &str, out: &mut TokenizedText) {
        let mut ids = Vec::new();
        let mut start = 0;
        let mut lookup = String::new();
        while start < word.len() {
            let mut matched = None;
            let ends: Vec<usize> = word[start..]
                .char_indices()
                .map(|(i, c)| start + i + c.len_utf8())
                .collect();
            for &end in ends.iter().rev() {
                lookup.clear();
                if start > 0 {
                    lookup.push_str(CONTINUATION);
                }
                lookup.push_str(&word[start..end]);
                if let Some(id) = self.raw_text_piece(&lookup) {
                    matched = Some((id, end));
                    break;
                }
            }
            match matched {
                Some((id, end)) => {
                    ids.push(id);
                    start = end;
                }
                None => {
                    out.ids.push(UNK);
                    out.word_boundaries.push(true);
                    return;
                }
            }
        }
        for (i, id) in ids.into_iter().enumerate() {
            out.ids.push(id);
            out.word_boundaries.push(i == 0);
        }
    }

    /// Inverse of [`Vocabulary::tokenize`] up to `[UNK]` and whitespace
    /// normalization: continuation pieces re-attach to their word.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut text = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]);
            if let Some(cont) = tok.strip_prefix(CONTINUATION) {
                text.push_str(cont);
            } else {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(tok);
            }
        }
        text
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            let _ = writeln!(body, "{tok}");
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    /// Loads a token-per-line file, validating the five special tokens on the
    /// first five lines.
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                return Err(TfsError::Parse {
                    line: i + 1,
                    message: "empty vocabulary line".into(),
                });
            }
            if i < SPECIAL_TOKENS.len() && line != SPECIAL_TOKENS[i] {
                return Err(TfsError::Parse {
                    line: i + 1,
                    message: format!("expected special token {:?}, found {line:?}", SPECIAL_TOKENS[i]),
                });
            }
            tokens.push(line.to_string());
        }
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(TfsError::Parse {
                line: tokens.len() + 1,
                message: "vocabulary is missing special tokens".into(),
            });
        }
        Self::from_tokens(tokens.into_iter().skip(SPECIAL_TOKENS.len()))
            .map_err(|e| match e {
                TfsError::Data(msg) => TfsError::Parse { line: 0, message: msg },
                other => other,
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_counts_and_orders_by_frequency_then_lexicographic() {
        // ["a b", "b c"]: min_count 1 keeps a, b, c -> 5 specials + 3.
        let v = Vocabulary::build(["a b", "b c"], 1, None).unwrap();
        assert_eq!(v.len(), 8);
        // b occurs twice and outranks a and c; ties break lexicographically.
        assert_eq!(v.token(5), Some("b"));
        assert_eq!(v.token(6), Some("a"));
        assert_eq!(v.token(7), Some("c"));

        let v2 = Vocabulary::build(["a b", "b c"], 2, None).unwrap();
        assert_eq!(v2.len(), 6);
        assert_eq!(v2.token(5), Some("b"));

        let v3 = Vocabulary::build(["a b", "b c"], 1, Some(5)).unwrap();
        assert_eq!(v3.len(), 5);

        assert!(matches!(
            Vocabulary::build(["a"], 1, Some(3)),
            Err(TfsError::Config(_))
        ));
    }

    #[test]
    fn specials_occupy_fixed_ids() {
        let v = Vocabulary::from_tokens(["x"]).unwrap();
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as u32));
            assert_eq!(v.token(i as u32), Some(*s));
        }
        assert_eq!(v.id("x"), Some(5));
    }

    #[test]
    fn greedy_longest_match_with_continuations() {
        let v = Vocabulary::from_tokens(["un", "##believ", "##able", "##b", "able"]).unwrap();
        let t = v.tokenize("unbelievable able");
        let ids: Vec<&str> = t.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(ids, vec!["un", "##believ", "##able", "able"]);
        assert_eq!(t.word_boundaries, vec![true, false, false, true]);
    }

    #[test]
    fn unmatched_word_becomes_single_unk() {
        let v = Vocabulary::from_tokens(["un", "able"]).unwrap();
        // "unbelievable": "un" matches but "believable" has no continuation.
        let t = v.tokenize("unbelievable able");
        assert_eq!(t.ids, vec![UNK, v.id("able").unwrap()]);
        assert_eq!(t.word_boundaries, vec![true, true]);
    }

    #[test]
    fn raw_text_never_yields_special_ids() {
        let v = Vocabulary::from_tokens(["mask"]).unwrap();
        let t = v.tokenize("[MASK] mask");
        assert_eq!(t.ids, vec![UNK, v.id("mask").unwrap()]);
    }

    #[test]
    fn detokenize_round_trips_in_vocabulary_text() {
        let v = Vocabulary::from_tokens(["play", "##ing", "##ed", "the", "game"]).unwrap();
        let text = "playing the game played";
        let t = v.tokenize(text);
        assert_eq!(v.detokenize(&t.ids), text);
    }

    #[test]
    fn save_load_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::from_tokens(["alpha", "##beta"]).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.len(), v.len());
        assert_eq!(loaded.id("##beta"), v.id("##beta"));

        std::fs::write(&path, "[PAD]\n[UNK]\n[CLS]\nwrong\n[MASK]\nalpha\n").unwrap();
        assert!(matches!(
            Vocabulary::load(&path),
            Err(TfsError::Parse { line: 4, .. })
        ));
    }
}

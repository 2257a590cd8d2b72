//! Tokenization and interpretable-unit segmentation.
//!
//! The built-in tokenizer is a WordPiece-style greedy matcher over an explicit
//! piece vocabulary, with a deterministic hashed fallback for out-of-vocabulary
//! words. Words are contiguous alphanumeric runs; punctuation characters form
//! their own words. Sentences split on `.`, `!`, `?` followed by whitespace.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Attribution granularity: the unit at which scores are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Word,
    Sentence,
}

/// Activation-collection granularity for the concept pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationGranularity {
    ClsToken,
    AllTokens,
    NonSpecialTokens,
    WordMean,
}

/// Tokenized text with per-token character offsets, word groups, and
/// special-token flags.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedText {
    pub token_ids: Vec<u32>,
    /// Per-token character span `(start, end)` into `text` (empty for specials).
    pub offsets: Vec<(usize, usize)>,
    /// Word-group index per token; `None` for special tokens.
    pub word_ids: Vec<Option<usize>>,
    pub special_mask: Vec<bool>,
    pub text: String,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn non_special_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.special_mask[i]).collect()
    }

    /// Word groups in order: each is the list of token indices sharing a word id.
    pub fn word_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut last: Option<usize> = None;
        for i in 0..self.len() {
            if let Some(w) = self.word_ids[i] {
                if last == Some(w) {
                    groups.last_mut().unwrap().push(i);
                } else {
                    groups.push(vec![i]);
                    last = Some(w);
                }
            }
        }
        groups
    }

    /// Display string for a group of token indices: the text slice from the
    /// first to the last token offset.
    pub fn span_text(&self, token_indices: &[usize]) -> String {
        let starts: Vec<usize> = token_indices.iter().map(|&i| self.offsets[i].0).collect();
        let ends: Vec<usize> = token_indices.iter().map(|&i| self.offsets[i].1).collect();
        let lo = starts.iter().copied().min().unwrap_or(0);
        let hi = ends.iter().copied().max().unwrap_or(0);
        self.text.get(lo..hi).unwrap_or("").to_string()
    }

    /// Sentence index per word group, per the `{. ! ?}`-followed-by-whitespace rule.
    fn sentence_of_words(&self) -> Vec<usize> {
        let mut boundaries: Vec<usize> = Vec::new();
        let mut it = self.text.char_indices().peekable();
        while let Some((b, ch)) = it.next() {
            let next_ws = it.peek().map_or(true, |&(_, c)| c.is_whitespace());
            if matches!(ch, '.' | '!' | '?') && next_ws {
                boundaries.push(b + ch.len_utf8());
            }
        }
        let groups = self.word_groups();
        let mut out = Vec::with_capacity(groups.len());
        for g in &groups {
            let start = self.offsets[g[0]].0;
            let sent = boundaries.iter().filter(|&&b| b <= start).count();
            out.push(sent);
        }
        out
    }

    /// Interpretable units at a granularity: `(display, token_indices)` pairs.
    /// Special tokens are never part of a unit.
    pub fn units(&self, granularity: Granularity) -> Vec<(String, Vec<usize>)> {
        match granularity {
            Granularity::Token => self
                .non_special_indices()
                .into_iter()
                .map(|i| (self.span_text(&[i]), vec![i]))
                .collect(),
            Granularity::Word => self
                .word_groups()
                .into_iter()
                .map(|g| (self.span_text(&g), g))
                .collect(),
            Granularity::Sentence => {
                let groups = self.word_groups();
                let sent = self.sentence_of_words();
                let n_sent = sent.iter().copied().max().map_or(0, |m| m + 1);
                let mut units = Vec::new();
                for s in 0..n_sent {
                    let toks: Vec<usize> = groups
                        .iter()
                        .zip(&sent)
                        .filter(|(_, &si)| si == s)
                        .flat_map(|(g, _)| g.iter().copied())
                        .collect();
                    if !toks.is_empty() {
                        units.push((self.span_text(&toks), toks));
                    }
                }
                units
            }
        }
    }
}

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
pub const UNK_BASE: u32 = 4;

/// WordPiece-style tokenizer with hashed fallback for unknown words.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab_size: usize,
    /// Explicit pieces: plain words and `##`-prefixed continuations.
    pieces: HashMap<String, u32>,
    /// Prepend `[CLS]` and append `[SEP]` (encoder/classification convention).
    pub add_cls_sep: bool,
    /// Whether `[MASK]` is usable as a replacement token.
    pub has_mask_token: bool,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Tokenizer {
    /// Tokenizer mapping each whole word to a deterministic hashed id.
    pub fn hashed(vocab_size: usize, add_cls_sep: bool) -> Self {
        assert!(vocab_size > UNK_BASE as usize + 1);
        Tokenizer {
            vocab_size,
            pieces: HashMap::new(),
            add_cls_sep,
            has_mask_token: true,
        }
    }

    /// Tokenizer with an explicit piece vocabulary (ids assigned in order,
    /// starting after the special tokens). Unlisted words fall back to hashing.
    pub fn with_pieces(vocab_size: usize, pieces: &[&str], add_cls_sep: bool) -> Self {
        let mut map = HashMap::new();
        for (i, p) in pieces.iter().enumerate() {
            map.insert((*p).to_string(), UNK_BASE + 1 + i as u32);
        }
        assert!((UNK_BASE as usize + 1 + pieces.len()) <= vocab_size);
        Tokenizer {
            vocab_size,
            pieces: map,
            add_cls_sep,
            has_mask_token: true,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn without_mask_token(mut self) -> Self {
        self.has_mask_token = false;
        self
    }

    fn hash_id(&self, word: &str) -> u32 {
        let span = self.vocab_size as u64 - u64::from(UNK_BASE) - 1 - self.pieces.len() as u64;
        let base = UNK_BASE + 1 + self.pieces.len() as u32;
        base + (fnv1a(word) % span.max(1)) as u32
    }

    /// Word id for a known piece or the hashed fallback; used by the
    /// reference models to attach weights to words.
    pub fn word_id(&self, word: &str) -> u32 {
        match self.pieces.get(word) {
            Some(&id) => id,
            None => self.hash_id(word),
        }
    }

    /// Greedy longest-match split of one word into pieces; falls back to a
    /// single hashed id when no full cover exists.
    fn split_word(&self, word: &str) -> Vec<(u32, usize, usize)> {
        if self.pieces.is_empty() {
            return vec![(self.hash_id(word), 0, word.len())];
        }
        let mut out = Vec::new();
        let mut start = 0usize;
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let total = word.len();
        while start < total {
            let mut matched = None;
            // longest match first
            let mut ends: Vec<usize> = chars
                .iter()
                .map(|(b, c)| b + c.len_utf8())
                .filter(|&e| e > start)
                .collect();
            ends.sort_unstable_by(|a, b| b.cmp(a));
            for end in ends {
                let piece = &word[start..end];
                let key = if start == 0 {
                    piece.to_string()
                } else {
                    format!("##{piece}")
                };
                if let Some(&id) = self.pieces.get(&key) {
                    matched = Some((id, start, end));
                    break;
                }
            }
            match matched {
                Some(m) => {
                    start = m.2;
                    out.push(m);
                }
                None => return vec![(self.hash_id(word), 0, total)],
            }
        }
        out
    }
}

/// Segment text into words: alphanumeric runs, with punctuation characters as
/// their own single-char words. Returns byte spans.
fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (b, c) in text.char_indices() {
        if c.is_alphanumeric() || c == '\'' {
            if run_start.is_none() {
                run_start = Some(b);
            }
        } else {
            if let Some(s) = run_start.take() {
                spans.push((s, b));
            }
            if !c.is_whitespace() {
                spans.push((b, b + c.len_utf8()));
            }
        }
    }
    if let Some(s) = run_start {
        spans.push((s, text.len()));
    }
    spans
}

/// Tokenize text into a [`TokenizedText`] satisfying its invariants.
pub fn tokenize(text: &str, tokenizer: &Tokenizer) -> Result<TokenizedText> {
    if text.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut token_ids = Vec::new();
    let mut offsets = Vec::new();
    let mut word_ids = Vec::new();
    let mut special = Vec::new();

    if tokenizer.add_cls_sep {
        token_ids.push(CLS_ID);
        offsets.push((0, 0));
        word_ids.push(None);
        special.push(true);
    }
    for (w, (start, end)) in word_spans(text).into_iter().enumerate() {
        let word = &text[start..end];
        for (id, ps, pe) in tokenizer.split_word(word) {
            token_ids.push(id);
            offsets.push((start + ps, start + pe));
            word_ids.push(Some(w));
            special.push(false);
        }
    }
    if token_ids.iter().zip(&special).all(|(_, &s)| s) {
        return Err(Error::EmptyInput);
    }
    if tokenizer.add_cls_sep {
        token_ids.push(SEP_ID);
        offsets.push((text.len(), text.len()));
        word_ids.push(None);
        special.push(true);
    }
    Ok(TokenizedText {
        token_ids,
        offsets,
        word_ids,
        special_mask: special,
        text: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_words_two_groups() {
        let tok = tokenize("great movie", &Tokenizer::hashed(256, true)).unwrap();
        let non_special: Vec<_> = tok.non_special_indices();
        assert_eq!(non_special.len(), 2);
        assert_eq!(tok.word_ids[non_special[0]], Some(0));
        assert_eq!(tok.word_ids[non_special[1]], Some(1));
        assert!(tok.special_mask[0] && *tok.special_mask.last().unwrap());
    }

    #[test]
    fn empty_text_errors() {
        assert!(matches!(
            tokenize("", &Tokenizer::hashed(256, true)),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn subword_split_shares_word_id() {
        let tk = Tokenizer::with_pieces(256, &["work", "##shop"], false);
        let tok = tokenize("workshop", &tk).unwrap();
        assert_eq!(tok.len(), 2);
        assert_eq!(tok.word_ids[0], tok.word_ids[1]);
        assert_ne!(tok.token_ids[0], tok.token_ids[1]);
    }

    #[test]
    fn offsets_reconstruct_subsequence() {
        let text = "a workshop, great!";
        let tk = Tokenizer::with_pieces(512, &["work", "##shop"], true);
        let tok = tokenize(text, &tk).unwrap();
        for &i in &tok.non_special_indices() {
            let (s, e) = tok.offsets[i];
            assert!(s <= e && e <= text.len());
        }
        // non-special offsets are non-overlapping and ordered
        let mut prev_end = 0;
        for &i in &tok.non_special_indices() {
            assert!(tok.offsets[i].0 >= prev_end);
            prev_end = tok.offsets[i].1;
        }
    }

    #[test]
    fn sentence_units() {
        let tok = tokenize("Good. Bad.", &Tokenizer::hashed(256, true)).unwrap();
        let sents = tok.units(Granularity::Sentence);
        assert_eq!(sents.len(), 2);
        assert_eq!(sents[0].0, "Good.");
        assert_eq!(sents[1].0, "Bad.");
    }

    #[test]
    fn word_units_split_punctuation() {
        let tok = tokenize("great movie!", &Tokenizer::hashed(256, false)).unwrap();
        let words = tok.units(Granularity::Word);
        let names: Vec<_> = words.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["great", "movie", "!"]);
    }

    #[test]
    fn word_ids_non_decreasing() {
        let tok = tokenize("one two three four", &Tokenizer::hashed(256, true)).unwrap();
        let mut prev = None;
        for i in tok.non_special_indices() {
            let w = tok.word_ids[i];
            if let (Some(p), Some(c)) = (prev, w) {
                assert!(c >= p);
            }
            prev = w;
        }
    }
}

//! Whitespace-and-punctuation tokenizer over a corpus-built vocabulary.
//!
//! Text is split into maximal alphanumeric runs and single punctuation or
//! symbol characters. A single space preceding a word or symbol is folded
//! into that token (`" 10"` and `"10"` are distinct tokens); any other
//! whitespace character is a token of its own. Concatenating the tokens of
//! a text reproduces it exactly, so decoding is lossless for in-vocabulary
//! text.

use std::collections::HashMap;

use iclp_substrate::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const RECON: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "[RECON]"];

/// Split text into token strings. Lossless: `split(t).concat() == t`.
pub fn split(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut prefix = String::new();
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            let start = i;
            while i < chars.len() && chars[i].is_whitespace() {
                i += 1;
            }
            let run = &chars[start..i];
            let attach = i < chars.len() && *run.last().unwrap() == ' ';
            let loose = if attach { &run[..run.len() - 1] } else { run };
            out.extend(loose.iter().map(|c| c.to_string()));
            if attach {
                prefix.push(' ');
            }
            continue;
        }
        let mut tok = std::mem::take(&mut prefix);
        if c.is_alphanumeric() {
            while i < chars.len() && chars[i].is_alphanumeric() {
                tok.push(chars[i]);
                i += 1;
            }
        } else {
            tok.push(c);
            i += 1;
        }
        out.push(tok);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary of every token in `texts`, sorted, after the reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        for t in texts {
            seen.extend(split(t));
        }
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(seen.into_iter().filter(|t| !SPECIAL_TOKENS.contains(&t.as_str())));
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Explicit token table; ids 0..5 must be the reserved specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Vocab("ids 0-4 must be <pad> <unk> <bos> <eos> [RECON]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    fn reindex(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Lossless for ids produced by [`encode`](Self::encode) on in-vocabulary
    /// text; reserved tokens render as their names.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.token(id).unwrap_or("<unk>")).collect()
    }

    /// True when every token of `text` is in the vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        split(text).iter().all(|t| self.index.contains_key(t))
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.tokens).expect("tokens serialize").as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("tokens serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        let mut t = Self::from_tokens(tokens)?;
        t.reindex();
        Ok(t)
    }
}

/// A token table that can render ids, implemented by the base tokenizer
/// and by the latent-extended vocabulary.
pub trait Vocabulary {
    fn size(&self) -> usize;
    fn base(&self) -> &Tokenizer;
    fn render(&self, id: u32) -> String;
    fn vocab_hash(&self) -> String;
    /// True for ids outside the base table.
    fn is_latent(&self, id: u32) -> bool {
        id as usize >= self.base().len() && (id as usize) < self.size()
    }
    fn render_all(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.render(id)).collect()
    }
}

impl Vocabulary for Tokenizer {
    fn size(&self) -> usize {
        self.len()
    }

    fn base(&self) -> &Tokenizer {
        self
    }

    fn render(&self, id: u32) -> String {
        self.token(id).unwrap_or("<unk>").to_string()
    }

    fn vocab_hash(&self) -> String {
        self.hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_words_numbers_and_symbols() {
        assert_eq!(
            split("Step 1: double: 2 × 5 = 10"),
            vec!["Step", " 1", ":", " double", ":", " 2", " ×", " 5", " =", " 10"]
        );
        assert_eq!(split("P-17"), vec!["P", "-", "17"]);
        assert_eq!(split("a  b\n"), vec!["a", " ", " b", "\n"]);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let t = Tokenizer::build(["hello world"]);
        assert_eq!(t.id("<pad>"), Some(PAD));
        assert_eq!(t.id("[RECON]"), Some(RECON));
        assert_eq!(t.id("<eos>"), Some(EOS));
        assert_eq!(t.encode("hello nope"), vec![t.id("hello").unwrap(), UNK]);
    }

    #[test]
    fn json_round_trip_keeps_hash() {
        let t = Tokenizer::build(["Add three to the current value."]);
        let back = Tokenizer::from_json(&t.to_json()).unwrap();
        assert_eq!(back.hash(), t.hash());
        assert_eq!(back.encode("Add three"), t.encode("Add three"));
    }

    proptest! {
        #[test]
        fn split_is_lossless(text in "[a-z0-9 ,.:`\\-×\n]{0,40}") {
            prop_assert_eq!(split(&text).concat(), text.clone());
            let t = Tokenizer::build([text.as_str()]);
            prop_assert_eq!(t.decode(&t.encode(&text)), text);
        }
    }
}

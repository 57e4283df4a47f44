//! Greedy longest-match tokenizer over a flat string vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Token id type; ids are dense indices into the vocabulary.
pub type TokenId = u32;

/// Id 0 is reserved for the beginning-of-sequence token.
pub const BOS_ID: TokenId = 0;

/// Ordered vocabulary with id lookup. Index equals id.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    lookup: HashMap<String, TokenId>,
    max_token_bytes: usize,
}

impl Tokenizer {
    pub fn new(vocab: Vec<String>) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Invalid("empty vocabulary".into()));
        }
        let mut lookup = HashMap::with_capacity(vocab.len());
        let mut max_token_bytes = 0;
        for (i, s) in vocab.iter().enumerate() {
            if lookup.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::Invalid(format!("duplicate vocab string {s:?}")));
            }
            max_token_bytes = max_token_bytes.max(s.len());
        }
        Ok(Self {
            vocab,
            lookup,
            max_token_bytes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_str(&self, id: TokenId) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, s: &str) -> Option<TokenId> {
        self.lookup.get(s).copied()
    }

    /// Greedy longest-match segmentation, left to right.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = Vec::new();
        let bytes = text.as_bytes();
        let mut i = 0usize;
        while i < bytes.len() {
            let limit = (bytes.len() - i).min(self.max_token_bytes);
            let mut matched = None;
            for len in (1..=limit).rev() {
                if !text.is_char_boundary(i + len) {
                    continue;
                }
                if let Some(&id) = self.lookup.get(&text[i..i + len]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    i += len;
                }
                None => {
                    let ch = text[i..].chars().next().unwrap_or('\u{fffd}');
                    return Err(Error::Tokenize(ch));
                }
            }
        }
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize): concatenate token strings.
    pub fn detokenize(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let s = self
                .token_str(id)
                .ok_or_else(|| Error::Invalid(format!("token id {id} out of vocab")))?;
            out.push_str(s);
        }
        Ok(out)
    }

    /// Load from a JSON array of token strings; index = id.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let vocab: Vec<String> = serde_json::from_str(&raw)?;
        Self::new(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_string_pretty(&self.vocab)?;
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }
}

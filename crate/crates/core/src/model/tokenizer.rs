use std::collections::HashMap;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Word-level tokenizer over a closed vocabulary.
///
/// Text is lowercased and split into runs of alphanumerics (plus `'` and
/// `-`); every other non-space character is its own token. Words outside the
/// vocabulary map to `<unk>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk: u32,
}

impl Tokenizer {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!("vocabulary entry {i} is not a single word: {t:?}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        let unk = *index
            .get(UNK)
            .ok_or_else(|| Error::InvalidInput("vocabulary lacks <unk>".into()))?;
        Ok(Tokenizer { tokens, index, unk })
    }

    pub fn from_vocab_text(text: &str) -> Result<Self> {
        Tokenizer::new(text.lines().map(str::to_string).collect())
    }

    pub fn to_vocab_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Splits text into token strings without mapping them to ids.
    pub fn split(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                if !ch.is_whitespace() {
                    out.push(ch.to_string());
                }
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = Tokenizer::split(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(self.unk))
            .collect();
        if ids.is_empty() {
            return Err(Error::InvalidInput("text produced no tokens".into()));
        }
        Ok(ids)
    }

    pub fn decode_tokens(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_string())
            .collect()
    }

    /// Joins tokens with spaces, attaching punctuation to the previous word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut s = String::new();
        for tok in self.decode_tokens(ids) {
            let punct = tok.chars().count() == 1 && tok.chars().all(|c| c.is_ascii_punctuation());
            if !s.is_empty() && !punct {
                s.push(' ');
            }
            s.push_str(&tok);
        }
        s
    }
}

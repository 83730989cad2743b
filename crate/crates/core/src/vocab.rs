//! Vocabulary loading and greedy longest-match subword tokenization.
//!
//! Vocab files are UTF-8, one token per line, line order defining ids.
//! Lines beginning `#!` are header directives; `#! uncased` lowercases
//! input before matching. Word-internal pieces carry the `##` prefix.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const CONTINUATION: &str = "##";

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    uncased: bool,
    pub pad_id: usize,
    pub unk_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>, uncased: bool) -> Result<Self> {
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::VocabFormat(format!("duplicate token {t:?}")));
            }
        }
        let reserved = |name: &str| -> Result<usize> {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::VocabFormat(format!("missing reserved token {name}")))
        };
        Ok(Vocabulary {
            pad_id: reserved(PAD)?,
            unk_id: reserved(UNK)?,
            bos_id: reserved(BOS)?,
            eos_id: reserved(EOS)?,
            tokens,
            ids,
            uncased,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut uncased = false;
        let mut tokens = Vec::new();
        for line in text.lines() {
            if let Some(directive) = line.strip_prefix("#!") {
                if directive.trim() == "uncased" {
                    uncased = true;
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            tokens.push(line.to_string());
        }
        Self::from_tokens(tokens, uncased)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        if self.uncased {
            out.push_str("#! uncased\n");
        }
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn uncased(&self) -> bool {
        self.uncased
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::TokenId {
                id,
                size: self.tokens.len(),
            })
    }

    /// Greedy longest-match wordpiece segmentation of one word.
    /// Returns None when the word cannot be fully segmented.
    fn segment_word(&self, word: &str) -> Option<Vec<usize>> {
        let mut pieces = Vec::new();
        let chars: Vec<char> = word.chars().collect();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let slice: String = chars[start..end].iter().collect();
                let candidate = if start == 0 {
                    slice
                } else {
                    format!("{CONTINUATION}{slice}")
                };
                if let Some(id) = self.id_of(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => return None,
            }
        }
        Some(pieces)
    }

    /// Whitespace pre-split, then greedy longest-match within each word.
    /// A word that cannot be segmented becomes a single UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let text = if self.uncased {
            text.to_lowercase()
        } else {
            text.to_string()
        };
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.segment_word(word) {
                Some(mut pieces) => out.append(&mut pieces),
                None => out.push(self.unk_id),
            }
        }
        out
    }

    /// Inverse of `tokenize` for losslessly segmentable text. PAD/BOS/EOS
    /// ids are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let token = self.token(id)?;
            if id == self.pad_id || id == self.bos_id || id == self.eos_id {
                continue;
            }
            if let Some(rest) = token.strip_prefix(CONTINUATION) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(token);
            }
        }
        Ok(out)
    }
}

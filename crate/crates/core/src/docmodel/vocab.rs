use std::collections::HashMap;
use std::path::Path;

use super::Document;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lookup form of a token: lowercased, every ASCII digit mapped to `0`, so
/// numbers share a vocabulary entry per surface shape (`12.50` → `00.00`).
pub fn normalize_token(text: &str) -> String {
    text.chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_ascii_digit() { '0' } else { c })
        .collect()
}

/// Token ↔ id map; id 0 is padding, id 1 unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl Vocabulary {
    /// Counts normalized tokens over `docs` and assigns ids to those seen at
    /// least `min_freq` times, most frequent first, ties lexicographic.
    pub fn build(docs: &[Document], min_freq: usize) -> Result<Self> {
        if min_freq == 0 {
            return Err(Error::config("backbone.min_freq", "must be at least 1"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for tok in docs.iter().flat_map(Document::tokens) {
            *counts.entry(normalize_token(&tok.text)).or_default() += 1;
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab = Self::default();
        for (tok, _) in entries {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, tok: String) {
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    /// Id of a raw token (normalized before lookup), or [`UNK_ID`].
    pub fn id(&self, raw: &str) -> usize {
        self.index
            .get(&normalize_token(raw))
            .copied()
            .unwrap_or(UNK_ID)
    }

    /// All entries in id order, reserved ones first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Inverse of [`Vocabulary::tokens`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Parse {
                path: "vocabulary".into(),
                message: "must start with <pad> and <unk>".into(),
            });
        }
        let mut vocab = Self::default();
        for tok in tokens.into_iter().skip(2) {
            if vocab.index.contains_key(&tok) {
                return Err(Error::Parse {
                    path: "vocabulary".into(),
                    message: format!("duplicate token `{tok}`"),
                });
            }
            vocab.push(tok);
        }
        Ok(vocab)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn ids(&self, doc: &Document) -> Vec<usize> {
        doc.tokens().map(|t| self.id(&t.text)).collect()
    }

    /// `token<TAB>id` lines, reserved entries included.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                path: "vocabulary".into(),
                message: format!("line {}: expected `token<TAB>id`", line_no + 1),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                path: "vocabulary".into(),
                message: format!("line {}: bad id `{id}`", line_no + 1),
            })?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        let mut vocab = Self::default();
        for (expected, (id, tok)) in pairs.into_iter().enumerate() {
            if id != expected {
                return Err(Error::Parse {
                    path: "vocabulary".into(),
                    message: format!("ids must be dense from 0, found {id} at position {expected}"),
                });
            }
            if id >= 2 {
                vocab.push(tok);
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

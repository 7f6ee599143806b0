use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::ProductRecord;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, split on whitespace, strip every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Tokens of a `key:value` attribute list: the key's tokens, then the value's.
pub fn attribute_tokens(attributes: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for a in attributes {
        match a.split_once(':') {
            Some((k, v)) => {
                out.extend(tokenize(k));
                out.extend(tokenize(v));
            }
            None => out.extend(tokenize(a)),
        }
    }
    out
}

/// Token ↔ id map with `pad`, `bos`, `eos`, `unk` at ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from token counts: frequency descending, then lexicographic.
    pub fn from_counts(counts: &BTreeMap<String, usize>) -> Self {
        let mut entries: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(t, _)| !RESERVED.contains(&t.as_str()))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
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

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// `bos` + title tokens + `eos`.
    pub fn encode_title(&self, title: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(&tokenize(title)));
        ids.push(EOS);
        ids
    }

    pub fn encode_attributes(&self, attributes: &[String]) -> Vec<usize> {
        self.encode(&attribute_tokens(attributes))
    }

    /// Surface tokens of `ids`, dropping pad/bos/eos and stopping at the first eos.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).to_string())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_tokens(ids).join(" ")
    }

    /// Re-creates the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// Every attribute and title token of `records`, plus the reserved ids.
pub fn build_vocab(records: &[ProductRecord]) -> Vocabulary {
    let mut counts = BTreeMap::new();
    for r in records {
        for t in attribute_tokens(&r.attributes)
            .into_iter()
            .chain(tokenize(&r.title))
        {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    Vocabulary::from_counts(&counts)
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::io::SamplePair;
use crate::metrics::{render_tokens, tokenize_for_metrics};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word-level vocabulary over metric tokens, specials first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Words ordered by descending frequency, then lexicographically.
    pub fn build(pairs: &[SamplePair]) -> Self {
        Self::from_sentences(pairs.iter().flat_map(|p| p.references.iter().map(String::as_str)))
    }

    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for s in sentences {
            for t in tokenize_for_metrics(s) {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.tokens.len() - SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Token ids of `text` without BOS/EOS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize_for_metrics(text).iter().map(|t| self.id(t)).collect()
    }

    /// Token ids of `text` terminated by EOS.
    pub fn encode_sentence(&self, text: &str) -> Vec<u32> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        ids
    }

    /// Renders ids up to the first EOS, skipping other specials.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| !Self::is_special(id) || id == UNK)
            .map(|&id| self.token(id))
            .collect();
        render_tokens(&words)
    }
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::CorpusError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id bijection with fixed reserved ids 0..=3 for PAD, BOS, EOS
/// and UNK.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_reserved(id: u32) -> bool {
        id < RESERVED.len() as u32
    }

    /// First id that refers to an actual corpus token.
    pub fn first_regular_id() -> u32 {
        RESERVED.len() as u32
    }
}

/// Lowercase and split on whitespace; a trailing period on the final token is
/// stripped (other punctuation is left to the caller's data).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = text.to_lowercase().split_whitespace().map(String::from).collect();
    if let Some(last) = tokens.last_mut() {
        if last.ends_with('.') && last.len() > 1 {
            last.pop();
        } else if last == "." {
            tokens.pop();
        }
    }
    tokens
}

/// Build a vocabulary from caption token streams, keeping tokens that occur
/// at least `min_count` times. Ids are assigned by descending frequency,
/// lexicographic within a tie, after the reserved block.
pub fn build_vocab<'a, I>(token_streams: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for stream in token_streams {
        for token in stream {
            *counts.entry(token.as_str()).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(token, count)| count >= min_count && !RESERVED.contains(&token))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

/// BOS + token ids + EOS; unknown tokens map to UNK.
pub fn encode(vocab: &Vocabulary, tokens: &[String]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(BOS);
    for token in tokens {
        ids.push(vocab.id(token).unwrap_or(UNK));
    }
    ids.push(EOS);
    ids
}

/// Inverse of `encode` for known ids: strips PAD, BOS and EOS, joins with
/// spaces. Out-of-range ids are rejected.
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Result<String, CorpusError> {
    let mut words = Vec::new();
    for &id in ids {
        match vocab.token(id) {
            None => return Err(CorpusError::UnknownTokenId { id }),
            Some(_) if id == PAD || id == BOS || id == EOS => {}
            Some(token) => words.push(token),
        }
    }
    Ok(words.join(" "))
}

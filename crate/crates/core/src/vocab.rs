//! Word-level vocabulary over the prompt template grammar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    words: Vec<String>,
}

impl PromptVocab {
    /// Build from words in order of first appearance; id 0 is the pad token.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = vec![PAD.to_string()];
        for w in words {
            let w = w.to_lowercase();
            if !out.contains(&w) {
                out.push(w);
            }
        }
        Self { words: out }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// Whitespace-tokenize, look up, and right-pad to `max_len`.
    pub fn encode(&self, prompt: &str, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(max_len);
        for tok in prompt.split_whitespace() {
            let tok = tok.to_lowercase();
            let id = self.id(&tok).filter(|&i| i != 0).ok_or_else(|| Error::OutOfVocabulary(tok.clone()))?;
            ids.push(id);
        }
        if ids.len() > max_len {
            return Err(Error::config(format!(
                "prompt has {} tokens, text length is {max_len}",
                ids.len()
            )));
        }
        ids.resize(max_len, self.pad_id());
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_pads_and_names_unknown_tokens() {
        let v = PromptVocab::from_words(["left", "hand", "Left"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.encode("left hand", 4).unwrap(), vec![1, 2, 0, 0]);
        assert_eq!(v.encode("", 2).unwrap(), vec![0, 0]);
        match v.encode("left foot", 4) {
            Err(Error::OutOfVocabulary(t)) => assert_eq!(t, "foot"),
            other => panic!("{other:?}"),
        }
        assert!(v.encode("left hand left", 2).is_err());
    }
}

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerMode {
    /// One token per UTF-8 byte plus a beginning-of-sequence marker.
    Byte,
    /// Whitespace-separated words from a fixed vocabulary.
    Word,
}

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tokenizer {
    mode: TokenizerMode,
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.vocab == other.vocab
    }
}

impl Tokenizer {
    pub fn byte_level() -> Self {
        let mut vocab: Vec<String> = (0..=255u8).map(|b| format!("<0x{b:02X}>")).collect();
        vocab.push(BOS.to_string());
        Self::from_parts(TokenizerMode::Byte, vocab)
    }

    /// Word vocabulary from the words of `texts`, sorted for determinism.
    pub fn word_level<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts.into_iter().flat_map(|t| t.split_whitespace()).collect();
        let mut vocab = vec![BOS.to_string(), UNK.to_string()];
        vocab.extend(words.into_iter().filter(|w| *w != BOS && *w != UNK).map(str::to_string));
        Self::from_parts(TokenizerMode::Word, vocab)
    }

    fn from_parts(mode: TokenizerMode, vocab: Vec<String>) -> Self {
        let mut t = Self {
            mode,
            vocab,
            index: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    /// Restore the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn mode(&self) -> TokenizerMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bos(&self) -> u32 {
        match self.mode {
            TokenizerMode::Byte => 256,
            TokenizerMode::Word => 0,
        }
    }

    pub fn unk(&self) -> Option<u32> {
        match self.mode {
            TokenizerMode::Byte => None,
            TokenizerMode::Word => Some(1),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        match self.mode {
            TokenizerMode::Byte => text.bytes().map(u32::from).collect(),
            TokenizerMode::Word => text
                .split_whitespace()
                .map(|w| self.index.get(w).copied().unwrap_or(1))
                .collect(),
        }
    }

    /// Look up a single word; errors if it is not one vocabulary entry.
    pub fn word_id(&self, word: &str) -> Result<u32> {
        match self.mode {
            TokenizerMode::Word => self
                .index
                .get(word)
                .copied()
                .ok_or_else(|| Error::invalid(format!("word {word:?} is not in the vocabulary"))),
            TokenizerMode::Byte => {
                let b = word.as_bytes();
                if b.len() == 1 {
                    Ok(b[0] as u32)
                } else {
                    Err(Error::invalid(format!("{word:?} is not a single byte token")))
                }
            }
        }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        match self.mode {
            TokenizerMode::Byte => {
                let bytes: Vec<u8> = ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            TokenizerMode::Word => ids
                .iter()
                .map(|&i| self.token_str(i))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    /// Display string of one token.
    pub fn token_str(&self, id: u32) -> &str {
        self.vocab.get(id as usize).map(String::as_str).unwrap_or(UNK)
    }

    /// Display string of one token, decoding printable bytes in byte mode.
    pub fn display_token(&self, id: u32) -> String {
        match self.mode {
            TokenizerMode::Byte if id < 256 => {
                let b = id as u8;
                if b.is_ascii_graphic() || b == b' ' {
                    (b as char).to_string()
                } else {
                    self.vocab[id as usize].clone()
                }
            }
            _ => self.token_str(id).to_string(),
        }
    }
}

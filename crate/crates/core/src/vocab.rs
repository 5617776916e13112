//! Whitespace tokenizer with a fixed vocabulary and reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::CoreError;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

/// Bijective token ↔ id mapping, fixed after construction. Ids 0–3 are
/// reserved for PAD/BOS/EOS/UNK.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from regular words; the four reserved markers
    /// are prepended automatically.
    pub fn new(words: Vec<String>) -> Result<Self, CoreError> {
        let mut all = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        all.extend(words);
        let mut index = HashMap::with_capacity(all.len());
        for (i, w) in all.iter().enumerate() {
            if w.chars().any(char::is_whitespace) {
                return Err(CoreError::Config(format!("vocabulary word contains whitespace: {w:?}")));
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(CoreError::Config(format!("duplicate vocabulary word: {w:?}")));
            }
        }
        Ok(Vocabulary { words: all, index })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Lowercased whitespace tokenization; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.index.get(&w.to_lowercase()).copied().unwrap_or(UNK))
            .collect()
    }

    /// Inverse of `tokenize` on in-vocabulary text.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        fs::write(path, serde_json::to_string_pretty(&self.words)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| CoreError::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        let words: Vec<String> = serde_json::from_str(&raw)?;
        if words.len() < 4
            || words[PAD as usize] != PAD_TOKEN
            || words[BOS as usize] != BOS_TOKEN
            || words[EOS as usize] != EOS_TOKEN
            || words[UNK as usize] != UNK_TOKEN
        {
            return Err(CoreError::Data(format!(
                "vocabulary file {} lacks the reserved markers in slots 0-3",
                path.display()
            )));
        }
        Vocabulary::new(words[4..].to_vec())
    }
}

//! Word-level vocabulary with reserved id ranges for sentinel, slot,
//! and shared-prompt tokens.
//!
//! Id layout, in order: pad, unk, eos, the sorted base words, then the
//! sentinel range, the slot-token range, and the shared-prompt range.
//! The ranges never overlap, so a token id unambiguously identifies
//! its kind.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
const NUM_SPECIALS: usize = 3;

/// Lowercase and segment text into word and punctuation tokens.
/// Alphanumeric runs form words; every other non-whitespace character
/// stands alone.
pub fn segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            for lc in c.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Canonical text form after segmentation: tokens joined by single
/// spaces. `segment` and `normalize` agree: segment(normalize(s)) ==
/// segment(s).
pub fn normalize(text: &str) -> String {
    segment(text).join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "VocabularyData")]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    word_ids: BTreeMap<String, usize>,
    num_sentinels: usize,
    num_slot_tokens: usize,
    num_prompt_tokens: usize,
}

/// Serialized form; the word index is derived, not stored.
#[derive(Deserialize)]
struct VocabularyData {
    words: Vec<String>,
    num_sentinels: usize,
    num_slot_tokens: usize,
    num_prompt_tokens: usize,
}

impl From<VocabularyData> for Vocabulary {
    fn from(d: VocabularyData) -> Self {
        let mut v = Vocabulary {
            words: d.words,
            word_ids: BTreeMap::new(),
            num_sentinels: d.num_sentinels,
            num_slot_tokens: d.num_slot_tokens,
            num_prompt_tokens: d.num_prompt_tokens,
        };
        v.rebuild_index();
        v
    }
}

impl Vocabulary {
    /// Build from raw text plus the reserved-range sizes. Words are
    /// collected from the segmented texts and sorted, so construction
    /// is independent of text order.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        num_sentinels: usize,
        num_slot_tokens: usize,
        num_prompt_tokens: usize,
    ) -> Self {
        let mut set = BTreeSet::new();
        // Always present: the query delimiter and the inactive-slot
        // rendering.
        set.insert(":".to_string());
        set.insert("none".to_string());
        for t in texts {
            for tok in segment(t) {
                set.insert(tok);
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let mut v = Vocabulary {
            words,
            word_ids: BTreeMap::new(),
            num_sentinels,
            num_slot_tokens,
            num_prompt_tokens,
        };
        v.rebuild_index();
        v
    }

    /// Restore the derived word index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), NUM_SPECIALS + i))
            .collect();
    }

    pub fn base_len(&self) -> usize {
        NUM_SPECIALS + self.words.len()
    }

    pub fn sentinel_range(&self) -> std::ops::Range<usize> {
        let start = self.base_len();
        start..start + self.num_sentinels
    }

    pub fn slot_token_range(&self) -> std::ops::Range<usize> {
        let start = self.sentinel_range().end;
        start..start + self.num_slot_tokens
    }

    pub fn prompt_token_range(&self) -> std::ops::Range<usize> {
        let start = self.slot_token_range().end;
        start..start + self.num_prompt_tokens
    }

    /// Total vocabulary size including all reserved ranges.
    pub fn len(&self) -> usize {
        self.prompt_token_range().end
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    /// Id of sentinel j (0-based; rendered as `<m{j+1}>`).
    pub fn sentinel_id(&self, j: usize) -> Result<usize> {
        if j >= self.num_sentinels {
            return Err(Error::Argument(format!(
                "sentinel {j} out of range {}",
                self.num_sentinels
            )));
        }
        Ok(self.sentinel_range().start + j)
    }

    /// 0-based sentinel position for an id, if it is a sentinel.
    pub fn sentinel_of(&self, id: usize) -> Option<usize> {
        let r = self.sentinel_range();
        r.contains(&id).then(|| id - r.start)
    }

    pub fn slot_token_id(&self, global_slot: usize) -> Result<usize> {
        if global_slot >= self.num_slot_tokens {
            return Err(Error::Argument(format!(
                "slot token {global_slot} out of range {}",
                self.num_slot_tokens
            )));
        }
        Ok(self.slot_token_range().start + global_slot)
    }

    pub fn prompt_token_id(&self, i: usize) -> Result<usize> {
        if i >= self.num_prompt_tokens {
            return Err(Error::Argument(format!(
                "prompt token {i} out of range {}",
                self.num_prompt_tokens
            )));
        }
        Ok(self.prompt_token_range().start + i)
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.word_ids.get(word).copied()
    }

    /// Encode text; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        segment(text)
            .into_iter()
            .map(|tok| self.word_id(&tok).unwrap_or(UNK))
            .collect()
    }

    /// Human-readable form of any token id.
    pub fn token_str(&self, id: usize) -> String {
        match id {
            PAD => "<pad>".to_string(),
            UNK => "<unk>".to_string(),
            EOS => "</s>".to_string(),
            _ => {
                if let Some(w) = self.words.get(id.wrapping_sub(NUM_SPECIALS)).filter(|_| {
                    id < self.base_len()
                }) {
                    w.clone()
                } else if let Some(j) = self.sentinel_of(id) {
                    format!("<m{}>", j + 1)
                } else if self.slot_token_range().contains(&id) {
                    format!("<slot{}>", id - self.slot_token_range().start)
                } else if self.prompt_token_range().contains(&id) {
                    format!("<p{}>", id - self.prompt_token_range().start)
                } else {
                    format!("<bad{id}>")
                }
            }
        }
    }

    /// Join word tokens with spaces, skipping pad/eos; reserved tokens
    /// render via their markers.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut parts = Vec::new();
        for &id in ids {
            if id == PAD || id == EOS {
                continue;
            }
            parts.push(self.token_str(id));
        }
        parts.join(" ")
    }
}

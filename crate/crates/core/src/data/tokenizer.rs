//! Word-level tokenizer over the closed caption vocabulary.
//!
//! Sequences are `[BOT, words…, EOT, PAD…]`, padded to a fixed context
//! length. The vocabulary is the exact word set the caption templates can
//! emit, so any well-formed caption tokenizes losslessly.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{CLASS_NAMES, COLOR_NAMES};

pub const PAD_ID: usize = 0;
pub const BOT_ID: usize = 1;
pub const EOT_ID: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<bot>", "<eot>"];

// Function words and attribute names used by the caption templates.
const FUNCTION_WORDS: [&str; 7] = ["a", "the", "on", "is", "of", "photo", "background"];
const SIZE_WORDS: [&str; 3] = ["small", "medium", "large"];
const BACKGROUND_WORDS: [&str; 3] = ["dark", "gray", "light"];

#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
    context_length: usize,
}

impl Tokenizer {
    /// Builds the closed-vocabulary tokenizer. `context_length` must leave
    /// room for at least the begin/end markers.
    pub fn closed(context_length: usize) -> Result<Tokenizer> {
        if context_length < 3 {
            return Err(Error::Config(format!(
                "context length {context_length} too short; need at least 3"
            )));
        }
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(FUNCTION_WORDS.iter().map(|s| s.to_string()));
        words.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
        words.extend(COLOR_NAMES.iter().map(|s| s.to_string()));
        words.extend(SIZE_WORDS.iter().map(|s| s.to_string()));
        words.extend(BACKGROUND_WORDS.iter().map(|s| s.to_string()));
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate vocabulary word {w:?}")));
            }
        }
        debug_assert_eq!(index["<pad>"], PAD_ID);
        debug_assert_eq!(index["<bot>"], BOT_ID);
        debug_assert_eq!(index["<eot>"], EOT_ID);
        Ok(Tokenizer { words, index, context_length })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn context_length(&self) -> usize {
        self.context_length
    }

    /// Splits on whitespace and maps each word to its id. The result always
    /// has exactly `context_length` entries.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(self.context_length);
        ids.push(BOT_ID);
        for word in text.split_whitespace() {
            let &id = self
                .index
                .get(word)
                .ok_or_else(|| Error::Input(format!("word {word:?} not in vocabulary")))?;
            ids.push(id);
        }
        ids.push(EOT_ID);
        if ids.len() > self.context_length {
            return Err(Error::Input(format!(
                "caption needs {} tokens but context length is {}",
                ids.len(),
                self.context_length
            )));
        }
        ids.resize(self.context_length, PAD_ID);
        Ok(ids)
    }

    /// Inverse of `tokenize` for well-formed sequences.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        if ids.first() != Some(&BOT_ID) {
            return Err(Error::Input(
                "token sequence must start with the begin marker".to_string(),
            ));
        }
        let eot = ids
            .iter()
            .position(|&id| id == EOT_ID)
            .ok_or_else(|| Error::Input("token sequence has no end marker".to_string()))?;
        let mut out = Vec::with_capacity(eot.saturating_sub(1));
        for &id in &ids[1..eot] {
            let word = self
                .words
                .get(id)
                .ok_or_else(|| Error::Input(format!("token id {id} out of range")))?;
            if id < SPECIALS.len() {
                return Err(Error::Input(format!(
                    "unexpected marker token {word:?} inside caption"
                )));
            }
            out.push(word.as_str());
        }
        Ok(out.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_small_and_stable() {
        let tok = Tokenizer::closed(16).unwrap();
        assert_eq!(tok.vocab_size(), 32);
        assert!(tok.vocab_size() <= 200);
        // ids are stable across constructions
        let other = Tokenizer::closed(8).unwrap();
        assert_eq!(tok.tokenize("a red circle").unwrap()[..5], other.tokenize("a red circle").unwrap()[..5]);
    }

    #[test]
    fn round_trips_every_template_caption() {
        use crate::data::{caption_for, LatentSpec, NUM_CAPTION_TEMPLATES};
        use crate::rng::RngState;
        let tok = Tokenizer::closed(16).unwrap();
        let mut rng = RngState::new(3);
        for _ in 0..200 {
            let latent = LatentSpec::sample(&mut rng);
            for t in 0..NUM_CAPTION_TEMPLATES {
                let text = caption_for(&latent, t);
                let ids = tok.tokenize(&text).unwrap();
                assert_eq!(ids.len(), 16);
                assert_eq!(tok.detokenize(&ids).unwrap(), text);
            }
        }
    }

    #[test]
    fn empty_caption_is_markers_and_padding() {
        let tok = Tokenizer::closed(6).unwrap();
        let ids = tok.tokenize("").unwrap();
        assert_eq!(ids, vec![BOT_ID, EOT_ID, PAD_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(tok.detokenize(&ids).unwrap(), "");
    }

    #[test]
    fn unknown_word_is_rejected() {
        let tok = Tokenizer::closed(16).unwrap();
        assert!(matches!(tok.tokenize("a purple frog"), Err(Error::Input(_))));
    }

    #[test]
    fn overlong_caption_is_rejected() {
        let tok = Tokenizer::closed(4).unwrap();
        assert!(tok.tokenize("a red circle").is_err());
        assert!(tok.tokenize("a red").is_ok());
    }

    #[test]
    fn malformed_sequences_are_rejected() {
        let tok = Tokenizer::closed(8).unwrap();
        assert!(tok.detokenize(&[EOT_ID, BOT_ID]).is_err());
        assert!(tok.detokenize(&[BOT_ID, 5, 6]).is_err()); // no end marker
        assert!(tok.detokenize(&[BOT_ID, 9999, EOT_ID]).is_err());
        assert!(tok.detokenize(&[BOT_ID, PAD_ID, EOT_ID]).is_err());
    }

    #[test]
    fn short_context_is_rejected() {
        assert!(matches!(Tokenizer::closed(2), Err(Error::Config(_))));
    }
}

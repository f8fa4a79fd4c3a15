//! Invertible text↔token maps for the stand-in language model.
//!
//! Both variants reserve four control ids after the text symbols:
//! beginning-of-sequence, end-of-turn, padding and unknown.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tokenizer {
    /// One id per byte (0..=255), controls at 256..=259.
    Bytes,
    /// One id per listed character; anything else maps to the unknown id.
    Charset { chars: Vec<char> },
}

pub const CONTROL_COUNT: usize = 4;

impl Tokenizer {
    pub fn charset(chars: &str) -> Result<Self> {
        let list: Vec<char> = chars.chars().collect();
        let mut sorted = list.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(
            sorted.len() == list.len() && !list.is_empty(),
            Error::Invalid("charset must be nonempty without repeats".into())
        );
        Ok(Tokenizer::Charset { chars: list })
    }

    fn text_symbols(&self) -> usize {
        match self {
            Tokenizer::Bytes => 256,
            Tokenizer::Charset { chars } => chars.len(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.text_symbols() + CONTROL_COUNT
    }

    pub fn bos(&self) -> usize {
        self.text_symbols()
    }

    pub fn eot(&self) -> usize {
        self.text_symbols() + 1
    }

    pub fn pad(&self) -> usize {
        self.text_symbols() + 2
    }

    pub fn unk(&self) -> usize {
        self.text_symbols() + 3
    }

    pub fn is_control(&self, id: usize) -> bool {
        id >= self.text_symbols()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self {
            Tokenizer::Bytes => text.bytes().map(usize::from).collect(),
            Tokenizer::Charset { chars } => text
                .chars()
                .map(|c| chars.iter().position(|x| *x == c).unwrap_or(self.unk()))
                .collect(),
        }
    }

    /// Text for the non-control ids in `ids`. Byte sequences that are not
    /// UTF-8 are replaced lossily.
    pub fn decode(&self, ids: &[usize]) -> String {
        match self {
            Tokenizer::Bytes => {
                let bytes: Vec<u8> = ids.iter().filter(|i| **i < 256).map(|i| *i as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Tokenizer::Charset { chars } => ids
                .iter()
                .filter_map(|i| chars.get(*i).copied())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::conversation::InstructionTemplates;

    #[test]
    fn bytes_round_trip_templates() {
        let t = Tokenizer::Bytes;
        assert_eq!(t.vocab_size(), 260);
        for s in InstructionTemplates::default().all() {
            assert_eq!(&t.decode(&t.encode(s)), s);
        }
        assert_eq!(t.decode(&t.encode("naïve ☃")), "naïve ☃");
        assert_eq!(t.decode(&[t.bos(), 104, 105, t.eot()]), "hi");
    }

    #[test]
    fn charset_vocab_and_unknowns() {
        let t = Tokenizer::charset("abcdefghijklmnopqrstuvwxyz0123456789 .,:;!?'\"<>[]()-_/\\+=*$#").unwrap();
        assert_eq!(t.vocab_size(), 64);
        assert_eq!(t.decode(&t.encode("a cat.")), "a cat.");
        assert_eq!(t.encode("A"), vec![t.unk()]);
        assert!(Tokenizer::charset("aa").is_err());
    }
}

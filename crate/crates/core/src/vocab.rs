//! Character-level toy vocabulary.
//!
//! Needle digits, template words, and filler share one small symbol set so
//! recall scoring never depends on tokenizer merges: one character is one
//! token, and a token-level substring match is exactly a string match.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// End-of-document marker; also separates documents inside a corpus stream.
pub const EOS: u32 = 0;

const CHARSET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,:?'-\n";

#[derive(Debug, Clone)]
pub struct Vocab {
    chars: Vec<char>,
    lookup: [u32; 128],
}

impl Default for Vocab {
    fn default() -> Self {
        Self::toy()
    }
}

impl Vocab {
    /// The fixed toy charset: lowercase letters, digits, and light punctuation.
    pub fn toy() -> Self {
        let chars: Vec<char> = CHARSET.chars().collect();
        let mut lookup = [u32::MAX; 128];
        for (i, &c) in chars.iter().enumerate() {
            lookup[c as usize] = (i + 1) as u32; // id 0 is EOS
        }
        Self { chars, lookup }
    }

    /// Vocabulary size including the EOS token.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn encode_char(&self, c: char) -> Result<u32> {
        let idx = c as usize;
        if idx < 128 && self.lookup[idx] != u32::MAX {
            Ok(self.lookup[idx])
        } else {
            Err(invalid(alloc::format!("character {c:?} not in vocabulary")))
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.encode_char(c)).collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| {
                if t == EOS {
                    '\u{241F}' // visible separator for EOS when debugging
                } else {
                    self.chars
                        .get(t as usize - 1)
                        .copied()
                        .unwrap_or('\u{FFFD}')
                }
            })
            .collect()
    }

    pub fn contains(&self, c: char) -> bool {
        (c as usize) < 128 && self.lookup[c as usize] != u32::MAX
    }
}

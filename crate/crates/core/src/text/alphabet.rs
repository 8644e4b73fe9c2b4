use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercase letters, space, period and digits.
pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz .0123456789";

/// A closed, ordered character set. A character's position is its token id
/// under per-character tokenization.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().collect();
        if chars.is_empty() {
            return Err(Error::config("alphabet must not be empty"));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            // Tab and newline delimit the merge-table file format.
            if c == '\t' || c == '\n' || c == '\r' {
                return Err(Error::config(format!(
                    "alphabet may not contain control character {c:?}"
                )));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::config(format!("duplicate alphabet character {c:?}")));
            }
        }
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_at(&self, i: usize) -> Option<char> {
        self.chars.get(i).copied()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Maps every character of `text` to its index, failing on the first
    /// character outside the alphabet.
    pub fn indices(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| {
                self.index_of(ch)
                    .ok_or(Error::OutOfAlphabet { ch, offset })
            })
            .collect()
    }

    pub fn check(&self, text: &str) -> Result<()> {
        self.indices(text).map(|_| ())
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHABET).expect("default alphabet is valid")
    }
}

impl fmt::Debug for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Alphabet({:?})", String::from(self.clone()))
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Alphabet::new(&s)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.chars.into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_alphabet_layout() {
        let a = Alphabet::default();
        assert_eq!(a.len(), 38);
        assert_eq!(a.index_of('a'), Some(0));
        assert_eq!(a.index_of(' '), Some(26));
        assert_eq!(a.index_of('9'), Some(37));
    }

    #[test]
    fn rejects_duplicates_and_control_chars() {
        assert!(Alphabet::new("aba").is_err());
        assert!(Alphabet::new("a\tb").is_err());
        assert!(Alphabet::new("").is_err());
    }

    #[test]
    fn out_of_alphabet_names_offset() {
        let a = Alphabet::new("ab").unwrap();
        match a.indices("abxa") {
            Err(Error::OutOfAlphabet { ch, offset }) => {
                assert_eq!(ch, 'x');
                assert_eq!(offset, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

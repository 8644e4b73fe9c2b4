use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{Error, Result};

/// Half-open character range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::domain(format!("span start {start} exceeds end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// Length of the intersection with `other`; zero when they only touch.
    pub fn overlap(&self, other: &CharSpan) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    #[serde(flatten)]
    pub span: CharSpan,
}

/// A string together with a segmentation of it into spanned tokens.
///
/// Spans are non-empty, sorted, contiguous and cover the whole text, so every
/// character belongs to exactly one token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTokenized")]
pub struct TokenizedText {
    text: String,
    tokens: Vec<Token>,
}

#[derive(Deserialize)]
struct RawTokenized {
    text: String,
    tokens: Vec<Token>,
}

impl TryFrom<RawTokenized> for TokenizedText {
    type Error = Error;

    fn try_from(raw: RawTokenized) -> Result<Self> {
        TokenizedText::new(raw.text, raw.tokens)
    }
}

impl TokenizedText {
    pub fn new(text: impl Into<String>, tokens: Vec<Token>) -> Result<Self> {
        let text = text.into();
        let len = text.chars().count();
        let mut cursor = 0;
        for (k, tok) in tokens.iter().enumerate() {
            if tok.span.start != cursor {
                return Err(Error::domain(format!(
                    "token {k} starts at {} but previous token ended at {cursor}",
                    tok.span.start
                )));
            }
            if tok.span.is_empty() {
                return Err(Error::domain(format!("token {k} has an empty span")));
            }
            cursor = tok.span.end;
        }
        if cursor != len {
            return Err(Error::domain(format!(
                "tokens cover {cursor} characters of a {len}-character text"
            )));
        }
        Ok(Self { text, tokens })
    }

    /// Builds a segmentation from consecutive token lengths (in characters).
    /// Token ids are taken from `ids`.
    pub fn from_lengths(text: impl Into<String>, ids: &[TokenId], lengths: &[usize]) -> Result<Self> {
        if ids.len() != lengths.len() {
            return Err(Error::domain("ids and lengths differ in count"));
        }
        let mut start = 0;
        let tokens = ids
            .iter()
            .zip(lengths)
            .map(|(&id, &n)| {
                let span = CharSpan { start, end: start + n };
                start += n;
                Token { id, span }
            })
            .collect();
        Self::new(text, tokens)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn spans(&self) -> impl Iterator<Item = CharSpan> + '_ {
        self.tokens.iter().map(|t| t.span)
    }

    pub fn char_len(&self) -> usize {
        self.tokens.last().map_or(0, |t| t.span.end)
    }

    /// The substring covered by token `k`.
    pub fn token_text(&self, k: usize) -> &str {
        let span = self.tokens[k].span;
        let mut bounds = self
            .text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(self.text.len()));
        let start = bounds.nth(span.start).unwrap_or(self.text.len());
        let end = if span.is_empty() {
            start
        } else {
            bounds.nth(span.len() - 1).unwrap_or(self.text.len())
        };
        &self.text[start..end]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_is_zero_at_shared_boundary() {
        let a = CharSpan { start: 0, end: 2 };
        let b = CharSpan { start: 2, end: 5 };
        assert_eq!(a.overlap(&b), 0);
        assert_eq!(b.overlap(&CharSpan { start: 1, end: 4 }), 2);
    }

    #[test]
    fn span_start_after_end_is_rejected() {
        assert!(CharSpan::new(3, 2).is_err());
        assert_eq!(CharSpan::new(2, 2).unwrap().len(), 0);
    }

    #[test]
    fn rejects_gaps_and_short_cover() {
        let t = |s, e| Token { id: 0, span: CharSpan { start: s, end: e } };
        assert!(TokenizedText::new("abc", vec![t(0, 1), t(2, 3)]).is_err());
        assert!(TokenizedText::new("abc", vec![t(0, 2)]).is_err());
        assert!(TokenizedText::new("abc", vec![t(0, 0), t(0, 3)]).is_err());
        assert!(TokenizedText::new("abc", vec![t(0, 2), t(2, 3)]).is_ok());
    }

    #[test]
    fn token_text_uses_char_offsets() {
        let tt = TokenizedText::from_lengths("héllo", &[0, 1], &[2, 3]).unwrap();
        assert_eq!(tt.token_text(0), "hé");
        assert_eq!(tt.token_text(1), "llo");
        assert_eq!(tt.char_len(), 5);
    }

    #[test]
    fn json_shape() {
        let tt = TokenizedText::from_lengths("ab", &[0, 1], &[1, 1]).unwrap();
        let json = serde_json::to_string(&tt).unwrap();
        assert_eq!(
            json,
            r#"{"text":"ab","tokens":[{"id":0,"start":0,"end":1},{"id":1,"start":1,"end":2}]}"#
        );
        let back: TokenizedText = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tt);
        let bad = r#"{"text":"ab","tokens":[{"id":0,"start":0,"end":1}]}"#;
        assert!(serde_json::from_str::<TokenizedText>(bad).is_err());
    }
}

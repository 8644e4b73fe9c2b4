//! Character-overlap alignment of verifier tokens onto generator positions.
//!
//! Both tokenizations must be of the same string. Verifier token `s` spreads
//! its log-probability over the generator tokens it overlaps, with weight
//! `|span(s) ∩ span(t)| / |span(s)|`. The weights of each verifier token sum to
//! one, so the aligned per-position values always add up to the verifier's
//! total log-likelihood, whatever the two segmentations are.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::text::TokenizedText;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentEntry {
    /// Generator position.
    pub t: usize,
    /// Verifier position.
    pub s: usize,
    /// Fraction of verifier token `s` that lies inside generator token `t`.
    pub w: f64,
}

/// Sparse overlap weights between a generator and a verifier tokenization.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentMap {
    #[serde(skip)]
    gen_len: usize,
    #[serde(skip)]
    ver_len: usize,
    entries: Vec<AlignmentEntry>,
    gen_mask: Vec<bool>,
}

/// Per-generator-position verifier log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedLogprobs {
    /// Aligned values before masking; sums to the verifier total.
    pub pre_mask: Vec<f64>,
    /// Aligned values with masked positions set to zero.
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl AlignmentMap {
    pub fn gen_len(&self) -> usize {
        self.gen_len
    }

    pub fn ver_len(&self) -> usize {
        self.ver_len
    }

    /// Entries sorted by `(t, s)`.
    pub fn entries(&self) -> &[AlignmentEntry] {
        &self.entries
    }

    /// `true` where the generator position carries a reward.
    pub fn gen_mask(&self) -> &[bool] {
        &self.gen_mask
    }

    pub fn weight(&self, t: usize, s: usize) -> f64 {
        self.entries
            .iter()
            .find(|e| e.t == t && e.s == s)
            .map_or(0.0, |e| e.w)
    }

    /// Redistributes verifier per-token log-probabilities onto generator
    /// positions.
    pub fn aligned_logprobs(&self, ver_logprobs: &[f64]) -> Result<AlignedLogprobs> {
        if ver_logprobs.len() != self.ver_len {
            return Err(Error::domain(format!(
                "expected {} verifier log-probabilities, got {}",
                self.ver_len,
                ver_logprobs.len()
            )));
        }
        let mut pre_mask = vec![0.0; self.gen_len];
        for e in &self.entries {
            pre_mask[e.t] += e.w * ver_logprobs[e.s];
        }
        let values = pre_mask
            .iter()
            .zip(&self.gen_mask)
            .map(|(&v, &ok)| if ok { v } else { 0.0 })
            .collect();
        Ok(AlignedLogprobs {
            pre_mask,
            values,
            valid: self.gen_mask.clone(),
        })
    }
}

/// Computes the overlap weights between two segmentations of the same text.
///
/// A generator position is masked when its text is only spaces or when no
/// verifier token overlaps it.
pub fn align(gen: &TokenizedText, ver: &TokenizedText) -> Result<AlignmentMap> {
    if gen.text() != ver.text() {
        let offset = gen
            .text()
            .chars()
            .zip(ver.text().chars())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| gen.char_len().min(ver.char_len()));
        return Err(Error::TextMismatch { offset });
    }

    let gen_spans: Vec<_> = gen.spans().collect();
    let ver_spans: Vec<_> = ver.spans().collect();
    let mut entries = Vec::new();
    let mut covered = vec![false; gen_spans.len()];

    // Both span lists are sorted and contiguous: sweep them together.
    let mut s0 = 0;
    for (t, gs) in gen_spans.iter().enumerate() {
        while s0 < ver_spans.len() && ver_spans[s0].end <= gs.start {
            s0 += 1;
        }
        let mut s = s0;
        while s < ver_spans.len() && ver_spans[s].start < gs.end {
            let vs = &ver_spans[s];
            let overlap = gs.overlap(vs);
            if overlap > 0 {
                entries.push(AlignmentEntry {
                    t,
                    s,
                    w: overlap as f64 / vs.len() as f64,
                });
                covered[t] = true;
            }
            s += 1;
        }
    }

    let gen_mask = (0..gen_spans.len())
        .map(|t| covered[t] && !gen.token_text(t).chars().all(|c| c == ' '))
        .collect();

    Ok(AlignmentMap {
        gen_len: gen_spans.len(),
        ver_len: ver_spans.len(),
        entries,
        gen_mask,
    })
}

/// Writes `x` with 17 significant digits.
pub fn format_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

impl AlignmentMap {
    /// JSON with weights written to 17 significant digits, so golden files are
    /// bit-stable.
    pub fn to_json(&self) -> String {
        let entries: Vec<String> = self
            .entries
            .iter()
            .map(|e| format!(r#"{{"t":{},"s":{},"w":{}}}"#, e.t, e.s, format_sig17(e.w)))
            .collect();
        let mask: Vec<&str> = self
            .gen_mask
            .iter()
            .map(|&m| if m { "true" } else { "false" })
            .collect();
        format!(
            r#"{{"entries":[{}],"gen_mask":[{}]}}"#,
            entries.join(","),
            mask.join(",")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;
    use crate::text::{char_tokenize, Alphabet};

    fn worked_example() -> (TokenizedText, TokenizedText) {
        let gen = testutil::tokenizer(testutil::generator_merges())
            .encode("unhappiness")
            .unwrap();
        let ver = testutil::tokenizer(testutil::verifier_merges())
            .encode("unhappiness")
            .unwrap();
        (gen, ver)
    }

    #[test]
    fn worked_example_weights() {
        let (gen, ver) = worked_example();
        assert_eq!(gen.len(), 2);
        assert_eq!(ver.len(), 2);
        let map = align(&gen, &ver).unwrap();
        let got: Vec<(usize, usize, f64)> = map.entries().iter().map(|e| (e.t, e.s, e.w)).collect();
        assert_eq!(got, vec![(0, 0, 2.0 / 7.0), (1, 0, 5.0 / 7.0), (1, 1, 1.0)]);
        assert_eq!(map.gen_mask(), &[true, true]);
    }

    #[test]
    fn worked_example_values() {
        let (gen, ver) = worked_example();
        let out = align(&gen, &ver).unwrap().aligned_logprobs(&[-7.0, -4.0]).unwrap();
        assert!((out.values[0] - -2.0).abs() < 1e-15);
        assert!((out.values[1] - -9.0).abs() < 1e-15);
        assert!((out.values.iter().sum::<f64>() - -11.0).abs() < 1e-12);
    }

    #[test]
    fn identical_tokenizations_give_identity() {
        let tt = char_tokenize("abc d", &Alphabet::default()).unwrap();
        let map = align(&tt, &tt).unwrap();
        for (k, e) in map.entries().iter().enumerate() {
            assert_eq!((e.t, e.s, e.w), (k, k, 1.0));
        }
        let v = [-0.1, -0.2, -0.3, -0.4, -0.5];
        let out = map.aligned_logprobs(&v).unwrap();
        assert_eq!(out.pre_mask, v);
        assert_eq!(map.gen_mask(), &[true, true, true, false, true]);
        assert_eq!(out.values[3], 0.0);
    }

    #[test]
    fn zero_logprobs_stay_zero() {
        let (gen, ver) = worked_example();
        let out = align(&gen, &ver).unwrap().aligned_logprobs(&[0.0, 0.0]).unwrap();
        assert_eq!(out.values, vec![0.0, 0.0]);
    }

    #[test]
    fn text_mismatch_reports_offset() {
        let a = Alphabet::default();
        let g = char_tokenize("abcd", &a).unwrap();
        let v = char_tokenize("abxd", &a).unwrap();
        assert!(matches!(align(&g, &v), Err(Error::TextMismatch { offset: 2 })));
        let short = char_tokenize("ab", &a).unwrap();
        assert!(matches!(align(&g, &short), Err(Error::TextMismatch { offset: 2 })));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let (gen, ver) = worked_example();
        assert!(align(&gen, &ver).unwrap().aligned_logprobs(&[-1.0]).is_err());
    }

    #[test]
    fn whitespace_verifier_token_mass_follows_generator_mask() {
        // verifier keeps " b" together; generator splits off the space.
        let gen = TokenizedText::from_lengths("a b", &[0, 0, 0], &[1, 1, 1]).unwrap();
        let ver = TokenizedText::from_lengths("a b", &[0, 0], &[1, 2]).unwrap();
        let out = align(&gen, &ver).unwrap().aligned_logprobs(&[-1.0, -4.0]).unwrap();
        assert_eq!(out.pre_mask, vec![-1.0, -2.0, -2.0]);
        assert_eq!(out.values, vec![-1.0, 0.0, -2.0]);
        assert_eq!(out.valid, vec![true, false, true]);
    }

    #[test]
    fn json_layout() {
        let (gen, ver) = worked_example();
        let json = align(&gen, &ver).unwrap().to_json();
        assert_eq!(
            json,
            r#"{"entries":[{"t":0,"s":0,"w":2.8571428571428570e-1},{"t":1,"s":0,"w":7.1428571428571430e-1},{"t":1,"s":1,"w":1.0000000000000000e0}],"gen_mask":[true,true]}"#
        );
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["entries"][0]["w"].as_f64().unwrap(), 2.0 / 7.0);
    }
}

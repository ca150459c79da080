//! Answer vocabulary and output grammar.
//!
//! A policy emits token sequences over a 13-symbol vocabulary: the ten
//! decimal digits, an opening and closing answer delimiter, and an
//! end-of-sequence marker. A sequence is format-compliant when it is
//! exactly `ANS_OPEN digit+ ANS_CLOSE EOS`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of distinct tokens.
pub const VOCAB_SIZE: usize = 13;

/// Longest digit run honoured by [`extract_count`]; longer runs are truncated.
pub const MAX_EXTRACT_DIGITS: usize = 6;

/// A vocabulary symbol, stored as its integer id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(u8);

impl Token {
    pub const ANS_OPEN: Token = Token(10);
    pub const ANS_CLOSE: Token = Token(11);
    pub const EOS: Token = Token(12);

    /// Token for decimal digit `d`. Panics if `d > 9`.
    pub fn digit(d: u8) -> Token {
        assert!(d <= 9, "digit out of range: {d}");
        Token(d)
    }

    pub fn from_id(id: usize) -> Option<Token> {
        (id < VOCAB_SIZE).then_some(Token(id as u8))
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    /// Value of a digit token, `None` for delimiters and EOS.
    pub fn digit_value(self) -> Option<u8> {
        (self.0 <= 9).then_some(self.0)
    }

    pub fn is_digit(self) -> bool {
        self.0 <= 9
    }

    /// All tokens in id order.
    pub fn all() -> impl Iterator<Item = Token> {
        (0..VOCAB_SIZE as u8).map(Token)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Token::ANS_OPEN => f.write_str("<ans>"),
            Token::ANS_CLOSE => f.write_str("</ans>"),
            Token::EOS => f.write_str("<eos>"),
            Token(d) => write!(f, "{d}"),
        }
    }
}

/// Renders a token sequence as text, e.g. `<ans>42</ans><eos>`.
pub fn render(seq: &[Token]) -> String {
    seq.iter().map(Token::to_string).collect()
}

/// The answer grammar together with the generation length limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatGrammar {
    pub max_len: usize,
}

impl Default for FormatGrammar {
    fn default() -> Self {
        FormatGrammar { max_len: 8 }
    }
}

impl FormatGrammar {
    /// Whether the compliant encoding of `count` fits in `max_len` tokens.
    pub fn fits(&self, count: u64) -> bool {
        encode_count(count).len() <= self.max_len
    }
}

/// True iff `seq` is exactly `ANS_OPEN digit+ ANS_CLOSE EOS`.
pub fn is_compliant(seq: &[Token]) -> bool {
    let n = seq.len();
    if n < 4 || seq[0] != Token::ANS_OPEN || seq[n - 2] != Token::ANS_CLOSE || seq[n - 1] != Token::EOS {
        return false;
    }
    seq[1..n - 2].iter().all(|t| t.is_digit())
}

/// Predicted count carried by `seq`.
///
/// Compliant sequences yield their digit run. Anything else falls back to
/// the first maximal digit run found anywhere in the sequence. Runs longer
/// than [`MAX_EXTRACT_DIGITS`] are truncated to their leading digits.
pub fn extract_count(seq: &[Token]) -> Option<u64> {
    let start = seq.iter().position(|t| t.is_digit())?;
    let value = seq[start..]
        .iter()
        .map_while(|t| t.digit_value())
        .take(MAX_EXTRACT_DIGITS)
        .fold(0u64, |acc, d| acc * 10 + u64::from(d));
    Some(value)
}

/// Compliant encoding of a non-negative integer.
pub fn encode_count(count: u64) -> Vec<Token> {
    let mut seq = vec![Token::ANS_OPEN];
    seq.extend(count.to_string().bytes().map(|b| Token::digit(b - b'0')));
    seq.push(Token::ANS_CLOSE);
    seq.push(Token::EOS);
    seq
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const O: Token = Token::ANS_OPEN;
    const C: Token = Token::ANS_CLOSE;
    const E: Token = Token::EOS;

    fn d(x: u8) -> Token {
        Token::digit(x)
    }

    // Independent oracle: scan with explicit state instead of iterator adaptors.
    fn scan_first_run(seq: &[Token]) -> Option<u64> {
        let mut value: Option<u64> = None;
        let mut taken = 0;
        for t in seq {
            match (t.digit_value(), value) {
                (Some(x), None) => {
                    value = Some(u64::from(x));
                    taken = 1;
                }
                (Some(x), Some(v)) => {
                    if taken < MAX_EXTRACT_DIGITS {
                        value = Some(v * 10 + u64::from(x));
                        taken += 1;
                    }
                }
                (None, Some(_)) => break,
                (None, None) => {}
            }
        }
        value
    }

    #[test]
    fn vocabulary_ids_are_bijective() {
        let ids: Vec<usize> = Token::all().map(Token::id).collect();
        assert_eq!(ids, (0..13).collect::<Vec<_>>());
        for v in 0..10u8 {
            assert_eq!(Token::digit(v).digit_value(), Some(v));
            assert_eq!(Token::from_id(v as usize), Some(d(v)));
        }
        assert_eq!(Token::from_id(13), None);
    }

    #[test]
    fn compliance_examples() {
        assert!(is_compliant(&[O, d(4), d(2), C, E]));
        assert!(!is_compliant(&[d(4), d(2), E]));
        assert!(!is_compliant(&[O, C, E]));
        assert!(!is_compliant(&[O, d(4), C]));
        assert!(!is_compliant(&[d(1), O, d(4), C, E]));
        assert!(!is_compliant(&[O, d(4), C, E, E]));
        assert!(!is_compliant(&[O, d(4), O, C, E]));
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_count(&[O, d(0), d(0), d(7), C, E]), Some(7));
        assert_eq!(extract_count(&[d(5), d(1), C]), Some(51));
        assert_eq!(scan_first_run(&[d(5), d(1), C]), Some(51));
        assert_eq!(extract_count(&[O, C, E]), None);
        assert_eq!(extract_count(&[C, d(3), O, d(9), E]), Some(3));
    }

    #[test]
    fn long_runs_are_capped() {
        let seq: Vec<Token> = [1, 2, 3, 4, 5, 6, 7, 8].into_iter().map(d).collect();
        assert_eq!(extract_count(&seq), Some(123_456));
    }

    #[test]
    fn roundtrip_full_range() {
        for n in 0..=100_000u64 {
            let seq = encode_count(n);
            assert!(is_compliant(&seq));
            assert_eq!(extract_count(&seq), Some(n));
        }
    }

    #[test]
    fn default_grammar_fits_five_digits() {
        let g = FormatGrammar::default();
        assert!(g.fits(99_999));
        assert!(!g.fits(100_000));
    }

    #[test]
    fn render_is_readable() {
        assert_eq!(render(&encode_count(42)), "<ans>42</ans><eos>");
    }

    fn token_seq() -> impl Strategy<Value = Vec<Token>> {
        prop::collection::vec((0..13u8).prop_map(|i| Token::from_id(i as usize).unwrap()), 0..12)
    }

    proptest! {
        #[test]
        fn extraction_matches_scan_oracle(seq in token_seq()) {
            prop_assert_eq!(extract_count(&seq), scan_first_run(&seq));
        }

        #[test]
        fn compliant_implies_extractable(seq in token_seq()) {
            if is_compliant(&seq) {
                prop_assert!(extract_count(&seq).is_some());
            }
        }

        #[test]
        fn single_mutations_are_detected_or_predictable(
            n in 0u64..100_000,
            pos in 0usize..10,
            tok in 0usize..13,
            insert in any::<bool>(),
        ) {
            let base = encode_count(n);
            let mut seq = base.clone();
            if insert {
                let at = pos % (seq.len() + 1);
                seq.insert(at, Token::from_id(tok).unwrap());
            } else {
                seq.remove(pos % seq.len());
            }
            if is_compliant(&seq) {
                // Only digit edits inside the run survive; the value is the new run.
                let digits: String = seq[1..seq.len() - 2].iter().map(Token::to_string).collect();
                let expected: u64 = digits[..digits.len().min(MAX_EXTRACT_DIGITS)].parse().unwrap();
                prop_assert_eq!(extract_count(&seq), Some(expected));
                prop_assert_ne!(seq.len(), base.len());
            }
        }
    }
}

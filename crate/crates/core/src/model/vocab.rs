//! Fixed 48-token vocabulary and greedy longest-match tokenizer.

use crate::datagen::LEXICON;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const PLUS: usize = 4;
pub const MINUS: usize = 5;
pub const EQUALS: usize = 6;
pub const DOT: usize = 7;
pub const DIGIT_ZERO: usize = 8;
pub const FIRST_WORD: usize = 18;
pub const VOCAB_SIZE: usize = FIRST_WORD + LEXICON.len();

const SPECIALS: [&str; 8] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "+", "-", "=", "."];
const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

/// Surface form of a token id.
pub fn surface(id: usize) -> Option<&'static str> {
    match id {
        0..=7 => Some(SPECIALS[id]),
        8..=17 => Some(DIGITS[id - DIGIT_ZERO]),
        _ => LEXICON.get(id - FIRST_WORD).copied(),
    }
}

pub fn digit_id(d: u8) -> usize {
    debug_assert!(d < 10);
    DIGIT_ZERO + d as usize
}

/// The digit a token stands for, if it is a digit token.
pub fn digit_value(id: usize) -> Option<u8> {
    (DIGIT_ZERO..DIGIT_ZERO + 10)
        .contains(&id)
        .then(|| (id - DIGIT_ZERO) as u8)
}

/// Token ids a rendered arithmetic result may contain: the sign and digits.
pub fn numeric_ids() -> Vec<usize> {
    let mut ids = vec![PLUS, MINUS];
    ids.extend(DIGIT_ZERO..DIGIT_ZERO + 10);
    ids
}

/// `[CLS]` followed by the greedy longest-match tokenization of `text`.
/// Whitespace separates tokens and is otherwise ignored.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut ids = vec![CLS];
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c.is_whitespace() {
            rest = &rest[c.len_utf8()..];
            continue;
        }
        let best = (0..VOCAB_SIZE)
            .filter_map(|id| surface(id).map(|s| (id, s)))
            .filter(|(_, s)| rest.starts_with(s))
            .max_by_key(|(id, s)| (s.len(), std::cmp::Reverse(*id)));
        match best {
            Some((id, s)) => {
                ids.push(id);
                rest = &rest[s.len()..];
            }
            None => return Err(Error::Tokenize(c)),
        }
    }
    Ok(ids)
}

/// Space-joined surface forms, for display.
pub fn detokenize(ids: &[usize]) -> String {
    ids.iter()
        .map(|&id| surface(id).unwrap_or("[?]"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_layout() {
        assert_eq!(VOCAB_SIZE, 48);
        assert_eq!(surface(0), Some("[PAD]"));
        assert_eq!(surface(7), Some("."));
        assert_eq!(surface(8), Some("0"));
        assert_eq!(surface(17), Some("9"));
        assert_eq!(surface(18), Some(LEXICON[0]));
        assert_eq!(surface(47), Some(LEXICON[29]));
        assert_eq!(surface(48), None);
    }

    #[test]
    fn surfaces_are_unique() {
        let mut all: Vec<_> = (0..VOCAB_SIZE).map(|i| surface(i).unwrap()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), VOCAB_SIZE);
    }

    #[test]
    fn arithmetic_text() {
        assert_eq!(tokenize("12+7=").unwrap(), vec![2, 9, 10, 4, 15, 6]);
    }

    #[test]
    fn empty_text_is_cls() {
        assert_eq!(tokenize("").unwrap(), vec![CLS]);
    }

    #[test]
    fn unknown_symbol_is_named() {
        match tokenize("12^7") {
            Err(Error::Tokenize(c)) => assert_eq!(c, '^'),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn words_and_specials() {
        let text = format!("{} {} [MASK] [SEP]", LEXICON[0], LEXICON[5]);
        assert_eq!(tokenize(&text).unwrap(), vec![CLS, FIRST_WORD, FIRST_WORD + 5, MASK, SEP]);
    }

    #[test]
    fn every_surface_round_trips() {
        for id in 0..VOCAB_SIZE {
            assert_eq!(tokenize(surface(id).unwrap()).unwrap(), vec![CLS, id], "id {id}");
        }
    }
}

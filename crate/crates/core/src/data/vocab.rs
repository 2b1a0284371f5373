//! Word-level tokenizer over the caption grammar.

use crate::backbone::{NULL_TOKEN, PAD_TOKEN};
use crate::error::{Error, Result};

use super::scene::{Color, ShapeKind};

pub const WORDS: [&str; 17] = [
    "<pad>", "<null>", "one", "two", "three", "four", "five", "red", "green", "blue", "yellow",
    "circle", "circles", "square", "squares", "triangle", "triangles",
];

pub const VOCAB_SIZE: usize = WORDS.len();

const COUNT_WORDS: [&str; 5] = ["one", "two", "three", "four", "five"];

pub fn count_word(n: usize) -> Option<&'static str> {
    COUNT_WORDS.get(n.checked_sub(1)?).copied()
}

pub fn word_count(word: &str) -> Option<usize> {
    COUNT_WORDS.iter().position(|w| *w == word).map(|i| i + 1)
}

/// `"<count> <color> <shape>"`, singular noun for a count of one.
pub fn caption(count: usize, color: Color, shape: ShapeKind) -> Result<String> {
    let c = count_word(count)
        .ok_or_else(|| Error::Argument(format!("count {count} has no caption word")))?;
    let noun = if count == 1 { shape.singular() } else { shape.plural() };
    Ok(format!("{c} {} {noun}", color.name()))
}

/// Token ids padded to `len`. The empty caption becomes all `NULL_TOKEN`.
pub fn tokenize(caption: &str, len: usize) -> Result<Vec<u32>> {
    let words: Vec<&str> = caption.split_whitespace().collect();
    if words.is_empty() {
        return Ok(vec![NULL_TOKEN; len]);
    }
    if words.len() > len {
        return Err(Error::Data(format!(
            "caption has {} words but the text length is {len}",
            words.len()
        )));
    }
    let mut ids = Vec::with_capacity(len);
    for w in words {
        let id = WORDS[2..]
            .iter()
            .position(|v| *v == w)
            .ok_or_else(|| Error::Data(format!("unknown word {w:?}")))?;
        ids.push(id as u32 + 2);
    }
    ids.resize(len, PAD_TOKEN);
    Ok(ids)
}

/// Inverse of [`tokenize`]; padding is dropped and an all-null row decodes
/// to the empty string.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut out = Vec::new();
    for &id in ids {
        match id {
            PAD_TOKEN | NULL_TOKEN => {}
            _ => out.push(
                *WORDS
                    .get(id as usize)
                    .ok_or_else(|| Error::Data(format!("token id {id} out of range")))?,
            ),
        }
    }
    Ok(out.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip() {
        let ids = tokenize("two red circles", 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(detokenize(&ids).unwrap(), "two red circles");
    }

    #[test]
    fn empty_caption_is_all_null() {
        assert_eq!(tokenize("", 5).unwrap(), vec![NULL_TOKEN; 5]);
        assert_eq!(tokenize("   ", 2).unwrap(), vec![NULL_TOKEN; 2]);
        assert_eq!(detokenize(&[NULL_TOKEN; 3]).unwrap(), "");
    }

    #[test]
    fn unknown_word_is_named() {
        let err = tokenize("two purple circles", 8).unwrap_err();
        assert!(err.to_string().contains("purple"), "{err}");
    }

    #[test]
    fn too_long_is_an_error() {
        assert!(tokenize("one red circle", 2).is_err());
    }

    #[test]
    fn reserved_ids_lead_the_vocabulary() {
        assert_eq!(WORDS[PAD_TOKEN as usize], "<pad>");
        assert_eq!(WORDS[NULL_TOKEN as usize], "<null>");
    }

    proptest! {
        #[test]
        fn grammar_round_trips_and_pads_last(
            count in 1usize..=5,
            color in 0usize..4,
            shape in 0usize..3,
            len in 3usize..12,
        ) {
            let text = caption(count, Color::ALL[color], ShapeKind::ALL[shape]).unwrap();
            let ids = tokenize(&text, len).unwrap();
            prop_assert_eq!(detokenize(&ids).unwrap(), text);
            let first_pad = ids.iter().position(|&i| i == PAD_TOKEN).unwrap_or(len);
            prop_assert!(ids[first_pad..].iter().all(|&i| i == PAD_TOKEN));
            prop_assert!(ids[..first_pad].iter().all(|&i| i != NULL_TOKEN));
        }
    }
}

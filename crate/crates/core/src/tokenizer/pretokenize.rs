//! Whitespace pre-tokenization and special-token splitting.

use std::ops::Range;

/// One pre-token: a byte range of the source plus whether its first byte is
/// a space attached to the following word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreToken {
    pub range: Range<usize>,
    pub attached_space: bool,
}

pub(crate) fn is_ws(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Splits `text` into pre-tokens.
///
/// A pre-token is a maximal run of non-whitespace bytes, carrying the single
/// space byte that precedes it when there is one. Any other whitespace forms
/// its own pre-token. Concatenating the ranges reproduces `text`.
pub fn pretokenize(text: &[u8]) -> Vec<PreToken> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        if is_ws(text[i]) {
            let start = i;
            while i < text.len() && is_ws(text[i]) {
                i += 1;
            }
            // the last space of a run glues onto the next word
            let glue = i < text.len() && text[i - 1] == b' ';
            let ws_end = if glue { i - 1 } else { i };
            if ws_end > start {
                out.push(PreToken {
                    range: start..ws_end,
                    attached_space: false,
                });
            }
            if glue {
                let word_start = i - 1;
                while i < text.len() && !is_ws(text[i]) {
                    i += 1;
                }
                out.push(PreToken {
                    range: word_start..i,
                    attached_space: true,
                });
            }
        } else {
            let start = i;
            while i < text.len() && !is_ws(text[i]) {
                i += 1;
            }
            out.push(PreToken {
                range: start..i,
                attached_space: false,
            });
        }
    }
    out
}

/// A piece of input: either ordinary text or a registered special token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Segment {
    Text(Range<usize>),
    Special { range: Range<usize>, index: usize },
}

/// Splits on special-token literals, leftmost first, longest on ties.
pub(crate) fn split_specials(text: &[u8], specials: &[Vec<u8>]) -> Vec<Segment> {
    let mut out = Vec::new();
    if specials.is_empty() {
        if !text.is_empty() {
            out.push(Segment::Text(0..text.len()));
        }
        return out;
    }
    let mut plain_start = 0;
    let mut i = 0;
    while i < text.len() {
        let hit = specials
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty() && text[i..].starts_with(s))
            .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)));
        match hit {
            Some((index, s)) => {
                if plain_start < i {
                    out.push(Segment::Text(plain_start..i));
                }
                out.push(Segment::Special {
                    range: i..i + s.len(),
                    index,
                });
                i += s.len();
                plain_start = i;
            }
            None => i += 1,
        }
    }
    if plain_start < text.len() {
        out.push(Segment::Text(plain_start..text.len()));
    }
    out
}

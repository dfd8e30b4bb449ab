//! Byte-level BPE.
//!
//! The base alphabet is the 256 byte values, so every input is encodable
//! without an unknown token and `decode(encode(t)) == t` for all UTF-8 text.
//! Text is first split into pre-tokens (see [`pretokenize`]); merges never
//! cross pre-token boundaries.

mod io;
mod train;

use std::collections::HashMap;

use thiserror::Error;

pub use io::{load_vocab, save_vocab};
pub use train::train_bbpe;

#[derive(Debug, Error, PartialEq)]
pub enum BpeError {
    #[error("training error: {0}")]
    Training(String),
    #[error("invalid token id {0}")]
    InvalidId(u32),
    #[error("{file} line {line}: {message}")]
    Format {
        file: &'static str,
        line: usize,
        message: String,
    },
}

/// Ids of the reserved tokens. They occupy the lowest ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: u32,
    pub pad: u32,
    pub eos: u32,
    pub unk: u32,
    pub mask: u32,
}

pub const SPECIAL_NAMES: [&str; 5] = ["<s>", "<pad>", "</s>", "<unk>", "<mask>"];
pub const NUM_SPECIAL: u32 = SPECIAL_NAMES.len() as u32;
/// Id of the first single-byte token.
pub const BYTE_OFFSET: u32 = NUM_SPECIAL;
/// Smallest usable vocabulary: specials plus all bytes.
pub const MIN_VOCAB: usize = NUM_SPECIAL as usize + 256;

pub const SPECIALS: SpecialTokens = SpecialTokens {
    bos: 0,
    pad: 1,
    eos: 2,
    unk: 3,
    mask: 4,
};

/// One learned merge: `left + right -> result`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Merge {
    pub left: u32,
    pub right: u32,
    pub result: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ByteVocab {
    tokens: Vec<Vec<u8>>,
    merges: Vec<Merge>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl ByteVocab {
    /// Specials followed by the 256 single bytes, no merges.
    pub fn bytes_only() -> Self {
        let mut tokens: Vec<Vec<u8>> = SPECIAL_NAMES.iter().map(|s| s.as_bytes().to_vec()).collect();
        tokens.extend((0..=255u8).map(|b| vec![b]));
        ByteVocab {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
        }
    }

    pub(crate) fn from_parts(tokens: Vec<Vec<u8>>, merges: Vec<Merge>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, m)| ((m.left, m.right), (rank, m.result)))
            .collect();
        ByteVocab { tokens, merges, ranks }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialTokens {
        SPECIALS
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIAL
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn tokens(&self) -> &[Vec<u8>] {
        &self.tokens
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn byte_id(byte: u8) -> u32 {
        BYTE_OFFSET + u32::from(byte)
    }

    /// Encodes text into token ids with byte offsets into `text`.
    pub fn encode(&self, text: &str) -> Encoding {
        let mut enc = Encoding::default();
        for (start, end) in pretokenize(text) {
            self.encode_piece(&text.as_bytes()[start..end], start, &mut enc);
        }
        enc
    }

    fn encode_piece(&self, bytes: &[u8], base: usize, out: &mut Encoding) {
        let mut symbols: Vec<(u32, usize, usize)> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| (Self::byte_id(b), base + i, base + i + 1))
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].0, w[1].0)))
                .min_by_key(|(rank, _)| *rank)
                .copied();
            let Some((rank, result)) = best else { break };
            let pair = (self.merges[rank].left, self.merges[rank].right);
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && (symbols[i].0, symbols[i + 1].0) == pair {
                    merged.push((result, symbols[i].1, symbols[i + 1].2));
                    i += 2;
                } else {
                    merged.push(symbols[i]);
                    i += 1;
                }
            }
            symbols = merged;
        }
        for (id, s, e) in symbols {
            out.ids.push(id);
            out.offsets.push((s, e));
        }
    }

    /// Concatenates token bytes (special tokens contribute nothing) and
    /// decodes lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, BpeError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, BpeError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or(BpeError::InvalidId(id))?;
            if !self.is_special(id) {
                bytes.extend_from_slice(tok);
            }
        }
        Ok(bytes)
    }
}

/// Token ids and the byte range each covers in the source text.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Splits text into pre-tokens, returned as byte ranges covering the input.
///
/// A pre-token is a maximal run of non-whitespace characters, with a single
/// preceding ASCII space attached when present. Remaining whitespace forms
/// its own pre-tokens.
pub fn pretokenize(text: &str) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        if c.is_whitespace() {
            let mut end = start;
            let mut last_start = start;
            let mut last_char = c;
            while let Some(&(i, ch)) = chars.peek() {
                if !ch.is_whitespace() {
                    break;
                }
                last_start = i;
                last_char = ch;
                end = i + ch.len_utf8();
                chars.next();
            }
            let followed_by_word = end < text.len();
            if followed_by_word && last_char == ' ' {
                if last_start > start {
                    pieces.push((start, last_start));
                }
                // The attached space opens the next word piece.
                let word_start = last_start;
                let mut word_end = end;
                while let Some(&(i, ch)) = chars.peek() {
                    if ch.is_whitespace() {
                        break;
                    }
                    word_end = i + ch.len_utf8();
                    chars.next();
                }
                pieces.push((word_start, word_end));
            } else {
                pieces.push((start, end));
            }
        } else {
            let mut end = start;
            while let Some(&(i, ch)) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                end = i + ch.len_utf8();
                chars.next();
            }
            pieces.push((start, end));
        }
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(text: &str) -> Vec<&str> {
        pretokenize(text).into_iter().map(|(s, e)| &text[s..e]).collect()
    }

    #[test]
    fn pretokenize_attaches_single_space() {
        assert_eq!(pieces("abab abab"), vec!["abab", " abab"]);
        assert_eq!(pieces("a  b\n"), vec!["a", " ", " b", "\n"]);
        assert_eq!(pieces("  x"), vec![" ", " x"]);
        assert_eq!(pieces("x\ty"), vec!["x", "\t", "y"]);
        assert!(pieces("").is_empty());
    }

    #[test]
    fn pretokenize_covers_input() {
        for text in ["", " ", "a b  c\t\n d ", "Žluťoučký kůň", "\u{3000}x y"] {
            let joined: String = pieces(text).concat();
            assert_eq!(joined, text);
        }
    }

    #[test]
    fn bytes_only_round_trip() {
        let vocab = ByteVocab::bytes_only();
        let text = "Žluťoučký kůň";
        let enc = vocab.encode(text);
        assert_eq!(enc.len(), text.len());
        assert_eq!(vocab.decode(&enc.ids).unwrap(), text);
    }

    #[test]
    fn decode_rejects_unknown_id() {
        let vocab = ByteVocab::bytes_only();
        assert_eq!(vocab.decode(&[9999]), Err(BpeError::InvalidId(9999)));
        assert_eq!(vocab.decode(&[]).unwrap(), "");
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(ByteVocab::bytes_only().encode("").is_empty());
    }
}

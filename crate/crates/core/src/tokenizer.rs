//! Tokenizer interface and a deterministic word-level reference tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Text ↔ token conversion used by the trie and the decoder.
///
/// Implementations must round-trip every label they are asked to index:
/// `decode(&encode(x)) == x`.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, tokens: &[TokenId]) -> String;
    fn vocab_size(&self) -> usize;
}

pub const EOS: TokenId = 0;
pub const ENTITY_OPEN: TokenId = 1;
pub const ENTITY_CLOSE: TokenId = 2;
const BYTE_BASE: TokenId = 3;
const FIRST_PIECE: TokenId = BYTE_BASE + 256;

pub const ENTITY_OPEN_TEXT: &str = "<e>";
pub const ENTITY_CLOSE_TEXT: &str = "</e>";

/// Word-level tokenizer with byte fallback.
///
/// Text is cut into pieces: a run of alphanumerics or a single other
/// character, each optionally carrying one leading space. Pieces seen in the
/// training corpus get their own id; anything else is spelled as raw UTF-8
/// byte tokens. Decoding concatenates pieces, so every string round-trips.
/// Ids `0..3` are end-of-sequence, `<e>` and `</e>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTokenizer {
    pieces: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, TokenId>,
}

/// Pieces always present so the output grammar never needs byte fallback.
const GRAMMAR_TEXT: &str = "unknown_0 || x\nunknown_1 unknown_2 unknown_3 unknown_4 0123456789 ~ ,";

impl WordTokenizer {
    pub fn from_corpus<I, S>(texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut pieces: Vec<String> = pretokenize(GRAMMAR_TEXT)
            .into_iter()
            .map(str::to_string)
            .collect();
        for t in texts {
            pieces.extend(pretokenize(t.as_ref()).into_iter().map(str::to_string));
        }
        pieces.sort();
        pieces.dedup();
        Self::from_pieces(pieces)
    }

    fn from_pieces(pieces: Vec<String>) -> Self {
        let ids = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), FIRST_PIECE + i as TokenId))
            .collect();
        Self { pieces, ids }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tokenizer serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        let raw: WordTokenizer = serde_json::from_str(json)?;
        Ok(Self::from_pieces(raw.pieces))
    }

    /// Id of a whole piece, if it is in the vocabulary.
    pub fn piece_id(&self, piece: &str) -> Option<TokenId> {
        self.ids.get(piece).copied()
    }

    /// Encodes text that may contain literal `<e>` / `</e>` markers, mapping
    /// them to their special ids. Each segment between markers is encoded on
    /// its own, so an entity span encodes exactly like the bare label.
    pub fn encode_with_markers(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut rest = text;
        loop {
            let open = rest.find(ENTITY_OPEN_TEXT);
            let close = rest.find(ENTITY_CLOSE_TEXT);
            let next = match (open, close) {
                (Some(o), Some(c)) if c < o => Some((c, ENTITY_CLOSE, ENTITY_CLOSE_TEXT.len())),
                (Some(o), _) => Some((o, ENTITY_OPEN, ENTITY_OPEN_TEXT.len())),
                (None, Some(c)) => Some((c, ENTITY_CLOSE, ENTITY_CLOSE_TEXT.len())),
                (None, None) => None,
            };
            match next {
                Some((at, id, len)) => {
                    out.extend(self.encode(&rest[..at]));
                    out.push(id);
                    rest = &rest[at + len..];
                }
                None => {
                    out.extend(self.encode(rest));
                    return out;
                }
            }
        }
    }

    fn push_token(&self, token: TokenId, bytes: &mut Vec<u8>) {
        match token {
            EOS => {}
            ENTITY_OPEN => bytes.extend_from_slice(ENTITY_OPEN_TEXT.as_bytes()),
            ENTITY_CLOSE => bytes.extend_from_slice(ENTITY_CLOSE_TEXT.as_bytes()),
            t if t < FIRST_PIECE => bytes.push((t - BYTE_BASE) as u8),
            t => {
                if let Some(p) = self.pieces.get((t - FIRST_PIECE) as usize) {
                    bytes.extend_from_slice(p.as_bytes());
                }
            }
        }
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in pretokenize(text) {
            match self.ids.get(piece) {
                Some(&id) => out.push(id),
                None => out.extend(piece.bytes().map(|b| BYTE_BASE + b as TokenId)),
            }
        }
        out
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        let mut bytes = Vec::new();
        for &t in tokens {
            self.push_token(t, &mut bytes);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn vocab_size(&self) -> usize {
        FIRST_PIECE as usize + self.pieces.len()
    }
}

/// Splits text into pieces whose concatenation is the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        let mut unit_start = c;
        if c == ' ' {
            match chars.peek() {
                Some(&(_, n)) if !n.is_whitespace() => {
                    chars.next();
                    unit_start = n;
                }
                _ => {
                    out.push(&text[start..start + 1]);
                    continue;
                }
            }
        }
        let mut end = chars.peek().map_or(text.len(), |&(i, _)| i);
        if unit_start.is_alphanumeric() {
            while let Some(&(i, n)) = chars.peek() {
                if !n.is_alphanumeric() {
                    break;
                }
                chars.next();
                end = i + n.len_utf8();
            }
        }
        out.push(&text[start..end]);
    }
    out
}

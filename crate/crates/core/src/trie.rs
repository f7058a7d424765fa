//! Token-sequence trie over the entity lexicon.
//!
//! Every root-to-terminal path spells exactly one entity label. Children are
//! kept as sorted `(token, node)` arrays and searched with binary search.

use std::io::{Read, Write};

use crate::tokenizer::{TokenId, Tokenizer, WordTokenizer};

#[derive(Debug, thiserror::Error)]
pub enum TrieError {
    #[error("entity {0:?} does not round-trip through the tokenizer")]
    RoundTrip(String),
    #[error("entity {0:?} encodes to an empty token sequence")]
    EmptyEncoding(String),
    #[error("trie snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Node {
    children: Vec<(TokenId, u32)>,
    terminal: bool,
}

impl Node {
    fn child(&self, token: TokenId) -> Option<u32> {
        self.children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| self.children[i].1)
    }
}

/// Answer to a prefix query.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Lookup {
    /// Tokens that keep the prefix inside the lexicon, ascending.
    pub allowed: Vec<TokenId>,
    /// Whether the prefix itself is a complete entity.
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTrie {
    nodes: Vec<Node>,
    entity_count: usize,
}

impl Default for EntityTrie {
    fn default() -> Self {
        Self {
            nodes: vec![Node::default()],
            entity_count: 0,
        }
    }
}

impl EntityTrie {
    /// Indexes every label. Fails on the first label that encodes to nothing
    /// or does not decode back to itself.
    pub fn build<I, S, T>(entities: I, tokenizer: &T) -> Result<Self, TrieError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
        T: Tokenizer + ?Sized,
    {
        let mut sequences = Vec::new();
        for e in entities {
            let label = e.as_ref();
            let seq = tokenizer.encode(label);
            if seq.is_empty() {
                return Err(TrieError::EmptyEncoding(label.to_string()));
            }
            if tokenizer.decode(&seq) != label {
                return Err(TrieError::RoundTrip(label.to_string()));
            }
            sequences.push(seq);
        }
        Ok(Self::from_sequences(sequences))
    }

    /// Builds from raw token sequences. Empty sequences are ignored.
    pub fn from_sequences(mut sequences: Vec<Vec<TokenId>>) -> Self {
        sequences.retain(|s| !s.is_empty());
        sequences.sort_unstable();
        sequences.dedup();
        let mut trie = Self::default();
        // Sorted input means a new child is always greater than the last one,
        // so pushing keeps every child array sorted.
        for seq in &sequences {
            let mut node = 0usize;
            for &tok in seq {
                let last = trie.nodes[node].children.last().copied();
                node = match last {
                    Some((t, child)) if t == tok => child as usize,
                    _ => {
                        let child = trie.nodes.len() as u32;
                        trie.nodes.push(Node::default());
                        trie.nodes[node].children.push((tok, child));
                        child as usize
                    }
                };
            }
            trie.nodes[node].terminal = true;
        }
        trie.entity_count = sequences.len();
        trie
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    fn walk(&self, prefix: &[TokenId]) -> Option<&Node> {
        let mut node = &self.nodes[0];
        for &tok in prefix {
            node = &self.nodes[node.child(tok)? as usize];
        }
        Some(node)
    }

    /// Continuations of `prefix`. A prefix outside the trie allows nothing.
    pub fn lookup(&self, prefix: &[TokenId]) -> Lookup {
        match self.walk(prefix) {
            Some(node) => Lookup {
                allowed: node.children.iter().map(|&(t, _)| t).collect(),
                terminal: node.terminal,
            },
            None => Lookup::default(),
        }
    }

    /// Whether `sequence` spells a whole entity.
    pub fn contains(&self, sequence: &[TokenId]) -> bool {
        self.walk(sequence).is_some_and(|n| n.terminal)
    }
}

const TRIE_MAGIC: &[u8; 8] = b"KGCTRIE\0";
const TRIE_VERSION: u32 = 1;

/// Writes the trie together with the tokenizer it was built with.
pub fn write_trie_snapshot<W: Write>(
    trie: &EntityTrie,
    tokenizer: &WordTokenizer,
    mut out: W,
) -> Result<(), TrieError> {
    out.write_all(TRIE_MAGIC)?;
    out.write_all(&TRIE_VERSION.to_le_bytes())?;
    let tok = tokenizer.to_json();
    out.write_all(&(tok.len() as u32).to_le_bytes())?;
    out.write_all(tok.as_bytes())?;
    out.write_all(&(trie.entity_count as u32).to_le_bytes())?;
    out.write_all(&(trie.nodes.len() as u32).to_le_bytes())?;
    for node in &trie.nodes {
        out.write_all(&[node.terminal as u8])?;
        out.write_all(&(node.children.len() as u32).to_le_bytes())?;
        for &(t, c) in &node.children {
            out.write_all(&t.to_le_bytes())?;
            out.write_all(&c.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_trie_snapshot<R: Read>(mut input: R) -> Result<(EntityTrie, WordTokenizer), TrieError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != TRIE_MAGIC {
        return Err(TrieError::Snapshot("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != TRIE_VERSION {
        return Err(TrieError::Snapshot(format!("unsupported version {version}")));
    }
    let len = read_u32(&mut input)? as usize;
    let mut tok = vec![0u8; len];
    input.read_exact(&mut tok)?;
    let tok = String::from_utf8(tok).map_err(|e| TrieError::Snapshot(e.to_string()))?;
    let tokenizer =
        WordTokenizer::from_json(&tok).map_err(|e| TrieError::Snapshot(e.to_string()))?;
    let entity_count = read_u32(&mut input)? as usize;
    let n = read_u32(&mut input)? as usize;
    let mut nodes = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        let k = read_u32(&mut input)? as usize;
        let mut children = Vec::with_capacity(k.min(1 << 20));
        for _ in 0..k {
            let t = read_u32(&mut input)?;
            let c = read_u32(&mut input)?;
            if c as usize >= n {
                return Err(TrieError::Snapshot("child index out of range".into()));
            }
            children.push((t, c));
        }
        if !children.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(TrieError::Snapshot("children not sorted".into()));
        }
        nodes.push(Node {
            children,
            terminal: flag[0] != 0,
        });
    }
    if nodes.is_empty() {
        return Err(TrieError::Snapshot("missing root".into()));
    }
    Ok((EntityTrie { nodes, entity_count }, tokenizer))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, TrieError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word_trie(labels: &[&str]) -> (EntityTrie, WordTokenizer) {
        let tok = WordTokenizer::from_corpus(labels);
        (EntityTrie::build(labels, &tok).unwrap(), tok)
    }

    #[test]
    fn shared_prefixes_branch() {
        let (trie, tok) = word_trie(&["new york", "new jersey"]);
        let look = trie.lookup(&tok.encode("new"));
        let mut expected = vec![tok.encode(" york")[0], tok.encode(" jersey")[0]];
        expected.sort();
        assert_eq!(look.allowed, expected);
        assert!(!look.terminal);
        assert!(trie.contains(&tok.encode("new york")));
        assert!(!trie.contains(&tok.encode("new")));
    }

    #[test]
    fn empty_lexicon() {
        let (trie, tok) = word_trie(&[]);
        assert_eq!(trie.lookup(&[]), Lookup::default());
        assert!(!trie.contains(&[]));
        assert!(!trie.contains(&tok.encode("x")));
    }

    #[test]
    fn root_lists_first_tokens() {
        let (trie, tok) = word_trie(&["a b", "c", "a d"]);
        let mut firsts = vec![tok.encode("a")[0], tok.encode("c")[0]];
        firsts.sort();
        assert_eq!(trie.lookup(&[]).allowed, firsts);
    }

    #[test]
    fn leaving_the_trie_allows_nothing() {
        let (trie, tok) = word_trie(&["a b"]);
        assert_eq!(trie.lookup(&tok.encode("zzz")), Lookup::default());
    }

    #[test]
    fn full_label_is_terminal_and_may_continue() {
        let (trie, tok) = word_trie(&["Gettysburg", "Gettysburg, Pennsylvania"]);
        let look = trie.lookup(&tok.encode("Gettysburg"));
        assert!(look.terminal);
        assert_eq!(look.allowed, vec![tok.encode(",")[0]]);
    }

    #[test]
    fn node_count_bounded_by_tokens() {
        let labels = ["alpha beta", "alpha gamma", "delta"];
        let (trie, tok) = word_trie(&labels);
        let total: usize = labels.iter().map(|l| tok.encode(l).len()).sum();
        assert!(trie.node_count() <= total + 1);
        assert_eq!(trie.entity_count(), 3);
    }

    #[test]
    fn rejects_empty_encoding() {
        let tok = WordTokenizer::from_corpus(["a"]);
        assert!(matches!(
            EntityTrie::build([""], &tok),
            Err(TrieError::EmptyEncoding(_))
        ));
    }

    struct Lossy;
    impl Tokenizer for Lossy {
        fn encode(&self, text: &str) -> Vec<TokenId> {
            text.bytes().map(|b| b.to_ascii_lowercase() as TokenId).collect()
        }
        fn decode(&self, tokens: &[TokenId]) -> String {
            tokens.iter().map(|&t| t as u8 as char).collect()
        }
        fn vocab_size(&self) -> usize {
            256
        }
    }

    #[test]
    fn rejects_lossy_tokenizer() {
        match EntityTrie::build(["Berlin"], &Lossy) {
            Err(TrieError::RoundTrip(e)) => assert_eq!(e, "Berlin"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let (trie, tok) = word_trie(&["new york", "new jersey", "boston"]);
        let mut bytes = Vec::new();
        write_trie_snapshot(&trie, &tok, &mut bytes).unwrap();
        let (back, back_tok) = read_trie_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(back, trie);
        assert_eq!(back_tok.encode("new york"), tok.encode("new york"));
    }
}

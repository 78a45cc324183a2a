//! Byte-level BPE with two reserved specials (end-of-text and pad).
//!
//! Ids `0..256` are raw bytes, `256` is end-of-text, `257` is pad and every
//! merge appends one id after that. Merges never cross pre-token
//! boundaries (a word with its leading space, a punctuation run, or a
//! whitespace run), and specials are only ever inserted explicitly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::hashing::sha256_hex;

use thiserror::Error;

pub const END_OF_TEXT: &str = "<|endoftext|>";
pub const PAD: &str = "<|pad|>";
pub const EOT_ID: u32 = 256;
pub const PAD_ID: u32 = 257;
pub const MIN_VOCAB: usize = 258;

const FORMAT_HEADER: &str = "quicktext-bpe v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("{0}")]
    Contract(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Clone, Debug)]
pub struct Vocab {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b >= 0x80 || b == b'_'
}

/// Splits bytes into pre-tokens. A single space preceding a non-space is
/// attached to the following piece.
pub(crate) fn pre_tokens(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let n = text.len();
    let mut i = 0;
    while i < n {
        if !text[i].is_ascii_whitespace() {
            let end = scan_piece(text, i);
            out.push(&text[i..end]);
            i = end;
            continue;
        }
        let mut j = i;
        while j < n && text[j].is_ascii_whitespace() {
            j += 1;
        }
        if j < n && text[j - 1] == b' ' {
            if j - 1 > i {
                out.push(&text[i..j - 1]);
            }
            let end = scan_piece(text, j);
            out.push(&text[j - 1..end]);
            i = end;
        } else {
            out.push(&text[i..j]);
            i = j;
        }
    }
    out
}

fn scan_piece(text: &[u8], mut i: usize) -> usize {
    let n = text.len();
    if i >= n {
        return i;
    }
    if is_word_byte(text[i]) {
        while i < n && is_word_byte(text[i]) {
            i += 1;
        }
    } else {
        while i < n && !is_word_byte(text[i]) && !text[i].is_ascii_whitespace() {
            i += 1;
        }
    }
    i
}

impl Vocab {
    fn from_merges(merges: Vec<(u32, u32)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.push(END_OF_TEXT.as_bytes().to_vec());
        pieces.push(PAD.as_bytes().to_vec());
        let mut ranks = HashMap::with_capacity(merges.len());
        let mut token_to_id = HashMap::new();
        for b in 0..=255u8 {
            token_to_id.insert(vec![b], b as u32);
        }
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let mut bytes = pieces[a as usize].clone();
            bytes.extend_from_slice(&pieces[b as usize]);
            let id = (MIN_VOCAB + rank) as u32;
            token_to_id.entry(bytes.clone()).or_insert(id);
            pieces.push(bytes);
            ranks.insert((a, b), rank as u32);
        }
        Self {
            merges,
            ranks,
            pieces,
            token_to_id,
        }
    }

    /// Byte-level fallback vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn end_of_text(&self) -> u32 {
        EOT_ID
    }

    pub fn pad(&self) -> u32 {
        PAD_ID
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, text: &[u8]) -> Vec<u32> {
        let mut out = Vec::with_capacity(text.len() / 2);
        for piece in pre_tokens(text) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &[u8], out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = piece.iter().map(|&b| b as u32).collect();
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = MIN_VOCAB as u32 + rank;
            syms = merge_pair(&syms, pair, new_id);
        }
        out.extend_from_slice(&syms);
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 3);
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or(TokenizerError::UnknownId(id))?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Lossy UTF-8 view of [`Vocab::decode`].
    pub fn decode_str(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_HEADER}");
        let _ = writeln!(s, "vocab_size {}", self.len());
        let _ = writeln!(s, "special end_of_text {EOT_ID} {END_OF_TEXT}");
        let _ = writeln!(s, "special pad {PAD_ID} {PAD}");
        let _ = writeln!(s, "merges {}", self.merges.len());
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, String)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l.to_string()))
                .ok_or_else(|| TokenizerError::Parse {
                    line: 0,
                    msg: format!("unexpected end of file, expected {expect}"),
                })
        };
        let (ln, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err(TokenizerError::Parse {
                line: ln,
                msg: format!("unsupported header {header:?}"),
            });
        }
        let (ln, size_line) = next("vocab_size")?;
        let size: usize = size_line
            .strip_prefix("vocab_size ")
            .and_then(|v| v.parse().ok())
            .ok_or(TokenizerError::Parse {
                line: ln,
                msg: "expected `vocab_size N`".into(),
            })?;
        for (name, id, marker) in [("end_of_text", EOT_ID, END_OF_TEXT), ("pad", PAD_ID, PAD)] {
            let (ln, l) = next("special")?;
            if l != format!("special {name} {id} {marker}") {
                return Err(TokenizerError::Parse {
                    line: ln,
                    msg: format!("expected {name} special manifest, got {l:?}"),
                });
            }
        }
        let (ln, m_line) = next("merges")?;
        let n_merges: usize = m_line
            .strip_prefix("merges ")
            .and_then(|v| v.parse().ok())
            .ok_or(TokenizerError::Parse {
                line: ln,
                msg: "expected `merges N`".into(),
            })?;
        if size != MIN_VOCAB + n_merges {
            return Err(TokenizerError::Parse {
                line: ln,
                msg: format!("vocab_size {size} inconsistent with {n_merges} merges"),
            });
        }
        let mut merges = Vec::with_capacity(n_merges);
        for rank in 0..n_merges {
            let (ln, l) = next("merge")?;
            let mut parts = l.split(' ').map(str::parse::<u32>);
            let (Some(Ok(a)), Some(Ok(b)), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(TokenizerError::Parse {
                    line: ln,
                    msg: format!("bad merge line {l:?}"),
                });
            };
            let limit = (MIN_VOCAB + rank) as u32;
            if a >= limit || b >= limit || a == EOT_ID || a == PAD_ID || b == EOT_ID || b == PAD_ID {
                return Err(TokenizerError::Parse {
                    line: ln,
                    msg: format!("merge ({a}, {b}) references an invalid id"),
                });
            }
            merges.push((a, b));
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(TokenizerError::Parse {
                line: ln + 1,
                msg: format!("trailing content {extra:?}"),
            });
        }
        Ok(Self::from_merges(merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

fn merge_pair(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

/// Learns `vocab_size - 258` merges from `corpus`.
///
/// The most frequent adjacent pair wins each round; ties go to the
/// numerically smallest pair so training is deterministic.
pub fn train_bpe(corpus: &[u8], vocab_size: usize) -> Result<Vocab> {
    if vocab_size < MIN_VOCAB {
        return Err(TokenizerError::Contract(format!(
            "vocab size {vocab_size} below the {MIN_VOCAB} byte+special minimum"
        )));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::Contract("empty training corpus".into()));
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    for piece in pre_tokens(corpus) {
        *counts.entry(piece).or_default() += 1;
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
        .collect();
    words.sort_unstable();

    let n_merges = vocab_size - MIN_VOCAB;
    let mut merges = Vec::with_capacity(n_merges);
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for rank in 0..n_merges {
        pair_counts.clear();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += c;
            }
        }
        let Some((&pair, _)) = pair_counts
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            return Err(TokenizerError::Contract(format!(
                "corpus only supports {rank} merges, {n_merges} requested"
            )));
        };
        let new_id = (MIN_VOCAB + rank) as u32;
        for (syms, _) in words.iter_mut() {
            if syms.windows(2).any(|w| (w[0], w[1]) == pair) {
                *syms = merge_pair(syms, pair, new_id);
            }
        }
        merges.push(pair);
    }
    Ok(Vocab::from_merges(merges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_vocab() -> Vocab {
        let mut text = "hello world, hello there. <CUSTOMER>: what is my balance?\n".repeat(50);
        for i in 0..400 {
            text.push_str(&format!("item {i} costs {} dollars; ", i * 7));
        }
        train_bpe(text.as_bytes(), 300).unwrap()
    }

    #[test]
    fn first_merge_of_uniform_run() {
        let v = train_bpe(&[b'a'; 64], 259).unwrap();
        assert_eq!(v.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert_eq!(v.len(), 259);
    }

    #[test]
    fn minimum_vocab_has_no_merges() {
        let v = train_bpe(b"anything at all", 258).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("ab"), vec![97, 98]);
    }

    #[test]
    fn alternating_pair_is_merged() {
        let corpus = "ab".repeat(3000);
        let v = train_bpe(corpus.as_bytes(), 260).unwrap();
        assert_eq!(v.merges()[0], (b'a' as u32, b'b' as u32));
        assert_eq!(v.len(), 260);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(train_bpe(b"", 300).is_err());
        assert!(train_bpe(b"abc", 257).is_err());
    }

    #[test]
    fn round_trip_and_empty() {
        let v = small_vocab();
        let ids = v.encode("hello");
        assert!(ids.len() < 5);
        assert_eq!(v.decode(&ids).unwrap(), b"hello");
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn literal_special_text_is_not_special() {
        let v = small_vocab();
        let ids = v.encode("before <|endoftext|> after <|pad|>");
        assert!(!ids.contains(&EOT_ID));
        assert!(!ids.contains(&PAD_ID));
    }

    #[test]
    fn unknown_id_on_decode() {
        let v = small_vocab();
        assert!(matches!(v.decode(&[10_000]), Err(TokenizerError::UnknownId(10_000))));
    }

    #[test]
    fn serialization_reproduces_encodings() {
        let v = small_vocab();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        let sample = "hello there, what is my balance? zzz";
        assert_eq!(back.encode(sample), v.encode(sample));
    }

    #[test]
    fn corrupt_vocab_file() {
        assert!(Vocab::from_text("nope").is_err());
        let mut t = small_vocab().to_text();
        t.push_str("1 2\n");
        assert!(Vocab::from_text(&t).is_err());
        let bad = t.replace("special pad 257", "special pad 3");
        assert!(Vocab::from_text(&bad).is_err());
    }

    #[test]
    fn pre_tokens_cover_input() {
        let text = b"  hi there,  you?\n\nok";
        let pieces = pre_tokens(text);
        assert_eq!(pieces.concat(), text.to_vec());
        assert!(pieces.contains(&&b" there"[..]));
    }

    proptest! {
        #[test]
        fn round_trip_random_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let v = small_vocab();
            prop_assert_eq!(v.decode(&v.encode_bytes(&bytes)).unwrap(), bytes);
        }

        #[test]
        fn batching_does_not_change_encoding(a in "[a-z ,.?]{0,40}", b in "[a-z ,.?]{0,40}") {
            // encoding each pre-token alone equals encoding the whole string
            let v = small_vocab();
            let s = format!("{a}{b}");
            let whole = v.encode(&s);
            let pieces: Vec<u32> = pre_tokens(s.as_bytes())
                .into_iter()
                .flat_map(|p| v.encode_bytes(p))
                .collect();
            prop_assert_eq!(whole, pieces);
        }
    }
}

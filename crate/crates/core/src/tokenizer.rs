//! Byte-level BPE compatible with GPT-2 `encoder.json` / `vocab.bpe` files.
//!
//! Text is split into pre-tokens, each pre-token's UTF-8 bytes are mapped to
//! printable stand-in characters, and adjacent symbols are merged greedily by
//! lowest merge rank. Every vocabulary must contain all 256 byte symbols, so
//! any input is encodable.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

pub const EOT_TOKEN: &str = "<|endoftext|>";

/// Letters, digits and other symbols each group with one optional leading
/// space; remaining whitespace forms its own pre-tokens.
const PRETOKEN_PATTERN: &str = r" ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

/// The GPT-2 byte→char table: printable Latin-1 bytes map to themselves,
/// the rest to code points from U+0100 upward in byte order.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            b as char
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("code point below U+0200")
        };
    }
    table
}

#[derive(Clone, Debug)]
pub struct BpeVocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    pretokenizer: Regex,
}

impl BpeVocab {
    /// Builds a vocabulary from a token→id table and ordered merge pairs.
    ///
    /// Ids must be unique and cover `0..n`; every byte symbol must be
    /// present; merges must be unique and their parts and results must be
    /// tokens.
    pub fn from_parts(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = vocab.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = id_to_token
                .get_mut(id as usize)
                .ok_or_else(|| Error::Vocab(format!("id {id} for {tok:?} outside contiguous range 0..{n}")))?;
            if let Some(prev) = slot.replace(tok.clone()) {
                return Err(Error::Vocab(format!("id {id} assigned to both {prev:?} and {tok:?}")));
            }
        }
        // With n unique ids all below n, every slot is filled.
        let id_to_token: Vec<String> = id_to_token.into_iter().map(|t| t.expect("filled")).collect();

        let byte_encoder = bytes_to_unicode();
        if let Some(c) = byte_encoder.iter().find(|c| !vocab.contains_key(&c.to_string())) {
            return Err(Error::Vocab(format!("byte symbol {c:?} missing from vocab")));
        }
        let byte_decoder = byte_encoder.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();

        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            for part in [&a, &b] {
                if !vocab.contains_key(part) {
                    return Err(Error::Vocab(format!("merge part {part:?} is not a token")));
                }
            }
            if !vocab.contains_key(&format!("{a}{b}")) {
                return Err(Error::Vocab(format!("merge result of \"{a} {b}\" is not a token")));
            }
            if merge_ranks.insert((a.clone(), b.clone()), rank).is_some() {
                return Err(Error::Vocab(format!("duplicate merge pair \"{a} {b}\"")));
            }
        }

        Ok(Self {
            token_to_id: vocab,
            id_to_token,
            merge_ranks,
            byte_encoder,
            byte_decoder,
            pretokenizer: Regex::new(PRETOKEN_PATTERN).expect("valid pattern"),
        })
    }

    /// 256 byte tokens (id = byte value) plus the end-of-text token at 256.
    pub fn byte_level() -> Self {
        let mut vocab: HashMap<String, u32> = bytes_to_unicode()
            .iter()
            .enumerate()
            .map(|(b, c)| (c.to_string(), b as u32))
            .collect();
        vocab.insert(EOT_TOKEN.to_string(), 256);
        Self::from_parts(vocab, Vec::new()).expect("byte vocabulary is well formed")
    }

    /// Parses `encoder.json`-style text (one JSON object of token → id).
    pub fn parse_vocab_json(text: &str) -> Result<HashMap<String, u32>> {
        serde_json::from_str(text).map_err(|e| Error::Vocab(format!("vocab JSON: {e}")))
    }

    /// Parses merges text: one `a b` pair per line, an optional leading
    /// `#` header, blank lines ignored.
    pub fn parse_merges(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (i == 0 && line.starts_with('#')) {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => out.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(Error::Parse {
                        path: "merges".into(),
                        line: i + 1,
                        msg: format!("expected two space-separated symbols, got {line:?}"),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn from_strings(vocab_json: &str, merges: &str) -> Result<Self> {
        Self::from_parts(Self::parse_vocab_json(vocab_json)?, Self::parse_merges(merges)?)
    }

    pub fn load(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let v = std::fs::read_to_string(vocab_path)?;
        let m = std::fs::read_to_string(merges_path)?;
        Self::from_strings(&v, &m)
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn num_merges(&self) -> usize {
        self.merge_ranks.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn eot_id(&self) -> Option<u32> {
        self.token_id(EOT_TOKEN)
    }

    /// Splits text into pre-tokens; their concatenation is the input.
    pub fn pretokenize<'t>(&self, text: &'t str) -> Vec<&'t str> {
        self.pretokenizer.find_iter(text).map(|m| m.as_str()).collect()
    }

    fn bpe(&self, piece: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_encoder[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0].clone(), w[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        out.extend(symbols.iter().map(|s| self.token_to_id[s]));
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in self.pretokenize(text) {
            self.bpe(piece, &mut out);
        }
        out
    }

    /// Decodes ids to text; invalid UTF-8 (possible for sampled byte
    /// sequences) is replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self.token(id).ok_or(Error::UnknownTokenId(id))?;
            for c in tok.chars() {
                match self.byte_decoder.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

/// Builds a vocabulary from the file pair.
pub fn load_vocab(vocab_path: &Path, merges_path: &Path) -> Result<BpeVocab> {
    BpeVocab::load(vocab_path, merges_path)
}

/// The byte alphabet plus one token per merge result and the end-of-text
/// token, with `merges` ranked in the given order.
pub fn vocab_with_merges(merges: &[(&str, &str)]) -> Result<BpeVocab> {
    let mut vocab: HashMap<String, u32> = bytes_to_unicode()
        .iter()
        .enumerate()
        .map(|(b, c)| (c.to_string(), b as u32))
        .collect();
    let mut seen = HashSet::new();
    for (a, b) in merges {
        let t = format!("{a}{b}");
        if seen.insert(t.clone()) && !vocab.contains_key(&t) {
            let id = vocab.len() as u32;
            vocab.insert(t, id);
        }
    }
    let id = vocab.len() as u32;
    vocab.insert(EOT_TOKEN.to_string(), id);
    BpeVocab::from_parts(
        vocab,
        merges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
    )
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer loaded from a Hugging Face `tokenizer.json`.
//!
//! Every byte has a base token, so encoding is total. Special tokens (the
//! `added_tokens` list) are matched literally by [`Tokenizer::encode`] and
//! never produced by [`Tokenizer::encode_plain`].

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};

/// Pre-tokenization pattern of Llama 3 style tokenizers.
pub const LLAMA3_PATTERN: &str = r"(?i:'s|'t|'re|'ve|'m|'ll|'d)|[^\r\n\p{L}\p{N}]?\p{L}+|\p{N}{1,3}| ?[^\s\p{L}\p{N}]+[\r\n]*|\s*[\r\n]+|\s+(?!\S)|\s+";

/// Pre-tokenization pattern of GPT-2 style tokenizers.
pub const GPT2_PATTERN: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

#[derive(Debug, Clone)]
enum Piece {
    Normal(String),
    Special(String),
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: HashMap<String, u32>,
    pieces: Vec<Option<Piece>>,
    merges: HashMap<(String, String), usize>,
    specials: Vec<(String, u32)>,
    pattern: Regex,
    pattern_source: String,
    ignore_merges: bool,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

/// The reversible byte-to-character table used by byte-level BPE.
pub fn byte_alphabet() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32)
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect();
    let mut chars: Vec<u32> = printable.clone();
    let mut n = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            chars.push(256 + n);
            n += 1;
        }
    }
    let mut table = ['\0'; 256];
    for (b, c) in printable.into_iter().zip(chars) {
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

impl Tokenizer {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Tokenizer(format!("tokenizer.json: {e}")))?;
        let model = root
            .get("model")
            .ok_or_else(|| Error::Tokenizer("missing `model` section".into()))?;
        if let Some(kind) = model.get("type").and_then(Value::as_str) {
            if kind != "BPE" {
                return Err(Error::Tokenizer(format!("unsupported model type {kind}")));
            }
        }
        let vocab: HashMap<String, u32> = model
            .get("vocab")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Tokenizer("missing `model.vocab`".into()))?
            .iter()
            .map(|(k, v)| {
                v.as_u64()
                    .map(|id| (k.clone(), id as u32))
                    .ok_or_else(|| Error::Tokenizer(format!("non-integer id for `{k}`")))
            })
            .collect::<Result<_>>()?;

        let mut merges = HashMap::new();
        for (rank, m) in model
            .get("merges")
            .and_then(Value::as_array)
            .map(Vec::as_slice)
            .unwrap_or_default()
            .iter()
            .enumerate()
        {
            let pair = match m {
                Value::String(s) => s.split_once(' ').map(|(a, b)| (a.to_string(), b.to_string())),
                Value::Array(a) if a.len() == 2 => match (a[0].as_str(), a[1].as_str()) {
                    (Some(x), Some(y)) => Some((x.to_string(), y.to_string())),
                    _ => None,
                },
                _ => None,
            }
            .ok_or_else(|| Error::Tokenizer(format!("malformed merge #{rank}: {m}")))?;
            merges.entry(pair).or_insert(rank);
        }
        let ignore_merges = model.get("ignore_merges").and_then(Value::as_bool).unwrap_or(false);

        let mut specials = Vec::new();
        for t in root
            .get("added_tokens")
            .and_then(Value::as_array)
            .map(Vec::as_slice)
            .unwrap_or_default()
        {
            let content = t.get("content").and_then(Value::as_str);
            let id = t.get("id").and_then(Value::as_u64);
            match (content, id) {
                (Some(c), Some(id)) => specials.push((c.to_string(), id as u32)),
                _ => return Err(Error::Tokenizer(format!("malformed added token {t}"))),
            }
        }
        let pattern_source = root
            .get("pre_tokenizer")
            .and_then(find_split_regex)
            .unwrap_or_else(|| LLAMA3_PATTERN.to_string());
        Self::new(vocab, merges, specials, &pattern_source, ignore_merges)
    }

    fn new(
        vocab: HashMap<String, u32>,
        merges: HashMap<(String, String), usize>,
        mut specials: Vec<(String, u32)>,
        pattern_source: &str,
        ignore_merges: bool,
    ) -> Result<Self> {
        let byte_to_char = byte_alphabet();
        if let Some(b) = byte_to_char.iter().position(|c| !vocab.contains_key(&c.to_string())) {
            return Err(Error::Tokenizer(format!(
                "vocabulary lacks a base token for byte 0x{b:02x}; only byte-level BPE is supported"
            )));
        }
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, c)| (*c, b as u8)).collect();
        let max_id = vocab
            .values()
            .chain(specials.iter().map(|(_, id)| id))
            .copied()
            .max()
            .unwrap_or(0) as usize;
        let mut pieces = vec![None; max_id + 1];
        for (s, &id) in &vocab {
            pieces[id as usize] = Some(Piece::Normal(s.clone()));
        }
        for (s, id) in &specials {
            pieces[*id as usize] = Some(Piece::Special(s.clone()));
        }
        // Longest first so that overlapping specials match greedily.
        specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.1.cmp(&b.1)));
        let pattern =
            Regex::new(pattern_source).map_err(|e| Error::Tokenizer(format!("bad pre-tokenizer pattern: {e}")))?;
        Ok(Self {
            vocab,
            pieces,
            merges,
            specials,
            pattern,
            pattern_source: pattern_source.to_string(),
            ignore_merges,
            byte_to_char,
            char_to_byte,
        })
    }

    /// One past the largest token id.
    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    /// Encode, recognizing special tokens written literally in `text`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            match self.find_special(rest) {
                Some((start, len, id)) => {
                    self.encode_plain_into(&rest[..start], &mut out);
                    out.push(id);
                    rest = &rest[start + len..];
                }
                None => {
                    self.encode_plain_into(rest, &mut out);
                    break;
                }
            }
        }
        out
    }

    /// Encode treating every character as ordinary text.
    pub fn encode_plain(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.encode_plain_into(text, &mut out);
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.pieces.get(id as usize).and_then(Option::as_ref) {
                Some(Piece::Special(s)) => bytes.extend_from_slice(s.as_bytes()),
                Some(Piece::Normal(s)) => bytes.extend(s.chars().filter_map(|c| self.char_to_byte.get(&c))),
                None => bytes.extend_from_slice("\u{FFFD}".as_bytes()),
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Id of a special token, or of a string that encodes to exactly one token.
    pub fn token_id(&self, text: &str) -> Option<u32> {
        if let Some((_, id)) = self.specials.iter().find(|(s, _)| s == text) {
            return Some(*id);
        }
        match self.encode_plain(text).as_slice() {
            [single] => Some(*single),
            _ => None,
        }
    }

    pub fn is_special(&self, id: u32) -> bool {
        matches!(self.pieces.get(id as usize), Some(Some(Piece::Special(_))))
    }

    /// Serialize in the Hugging Face `tokenizer.json` layout.
    pub fn to_json(&self) -> String {
        let mut merges: Vec<(&(String, String), &usize)> = self.merges.iter().collect();
        merges.sort_by_key(|(_, rank)| **rank);
        let mut vocab: Vec<(&String, &u32)> = self.vocab.iter().collect();
        vocab.sort_by_key(|(_, id)| **id);
        let vocab_obj: serde_json::Map<String, Value> =
            vocab.into_iter().map(|(k, v)| (k.clone(), Value::from(*v))).collect();
        let mut specials = self.specials.clone();
        specials.sort_by_key(|(_, id)| *id);
        serde_json::json!({
            "version": "1.0",
            "added_tokens": specials.iter().map(|(c, id)| serde_json::json!({
                "id": id, "content": c, "special": true,
                "single_word": false, "lstrip": false, "rstrip": false, "normalized": false
            })).collect::<Vec<_>>(),
            "pre_tokenizer": {
                "type": "Sequence",
                "pretokenizers": [
                    {"type": "Split", "pattern": {"Regex": self.pattern_source}, "behavior": "Isolated", "invert": false},
                    {"type": "ByteLevel", "add_prefix_space": false, "trim_offsets": true, "use_regex": false}
                ]
            },
            "decoder": {"type": "ByteLevel"},
            "model": {
                "type": "BPE",
                "ignore_merges": self.ignore_merges,
                "vocab": vocab_obj,
                "merges": merges.iter().map(|((a, b), _)| format!("{a} {b}")).collect::<Vec<_>>(),
            }
        })
        .to_string()
    }

    /// Build a tokenizer from base-byte vocabulary plus the given merges and
    /// special tokens. Ids: 256 bytes, then one per merge, then specials.
    pub fn from_merges(merges: &[(String, String)], specials: &[&str]) -> Result<Self> {
        let alphabet = byte_alphabet();
        let mut vocab: HashMap<String, u32> = alphabet
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as u32))
            .collect();
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            let merged = format!("{a}{b}");
            let next = vocab.len() as u32;
            vocab.entry(merged).or_insert(next);
            ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }
        let first_special = vocab.len() as u32;
        let specials = specials
            .iter()
            .enumerate()
            .map(|(i, s)| (s.to_string(), first_special + i as u32))
            .collect();
        Self::new(vocab, ranks, specials, LLAMA3_PATTERN, false)
    }

    /// Byte-level form of `text` (each byte as its alphabet character).
    pub fn byte_level(&self, text: &str) -> String {
        text.bytes().map(|b| self.byte_to_char[b as usize]).collect()
    }

    fn find_special(&self, text: &str) -> Option<(usize, usize, u32)> {
        if self.specials.is_empty() {
            return None;
        }
        for (i, _) in text.char_indices() {
            let tail = &text[i..];
            if let Some((s, id)) = self.specials.iter().find(|(s, _)| tail.starts_with(s.as_str())) {
                return Some((i, s.len(), *id));
            }
        }
        None
    }

    fn encode_plain_into(&self, text: &str, out: &mut Vec<u32>) {
        let mut last = 0;
        for m in self.pattern.find_iter(text) {
            let Ok(m) = m else {
                // Backtracking limit: fall back to the remainder as one word.
                break;
            };
            if m.start() > last {
                self.encode_word(&text[last..m.start()], out);
            }
            self.encode_word(m.as_str(), out);
            last = m.end();
        }
        if last < text.len() {
            self.encode_word(&text[last..], out);
        }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        if word.is_empty() {
            return;
        }
        let symbols: String = self.byte_level(word);
        if self.ignore_merges {
            if let Some(&id) = self.vocab.get(&symbols) {
                out.push(id);
                return;
            }
        }
        let mut parts: Vec<String> = symbols.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merges.get(&(w[0].clone(), w[1].clone())).map(|rank| (*rank, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && self.merges.get(&(parts[i].clone(), parts[i + 1].clone())) == Some(&rank) {
                    merged.push(format!("{}{}", parts[i], parts[i + 1]));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
        }
        for p in parts {
            match self.vocab.get(&p) {
                Some(&id) => out.push(id),
                None => out.extend(p.chars().map(|c| self.vocab[&c.to_string()])),
            }
        }
    }
}

fn find_split_regex(v: &Value) -> Option<String> {
    match v {
        Value::Object(map) => {
            if let Some(Value::String(r)) = map.get("Regex") {
                return Some(r.clone());
            }
            if map.get("type").and_then(Value::as_str) == Some("ByteLevel")
                && map.get("use_regex").and_then(Value::as_bool).unwrap_or(true)
            {
                return Some(GPT2_PATTERN.to_string());
            }
            map.values().find_map(find_split_regex)
        }
        Value::Array(items) => items.iter().find_map(find_split_regex),
        _ => None,
    }
}

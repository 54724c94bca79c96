// SPDX-License-Identifier: MIT OR Apache-2.0

//! Haystack contexts with a needle inserted at a controlled depth.
//!
//! Construction happens in token space. Filler documents are tokenized once;
//! a sample takes `target_length - needle_length` filler tokens and splices
//! the needle tokens in at a sentence or document boundary near the
//! requested depth. The needle span therefore equals the needle's own
//! tokenization exactly, and the marker and no-marker variants of a sample
//! differ by exactly the one marker token.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::Tokenizer;

/// Relative window around the depth target searched for a boundary.
pub const BOUNDARY_WINDOW: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleSpec {
    pub id: String,
    #[serde(rename = "needle")]
    pub needle_text: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub answer_text: String,
    pub factual: bool,
    /// A deliberately wrong answer for the incorrect-history control.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrong_answer: Option<String>,
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl NeedleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidNeedle {
                id: self.id.clone(),
                reason: reason.into(),
            })
        };
        if self.id.is_empty() {
            return bad("empty id");
        }
        if self.question.trim().is_empty() {
            return bad("empty question");
        }
        if self.answer_text.trim().is_empty() {
            return bad("empty answer");
        }
        if !normalize(&self.needle_text).contains(&normalize(&self.answer_text)) {
            return bad("answer is not part of the needle");
        }
        Ok(())
    }
}

/// Read needles from a JSON-lines file. Blank lines are skipped.
pub fn load_needles(path: &Path) -> Result<Vec<NeedleSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: Vec<NeedleSpec> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let needle: NeedleSpec = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        needle.validate().map_err(|e| parse_err(e.to_string()))?;
        if out.iter().any(|n| n.id == needle.id) {
            return Err(parse_err(format!("duplicate needle id {}", needle.id)));
        }
        out.push(needle);
    }
    Ok(out)
}

/// Filler documents, tokenized, with the offsets at which sentences end.
#[derive(Debug, Clone)]
pub struct TokenizedCorpus {
    docs: Vec<Vec<u32>>,
    boundaries: Vec<Vec<usize>>,
    separator: Vec<u32>,
}

impl TokenizedCorpus {
    pub fn from_documents(tokenizer: &Tokenizer, documents: &[String]) -> Self {
        let ends: Vec<bool> = (0..tokenizer.vocab_size() as u32)
            .map(|id| {
                let piece = tokenizer.decode(&[id]);
                let t = piece.trim_end_matches([' ', '"', '\'', ')']);
                t.ends_with(['.', '!', '?']) || piece.ends_with('\n')
            })
            .collect();
        let docs: Vec<Vec<u32>> = documents
            .par_iter()
            .map(|d| tokenizer.encode_plain(d.trim()))
            .filter(|d| !d.is_empty())
            .collect();
        let boundaries = docs
            .iter()
            .map(|d| {
                d.iter()
                    .enumerate()
                    .filter(|(_, id)| ends.get(**id as usize).copied().unwrap_or(false))
                    .map(|(i, _)| i + 1)
                    .collect()
            })
            .collect();
        Self {
            docs,
            boundaries,
            separator: tokenizer.encode_plain("\n\n"),
        }
    }

    /// Load every `*.txt` file of a directory, in file-name order.
    pub fn load_dir(tokenizer: &Tokenizer, dir: &Path) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "txt") {
                paths.push(path);
            }
        }
        paths.sort();
        let docs = paths
            .iter()
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_documents(tokenizer, &docs))
    }

    pub fn n_documents(&self) -> usize {
        self.docs.len()
    }

    /// Filler tokens available when every document is used once.
    pub fn total_tokens(&self) -> usize {
        let body: usize = self.docs.iter().map(Vec::len).sum();
        body + self.separator.len() * self.docs.len().saturating_sub(1)
    }

    /// `len` filler tokens starting at document `start`, plus the splice
    /// boundaries within them (sorted, including 0 and `len`).
    fn filler(&self, start: usize, len: usize) -> Result<(Vec<u32>, Vec<usize>)> {
        let mut tokens = Vec::with_capacity(len + 64);
        let mut cuts = vec![0];
        for k in 0..self.docs.len() {
            if tokens.len() >= len {
                break;
            }
            let i = (start + k) % self.docs.len();
            if !tokens.is_empty() {
                tokens.extend_from_slice(&self.separator);
            }
            let base = tokens.len();
            cuts.push(base);
            cuts.extend(self.boundaries[i].iter().map(|b| base + b));
            tokens.extend_from_slice(&self.docs[i]);
        }
        if tokens.len() < len {
            return Err(Error::CorpusExhausted {
                needed: len,
                available: tokens.len(),
            });
        }
        tokens.truncate(len);
        cuts.retain(|&c| c <= len);
        cuts.push(len);
        cuts.sort_unstable();
        cuts.dedup();
        Ok((tokens, cuts))
    }
}

/// Alias matching the corpus role in dataset construction.
pub type CorpusSource = TokenizedCorpus;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HaystackSample {
    pub id: String,
    pub needle: NeedleSpec,
    pub context: Vec<u32>,
    pub needle_span: Range<usize>,
    pub depth: f64,
    pub target_length: usize,
    pub with_bot_marker: bool,
    pub seed: u64,
}

impl HaystackSample {
    /// Needle start over target length.
    pub fn actual_depth(&self) -> f64 {
        self.needle_span.start as f64 / self.target_length as f64
    }

    /// Needle start when the marker is not counted.
    pub fn needle_text_start(&self) -> usize {
        self.needle_span.start + usize::from(self.with_bot_marker)
    }
}

/// The tokens inside the needle span, marker included.
pub fn needle_span_tokens(sample: &HaystackSample) -> &[u32] {
    &sample.context[sample.needle_span.clone()]
}

/// Builds samples from one corpus and tokenizer.
#[derive(Debug, Clone, Copy)]
pub struct HaystackBuilder<'a> {
    pub corpus: &'a TokenizedCorpus,
    pub tokenizer: &'a Tokenizer,
    pub marker_token: u32,
}

impl<'a> HaystackBuilder<'a> {
    pub fn new(corpus: &'a TokenizedCorpus, tokenizer: &'a Tokenizer, marker_token: u32) -> Self {
        Self {
            corpus,
            tokenizer,
            marker_token,
        }
    }

    pub fn build_sample(
        &self,
        needle: &NeedleSpec,
        target_length: usize,
        depth: f64,
        with_bot_marker: bool,
        seed: u64,
    ) -> Result<HaystackSample> {
        if !(0.0..=1.0).contains(&depth) {
            return Err(Error::InvalidDepth(depth));
        }
        let needle_tokens = self.tokenizer.encode_plain(&needle.needle_text);
        if needle_tokens.is_empty() || needle_tokens.len() > target_length {
            return Err(Error::NeedleTooLong {
                id: needle.id.clone(),
                needle_tokens: needle_tokens.len(),
                target_length,
            });
        }
        if self.corpus.n_documents() == 0 {
            return Err(Error::CorpusExhausted {
                needed: target_length - needle_tokens.len(),
                available: 0,
            });
        }
        let fill = target_length - needle_tokens.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first_doc = rng.gen_range(0..self.corpus.n_documents());
        let (filler, cuts) = self.corpus.filler(first_doc, fill)?;

        let target = ((depth * target_length as f64).round() as usize).min(fill);
        let window = (BOUNDARY_WINDOW * target_length as f64).floor() as usize;
        let at = nearest_cut(&cuts, target, window).unwrap_or(target);

        let marker_len = usize::from(with_bot_marker);
        let mut context = Vec::with_capacity(filler.len() + needle_tokens.len() + marker_len);
        context.extend_from_slice(&filler[..at]);
        if with_bot_marker {
            context.push(self.marker_token);
        }
        context.extend_from_slice(&needle_tokens);
        context.extend_from_slice(&filler[at..]);
        Ok(HaystackSample {
            id: needle.id.clone(),
            needle: needle.clone(),
            context,
            needle_span: at..at + marker_len + needle_tokens.len(),
            depth,
            target_length,
            with_bot_marker,
            seed,
        })
    }

    /// Every (needle, length, depth, repetition) cell, in that nesting order.
    /// Filler depends on needle, length and repetition but not on depth or
    /// the marker flag, so those variants share their haystack.
    pub fn generate_dataset(
        &self,
        needles: &[NeedleSpec],
        lengths: &[usize],
        depths: &[f64],
        per_cell: usize,
        with_bot_marker: bool,
        seed: u64,
    ) -> Result<Vec<HaystackSample>> {
        let mut cells = Vec::with_capacity(needles.len() * lengths.len() * depths.len() * per_cell);
        for (ni, needle) in needles.iter().enumerate() {
            for (li, &len) in lengths.iter().enumerate() {
                for &depth in depths {
                    for rep in 0..per_cell {
                        cells.push((ni, needle, li, len, depth, rep));
                    }
                }
            }
        }
        cells
            .par_iter()
            .map(|&(ni, needle, li, len, depth, rep)| {
                let cell_seed = mix_seed(seed, &[ni as u64, li as u64, rep as u64]);
                let mut s = self.build_sample(needle, len, depth, with_bot_marker, cell_seed)?;
                s.id = format!("{}-L{}-D{:.3}-R{}", needle.id, len, depth, rep);
                Ok(s)
            })
            .collect()
    }
}

fn nearest_cut(cuts: &[usize], target: usize, window: usize) -> Option<usize> {
    cuts.iter()
        .copied()
        .filter(|c| c.abs_diff(target) <= window)
        .min_by_key(|c| (c.abs_diff(target), *c))
}

/// Derive an independent seed from a base seed and cell coordinates.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(base), |acc, p| splitmix(acc ^ splitmix(*p)))
}

/// One manifest line per sample: everything but the context tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub needle_id: String,
    pub target_length: usize,
    pub context_length: usize,
    pub depth: f64,
    pub actual_depth: f64,
    pub needle_start: usize,
    pub needle_end: usize,
    pub with_bot_marker: bool,
    pub seed: u64,
}

impl From<&HaystackSample> for ManifestEntry {
    fn from(s: &HaystackSample) -> Self {
        Self {
            id: s.id.clone(),
            needle_id: s.needle.id.clone(),
            target_length: s.target_length,
            context_length: s.context.len(),
            depth: s.depth,
            actual_depth: s.actual_depth(),
            needle_start: s.needle_span.start,
            needle_end: s.needle_span.end,
            with_bot_marker: s.with_bot_marker,
            seed: s.seed,
        }
    }
}

pub fn write_manifest<W: Write>(samples: &[HaystackSample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, &ManifestEntry::from(s))?;
        out.write_all(b"\n").map_err(|e| Error::io("<manifest>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn setup() -> (Tokenizer, TokenizedCorpus, u32) {
        let tok = fixtures::tiny_tokenizer();
        let corpus = TokenizedCorpus::from_documents(&tok, &fixtures::tiny_corpus());
        let marker = tok.token_id("<|begin_of_text|>").unwrap();
        (tok, corpus, marker)
    }

    #[test]
    fn span_matches_needle_tokens() {
        let (tok, corpus, marker) = setup();
        let b = HaystackBuilder::new(&corpus, &tok, marker);
        let needle = &fixtures::sample_needles()[1];
        let s = b.build_sample(needle, 400, 0.5, false, 3).unwrap();
        assert_eq!(needle_span_tokens(&s), tok.encode_plain(&needle.needle_text).as_slice());
        assert_eq!(s.context.len(), 400);
        assert!((s.actual_depth() - 0.5).abs() <= 0.05);
    }

    #[test]
    fn depth_zero_starts_at_zero() {
        let (tok, corpus, marker) = setup();
        let b = HaystackBuilder::new(&corpus, &tok, marker);
        let s = b
            .build_sample(&fixtures::sample_needles()[0], 300, 0.0, true, 1)
            .unwrap();
        assert_eq!(s.needle_span.start, 0);
        assert_eq!(s.context[0], marker);
    }

    #[test]
    fn marker_adds_one_token() {
        let (tok, corpus, marker) = setup();
        let b = HaystackBuilder::new(&corpus, &tok, marker);
        let n = &fixtures::sample_needles()[2];
        let plain = b.build_sample(n, 500, 0.3, false, 9).unwrap();
        let marked = b.build_sample(n, 500, 0.3, true, 9).unwrap();
        assert_eq!(marked.context.len(), plain.context.len() + 1);
        let mut removed = marked.context.clone();
        removed.remove(marked.needle_span.start);
        assert_eq!(removed, plain.context);
    }

    #[test]
    fn errors_are_reported() {
        let (tok, corpus, marker) = setup();
        let b = HaystackBuilder::new(&corpus, &tok, marker);
        let n = &fixtures::sample_needles()[0];
        assert!(matches!(
            b.build_sample(n, 5, 0.5, false, 0),
            Err(Error::NeedleTooLong { .. })
        ));
        assert!(matches!(
            b.build_sample(n, 1_000_000, 0.5, false, 0),
            Err(Error::CorpusExhausted { .. })
        ));
        assert!(matches!(
            b.build_sample(n, 300, 1.5, false, 0),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn dataset_size_is_the_grid_product() {
        let (tok, corpus, marker) = setup();
        let b = HaystackBuilder::new(&corpus, &tok, marker);
        let needles = fixtures::sample_needles();
        let ds = b
            .generate_dataset(&needles[..3], &[200, 300], &[0.0, 0.5, 1.0], 2, false, 5)
            .unwrap();
        assert_eq!(ds.len(), 3 * 2 * 3 * 2);
        let single = b.generate_dataset(&needles[..1], &[200], &[0.5], 1, false, 5).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn needle_file_rejects_missing_answer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"needle\":\"The sky is green.\",\"question\":\"What color?\",\"answer\":\"green\",\"factual\":false}\n\n{\"id\":\"b\",\"needle\":\"x\",\"question\":\"q\",\"answer\":\"y\",\"factual\":true}\n",
        )
        .unwrap();
        match load_needles(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-contained test material: a small BPE tokenizer trained on a
//! synthetic corpus, randomly initialized tiny models, illustrative needles
//! and multiple-choice items, and a ready-to-run experiment workspace.
//!
//! Everything here is deterministic. The needle and MCQ texts are
//! illustrative placeholders, not benchmark data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::downstream::{Choice, MCQItem};
use crate::error::{Error, Result};
use crate::haystack::NeedleSpec;
use crate::model::container::{serialize_tensors, StoreDtype};
use crate::model::{LayerWeights, Model, ModelConfig, ModelWeights};
use crate::tokenizer::{byte_alphabet, Tokenizer, LLAMA3_PATTERN};

/// Special tokens of Llama 3 style chat templates.
pub const SPECIAL_TOKENS: [&str; 5] = [
    "<|begin_of_text|>",
    "<|end_of_text|>",
    "<|start_header_id|>",
    "<|end_header_id|>",
    "<|eot_id|>",
];

/// Words that must encode to a single token in the tiny tokenizer.
pub const FORCED_WORDS: [&str; 8] = ["yes", "no", "Yes", "No", " yes", " no", " Yes", " No"];

/// Architecture of a randomly initialized test model.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for TinyModelSpec {
    /// About 2.5M parameters with the tiny tokenizer.
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 4,
            d_model: 192,
            d_head: 24,
            d_ff: 768,
            max_context: 4096,
            rope_base: 10_000.0,
            seed: 7,
        }
    }
}

impl TinyModelSpec {
    /// A much smaller variant for unit tests.
    pub fn micro() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 32,
            d_head: 8,
            d_ff: 64,
            max_context: 1024,
            rope_base: 10_000.0,
            seed: 11,
        }
    }

    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_model: self.d_model,
            d_head: self.d_head,
            d_ff: self.d_ff,
            vocab_size,
            max_context: self.max_context,
            rope_base: self.rope_base,
            norm_epsilon: 1e-5,
            tie_embeddings: false,
            rope_scaling: None,
        }
    }

    /// Uniform random weights scaled by fan-in; norms start at one.
    pub fn random_model(&self, vocab_size: usize) -> Model {
        let cfg = self.config(vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut mat = |rows: usize, cols: usize| -> Vec<f32> {
            let a = (3.0 / cols as f32).sqrt();
            (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect()
        };
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: mat(cfg.q_dim(), d),
                wk: mat(cfg.kv_dim(), d),
                wv: mat(cfg.kv_dim(), d),
                wo: mat(d, cfg.q_dim()),
                mlp_norm: vec![1.0; d],
                w_gate: mat(cfg.d_ff, d),
                w_up: mat(cfg.d_ff, d),
                w_down: mat(d, cfg.d_ff),
            })
            .collect();
        let embed = mat(vocab_size, d);
        let lm_head = Some(mat(vocab_size, d));
        Model::new(
            cfg,
            ModelWeights {
                embed,
                layers,
                final_norm: vec![1.0; d],
                lm_head,
            },
        )
        .expect("fixture model is consistent")
    }
}

/// Train byte-level BPE merges by pair frequency. `forced` words are built
/// first so each encodes to one token. Merges never join punctuation, so
/// quoted words keep their bare-word token.
pub fn train_bpe(texts: &[&str], n_merges: usize, forced: &[&str]) -> Vec<(String, String)> {
    let alphabet = byte_alphabet();
    let to_symbols = |s: &str| -> Vec<String> { s.bytes().map(|b| alphabet[b as usize].to_string()).collect() };
    let re = fancy_regex::Regex::new(LLAMA3_PATTERN).expect("valid pattern");
    let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    for text in texts {
        for m in re.find_iter(text).flatten() {
            *words.entry(to_symbols(m.as_str())).or_default() += 1;
        }
    }

    let mut merges: Vec<(String, String)> = Vec::new();
    let space = alphabet[b' ' as usize].to_string();
    for word in forced {
        let (lead, body) = match word.strip_prefix(' ') {
            Some(rest) => (Some(space.clone()), rest),
            None => (None, *word),
        };
        let symbols = to_symbols(body);
        let mut acc = symbols[0].clone();
        for s in &symbols[1..] {
            let pair = (acc.clone(), s.clone());
            if !merges.contains(&pair) {
                merges.push(pair);
            }
            acc.push_str(s);
        }
        if let Some(lead) = lead {
            let pair = (lead, acc);
            if !merges.contains(&pair) {
                merges.push(pair);
            }
        }
    }
    for pair in merges.clone() {
        words = apply_merge(words, &pair);
    }

    let char_to_byte: BTreeMap<char, u8> = alphabet.iter().enumerate().map(|(b, c)| (*c, b as u8)).collect();
    let wordlike = |s: &str, allow_lead: bool| {
        s.chars().enumerate().all(|(i, c)| {
            let b = char_to_byte[&c];
            b.is_ascii_alphanumeric() || (allow_lead && i == 0 && b == b' ')
        })
    };

    while merges.len() < n_merges {
        let mut counts: BTreeMap<(&String, &String), u64> = BTreeMap::new();
        for (w, n) in &words {
            for pair in w.windows(2) {
                if wordlike(&pair[0], true) && wordlike(&pair[1], false) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += n;
                }
            }
        }
        let mut best: Option<((&String, &String), u64)> = None;
        for (pair, n) in counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((pair, n));
            }
        }
        let Some(((a, b), n)) = best else { break };
        if n < 2 {
            break;
        }
        let pair = (a.clone(), b.clone());
        words = apply_merge(words, &pair);
        merges.push(pair);
    }
    merges
}

fn apply_merge(words: BTreeMap<Vec<String>, u64>, pair: &(String, String)) -> BTreeMap<Vec<String>, u64> {
    let mut out = BTreeMap::new();
    for (w, n) in words {
        let mut merged = Vec::with_capacity(w.len());
        let mut i = 0;
        while i < w.len() {
            if i + 1 < w.len() && w[i] == pair.0 && w[i + 1] == pair.1 {
                merged.push(format!("{}{}", w[i], w[i + 1]));
                i += 2;
            } else {
                merged.push(w[i].clone());
                i += 1;
            }
        }
        *out.entry(merged).or_default() += n;
    }
    out
}

const ADJECTIVES: [&str; 16] = [
    "quiet", "old", "bright", "narrow", "distant", "gentle", "heavy", "hollow", "silver", "rough", "warm", "pale",
    "steady", "crooked", "hidden", "busy",
];
const NOUNS: [&str; 20] = [
    "river", "mill", "lantern", "market", "bridge", "orchard", "harbor", "tower", "garden", "road", "forest",
    "village", "workshop", "library", "meadow", "station", "valley", "chapel", "ferry", "farm",
];
const VERBS: [&str; 12] = [
    "crosses",
    "faces",
    "shelters",
    "overlooks",
    "follows",
    "borders",
    "circles",
    "guards",
    "joins",
    "reaches",
    "hides",
    "warms",
];
const PLACES: [&str; 10] = [
    "the northern hills",
    "the coast",
    "the old town",
    "the southern plain",
    "the lake",
    "the county road",
    "the quarry",
    "the east gate",
    "the canal",
    "the square",
];
const CLOSERS: [&str; 6] = [
    "Travelers rarely stop there.",
    "Nobody remembers when it was built.",
    "In winter the paths freeze over.",
    "Children play there after school.",
    "The view changes with the seasons.",
    "Local records say little about it.",
];

/// Deterministic filler prose, one string per document.
pub fn synthetic_documents(n_docs: usize, sentences_per_doc: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |items: &[&'static str]| items[rng.gen_range(0..items.len())];
    (0..n_docs)
        .map(|_| {
            let mut sentences = Vec::with_capacity(sentences_per_doc);
            for _ in 0..sentences_per_doc {
                let s = if sentences.len() % 4 == 3 {
                    pick(&CLOSERS).to_string()
                } else {
                    format!(
                        "The {} {} {} the {} near {}.",
                        pick(&ADJECTIVES),
                        pick(&NOUNS),
                        pick(&VERBS),
                        pick(&NOUNS),
                        pick(&PLACES)
                    )
                };
                sentences.push(s);
            }
            sentences.join(" ")
        })
        .collect()
}

fn needle(id: &str, needle: &str, question: &str, answer: &str, factual: bool, wrong: &str) -> NeedleSpec {
    NeedleSpec {
        id: id.into(),
        needle_text: needle.into(),
        question: question.into(),
        answer_text: answer.into(),
        factual,
        wrong_answer: Some(wrong.into()),
    }
}

/// Illustrative needles: three for head detection, four for the uncertainty
/// training split and three held-out test needles.
pub fn sample_needles() -> Vec<NeedleSpec> {
    vec![
        needle(
            "d01",
            "The best thing to do in San Francisco is eat a sandwich and sit in Dolores Park on a sunny day.",
            "What is the best thing to do in San Francisco?",
            "eat a sandwich and sit in Dolores Park on a sunny day",
            false,
            "visit the bridge at night",
        ),
        needle(
            "d02",
            "The secret ingredient in the harbor soup is smoked saffron.",
            "What is the secret ingredient in the harbor soup?",
            "smoked saffron",
            false,
            "fresh basil",
        ),
        needle(
            "d03",
            "The chemical symbol for gold is Au.",
            "What is the chemical symbol for gold?",
            "Au",
            true,
            "Ag",
        ),
        needle(
            "u01",
            "The favorite color of the lighthouse keeper is teal.",
            "What is the favorite color of the lighthouse keeper?",
            "teal",
            false,
            "crimson",
        ),
        needle(
            "u02",
            "The password to the garden shed is marmalade.",
            "What is the password to the garden shed?",
            "marmalade",
            false,
            "butterscotch",
        ),
        needle(
            "u03",
            "Water boils at 100 degrees Celsius at sea level.",
            "At what temperature in Celsius does water boil at sea level?",
            "100 degrees",
            true,
            "80 degrees",
        ),
        needle(
            "u04",
            "The largest planet in the solar system is Jupiter.",
            "What is the largest planet in the solar system?",
            "Jupiter",
            true,
            "Saturn",
        ),
        needle(
            "t01",
            "The oldest clock in the museum was built by a baker named Tilda.",
            "Who built the oldest clock in the museum?",
            "a baker named Tilda",
            false,
            "a sailor named Oskar",
        ),
        needle(
            "t02",
            "The village choir rehearses every Thursday in the old barn.",
            "When does the village choir rehearse?",
            "every Thursday",
            false,
            "every Sunday",
        ),
        needle(
            "t03",
            "The Pacific is the largest ocean on Earth.",
            "What is the largest ocean on Earth?",
            "the Pacific",
            true,
            "the Atlantic",
        ),
    ]
}

const MCQ: [(&str, [&str; 4], usize); 20] = [
    (
        "How many legs does a spider have?",
        ["six", "eight", "ten", "twelve"],
        1,
    ),
    (
        "Which gas do plants absorb from the air?",
        ["oxygen", "nitrogen", "carbon dioxide", "helium"],
        2,
    ),
    (
        "What is the freezing point of water in Celsius?",
        ["0", "10", "32", "100"],
        0,
    ),
    (
        "Which planet is closest to the Sun?",
        ["Venus", "Earth", "Mars", "Mercury"],
        3,
    ),
    ("How many days are in a leap year?", ["364", "365", "366", "367"], 2),
    (
        "Which metal is liquid at room temperature?",
        ["mercury", "iron", "copper", "tin"],
        0,
    ),
    ("What is the square root of 81?", ["7", "8", "9", "10"], 2),
    (
        "Which ocean lies between Africa and Australia?",
        ["Atlantic", "Indian", "Arctic", "Southern"],
        1,
    ),
    ("What do bees produce?", ["silk", "wax and honey", "milk", "resin"], 1),
    (
        "Which organ pumps blood through the body?",
        ["lung", "liver", "heart", "kidney"],
        2,
    ),
    (
        "How many sides does a hexagon have?",
        ["five", "six", "seven", "eight"],
        1,
    ),
    (
        "Which is the largest mammal?",
        ["elephant", "blue whale", "giraffe", "orca"],
        1,
    ),
    ("What is 12 times 12?", ["124", "134", "144", "154"], 2),
    (
        "Which color is made by mixing blue and yellow?",
        ["green", "purple", "orange", "brown"],
        0,
    ),
    (
        "Which instrument measures temperature?",
        ["barometer", "thermometer", "compass", "ruler"],
        1,
    ),
    (
        "What is the capital of Japan?",
        ["Osaka", "Kyoto", "Tokyo", "Nagoya"],
        2,
    ),
    (
        "Which shape has three sides?",
        ["square", "triangle", "circle", "pentagon"],
        1,
    ),
    ("How many minutes are in an hour?", ["30", "60", "90", "100"], 1),
    (
        "Which animal is known for changing color?",
        ["chameleon", "rabbit", "horse", "owl"],
        0,
    ),
    (
        "What falls from clouds as liquid water?",
        ["snow", "hail", "rain", "fog"],
        2,
    ),
];

/// Twenty four-choice general knowledge items.
pub fn sample_mcq() -> Vec<MCQItem> {
    MCQ.iter()
        .enumerate()
        .map(|(i, (q, choices, gold))| MCQItem {
            id: format!("q{:02}", i + 1),
            question: q.to_string(),
            choices: choices
                .iter()
                .zip(["A", "B", "C", "D"])
                .map(|(text, label)| Choice {
                    label: label.into(),
                    text: text.to_string(),
                })
                .collect(),
            gold: ["A", "B", "C", "D"][*gold].into(),
        })
        .collect()
}

/// Filler documents used by the tiny workspace.
pub fn tiny_corpus() -> Vec<String> {
    synthetic_documents(24, 16, 42)
}

fn training_texts() -> Vec<String> {
    let mut texts = tiny_corpus();
    for n in sample_needles() {
        texts.push(n.needle_text.clone());
        texts.push(n.question.clone());
    }
    for item in sample_mcq() {
        texts.push(item.question.clone());
    }
    texts.push(crate::flip::DEFAULT_REEVALUATION_PROMPT.to_string());
    texts
}

/// The tiny tokenizer: 256 byte tokens, 320 merges, Llama 3 specials.
pub fn tiny_tokenizer() -> Tokenizer {
    static CACHE: OnceLock<Tokenizer> = OnceLock::new();
    CACHE
        .get_or_init(|| {
            let texts = training_texts();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let merges = train_bpe(&refs, 320, &FORCED_WORDS);
            Tokenizer::from_merges(&merges, &SPECIAL_TOKENS).expect("fixture tokenizer")
        })
        .clone()
}

/// The default tiny model over the tiny tokenizer's vocabulary.
pub fn tiny_model() -> Model {
    TinyModelSpec::default().random_model(tiny_tokenizer().vocab_size())
}

/// Files written by [`write_tiny_workspace`].
#[derive(Debug, Clone)]
pub struct TinyWorkspace {
    pub root: PathBuf,
    pub config: PathBuf,
    pub weights: PathBuf,
    pub tokenizer: PathBuf,
}

/// Write a complete experiment workspace (model, tokenizer, corpus, needles,
/// MCQ items and a matching config) under `root`.
pub fn write_tiny_workspace(root: &Path, spec: &TinyModelSpec) -> Result<TinyWorkspace> {
    let write = |path: &Path, bytes: &[u8]| -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    };

    let tokenizer = tiny_tokenizer();
    let tokenizer_path = root.join("tokenizer.json");
    write(&tokenizer_path, tokenizer.to_json().as_bytes())?;

    let model = spec.random_model(tokenizer.vocab_size());
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), model.config().to_hf_json());
    let weights_path = root.join("model.safetensors");
    write(
        &weights_path,
        &serialize_tensors(&model.to_tensors(), &meta, StoreDtype::F32)?,
    )?;

    for (i, doc) in tiny_corpus().iter().enumerate() {
        write(&root.join("corpus").join(format!("doc{i:03}.txt")), doc.as_bytes())?;
    }
    let mut needles = String::new();
    for n in sample_needles() {
        needles.push_str(&serde_json::to_string(&n)?);
        needles.push('\n');
    }
    write(&root.join("needles.jsonl"), needles.as_bytes())?;
    let mut mcq = String::new();
    for item in sample_mcq() {
        mcq.push_str(&serde_json::to_string(&item)?);
        mcq.push('\n');
    }
    write(&root.join("mcq.jsonl"), mcq.as_bytes())?;

    let config = crate::experiment::ExperimentConfig::tiny();
    let config_path = root.join("experiment.toml");
    write(&config_path, config.to_toml()?.as_bytes())?;

    Ok(TinyWorkspace {
        root: root.to_path_buf(),
        config: config_path,
        weights: weights_path,
        tokenizer: tokenizer_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_words_are_single_tokens() {
        let tok = tiny_tokenizer();
        for w in FORCED_WORDS {
            assert!(tok.token_id(w).is_some(), "{w:?}");
        }
        let quoted = tok.encode_plain("'no'");
        assert!(quoted.contains(&tok.token_id("no").unwrap()));
    }

    #[test]
    fn corpus_is_deterministic() {
        assert_eq!(synthetic_documents(3, 5, 1), synthetic_documents(3, 5, 1));
        assert_ne!(synthetic_documents(3, 5, 1), synthetic_documents(3, 5, 2));
    }

    #[test]
    fn needles_contain_their_answers() {
        for n in sample_needles() {
            n.validate().unwrap();
        }
    }

    #[test]
    fn default_spec_is_a_few_million_parameters() {
        let vocab = tiny_tokenizer().vocab_size();
        let cfg = TinyModelSpec::default().config(vocab);
        let per_layer = 2 * cfg.d_model * cfg.q_dim() + 2 * cfg.d_model * cfg.kv_dim() + 3 * cfg.d_model * cfg.d_ff;
        let total = cfg.n_layers * per_layer + 2 * vocab * cfg.d_model;
        assert!((1_000_000..10_000_000).contains(&total), "{total}");
    }
}

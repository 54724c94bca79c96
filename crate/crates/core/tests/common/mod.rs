// SPDX-License-Identifier: MIT OR Apache-2.0

//! Helpers shared by the integration tests and the acceptance target.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use headprobe::backend::{HeadTarget, ScriptContext, ScriptedBackend, ScriptedTurn};
use headprobe::experiment::{Experiment, ExperimentConfig, SplitConfig};
use headprobe::fixtures::{sample_mcq, sample_needles, tiny_corpus, tiny_tokenizer, TinyModelSpec};
use headprobe::metrics::{recall_score, NeedleWindow};
use headprobe::probe::{AttendedSource, TraceEntry};
use headprobe::{AttentionTrace, HeadId, HeadShape, Model};
use rand::Rng;

pub fn micro_model() -> Arc<Model> {
    Arc::new(TinyModelSpec::micro().random_model(tiny_tokenizer().vocab_size()))
}

pub fn tiny_model() -> Arc<Model> {
    Arc::new(TinyModelSpec::default().random_model(tiny_tokenizer().vocab_size()))
}

/// Random token ids below `vocab`, avoiding the special tokens at the top.
pub fn random_prompt(rng: &mut impl Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32 - 8)).collect()
}

/// A synthetic retrieval setting: a context, a needle window inside it, a
/// generated continuation and a consistent argmax trace.
#[derive(Debug, Clone)]
pub struct Triple {
    pub context: Vec<u32>,
    pub window: NeedleWindow,
    pub generated: Vec<u32>,
    pub trace: AttentionTrace,
}

/// Tokens come from a tiny vocabulary so that collisions are frequent.
pub fn random_triple(rng: &mut impl Rng, shape: HeadShape, max_steps: usize) -> Triple {
    let vocab = 6u32;
    let ctx_len = rng.gen_range(3..16);
    let context: Vec<u32> = (0..ctx_len).map(|_| rng.gen_range(0..vocab)).collect();
    let start = rng.gen_range(0..ctx_len);
    let len = rng.gen_range(1..=ctx_len - start);
    let window = NeedleWindow {
        start,
        tokens: context[start..start + len].to_vec(),
    };
    let steps = rng.gen_range(0..=max_steps);
    let generated: Vec<u32> = (0..steps).map(|_| rng.gen_range(0..vocab)).collect();
    let turn = rng.gen_range(0..2);
    let mut trace = AttentionTrace::new(shape);
    let mut visible = context.clone();
    for (step, &g) in generated.iter().enumerate() {
        let query_pos = ctx_len - 1 + step;
        for h in shape.heads() {
            let pos = rng.gen_range(0..=query_pos);
            let runners_up = (0..rng.gen_range(0..3))
                .map(|_| {
                    let p = rng.gen_range(0..=query_pos);
                    AttendedSource {
                        pos: p,
                        token: visible[p],
                        weight: 0.1,
                    }
                })
                .collect();
            trace.push(TraceEntry {
                step,
                layer: h.layer,
                head: h.head,
                argmax_pos: pos,
                argmax_token: visible[pos],
                argmax_weight: 0.5,
                turn,
                query_pos,
                runners_up,
            });
        }
        visible.push(g);
    }
    Triple {
        context,
        window,
        generated,
        trace,
    }
}

/// Retrieval score by enumerating, for every head, every needle position
/// and every step.
pub fn brute_retrieval(t: &Triple) -> Vec<f64> {
    let shape = t.trace.shape;
    let needle_steps: Vec<usize> = (0..t.generated.len())
        .filter(|&s| t.window.tokens.iter().any(|&n| n == t.generated[s]))
        .collect();
    shape
        .heads()
        .map(|h| {
            if needle_steps.is_empty() {
                return 0.0;
            }
            let mut hits = 0;
            for &s in &needle_steps {
                let e = t
                    .trace
                    .entries()
                    .iter()
                    .find(|e| e.step == s && e.head_id() == h)
                    .expect("entry per step and head");
                for j in 0..t.window.tokens.len() {
                    let pos = t.window.start + j;
                    if e.argmax_pos == pos && t.context[pos] == t.generated[s] {
                        hits += 1;
                    }
                }
            }
            hits as f64 / needle_steps.len() as f64
        })
        .collect()
}

/// Activation indicator per head: any attended token of the turn lies in
/// the answer set.
pub fn brute_activation(trace: &AttentionTrace, answer: &BTreeSet<u32>, turn: usize) -> Vec<bool> {
    trace
        .shape
        .heads()
        .map(|h| {
            let mut g = false;
            for e in trace.entries() {
                if e.head_id() != h || e.turn != turn {
                    continue;
                }
                for a in answer {
                    if e.argmax_token == *a || e.runners_up.iter().any(|r| r.token == *a) {
                        g = true;
                    }
                }
            }
            g
        })
        .collect()
}

/// Corpus, needles and MCQ files for a config under `root`.
pub fn write_data(root: &Path) -> ExperimentConfig {
    let corpus = root.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for (i, d) in tiny_corpus().iter().enumerate() {
        std::fs::write(corpus.join(format!("doc{i:03}.txt")), d).unwrap();
    }
    let needles: String = sample_needles()
        .iter()
        .map(|n| serde_json::to_string(n).unwrap() + "\n")
        .collect();
    std::fs::write(root.join("needles.jsonl"), needles).unwrap();
    let mcq: String = sample_mcq()
        .iter()
        .map(|n| serde_json::to_string(n).unwrap() + "\n")
        .collect();
    std::fs::write(root.join("mcq.jsonl"), mcq).unwrap();
    let mut cfg = ExperimentConfig::tiny();
    cfg.output_dir = root.join("out");
    cfg.threads = 2;
    cfg.resolve_paths(root);
    cfg
}

pub fn split(needles: &[&str], lengths: &[usize], depths: &[f64], per_cell: usize, seed: u64) -> SplitConfig {
    SplitConfig {
        needles: needles.iter().map(|s| s.to_string()).collect(),
        lengths: lengths.to_vec(),
        depths: depths.to_vec(),
        per_cell,
        seed,
    }
}

/// Heads that attend "no" whenever the scripted model flips.
pub const FLIP_HEADS: [HeadId; 2] = [HeadId::new(11, 23), HeadId::new(17, 25)];
/// Attends "yes" when the answer is kept.
pub const KEEP_HEAD: HeadId = HeadId::new(3, 4);
/// Attends "no" when the answer is kept.
pub const DECOY_HEAD: HeadId = HeadId::new(20, 1);

/// The question and everything after it, i.e. the part of the history that
/// is not haystack.
fn after_question<'a>(text: &'a str, question: &str) -> Option<&'a str> {
    text.rfind(question).map(|i| &text[i + question.len()..])
}

/// A 32x32 scripted model. The first turn repeats the needle answer with
/// [`FLIP_HEADS`] copying from the earliest matching position. On
/// re-evaluation it flips to "no" for needles in `flippers` with
/// [`FLIP_HEADS`] attending "no", unless one of those heads is masked, in
/// which case it keeps "yes". Otherwise it keeps "yes" with [`KEEP_HEAD`]
/// on "yes" and [`DECOY_HEAD`] on "no". A first answer below 0.9 recall
/// is rejected with "no", or "yes" when
/// `yes_bias_under_mask` is set and any head is masked.
pub fn scripted_backend(flippers: &[&str], yes_bias_under_mask: bool) -> ScriptedBackend {
    let flippers: BTreeSet<String> = flippers.iter().map(|s| s.to_string()).collect();
    let needles = sample_needles();
    ScriptedBackend::new(
        tiny_tokenizer(),
        HeadShape::new(32, 32),
        move |ctx: &ScriptContext<'_>| {
            let Some((needle, tail)) = needles
                .iter()
                .find_map(|n| after_question(ctx.text, &n.question).map(|t| (n, t)))
            else {
                return ScriptedTurn::say("I do not know.");
            };
            if ctx.turn == 0 {
                return FLIP_HEADS
                    .iter()
                    .fold(ScriptedTurn::say(needle.answer_text.clone()), |t, h| {
                        t.attending(*h, HeadTarget::CopyEmitted)
                    });
            }
            let no = HeadTarget::Text("no".into());
            let yes = HeadTarget::Text("yes".into());
            let masked = |h: HeadId| ctx.mask.is_some_and(|m| m.masks(h, ctx.turn));
            let answered_right = recall_score(tail, &needle.answer_text).recall >= 0.9;
            if !answered_right {
                let any_mask = ctx.mask.is_some_and(|m| m.active_in(ctx.turn));
                return if yes_bias_under_mask && any_mask {
                    ScriptedTurn::say("yes")
                } else {
                    ScriptedTurn::say("no").attending(DECOY_HEAD, no)
                };
            }
            if flippers.contains(&needle.id) && !FLIP_HEADS.iter().any(|h| masked(*h)) {
                FLIP_HEADS
                    .iter()
                    .fold(ScriptedTurn::say("no"), |t, h| t.attending(*h, no.clone()))
            } else {
                ScriptedTurn::say("yes")
                    .attending(KEEP_HEAD, yes)
                    .attending(DECOY_HEAD, no)
            }
        },
    )
}

pub fn scripted_experiment(cfg: ExperimentConfig, backend: ScriptedBackend) -> Experiment {
    Experiment::with_backend(cfg, Arc::new(backend)).expect("scripted experiment")
}

/// Every regular file under `dir` with its bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! KV cache and greedy decoding across conversation turns.

use std::sync::Arc;

use super::{argmax_token, Model};
use crate::error::{Error, Result};
use crate::probe::{AttentionProbe, AttentionTrace, MaskPlan, TraceRecorder};

/// Cached keys and values for every processed position, plus the token and
/// turn index of each position.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub(super) keys: Vec<Vec<f32>>,
    pub(super) values: Vec<Vec<f32>>,
    pub(super) tokens: Vec<u32>,
    pub(super) turns: Vec<usize>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn turns(&self) -> &[usize] {
        &self.turns
    }

    pub(super) fn ensure_layers(&mut self, n_layers: usize) {
        if self.keys.len() < n_layers {
            self.keys.resize_with(n_layers, Vec::new);
            self.values.resize_with(n_layers, Vec::new);
        }
    }
}

/// Output of one greedy decoding call.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub trace: AttentionTrace,
    /// The stop token that ended decoding, if any. It is not part of `tokens`.
    pub stop_token: Option<u32>,
}

/// A multi-turn exchange with one model. Tokens appended with [`push`]
/// are processed lazily, on the next call to [`generate`].
///
/// [`push`]: Conversation::push
/// [`generate`]: Conversation::generate
#[derive(Debug, Clone)]
pub struct Conversation {
    model: Arc<Model>,
    cache: KvCache,
    pending: Vec<(u32, usize)>,
}

impl Conversation {
    pub fn new(model: Arc<Model>) -> Self {
        Self {
            model,
            cache: KvCache::new(),
            pending: Vec::new(),
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    /// Total tokens in the conversation, processed or not.
    pub fn len(&self) -> usize {
        self.cache.len() + self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.cache.tokens.clone();
        t.extend(self.pending.iter().map(|(tok, _)| *tok));
        t
    }

    /// First position tagged with `turn`.
    pub fn turn_start(&self, turn: usize) -> Option<usize> {
        self.cache
            .turns
            .iter()
            .copied()
            .chain(self.pending.iter().map(|(_, t)| *t))
            .position(|t| t == turn)
    }

    /// Append tokens to the history without decoding.
    pub fn push(&mut self, tokens: &[u32], turn: usize) {
        self.pending.extend(tokens.iter().map(|&t| (t, turn)));
    }

    /// Append `prompt` as part of `turn`, then decode greedily up to
    /// `max_new` tokens or until a token in `stop` is produced.
    ///
    /// Trace step `s` holds the attention of the query whose logits chose
    /// generated token `s`. Masks apply to every position tagged with a turn
    /// the plan's scope covers, prompt tokens included.
    pub fn generate(
        &mut self,
        prompt: &[u32],
        turn: usize,
        max_new: usize,
        probe: Option<&AttentionProbe>,
        mask: Option<&MaskPlan>,
        stop: &[u32],
    ) -> Result<Generation> {
        let model = Arc::clone(&self.model);
        let cfg = model.config();
        if let Some(plan) = mask {
            plan.validate(model.head_shape())?;
        }
        let needed = self.len() + prompt.len() + max_new;
        if needed > cfg.max_context {
            return Err(Error::ContextOverflow {
                needed,
                max: cfg.max_context,
            });
        }
        self.push(prompt, turn);

        let mut trace = AttentionTrace::new(model.head_shape());
        let mut out = Generation {
            tokens: Vec::new(),
            trace: AttentionTrace::new(model.head_shape()),
            stop_token: None,
        };
        if max_new == 0 {
            return Ok(out);
        }
        let Some(&(mut current, mut current_turn)) = self.pending.last() else {
            return Err(Error::EmptyPrompt);
        };
        let backlog: Vec<(u32, usize)> = self.pending.drain(..).collect();
        for &(tok, t) in &backlog[..backlog.len() - 1] {
            model.forward(&mut self.cache, tok, t, mask, None, false)?;
        }

        for step in 0..max_new {
            let logits = match probe {
                Some(p) => {
                    let mut rec = TraceRecorder {
                        trace: &mut trace,
                        step,
                        turn,
                        top_k: p.top_k,
                    };
                    model.forward(&mut self.cache, current, current_turn, mask, Some(&mut rec), true)?
                }
                None => model.forward(&mut self.cache, current, current_turn, mask, None, true)?,
            }
            .expect("logits requested");
            let next = argmax_token(&logits);
            if stop.contains(&next) {
                trace.truncate_steps(step);
                out.stop_token = Some(next);
                self.pending.push((next, turn));
                out.trace = trace;
                return Ok(out);
            }
            out.tokens.push(next);
            current = next;
            current_turn = turn;
        }
        self.pending.push((current, current_turn));
        out.trace = trace;
        Ok(out)
    }
}

/// Single-turn greedy decoding from a fresh cache.
pub fn generate(
    model: &Arc<Model>,
    prompt: &[u32],
    max_new: usize,
    probe: Option<&AttentionProbe>,
    mask: Option<&MaskPlan>,
    stop: &[u32],
) -> Result<Generation> {
    Conversation::new(Arc::clone(model)).generate(prompt, 0, max_new, probe, mask, stop)
}

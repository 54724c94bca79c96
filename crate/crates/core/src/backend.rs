// SPDX-License-Identifier: MIT OR Apache-2.0

//! Conversation backends: the real transformer runtime and a scripted stub.
//!
//! Experiment code talks to [`Backend`] and [`Session`] only, so the whole
//! pipeline runs unchanged against canned answers and hand-set attention.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Conversation, Model, ModelConfig};
use crate::probe::{AttentionProbe, AttentionTrace, HeadId, HeadShape, MaskPlan, TraceEntry};
use crate::tokenizer::Tokenizer;

/// Result of decoding one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub generated: Vec<u32>,
    pub text: String,
    pub trace: AttentionTrace,
    pub steps: usize,
    pub stop_token: Option<u32>,
}

/// One in-flight conversation with private cache and trace state.
pub trait Session: Send {
    /// Tokens in the conversation so far.
    fn position(&self) -> usize;

    /// Append tokens to the history without decoding.
    fn push(&mut self, tokens: &[u32], turn: usize);

    fn generate(
        &mut self,
        prompt: &[u32],
        turn: usize,
        max_new: usize,
        probe: Option<&AttentionProbe>,
        mask: Option<&MaskPlan>,
        stop: &[u32],
    ) -> Result<DecodeResult>;

    /// An independent copy sharing nothing mutable with `self`.
    fn fork(&self) -> Box<dyn Session>;
}

pub trait Backend: Send + Sync {
    fn tokenizer(&self) -> &Tokenizer;
    fn head_shape(&self) -> HeadShape;
    fn max_context(&self) -> usize;
    fn session(&self) -> Box<dyn Session>;
}

/// Loaded weights and tokenizer. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct ModelBackend {
    model: Arc<Model>,
    tokenizer: Arc<Tokenizer>,
}

pub type ModelHandle = ModelBackend;

/// Load a checkpoint and its tokenizer.
pub fn load_model(weights_path: &Path, tokenizer_path: &Path) -> Result<ModelHandle> {
    let model = Model::load(weights_path)?;
    let tokenizer = Tokenizer::load(tokenizer_path)?;
    ModelBackend::new(model, tokenizer)
}

impl ModelBackend {
    pub fn new(model: Model, tokenizer: Tokenizer) -> Result<Self> {
        if tokenizer.vocab_size() > model.config().vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} ids but the model only {}",
                tokenizer.vocab_size(),
                model.config().vocab_size
            )));
        }
        Ok(Self {
            model: Arc::new(model),
            tokenizer: Arc::new(tokenizer),
        })
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        self.tokenizer.decode(ids)
    }

    /// Single-turn greedy decoding.
    pub fn generate(
        &self,
        prompt: &[u32],
        max_new: usize,
        probe: Option<&AttentionProbe>,
        mask: Option<&MaskPlan>,
        stop: &[u32],
    ) -> Result<DecodeResult> {
        self.session().generate(prompt, 0, max_new, probe, mask, stop)
    }
}

impl Backend for ModelBackend {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn head_shape(&self) -> HeadShape {
        self.model.head_shape()
    }

    fn max_context(&self) -> usize {
        self.model.config().max_context
    }

    fn session(&self) -> Box<dyn Session> {
        Box::new(ModelSession {
            conversation: Conversation::new(Arc::clone(&self.model)),
            tokenizer: Arc::clone(&self.tokenizer),
        })
    }
}

#[derive(Clone)]
struct ModelSession {
    conversation: Conversation,
    tokenizer: Arc<Tokenizer>,
}

impl Session for ModelSession {
    fn position(&self) -> usize {
        self.conversation.len()
    }

    fn push(&mut self, tokens: &[u32], turn: usize) {
        self.conversation.push(tokens, turn);
    }

    fn generate(
        &mut self,
        prompt: &[u32],
        turn: usize,
        max_new: usize,
        probe: Option<&AttentionProbe>,
        mask: Option<&MaskPlan>,
        stop: &[u32],
    ) -> Result<DecodeResult> {
        let g = self.conversation.generate(prompt, turn, max_new, probe, mask, stop)?;
        Ok(DecodeResult {
            text: self.tokenizer.decode(&g.tokens),
            steps: g.tokens.len(),
            generated: g.tokens,
            trace: g.trace,
            stop_token: g.stop_token,
        })
    }

    fn fork(&self) -> Box<dyn Session> {
        Box::new(self.clone())
    }
}

/// What a scripted head attends to at every step of a turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadTarget {
    /// The latest visible position holding this token.
    Token(u32),
    /// Like `Token`, for the single token `text` encodes to.
    Text(String),
    /// The first position before the turn holding the token being emitted.
    CopyEmitted,
    /// A fixed absolute position, clamped to the query position.
    Position(usize),
}

/// What a scripted backend sees when asked for a turn.
pub struct ScriptContext<'a> {
    pub turn: usize,
    pub history: &'a [u32],
    pub text: &'a str,
    pub mask: Option<&'a MaskPlan>,
    pub tokenizer: &'a Tokenizer,
}

/// A canned reply. Heads not listed attend to position 0.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTurn {
    pub text: String,
    pub heads: Vec<(HeadId, HeadTarget)>,
}

impl ScriptedTurn {
    pub fn say(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            heads: Vec::new(),
        }
    }

    pub fn attending(mut self, head: HeadId, target: HeadTarget) -> Self {
        self.heads.push((head, target));
        self
    }
}

type Responder = dyn Fn(&ScriptContext<'_>) -> ScriptedTurn + Send + Sync;

/// Deterministic stand-in for a model: replies come from a closure, and
/// attention traces follow the per-head targets the closure names.
#[derive(Clone)]
pub struct ScriptedBackend {
    tokenizer: Arc<Tokenizer>,
    shape: HeadShape,
    max_context: usize,
    responder: Arc<Responder>,
}

impl ScriptedBackend {
    pub fn new<F>(tokenizer: Tokenizer, shape: HeadShape, responder: F) -> Self
    where
        F: Fn(&ScriptContext<'_>) -> ScriptedTurn + Send + Sync + 'static,
    {
        Self {
            tokenizer: Arc::new(tokenizer),
            shape,
            max_context: 1 << 20,
            responder: Arc::new(responder),
        }
    }

    pub fn with_max_context(mut self, max_context: usize) -> Self {
        self.max_context = max_context;
        self
    }
}

impl Backend for ScriptedBackend {
    fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    fn head_shape(&self) -> HeadShape {
        self.shape
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn session(&self) -> Box<dyn Session> {
        Box::new(ScriptedSession {
            backend: self.clone(),
            history: Vec::new(),
        })
    }
}

#[derive(Clone)]
struct ScriptedSession {
    backend: ScriptedBackend,
    history: Vec<u32>,
}

impl Session for ScriptedSession {
    fn position(&self) -> usize {
        self.history.len()
    }

    fn push(&mut self, tokens: &[u32], _turn: usize) {
        self.history.extend_from_slice(tokens);
    }

    fn generate(
        &mut self,
        prompt: &[u32],
        turn: usize,
        max_new: usize,
        probe: Option<&AttentionProbe>,
        mask: Option<&MaskPlan>,
        stop: &[u32],
    ) -> Result<DecodeResult> {
        let b = &self.backend;
        let needed = self.history.len() + prompt.len() + max_new;
        if needed > b.max_context {
            return Err(Error::ContextOverflow {
                needed,
                max: b.max_context,
            });
        }
        if let Some(plan) = mask {
            plan.validate(b.shape)?;
        }
        self.history.extend_from_slice(prompt);
        let mut trace = AttentionTrace::new(b.shape);
        if max_new == 0 {
            return Ok(DecodeResult {
                generated: Vec::new(),
                text: String::new(),
                trace,
                steps: 0,
                stop_token: None,
            });
        }
        if self.history.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let text = b.tokenizer.decode(&self.history);
        let script = (b.responder)(&ScriptContext {
            turn,
            history: &self.history,
            text: &text,
            mask,
            tokenizer: &b.tokenizer,
        });
        let mut generated = b.tokenizer.encode_plain(&script.text);
        let mut stop_token = None;
        if let Some(i) = generated.iter().position(|t| stop.contains(t)) {
            stop_token = Some(generated[i]);
            generated.truncate(i);
        }
        generated.truncate(max_new);

        if probe.is_some() {
            let prior = self.history.len();
            let mut visible = self.history.clone();
            for (step, &emitted) in generated.iter().enumerate() {
                let query_pos = prior - 1 + step;
                for head in b.shape.heads() {
                    let target = script.heads.iter().find(|(h, _)| *h == head).map(|(_, t)| t);
                    let pos = resolve_target(target, &visible, query_pos, prior, emitted, &b.tokenizer);
                    trace.push(TraceEntry {
                        step,
                        layer: head.layer,
                        head: head.head,
                        argmax_pos: pos,
                        argmax_token: visible[pos],
                        argmax_weight: 1.0,
                        turn,
                        query_pos,
                        runners_up: Vec::new(),
                    });
                }
                visible.push(emitted);
            }
        }
        self.history.extend_from_slice(&generated);
        if let Some(s) = stop_token {
            self.history.push(s);
        }
        Ok(DecodeResult {
            text: b.tokenizer.decode(&generated),
            steps: generated.len(),
            generated,
            trace,
            stop_token,
        })
    }

    fn fork(&self) -> Box<dyn Session> {
        Box::new(self.clone())
    }
}

fn resolve_target(
    target: Option<&HeadTarget>,
    visible: &[u32],
    query_pos: usize,
    prior: usize,
    emitted: u32,
    tok: &Tokenizer,
) -> usize {
    let latest = |id: u32| (0..=query_pos).rev().find(|&p| visible[p] == id).unwrap_or(0);
    match target {
        None => 0,
        Some(HeadTarget::Token(id)) => latest(*id),
        Some(HeadTarget::Text(s)) => tok.token_id(s).map_or(0, latest),
        Some(HeadTarget::CopyEmitted) => (0..prior).find(|&p| visible[p] == emitted).unwrap_or(0),
        Some(HeadTarget::Position(p)) => (*p).min(query_pos),
    }
}

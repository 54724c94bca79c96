// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented Llama-style decoder runtime with per-head attention tracing
//! and masking, plus the experiment harness built on it: haystack datasets,
//! retrieval and activation metrics, the two-turn flip protocol, head-set
//! selection, and downstream multiple-choice evaluation.

pub mod backend;
pub mod chat;
pub mod downstream;
pub mod error;
pub mod experiment;
pub mod fixtures;
pub mod flip;
pub mod haystack;
pub mod head_sets;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod tokenizer;

pub use backend::{load_model, Backend, DecodeResult, ModelBackend, ModelHandle, ScriptedBackend, Session};
pub use chat::ChatTemplate;
pub use error::{Error, Result};
pub use flip::{parse_answer, AnswerClass, ConversationRecord};
pub use haystack::{HaystackBuilder, HaystackSample, NeedleSpec, TokenizedCorpus};
pub use head_sets::{CaseCountTable, HeadSet};
pub use metrics::{recall_score, retrieval_score, HeadScoreTable};
pub use model::{Model, ModelConfig};
pub use probe::{AttentionProbe, AttentionTrace, HeadId, HeadShape, MaskPlan, MaskScope};
pub use tokenizer::Tokenizer;

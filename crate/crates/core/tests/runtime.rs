// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::{micro_model, random_prompt};
use headprobe::backend::{Backend, ModelBackend};
use headprobe::fixtures::{tiny_tokenizer, TinyModelSpec};
use headprobe::model::container::{serialize_tensors, StoreDtype, TensorStore};
use headprobe::model::{generate, Conversation, KvCache, Model, ModelWeights};
use headprobe::{AttentionProbe, Error, HeadId, MaskPlan, MaskScope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prompt(seed: u64, len: usize) -> Vec<u32> {
    let vocab = tiny_tokenizer().vocab_size();
    random_prompt(&mut ChaCha8Rng::seed_from_u64(seed), vocab, len)
}

/// The same network with every key/value head repeated per query head.
fn dense_kv(model: &Model) -> Model {
    let c = model.config().clone();
    let group = c.group_size();
    let dh = c.d_head;
    let row = c.d_model;
    let repeat = |w: &[f32]| -> Vec<f32> {
        let mut out = Vec::with_capacity(w.len() * group);
        for kv in 0..c.n_kv_heads {
            let block = &w[kv * dh * row..(kv + 1) * dh * row];
            for _ in 0..group {
                out.extend_from_slice(block);
            }
        }
        out
    };
    let mut weights: ModelWeights = model.weights().clone();
    for l in &mut weights.layers {
        l.wk = repeat(&l.wk);
        l.wv = repeat(&l.wv);
    }
    let mut dense = c.clone();
    dense.n_kv_heads = c.n_heads;
    Model::new(dense, weights).unwrap()
}

#[test]
fn grouped_kv_matches_repeated_kv() {
    let model = micro_model();
    assert!(model.config().group_size() > 1);
    let dense = Arc::new(dense_kv(&model));
    let p = prompt(1, 20);
    let a = generate(&model, &p, 24, Some(&AttentionProbe::default()), None, &[]).unwrap();
    let b = generate(&dense, &p, 24, Some(&AttentionProbe::default()), None, &[]).unwrap();
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn generation_is_deterministic() {
    let model = micro_model();
    let p = prompt(2, 16);
    let probe = AttentionProbe { top_k: 3 };
    let a = generate(&model, &p, 20, Some(&probe), None, &[]).unwrap();
    let b = generate(&model, &p, 20, Some(&probe), None, &[]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.steps(), 20);
    assert_eq!(a.trace.len(), 20 * model.head_shape().census());
}

#[test]
fn zero_new_tokens_generates_nothing() {
    let model = micro_model();
    let out = generate(&model, &prompt(3, 8), 0, Some(&AttentionProbe::default()), None, &[]).unwrap();
    assert!(out.tokens.is_empty());
    assert!(out.trace.is_empty());
    assert_eq!(out.stop_token, None);
}

#[test]
fn empty_prompt_is_rejected() {
    let model = micro_model();
    assert!(matches!(
        generate(&model, &[], 4, None, None, &[]),
        Err(Error::EmptyPrompt)
    ));
}

#[test]
fn masking_every_head_matches_a_zeroed_model() {
    let model = micro_model();
    let all: Vec<HeadId> = model.head_shape().heads().collect();
    let plan = MaskPlan::new("all", all.clone(), MaskScope::WholeConversation);
    let zeroed = Arc::new(model.with_heads_zeroed(all).unwrap());
    for seed in 0..5 {
        let p = prompt(10 + seed, 12);
        let a = generate(&model, &p, 12, None, Some(&plan), &[]).unwrap();
        let b = generate(&zeroed, &p, 12, None, None, &[]).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}

#[test]
fn out_of_range_heads_are_rejected() {
    let model = micro_model();
    let plan = MaskPlan::new("bad", [HeadId::new(9, 0)], MaskScope::WholeConversation);
    assert!(matches!(
        generate(&model, &prompt(4, 4), 2, None, Some(&plan), &[]),
        Err(Error::HeadOutOfRange { .. })
    ));
    assert!(model.with_heads_zeroed([HeadId::new(0, 99)]).is_err());
}

#[test]
fn context_overflow_is_reported() {
    let model = micro_model();
    let max = model.config().max_context;
    let p = prompt(5, 8);
    assert!(matches!(
        generate(&model, &p, max, None, None, &[]),
        Err(Error::ContextOverflow { .. })
    ));
}

#[test]
fn stop_tokens_end_decoding_without_being_emitted() {
    let model = micro_model();
    let p = prompt(6, 10);
    let free = generate(&model, &p, 10, Some(&AttentionProbe::default()), None, &[]).unwrap();
    let stop = free.tokens[3];
    let first = free.tokens.iter().position(|&t| t == stop).unwrap();
    let cut = generate(&model, &p, 10, Some(&AttentionProbe::default()), None, &[stop]).unwrap();
    assert_eq!(cut.tokens, free.tokens[..first]);
    assert_eq!(cut.stop_token, Some(stop));
    assert_eq!(cut.trace.steps(), first);
}

#[test]
fn second_turn_scope_leaves_the_first_turn_alone() {
    let model = micro_model();
    let all: Vec<HeadId> = model.head_shape().heads().collect();
    let plan = MaskPlan::new("all", all, MaskScope::SecondTurnOnly);
    let p = prompt(7, 12);
    let mut masked = Conversation::new(Arc::clone(&model));
    let mut plain = Conversation::new(Arc::clone(&model));
    let a = masked.generate(&p, 0, 8, None, Some(&plan), &[]).unwrap();
    let b = plain.generate(&p, 0, 8, None, None, &[]).unwrap();
    assert_eq!(a.tokens, b.tokens);

    // With every head silenced the second turn reduces to the residual path,
    // which a fully zeroed model reproduces from its own first turn.
    let zeroed = Arc::new(model.with_heads_zeroed(model.head_shape().heads()).unwrap());
    let q = prompt(8, 6);
    let a = masked.generate(&q, 1, 8, None, Some(&plan), &[]).unwrap();
    let mut reference = Conversation::new(Arc::clone(&zeroed));
    reference.push(&p, 0);
    reference.push(&b.tokens, 0);
    let z = reference.generate(&q, 1, 8, None, None, &[]).unwrap();
    assert_eq!(a.tokens, z.tokens);
}

#[test]
fn multi_turn_cache_matches_a_replay() {
    let model = micro_model();
    let p = prompt(9, 10);
    let q = prompt(10, 5);
    let mut conv = Conversation::new(Arc::clone(&model));
    let first = conv.generate(&p, 0, 6, None, None, &[]).unwrap();
    let second = conv.generate(&q, 1, 6, None, None, &[]).unwrap();
    let replay: Vec<u32> = [p, first.tokens, q].concat();
    let fresh = generate(&model, &replay, 6, None, None, &[]).unwrap();
    assert_eq!(second.tokens, fresh.tokens);
}

#[test]
fn forked_sessions_are_independent() {
    let tok = tiny_tokenizer();
    let backend = ModelBackend::new(TinyModelSpec::micro().random_model(tok.vocab_size()), tok).unwrap();
    let p = prompt(11, 10);
    let mut base = backend.session();
    base.generate(&p, 0, 4, None, None, &[]).unwrap();
    let mut a = base.fork();
    let mut b = base.fork();
    let q = prompt(12, 4);
    let ra = a.generate(&q, 1, 5, None, None, &[]).unwrap();
    let rb = b.generate(&q, 1, 5, None, None, &[]).unwrap();
    assert_eq!(ra.generated, rb.generated);
    assert_eq!(a.position(), b.position());
    assert!(base.position() < a.position());
}

#[test]
fn container_round_trips_in_every_precision() {
    let model = micro_model();
    let mut meta = BTreeMap::new();
    meta.insert("config".to_string(), model.config().to_hf_json());
    let p = prompt(13, 12);
    let reference = {
        let mut cache = KvCache::new();
        let mut last = None;
        for &t in &p {
            last = model.forward(&mut cache, t, 0, None, None, true).unwrap();
        }
        last.unwrap()
    };
    for (dtype, tol) in [
        (StoreDtype::F32, 0.0),
        (StoreDtype::F16, 5e-2),
        (StoreDtype::BF16, 2e-1),
    ] {
        let bytes = serialize_tensors(&model.to_tensors(), &meta, dtype).unwrap();
        let store = TensorStore::from_bytes(&bytes).unwrap();
        let cfg = headprobe::ModelConfig::from_hf_json(&store.metadata()["config"]).unwrap();
        let loaded = Model::from_store(cfg, store).unwrap();
        let mut cache = KvCache::new();
        let mut last = None;
        for &t in &p {
            last = loaded.forward(&mut cache, t, 0, None, None, true).unwrap();
        }
        let worst = last
            .unwrap()
            .iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= tol, "{dtype:?}: logits differ by {worst}");
    }
}

#[test]
fn model_files_load_through_the_backend() {
    let dir = tempfile::tempdir().unwrap();
    let ws = headprobe::fixtures::write_tiny_workspace(dir.path(), &TinyModelSpec::micro()).unwrap();
    let backend = headprobe::load_model(&ws.weights, &ws.tokenizer).unwrap();
    assert_eq!(backend.head_shape(), backend.model().head_shape());
    assert_eq!(backend.head_shape().census(), 8);
    let ids = backend.tokenize("The lighthouse keeper");
    assert_eq!(backend.detokenize(&ids), "The lighthouse keeper");
    let out = backend.generate(&ids, 4, None, None, &[]).unwrap();
    assert_eq!(out.generated.len(), 4);
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! A minimal Llama-style decoder: RMSNorm, rotary embeddings, grouped-query
//! attention over a KV cache, SwiGLU MLP, greedy decoding.
//!
//! The forward pass exposes two hook points per layer: every head's
//! normalized attention row (through [`AttentionObserver`]) and every head's
//! output vector just before the output projection (through [`MaskPlan`]).

mod config;
pub mod container;
mod conversation;

use std::path::Path;

use rayon::prelude::*;

pub use config::{ModelConfig, RopeScaling};
pub use container::{Tensor, TensorStore};
pub use conversation::{generate, Conversation, Generation, KvCache};

use crate::error::{Error, Result};
use crate::probe::{apply_mask, AttentionObserver, HeadShape, MaskPlan};

/// Checkpoint tensor names (Hugging Face Llama layout).
pub mod names {
    pub const EMBED: &str = "model.embed_tokens.weight";
    pub const FINAL_NORM: &str = "model.norm.weight";
    pub const LM_HEAD: &str = "lm_head.weight";

    pub fn layer(i: usize, suffix: &str) -> String {
        format!("model.layers.{i}.{suffix}")
    }
    pub fn attn_norm(i: usize) -> String {
        layer(i, "input_layernorm.weight")
    }
    pub fn q_proj(i: usize) -> String {
        layer(i, "self_attn.q_proj.weight")
    }
    pub fn k_proj(i: usize) -> String {
        layer(i, "self_attn.k_proj.weight")
    }
    pub fn v_proj(i: usize) -> String {
        layer(i, "self_attn.v_proj.weight")
    }
    pub fn o_proj(i: usize) -> String {
        layer(i, "self_attn.o_proj.weight")
    }
    pub fn mlp_norm(i: usize) -> String {
        layer(i, "post_attention_layernorm.weight")
    }
    pub fn gate_proj(i: usize) -> String {
        layer(i, "mlp.gate_proj.weight")
    }
    pub fn up_proj(i: usize) -> String {
        layer(i, "mlp.up_proj.weight")
    }
    pub fn down_proj(i: usize) -> String {
        layer(i, "mlp.down_proj.weight")
    }
}

/// Row-major weights of one decoder block. Projection matrices are stored
/// `[out_features, in_features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_gate: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `None` when the output head is tied to the embedding.
    pub lm_head: Option<Vec<f32>>,
}

/// Immutable weights plus precomputed rotary frequencies. Shareable across
/// threads; each generation owns its own [`KvCache`].
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
    inv_freq: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        check_shapes(&config, &weights)?;
        let inv_freq = rope_frequencies(&config);
        Ok(Self {
            config,
            weights,
            inv_freq,
        })
    }

    /// Load a checkpoint. The architecture comes from a `config` entry in the
    /// container metadata, or from a `config.json` next to the weights.
    pub fn load(path: &Path) -> Result<Self> {
        let store = TensorStore::load(path)?;
        let config = match store.metadata().get("config") {
            Some(text) => ModelConfig::from_hf_json(text)?,
            None => {
                let dir = if path.is_dir() {
                    path
                } else {
                    path.parent().unwrap_or(Path::new("."))
                };
                let cfg_path = dir.join("config.json");
                let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
                ModelConfig::from_hf_json(&text)?
            }
        };
        Self::from_store(config, store)
    }

    pub fn from_store(config: ModelConfig, mut store: TensorStore) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let embed = store.take(names::EMBED, &[config.vocab_size, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: store.take(&names::attn_norm(i), &[d])?,
                wq: store.take(&names::q_proj(i), &[config.q_dim(), d])?,
                wk: store.take(&names::k_proj(i), &[config.kv_dim(), d])?,
                wv: store.take(&names::v_proj(i), &[config.kv_dim(), d])?,
                wo: store.take(&names::o_proj(i), &[d, config.q_dim()])?,
                mlp_norm: store.take(&names::mlp_norm(i), &[d])?,
                w_gate: store.take(&names::gate_proj(i), &[config.d_ff, d])?,
                w_up: store.take(&names::up_proj(i), &[config.d_ff, d])?,
                w_down: store.take(&names::down_proj(i), &[d, config.d_ff])?,
            });
        }
        let final_norm = store.take(names::FINAL_NORM, &[d])?;
        let lm_head = if config.tie_embeddings && !store.contains(names::LM_HEAD) {
            None
        } else {
            Some(store.take(names::LM_HEAD, &[config.vocab_size, d])?)
        };
        Self::new(
            config,
            ModelWeights {
                embed,
                layers,
                final_norm,
                lm_head,
            },
        )
    }

    /// Every tensor under its checkpoint name, for writing containers.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let d = c.d_model;
        let t = |shape: Vec<usize>, data: &Vec<f32>| Tensor {
            shape,
            data: data.clone(),
        };
        let w = &self.weights;
        let mut out = vec![(names::EMBED.to_string(), t(vec![c.vocab_size, d], &w.embed))];
        for (i, l) in w.layers.iter().enumerate() {
            out.push((names::attn_norm(i), t(vec![d], &l.attn_norm)));
            out.push((names::q_proj(i), t(vec![c.q_dim(), d], &l.wq)));
            out.push((names::k_proj(i), t(vec![c.kv_dim(), d], &l.wk)));
            out.push((names::v_proj(i), t(vec![c.kv_dim(), d], &l.wv)));
            out.push((names::o_proj(i), t(vec![d, c.q_dim()], &l.wo)));
            out.push((names::mlp_norm(i), t(vec![d], &l.mlp_norm)));
            out.push((names::gate_proj(i), t(vec![c.d_ff, d], &l.w_gate)));
            out.push((names::up_proj(i), t(vec![c.d_ff, d], &l.w_up)));
            out.push((names::down_proj(i), t(vec![d, c.d_ff], &l.w_down)));
        }
        out.push((names::FINAL_NORM.to_string(), t(vec![d], &w.final_norm)));
        if let Some(head) = &w.lm_head {
            out.push((names::LM_HEAD.to_string(), t(vec![c.vocab_size, d], head)));
        }
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape::new(self.config.n_layers, self.config.n_heads)
    }

    /// A copy whose output projection ignores the given heads, i.e. the
    /// columns of `o_proj` reading each head's output are zero.
    pub fn with_heads_zeroed(&self, heads: impl IntoIterator<Item = crate::probe::HeadId>) -> Result<Self> {
        let shape = self.head_shape();
        let mut weights = self.weights.clone();
        let (d, q_dim, dh) = (self.config.d_model, self.config.q_dim(), self.config.d_head);
        for h in heads {
            shape.check(h)?;
            let wo = &mut weights.layers[h.layer].wo;
            for row in 0..d {
                let start = row * q_dim + h.head * dh;
                wo[start..start + dh].fill(0.0);
            }
        }
        Self::new(self.config.clone(), weights)
    }

    /// Run one token through the network at the next cache position.
    ///
    /// `turn` tags the position for mask scoping. Returns logits when
    /// `want_logits` is set.
    pub fn forward(
        &self,
        cache: &mut KvCache,
        token: u32,
        turn: usize,
        mask: Option<&MaskPlan>,
        mut observer: Option<&mut dyn AttentionObserver>,
        want_logits: bool,
    ) -> Result<Option<Vec<f32>>> {
        let c = &self.config;
        let w = &self.weights;
        let d = c.d_model;
        let tok = token as usize;
        if tok >= c.vocab_size {
            return Err(Error::Config(format!(
                "token id {token} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        if cache.len() >= c.max_context {
            return Err(Error::ContextOverflow {
                needed: cache.len() + 1,
                max: c.max_context,
            });
        }
        cache.ensure_layers(c.n_layers);
        let pos = cache.len();
        cache.tokens.push(token);
        cache.turns.push(turn);

        let mut x = w.embed[tok * d..(tok + 1) * d].to_vec();
        let mut normed = vec![0.0f32; d];
        let mut q = vec![0.0f32; c.q_dim()];
        let mut k = vec![0.0f32; c.kv_dim()];
        let mut v = vec![0.0f32; c.kv_dim()];
        let mut head_out = vec![0.0f32; c.q_dim()];
        let mut proj = vec![0.0f32; d];
        let mut gate = vec![0.0f32; c.d_ff];
        let mut up = vec![0.0f32; c.d_ff];
        let ctx = pos + 1;
        let mut scores = vec![0.0f32; c.n_heads * ctx];
        let (cos, sin) = self.rope_angles(pos);
        let masking = mask.filter(|m| m.active_in(turn));

        for (li, layer) in w.layers.iter().enumerate() {
            rms_norm(&x, &layer.attn_norm, c.norm_epsilon as f32, &mut normed);
            matvec(&layer.wq, &normed, &mut q);
            matvec(&layer.wk, &normed, &mut k);
            matvec(&layer.wv, &normed, &mut v);
            for head in q.chunks_exact_mut(c.d_head) {
                apply_rope(head, &cos, &sin);
            }
            for head in k.chunks_exact_mut(c.d_head) {
                apply_rope(head, &cos, &sin);
            }
            cache.keys[li].extend_from_slice(&k);
            cache.values[li].extend_from_slice(&v);

            self.attend(li, &q, cache, ctx, &mut scores, &mut head_out);

            if let Some(obs) = observer.as_deref_mut() {
                let rows: Vec<&[f32]> = scores.chunks_exact(ctx).collect();
                obs.observe(li, pos, &rows, &cache.tokens);
            }
            if let Some(plan) = masking {
                apply_mask(&mut head_out, li, c.d_head, plan, turn);
            }

            matvec(&layer.wo, &head_out, &mut proj);
            add_assign(&mut x, &proj);

            rms_norm(&x, &layer.mlp_norm, c.norm_epsilon as f32, &mut normed);
            matvec(&layer.w_gate, &normed, &mut gate);
            matvec(&layer.w_up, &normed, &mut up);
            for (g, u) in gate.iter_mut().zip(&up) {
                *g = silu(*g) * u;
            }
            matvec(&layer.w_down, &gate, &mut proj);
            add_assign(&mut x, &proj);
        }

        if !want_logits {
            return Ok(None);
        }
        rms_norm(&x, &w.final_norm, c.norm_epsilon as f32, &mut normed);
        let head = w.lm_head.as_ref().unwrap_or(&w.embed);
        let mut logits = vec![0.0f32; c.vocab_size];
        matvec(head, &normed, &mut logits);
        Ok(Some(logits))
    }

    /// Softmax attention of every query head over positions `0..ctx`,
    /// writing normalized rows into `scores` and head outputs into `out`.
    fn attend(&self, layer: usize, q: &[f32], cache: &KvCache, ctx: usize, scores: &mut [f32], out: &mut [f32]) {
        let c = &self.config;
        let dh = c.d_head;
        let kv_dim = c.kv_dim();
        let group = c.group_size();
        let scale = 1.0 / (dh as f32).sqrt();
        let keys = &cache.keys[layer];
        let values = &cache.values[layer];

        let one_head = |h: usize, row: &mut [f32], o: &mut [f32]| {
            let g = h / group;
            let qh = &q[h * dh..(h + 1) * dh];
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &keys[j * kv_dim + g * dh..j * kv_dim + (g + 1) * dh];
                *s = dot(qh, kj) * scale;
            }
            softmax(row);
            o.fill(0.0);
            for (j, &p) in row.iter().enumerate() {
                let vj = &values[j * kv_dim + g * dh..j * kv_dim + (g + 1) * dh];
                for (oi, vi) in o.iter_mut().zip(vj) {
                    *oi += p * vi;
                }
            }
        };

        if ctx * c.q_dim() >= PARALLEL_WORK {
            scores
                .par_chunks_exact_mut(ctx)
                .zip(out.par_chunks_exact_mut(dh))
                .enumerate()
                .for_each(|(h, (row, o))| one_head(h, row, o));
        } else {
            for (h, (row, o)) in scores.chunks_exact_mut(ctx).zip(out.chunks_exact_mut(dh)).enumerate() {
                one_head(h, row, o);
            }
        }
    }

    fn rope_angles(&self, pos: usize) -> (Vec<f32>, Vec<f32>) {
        self.inv_freq
            .iter()
            .map(|f| {
                let a = pos as f64 * f;
                (a.cos() as f32, a.sin() as f32)
            })
            .unzip()
    }
}

fn check_shapes(c: &ModelConfig, w: &ModelWeights) -> Result<()> {
    let d = c.d_model;
    let check = |name: String, v: &[f32], shape: Vec<usize>| -> Result<()> {
        let expected: usize = shape.iter().product();
        if v.len() != expected {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                actual: vec![v.len()],
            });
        }
        Ok(())
    };
    check(names::EMBED.into(), &w.embed, vec![c.vocab_size, d])?;
    if w.layers.len() != c.n_layers {
        return Err(Error::Config(format!(
            "{} layers of weights for a {}-layer config",
            w.layers.len(),
            c.n_layers
        )));
    }
    for (i, l) in w.layers.iter().enumerate() {
        check(names::attn_norm(i), &l.attn_norm, vec![d])?;
        check(names::q_proj(i), &l.wq, vec![c.q_dim(), d])?;
        check(names::k_proj(i), &l.wk, vec![c.kv_dim(), d])?;
        check(names::v_proj(i), &l.wv, vec![c.kv_dim(), d])?;
        check(names::o_proj(i), &l.wo, vec![d, c.q_dim()])?;
        check(names::mlp_norm(i), &l.mlp_norm, vec![d])?;
        check(names::gate_proj(i), &l.w_gate, vec![c.d_ff, d])?;
        check(names::up_proj(i), &l.w_up, vec![c.d_ff, d])?;
        check(names::down_proj(i), &l.w_down, vec![d, c.d_ff])?;
    }
    check(names::FINAL_NORM.into(), &w.final_norm, vec![d])?;
    if let Some(h) = &w.lm_head {
        check(names::LM_HEAD.into(), h, vec![c.vocab_size, d])?;
    }
    Ok(())
}

fn rope_frequencies(c: &ModelConfig) -> Vec<f64> {
    let half = c.d_head / 2;
    let mut inv: Vec<f64> = (0..half)
        .map(|i| 1.0 / c.rope_base.powf((2 * i) as f64 / c.d_head as f64))
        .collect();
    if let Some(s) = c.rope_scaling {
        let low_wavelen = s.original_max_position_embeddings / s.low_freq_factor;
        let high_wavelen = s.original_max_position_embeddings / s.high_freq_factor;
        for f in inv.iter_mut() {
            let wavelen = 2.0 * std::f64::consts::PI / *f;
            if wavelen > low_wavelen {
                *f /= s.factor;
            } else if wavelen >= high_wavelen {
                let smooth = (s.original_max_position_embeddings / wavelen - s.low_freq_factor)
                    / (s.high_freq_factor - s.low_freq_factor);
                *f = (1.0 - smooth) * *f / s.factor + smooth * *f;
            }
        }
    }
    inv
}

/// Matrices at least this large (in multiply-adds) are split across threads.
/// Each output element is always reduced in the same order, so results do
/// not depend on the thread count.
const PARALLEL_WORK: usize = 1 << 20;

fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    if out.len() * cols >= PARALLEL_WORK {
        out.par_iter_mut()
            .enumerate()
            .for_each(|(r, o)| *o = dot(&w[r * cols..(r + 1) * cols], x));
    } else {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(&w[r * cols..(r + 1) * cols], x);
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut sum = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

fn rms_norm(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) {
    let mean_sq = x.iter().map(|v| v * v).sum::<f32>() / x.len() as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    for ((o, xi), wi) in out.iter_mut().zip(x).zip(weight) {
        *o = xi * inv * wi;
    }
}

/// Rotate-half convention: pairs element `i` with `i + d/2`.
fn apply_rope(v: &mut [f32], cos: &[f32], sin: &[f32]) {
    let half = v.len() / 2;
    for i in 0..half {
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * cos[i] - b * sin[i];
        v[i + half] = b * cos[i] + a * sin[i];
    }
}

fn softmax(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in row.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let inv = 1.0 / sum;
    for s in row.iter_mut() {
        *s *= inv;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_assign(x: &mut [f32], y: &[f32]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Greedy choice: highest logit, lowest token id on exact ties.
pub fn argmax_token(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax_token(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_token(&[0.0, 0.0]), 0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1.0, -2.0, 30.0, 0.5, 4.0];
        softmax(&mut row);
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        apply_rope(&mut v, &[1.0, 1.0], &[0.0, 0.0]);
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn llama3_scaling_keeps_high_frequencies() {
        let mut cfg = crate::fixtures::TinyModelSpec::default().config(64);
        cfg.d_head = 128;
        let plain = rope_frequencies(&cfg);
        cfg.rope_scaling = Some(RopeScaling {
            factor: 8.0,
            low_freq_factor: 1.0,
            high_freq_factor: 4.0,
            original_max_position_embeddings: 8192.0,
        });
        let scaled = rope_frequencies(&cfg);
        assert_eq!(plain[0], scaled[0]);
        let last = plain.len() - 1;
        assert!((scaled[last] - plain[last] / 8.0).abs() < 1e-15);
    }

    #[test]
    fn dot_matches_naive_sum_closely() {
        let a: Vec<f32> = (0..37).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..37).map(|i| (i as f32 * 0.11).cos()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) as f64 - naive).abs() < 1e-5);
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head attention capture and head masking.
//!
//! A [`AttentionTrace`] keeps only the strongest-attended source of every
//! head at every decoding step; full attention matrices are never stored.
//! A [`MaskPlan`] silences heads by zeroing their output vectors before the
//! output projection, within a turn scope.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One attention head, ordered layer-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl From<(usize, usize)> for HeadId {
    fn from((layer, head): (usize, usize)) -> Self {
        Self { layer, head }
    }
}

impl From<HeadId> for (usize, usize) {
    fn from(h: HeadId) -> Self {
        (h.layer, h.head)
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// The head grid of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadShape {
    pub n_layers: usize,
    pub n_heads: usize,
}

impl HeadShape {
    pub const fn new(n_layers: usize, n_heads: usize) -> Self {
        Self { n_layers, n_heads }
    }

    pub fn census(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn contains(&self, head: HeadId) -> bool {
        head.layer < self.n_layers && head.head < self.n_heads
    }

    pub fn check(&self, head: HeadId) -> Result<()> {
        if self.contains(head) {
            Ok(())
        } else {
            Err(Error::HeadOutOfRange {
                layer: head.layer,
                head: head.head,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
            })
        }
    }

    /// Layer-major flat index.
    pub fn index(&self, head: HeadId) -> usize {
        head.layer * self.n_heads + head.head
    }

    pub fn head_at(&self, index: usize) -> HeadId {
        HeadId::new(index / self.n_heads, index % self.n_heads)
    }

    /// Every head in layer-major order.
    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.census()).map(move |i| self.head_at(i))
    }
}

impl fmt::Display for HeadShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n_layers, self.n_heads)
    }
}

/// Which turns of a conversation a mask applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    WholeConversation,
    /// Only the re-evaluation turn (turn index 1) and anything after it.
    #[default]
    SecondTurnOnly,
}

impl MaskScope {
    pub fn covers(&self, turn: usize) -> bool {
        match self {
            MaskScope::WholeConversation => true,
            MaskScope::SecondTurnOnly => turn >= 1,
        }
    }
}

impl fmt::Display for MaskScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScope::WholeConversation => "whole-conversation",
            MaskScope::SecondTurnOnly => "second-turn-only",
        })
    }
}

/// A set of heads to silence, with a turn scope.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskPlan {
    pub id: String,
    pub heads: BTreeSet<HeadId>,
    pub scope: MaskScope,
}

impl MaskPlan {
    pub fn new(id: impl Into<String>, heads: impl IntoIterator<Item = HeadId>, scope: MaskScope) -> Self {
        Self {
            id: id.into(),
            heads: heads.into_iter().collect(),
            scope,
        }
    }

    /// The no-op plan.
    pub fn none() -> Self {
        Self::new("no-mask", [], MaskScope::default())
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn validate(&self, shape: HeadShape) -> Result<()> {
        self.heads.iter().try_for_each(|h| shape.check(*h))
    }

    pub fn active_in(&self, turn: usize) -> bool {
        !self.heads.is_empty() && self.scope.covers(turn)
    }

    pub fn masks(&self, head: HeadId, turn: usize) -> bool {
        self.scope.covers(turn) && self.heads.contains(&head)
    }
}

/// Zero the output vectors of every head of `layer` that `plan` silences in
/// `turn`. `head_outputs` holds `n_heads` consecutive vectors of `d_head`.
pub fn apply_mask(head_outputs: &mut [f32], layer: usize, d_head: usize, plan: &MaskPlan, turn: usize) {
    if !plan.scope.covers(turn) {
        return;
    }
    for head in plan.heads.range(HeadId::new(layer, 0)..HeadId::new(layer + 1, 0)) {
        let start = head.head * d_head;
        if let Some(slice) = head_outputs.get_mut(start..start + d_head) {
            slice.fill(0.0);
        }
    }
}

/// Capture settings. `top_k` > 1 additionally keeps the runners-up of every
/// row, widening the set of attended tokens used by activation scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub top_k: usize,
}

impl Default for AttentionProbe {
    fn default() -> Self {
        Self { top_k: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttendedSource {
    pub pos: usize,
    pub token: u32,
    pub weight: f32,
}

/// Strongest attention target of one head at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub argmax_pos: usize,
    pub argmax_token: u32,
    pub argmax_weight: f32,
    pub turn: usize,
    /// Absolute position of the query that produced this step's token.
    pub query_pos: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runners_up: Vec<AttendedSource>,
}

impl TraceEntry {
    pub fn head_id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }

    /// Token identities this entry counts as attended.
    pub fn attended_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        std::iter::once(self.argmax_token).chain(self.runners_up.iter().map(|s| s.token))
    }
}

/// Per-step, per-head argmax attention targets, stored step-major then
/// layer-major: entry `(s, l, h)` sits at `s * census + l * n_heads + h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub shape: HeadShape,
    entries: Vec<TraceEntry>,
}

impl AttentionTrace {
    pub fn new(shape: HeadShape) -> Self {
        Self {
            shape,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of complete decoding steps captured.
    pub fn steps(&self) -> usize {
        self.entries.len() / self.shape.census().max(1)
    }

    pub fn entry(&self, step: usize, head: HeadId) -> Option<&TraceEntry> {
        self.entries.get(step * self.shape.census() + self.shape.index(head))
    }

    /// All entries of one step, layer-major.
    pub fn step_entries(&self, step: usize) -> &[TraceEntry] {
        let census = self.shape.census();
        let start = (step * census).min(self.entries.len());
        let end = ((step + 1) * census).min(self.entries.len());
        &self.entries[start..end]
    }

    /// Append one entry per head of `layer` from its normalized attention
    /// rows. Row `i` belongs to head `i` and spans source positions
    /// `0..=query_pos`; `tokens[p]` is the token at position `p`.
    /// Ties resolve to the lowest source position.
    #[allow(clippy::too_many_arguments)]
    pub fn record_step(
        &mut self,
        step: usize,
        turn: usize,
        query_pos: usize,
        layer: usize,
        rows: &[&[f32]],
        tokens: &[u32],
        top_k: usize,
    ) {
        for (head, row) in rows.iter().enumerate() {
            let ranked = rank_row(row, top_k.max(1));
            let (pos, weight) = ranked.first().copied().unwrap_or((0, 0.0));
            let token_at = |p: usize| tokens.get(p).copied().unwrap_or(0);
            self.entries.push(TraceEntry {
                step,
                layer,
                head,
                argmax_pos: pos,
                argmax_token: token_at(pos),
                argmax_weight: weight,
                turn,
                query_pos,
                runners_up: ranked[1.min(ranked.len())..]
                    .iter()
                    .map(|&(p, w)| AttendedSource {
                        pos: p,
                        token: token_at(p),
                        weight: w,
                    })
                    .collect(),
            });
        }
    }

    /// Append an already-resolved entry (scripted backends).
    pub fn push(&mut self, entry: TraceEntry) {
        self.entries.push(entry);
    }

    pub fn truncate_steps(&mut self, steps: usize) {
        self.entries.truncate(steps * self.shape.census());
    }

    /// One JSON object per `(step, head)`.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

/// Indices of the `k` largest weights, largest first, lowest index first on ties.
fn rank_row(row: &[f32], k: usize) -> Vec<(usize, f32)> {
    if k == 1 {
        let mut best: Option<(usize, f32)> = None;
        for (p, &w) in row.iter().enumerate() {
            if best.is_none_or(|(_, bw)| w > bw) {
                best = Some((p, w));
            }
        }
        return best.into_iter().collect();
    }
    let mut idx: Vec<(usize, f32)> = row.iter().copied().enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

/// Receives the softmax-normalized attention rows of every layer during a
/// forward pass.
pub trait AttentionObserver {
    /// `rows[h]` is head `h`'s attention over positions `0..=query_pos`.
    fn observe(&mut self, layer: usize, query_pos: usize, rows: &[&[f32]], tokens: &[u32]);
}

/// Records one decoding step into a trace.
pub struct TraceRecorder<'a> {
    pub trace: &'a mut AttentionTrace,
    pub step: usize,
    pub turn: usize,
    pub top_k: usize,
}

impl AttentionObserver for TraceRecorder<'_> {
    fn observe(&mut self, layer: usize, query_pos: usize, rows: &[&[f32]], tokens: &[u32]) {
        self.trace
            .record_step(self.step, self.turn, query_pos, layer, rows, tokens, self.top_k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_head_trace(row: &[f32]) -> TraceEntry {
        let mut t = AttentionTrace::new(HeadShape::new(1, 1));
        let tokens: Vec<u32> = (100..100 + row.len() as u32).collect();
        t.record_step(0, 0, row.len() - 1, 0, &[row], &tokens, 1);
        t.entries()[0].clone()
    }

    #[test]
    fn argmax_picks_heaviest_position() {
        let e = one_head_trace(&[0.2, 0.5, 0.3]);
        assert_eq!(e.argmax_pos, 1);
        assert_eq!(e.argmax_token, 101);
        assert_eq!(e.argmax_weight, 0.5);
    }

    #[test]
    fn argmax_ties_go_to_lowest_position() {
        assert_eq!(one_head_trace(&[0.5, 0.5]).argmax_pos, 0);
    }

    #[test]
    fn two_heads_four_positions_match_exhaustive_scan() {
        let rows: [&[f32]; 2] = [&[0.1, 0.4, 0.4, 0.1], &[0.25, 0.25, 0.2, 0.3]];
        let tokens = [7, 8, 9, 10];
        let mut t = AttentionTrace::new(HeadShape::new(1, 2));
        t.record_step(0, 0, 3, 0, &rows, &tokens, 1);
        for (h, row) in rows.iter().enumerate() {
            // Brute force: the first index whose weight no other index beats.
            let expected = (0..row.len()).find(|&i| row.iter().all(|&w| w <= row[i])).unwrap();
            assert_eq!(t.entries()[h].argmax_pos, expected);
            assert_eq!(t.entries()[h].argmax_token, tokens[expected]);
        }
    }

    #[test]
    fn top_k_keeps_runners_up_in_order() {
        let mut t = AttentionTrace::new(HeadShape::new(1, 1));
        t.record_step(0, 0, 3, 0, &[&[0.1, 0.3, 0.3, 0.3]], &[1, 2, 3, 4], 3);
        let e = &t.entries()[0];
        assert_eq!(e.argmax_pos, 1);
        let rest: Vec<usize> = e.runners_up.iter().map(|s| s.pos).collect();
        assert_eq!(rest, vec![2, 3]);
        assert_eq!(e.attended_tokens().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn empty_plan_is_identity() {
        let mut v = vec![1.0f32; 8];
        apply_mask(&mut v, 0, 2, &MaskPlan::none(), 1);
        assert_eq!(v, vec![1.0; 8]);
    }

    #[test]
    fn whole_conversation_plan_zeroes_head() {
        let plan = MaskPlan::new("p", [HeadId::new(0, 0)], MaskScope::WholeConversation);
        let mut v: Vec<f32> = (1..=8).map(|x| x as f32).collect();
        apply_mask(&mut v, 0, 2, &plan, 1);
        assert_eq!(v, vec![0.0, 0.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn second_turn_plan_is_scoped() {
        let plan = MaskPlan::new(
            "pair",
            [HeadId::new(11, 23), HeadId::new(17, 25)],
            MaskScope::SecondTurnOnly,
        );
        let d_head = 2;
        for (layer, head) in [(11usize, 23usize), (17, 25)] {
            let original: Vec<f32> = (0..32 * d_head).map(|x| x as f32 + 1.0).collect();
            let mut turn0 = original.clone();
            apply_mask(&mut turn0, layer, d_head, &plan, 0);
            assert_eq!(turn0, original);
            let mut turn1 = original.clone();
            apply_mask(&mut turn1, layer, d_head, &plan, 1);
            for (i, v) in turn1.iter().enumerate() {
                if i / d_head == head {
                    assert_eq!(*v, 0.0);
                } else {
                    assert_eq!(*v, original[i]);
                }
            }
        }
    }

    #[test]
    fn mask_is_idempotent() {
        let plan = MaskPlan::new(
            "p",
            [HeadId::new(2, 1), HeadId::new(2, 3)],
            MaskScope::WholeConversation,
        );
        let mut once: Vec<f32> = (0..16).map(|x| x as f32).collect();
        apply_mask(&mut once, 2, 4, &plan, 0);
        let mut twice = once.clone();
        apply_mask(&mut twice, 2, 4, &plan, 0);
        assert_eq!(once, twice);
    }

    #[test]
    fn plan_validation_rejects_out_of_range_heads() {
        let plan = MaskPlan::new("p", [HeadId::new(4, 0)], MaskScope::WholeConversation);
        assert!(plan.validate(HeadShape::new(4, 8)).is_err());
        assert!(plan.validate(HeadShape::new(5, 8)).is_ok());
    }

    #[test]
    fn head_ids_serialize_as_pairs() {
        let json = serde_json::to_string(&HeadId::new(11, 23)).unwrap();
        assert_eq!(json, "[11,23]");
        let back: HeadId = serde_json::from_str(&json).unwrap();
        assert_eq!(back, HeadId::new(11, 23));
    }
}

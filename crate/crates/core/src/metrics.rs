// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head metrics: retrieval (copy-paste) score, answer recall, and the
//! yes/no activation indicator, plus banding and ranking of score tables.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{AttentionTrace, HeadId, HeadShape};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Retrieval,
    ActivationYes,
    ActivationNo,
    CaseCount,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Retrieval => "retrieval",
            Self::ActivationYes => "activation-yes",
            Self::ActivationNo => "activation-no",
            Self::CaseCount => "case-count",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "retrieval" => Self::Retrieval,
            "activation-yes" => Self::ActivationYes,
            "activation-no" => Self::ActivationNo,
            "case-count" => Self::CaseCount,
            other => return Err(Error::Experiment(format!("unknown metric kind {other:?}"))),
        })
    }
}

/// One score per head of the model, stored in layer-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreTable {
    pub shape: HeadShape,
    pub metric_kind: MetricKind,
    pub n_samples: usize,
    scores: Vec<f64>,
}

impl HeadScoreTable {
    pub fn new(shape: HeadShape, metric_kind: MetricKind, n_samples: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != shape.census() {
            return Err(Error::TraceMismatch(format!(
                "{} scores for {} heads",
                scores.len(),
                shape.census()
            )));
        }
        Ok(Self {
            shape,
            metric_kind,
            n_samples,
            scores,
        })
    }

    pub fn zeros(shape: HeadShape, metric_kind: MetricKind) -> Self {
        Self {
            shape,
            metric_kind,
            n_samples: 0,
            scores: vec![0.0; shape.census()],
        }
    }

    /// Per-head arithmetic mean of per-sample scores. Each head's values are
    /// sorted before summing, so the result does not depend on sample order.
    pub fn mean_of(shape: HeadShape, metric_kind: MetricKind, per_sample: &[Vec<f64>]) -> Result<Self> {
        let n = per_sample.len();
        let census = shape.census();
        if let Some(bad) = per_sample.iter().find(|s| s.len() != census) {
            return Err(Error::TraceMismatch(format!("{} scores for {census} heads", bad.len())));
        }
        let mut scores = vec![0.0; census];
        if n > 0 {
            let mut column = Vec::with_capacity(n);
            for (h, slot) in scores.iter_mut().enumerate() {
                column.clear();
                column.extend(per_sample.iter().map(|s| s[h]));
                column.sort_by(f64::total_cmp);
                *slot = column.iter().sum::<f64>() / n as f64;
            }
        }
        Self::new(shape, metric_kind, n, scores)
    }

    pub fn get(&self, head: HeadId) -> f64 {
        self.scores[self.shape.index(head)]
    }

    pub fn set(&mut self, head: HeadId, score: f64) {
        let i = self.shape.index(head);
        self.scores[i] = score;
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, f64)> + '_ {
        self.shape.heads().zip(self.scores.iter().copied())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "head", "metric_kind", "score", "n_samples"])?;
        for (h, s) in self.iter() {
            w.write_record([
                h.layer.to_string(),
                h.head.to_string(),
                self.metric_kind.as_str().to_string(),
                s.to_string(),
                self.n_samples.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(shape: HeadShape, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut kind = None;
        let mut n_samples = 0;
        let mut scores = vec![None; shape.census()];
        for row in r.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or_default();
            let num = |i: usize| {
                field(i)
                    .parse::<usize>()
                    .map_err(|e| Error::Experiment(format!("bad score row: {e}")))
            };
            let head = HeadId::new(num(0)?, num(1)?);
            shape.check(head)?;
            kind = Some(field(2).parse::<MetricKind>()?);
            let score = field(3)
                .parse::<f64>()
                .map_err(|e| Error::Experiment(format!("bad score: {e}")))?;
            n_samples = num(4)?;
            scores[shape.index(head)] = Some(score);
        }
        let scores = scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| Error::Experiment(format!("score table lacks head {}", shape.head_at(i)))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(shape, kind.unwrap_or(MetricKind::Retrieval), n_samples, scores)
    }
}

/// Where the needle sits in the full conversation token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeedleWindow {
    pub start: usize,
    pub tokens: Vec<u32>,
}

impl NeedleWindow {
    pub fn end(&self) -> usize {
        self.start + self.tokens.len()
    }

    pub fn contains(&self, pos: usize) -> bool {
        (self.start..self.end()).contains(&pos)
    }
}

/// Copy-paste frequency of every head for one sample.
///
/// Only steps emitting a needle token count. A head scores such a step when
/// its argmax position lies in the needle and holds the emitted token.
pub fn retrieval_score(trace: &AttentionTrace, window: &NeedleWindow, generated: &[u32]) -> Result<Vec<f64>> {
    if trace.steps() != generated.len() {
        return Err(Error::TraceMismatch(format!(
            "trace covers {} steps but {} tokens were generated",
            trace.steps(),
            generated.len()
        )));
    }
    let shape = trace.shape;
    let needle: BTreeSet<u32> = window.tokens.iter().copied().collect();
    let mut hits = vec![0usize; shape.census()];
    let mut denom = 0usize;
    for (step, tok) in generated.iter().enumerate() {
        if !needle.contains(tok) {
            continue;
        }
        denom += 1;
        for e in trace.step_entries(step) {
            if window.contains(e.argmax_pos) && e.argmax_token == *tok {
                hits[shape.index(e.head_id())] += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .map(|h| if denom == 0 { 0.0 } else { h as f64 / denom as f64 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    pub recall: f64,
    pub matched_tokens: usize,
    pub needle_tokens: usize,
}

/// Lowercased alphanumeric word tokens.
pub fn word_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Fraction of the expected answer's word tokens found in `answer`,
/// counted as a multiset intersection.
pub fn recall_score(answer: &str, expected: &str) -> RecallResult {
    let want = word_tokens(expected);
    let mut have: HashMap<String, usize> = HashMap::new();
    for w in word_tokens(answer) {
        *have.entry(w).or_default() += 1;
    }
    let mut matched = 0;
    for w in &want {
        if let Some(n) = have.get_mut(w) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    RecallResult {
        recall: if want.is_empty() {
            0.0
        } else {
            matched as f64 / want.len() as f64
        },
        matched_tokens: matched,
        needle_tokens: want.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

/// Surface forms treated as the same answer token.
pub const YES_VARIANTS: [&str; 6] = ["yes", "Yes", "YES", " yes", " Yes", " YES"];
pub const NO_VARIANTS: [&str; 6] = ["no", "No", "NO", " no", " No", " NO"];

/// Token ids counted as "yes" and as "no".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerTokens {
    pub yes: BTreeSet<u32>,
    pub no: BTreeSet<u32>,
}

impl AnswerTokens {
    /// The canonical lowercase forms must be single tokens; other variants
    /// are included when they are.
    pub fn resolve(tokenizer: &Tokenizer, yes_variants: &[String], no_variants: &[String]) -> Result<Self> {
        let collect = |canonical: &str, variants: &[String]| -> Result<BTreeSet<u32>> {
            let id = tokenizer
                .token_id(canonical)
                .ok_or_else(|| Error::UnknownAnswerToken(canonical.to_string()))?;
            let mut set: BTreeSet<u32> = variants.iter().filter_map(|v| tokenizer.token_id(v)).collect();
            set.insert(id);
            Ok(set)
        };
        Ok(Self {
            yes: collect("yes", yes_variants)?,
            no: collect("no", no_variants)?,
        })
    }

    pub fn default_for(tokenizer: &Tokenizer) -> Result<Self> {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self::resolve(tokenizer, &own(&YES_VARIANTS), &own(&NO_VARIANTS))
    }

    pub fn of(&self, answer: Answer) -> &BTreeSet<u32> {
        match answer {
            Answer::Yes => &self.yes,
            Answer::No => &self.no,
        }
    }
}

/// For each head: does any token it attends to most strongly during `turn`
/// belong to `answer`?
pub fn activation_score(trace: &AttentionTrace, answer: &BTreeSet<u32>, turn: usize) -> Vec<bool> {
    let shape = trace.shape;
    let mut out = vec![false; shape.census()];
    for e in trace.entries() {
        if e.turn == turn && e.attended_tokens().any(|t| answer.contains(&t)) {
            out[shape.index(e.head_id())] = true;
        }
    }
    out
}

/// Score band edges: zero, (0, low], (low, high), [high, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandEdges {
    pub low: f64,
    pub high: f64,
}

impl Default for BandEdges {
    fn default() -> Self {
        Self { low: 0.1, high: 0.5 }
    }
}

impl BandEdges {
    pub fn band_of(&self, score: f64) -> usize {
        if score <= 0.0 {
            0
        } else if score <= self.low {
            1
        } else if score < self.high {
            2
        } else {
            3
        }
    }

    pub fn labels(&self) -> [String; 4] {
        [
            "0".to_string(),
            format!("(0, {}]", self.low),
            format!("({}, {})", self.low, self.high),
            format!("[{}, 1]", self.high),
        ]
    }
}

pub fn band_histogram(table: &HeadScoreTable, edges: BandEdges) -> [usize; 4] {
    let mut counts = [0; 4];
    for s in table.scores() {
        counts[edges.band_of(*s)] += 1;
    }
    counts
}

/// Highest scores first, ties in layer-major order.
pub fn top_k_heads(table: &HeadScoreTable, k: usize) -> Vec<HeadId> {
    let mut ranked: Vec<(HeadId, f64)> = table.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(h, _)| h).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::TraceEntry;

    fn entry(step: usize, head: HeadId, pos: usize, token: u32, turn: usize) -> TraceEntry {
        TraceEntry {
            step,
            layer: head.layer,
            head: head.head,
            argmax_pos: pos,
            argmax_token: token,
            argmax_weight: 1.0,
            turn,
            query_pos: 100 + step,
            runners_up: Vec::new(),
        }
    }

    #[test]
    fn perfect_copy_scores_one_and_position_zero_scores_zero() {
        let shape = HeadShape::new(1, 2);
        let window = NeedleWindow {
            start: 10,
            tokens: vec![7, 8, 9],
        };
        let generated = [7, 8, 9];
        let mut trace = AttentionTrace::new(shape);
        for (s, t) in generated.iter().enumerate() {
            trace.push(entry(s, HeadId::new(0, 0), 10 + s, *t, 0));
            trace.push(entry(s, HeadId::new(0, 1), 0, 1, 0));
        }
        assert_eq!(retrieval_score(&trace, &window, &generated).unwrap(), vec![1.0, 0.0]);
        assert!(retrieval_score(&trace, &window, &generated[..2]).is_err());
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_score("smoked saffron", "smoked saffron").recall, 1.0);
        assert_eq!(recall_score("", "smoked saffron").recall, 0.0);
        let r = recall_score("well, smoked fish and bread", "smoked saffron");
        assert_eq!((r.matched_tokens, r.needle_tokens, r.recall), (1, 2, 0.5));
    }

    #[test]
    fn bands_partition() {
        let shape = HeadShape::new(32, 32);
        let zeros = HeadScoreTable::zeros(shape, MetricKind::Retrieval);
        assert_eq!(band_histogram(&zeros, BandEdges::default()), [1024, 0, 0, 0]);
        let e = BandEdges::default();
        assert_eq!(
            [e.band_of(0.0), e.band_of(0.1), e.band_of(0.4999), e.band_of(0.5)],
            [0, 1, 2, 3]
        );
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let shape = HeadShape::new(2, 2);
        let t = HeadScoreTable::new(shape, MetricKind::Retrieval, 1, vec![0.2, 0.9, 0.2, 0.5]).unwrap();
        assert!(top_k_heads(&t, 0).is_empty());
        assert_eq!(
            top_k_heads(&t, 4),
            vec![
                HeadId::new(0, 1),
                HeadId::new(1, 1),
                HeadId::new(0, 0),
                HeadId::new(1, 0)
            ]
        );
        assert_eq!(top_k_heads(&t, 9).len(), 4);
    }

    #[test]
    fn csv_round_trip() {
        let shape = HeadShape::new(2, 3);
        let t = HeadScoreTable::new(
            shape,
            MetricKind::ActivationNo,
            4,
            vec![0.0, 0.25, 1.0, 0.5, 0.125, 0.75],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(HeadScoreTable::read_csv(shape, buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn activation_respects_turn() {
        let shape = HeadShape::new(1, 2);
        let mut trace = AttentionTrace::new(shape);
        trace.push(entry(0, HeadId::new(0, 0), 3, 5, 1));
        trace.push(entry(0, HeadId::new(0, 1), 4, 6, 1));
        let no: BTreeSet<u32> = [5].into();
        assert_eq!(activation_score(&trace, &no, 1), vec![true, false]);
        assert_eq!(activation_score(&trace, &no, 0), vec![false, false]);
    }
}

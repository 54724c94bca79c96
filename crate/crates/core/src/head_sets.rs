// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head case counts, top heads per case, and set algebra over heads.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flip::{CaseLabel, ConversationRecord};
use crate::probe::{HeadId, HeadShape, MaskPlan, MaskScope};

/// How many labeled conversations put each head in each case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseCountTable {
    pub shape: HeadShape,
    counts: Vec<[u64; 4]>,
    /// Conversations eligible for each case: flips for cases 1 and 2,
    /// kept answers for cases 3 and 4.
    pub n_labeled: [u64; 4],
}

impl CaseCountTable {
    pub fn new(shape: HeadShape) -> Self {
        Self {
            shape,
            counts: vec![[0; 4]; shape.census()],
            n_labeled: [0; 4],
        }
    }

    /// Add one conversation's labels. Incoherent replies are skipped.
    pub fn add(&mut self, record: &ConversationRecord, labels: &[CaseLabel]) -> Result<()> {
        if record.turn2_class.as_answer().is_none() {
            return Ok(());
        }
        let first = if record.flipped() { 0 } else { 2 };
        self.n_labeled[first] += 1;
        self.n_labeled[first + 1] += 1;
        for l in labels {
            self.shape.check(l.head)?;
            if !(1..=4).contains(&l.case) {
                return Err(Error::Experiment(format!("case {} out of range", l.case)));
            }
            self.counts[self.shape.index(l.head)][l.case as usize - 1] += 1;
        }
        Ok(())
    }

    pub fn count(&self, head: HeadId, case: u8) -> u64 {
        self.counts[self.shape.index(head)][case as usize - 1]
    }

    /// Count over eligible conversations, 0 when none were eligible.
    pub fn rate(&self, head: HeadId, case: u8) -> f64 {
        let n = self.n_labeled[case as usize - 1];
        if n == 0 {
            0.0
        } else {
            self.count(head, case) as f64 / n as f64
        }
    }

    pub fn total(&self, case: u8) -> u64 {
        self.counts.iter().map(|c| c[case as usize - 1]).sum()
    }

    pub fn set_count(&mut self, head: HeadId, case: u8, count: u64) {
        let i = self.shape.index(head);
        self.counts[i][case as usize - 1] = count;
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "layer", "head", "case1", "case2", "case3", "case4", "rate1", "rate2", "rate3", "rate4",
        ])?;
        for h in self.shape.heads() {
            let mut row = vec![h.layer.to_string(), h.head.to_string()];
            row.extend((1..=4).map(|c| self.count(h, c).to_string()));
            row.extend((1..=4).map(|c| self.rate(h, c).to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// A set of heads plus the expression that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSet {
    pub shape: HeadShape,
    pub members: BTreeSet<HeadId>,
    pub provenance: String,
}

fn wrap(expr: &str) -> String {
    if expr.contains(' ') {
        format!("({expr})")
    } else {
        expr.to_string()
    }
}

impl HeadSet {
    pub fn new(
        shape: HeadShape,
        heads: impl IntoIterator<Item = HeadId>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let members: BTreeSet<HeadId> = heads.into_iter().collect();
        for h in &members {
            shape.check(*h)?;
        }
        Ok(Self {
            shape,
            members,
            provenance: provenance.into(),
        })
    }

    pub fn empty(shape: HeadShape) -> Self {
        Self {
            shape,
            members: BTreeSet::new(),
            provenance: "∅".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, head: HeadId) -> bool {
        self.members.contains(&head)
    }

    fn combine(&self, other: &Self, op: &str, members: BTreeSet<HeadId>) -> Self {
        Self {
            shape: self.shape,
            members,
            provenance: format!("{} {op} {}", wrap(&self.provenance), wrap(&other.provenance)),
        }
    }

    fn same_config(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ConfigMismatch {
                left: format!("{}x{}", self.shape.n_layers, self.shape.n_heads),
                right: format!("{}x{}", other.shape.n_layers, other.shape.n_heads),
            });
        }
        Ok(())
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_config(other)?;
        Ok(self.combine(other, "∪", self.members.union(&other.members).copied().collect()))
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.same_config(other)?;
        Ok(self.combine(other, "∩", self.members.intersection(&other.members).copied().collect()))
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.same_config(other)?;
        Ok(self.combine(other, "\\", self.members.difference(&other.members).copied().collect()))
    }

    /// Every head of the model not in this set.
    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape,
            members: self.shape.heads().filter(|h| !self.members.contains(h)).collect(),
            provenance: format!("¬{}", wrap(&self.provenance)),
        }
    }
}

/// Ranking key for case tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ranking {
    #[default]
    Count,
    Rate,
}

/// How several cases are combined into one selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnionMode {
    /// Rank by the summed per-case score, then take k.
    #[default]
    SummedCounts,
    /// Take k per case and unite the lists.
    UnionOfTopK,
}

fn ranked(table: &CaseCountTable, cases: &[u8], k: usize, ranking: Ranking) -> Vec<HeadId> {
    let mut scored: Vec<(HeadId, u64, f64)> = table
        .shape
        .heads()
        .map(|h| {
            let count = cases.iter().map(|c| table.count(h, *c)).sum();
            let rate = cases.iter().map(|c| table.rate(h, *c)).sum();
            (h, count, rate)
        })
        .filter(|(_, count, _)| *count > 0)
        .collect();
    match ranking {
        Ranking::Count => scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0))),
        Ranking::Rate => scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0))),
    }
    scored.into_iter().take(k).map(|(h, _, _)| h).collect()
}

/// The k heads that occur most often in a case. Heads that never occur are
/// not selected, so the result may hold fewer than k heads.
pub fn top_heads_for_case(table: &CaseCountTable, case: u8, k: usize, ranking: Ranking) -> HeadSet {
    HeadSet {
        shape: table.shape,
        members: ranked(table, &[case], k, ranking).into_iter().collect(),
        provenance: format!("top{k}(C{case})"),
    }
}

pub fn select_top_of_union(
    table: &CaseCountTable,
    cases: &[u8],
    k: usize,
    ranking: Ranking,
    mode: UnionMode,
) -> HeadSet {
    let names: Vec<String> = cases.iter().map(|c| format!("C{c}")).collect();
    match mode {
        UnionMode::SummedCounts => HeadSet {
            shape: table.shape,
            members: ranked(table, cases, k, ranking).into_iter().collect(),
            provenance: format!("top{k}({})", names.join("+")),
        },
        UnionMode::UnionOfTopK => {
            let mut members = BTreeSet::new();
            for c in cases {
                members.extend(ranked(table, &[*c], k, ranking));
            }
            let parts: Vec<String> = names.iter().map(|n| format!("top{k}({n})")).collect();
            HeadSet {
                shape: table.shape,
                members,
                provenance: parts.join(" ∪ "),
            }
        }
    }
}

pub fn mask_plan_from(set: &HeadSet, scope: MaskScope) -> MaskPlan {
    MaskPlan::new(set.provenance.clone(), set.members.iter().copied(), scope)
}

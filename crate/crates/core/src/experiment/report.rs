// SPDX-License-Identifier: MIT OR Apache-2.0

//! Record schemas and the tables derived from them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_json, read_jsonl, write_csv, ExperimentConfig, RunManifest, CONFIG_COPY, MANIFEST_FILE};
use crate::downstream::{summarize, DownstreamRecord, DownstreamReport};
use crate::error::{Error, Result};
use crate::flip::{label_record, yes_percentage, ConversationRecord};
use crate::head_sets::{CaseCountTable, HeadSet};
use crate::metrics::{band_histogram, top_k_heads, Answer, BandEdges, HeadScoreTable, MetricKind};
use crate::probe::{HeadId, HeadShape};

/// Mask key used for unmasked conversations.
pub const NO_MASK: &str = "no-mask";

pub fn variant_name(with_bot_marker: bool) -> &'static str {
    if with_bot_marker {
        "marker"
    } else {
        "no-marker"
    }
}

pub fn mask_key(record: &ConversationRecord) -> &str {
    record.mask_applied.as_deref().unwrap_or(NO_MASK)
}

/// One first-turn generation of the detection split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub sample_id: String,
    pub needle_id: String,
    pub with_bot_marker: bool,
    pub seed: u64,
    pub target_length: usize,
    pub depth: f64,
    pub needle_start: usize,
    pub answer: String,
    pub generated: Vec<u32>,
    pub recall: f64,
    /// Steps that emitted a needle token.
    pub needle_steps: usize,
    /// Non-zero per-head retrieval scores of this sample.
    pub scores: Vec<(HeadId, f64)>,
}

pub fn retrieval_table(shape: HeadShape, records: &[DetectionRecord]) -> Result<HeadScoreTable> {
    let dense = records
        .iter()
        .map(|r| {
            let mut v = vec![0.0; shape.census()];
            for (h, s) in &r.scores {
                shape.check(*h)?;
                v[shape.index(*h)] = *s;
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    HeadScoreTable::mean_of(shape, MetricKind::Retrieval, &dense)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band: String,
    pub no_marker: Option<usize>,
    pub marker: Option<usize>,
}

pub fn band_rows(tables: &[(bool, HeadScoreTable)], edges: BandEdges) -> Vec<BandRow> {
    let hist: Vec<(bool, [usize; 4])> = tables.iter().map(|(m, t)| (*m, band_histogram(t, edges))).collect();
    let get = |marker: bool, i: usize| hist.iter().find(|(m, _)| *m == marker).map(|(_, h)| h[i]);
    edges
        .labels()
        .into_iter()
        .enumerate()
        .map(|(i, band)| BandRow {
            band,
            no_marker: get(false, i),
            marker: get(true, i),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopHeadRow {
    pub variant: String,
    pub rank: usize,
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

pub fn top_head_rows(tables: &[(bool, HeadScoreTable)], n: usize) -> Vec<TopHeadRow> {
    let mut out = Vec::new();
    for (marker, t) in tables {
        for (i, h) in top_k_heads(t, n).into_iter().enumerate() {
            out.push(TopHeadRow {
                variant: variant_name(*marker).into(),
                rank: i + 1,
                layer: h.layer,
                head: h.head,
                score: t.get(h),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSummaryRow {
    pub mask: String,
    pub n: usize,
    pub turn1_correct: usize,
    pub yes: usize,
    pub no: usize,
    pub incoherent: usize,
    pub yes_pct: f64,
}

/// One row per mask key, in order of first appearance.
pub fn flip_summary(records: &[ConversationRecord]) -> Result<Vec<FlipSummaryRow>> {
    let mut keys: Vec<&str> = Vec::new();
    for r in records {
        if !keys.contains(&mask_key(r)) {
            keys.push(mask_key(r));
        }
    }
    keys.into_iter()
        .map(|k| {
            let subset: Vec<&ConversationRecord> = records.iter().filter(|r| mask_key(r) == k).collect();
            let s = yes_percentage(subset.iter().copied())?;
            Ok(FlipSummaryRow {
                mask: k.to_string(),
                n: s.total,
                turn1_correct: subset.iter().filter(|r| r.turn1_correct).count(),
                yes: s.yes,
                no: s.no,
                incoherent: s.incoherent,
                yes_pct: s.percent(),
            })
        })
        .collect()
}

/// A mask evaluated by the sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub id: String,
    pub strategy: String,
    pub k: usize,
    pub draw: Option<usize>,
    pub seed: Option<u64>,
    pub heads: Vec<HeadId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub k: usize,
    pub draw: Option<usize>,
    pub n: usize,
    pub yes: usize,
    pub no: usize,
    pub incoherent: usize,
    pub yes_pct: f64,
}

pub fn sweep_rows(plans: &[SweepPlan], records: &[ConversationRecord]) -> Result<Vec<SweepRow>> {
    plans
        .iter()
        .map(|p| {
            let s = yes_percentage(records.iter().filter(|r| mask_key(r) == p.id))?;
            Ok(SweepRow {
                strategy: p.strategy.clone(),
                k: p.k,
                draw: p.draw,
                n: s.total,
                yes: s.yes,
                no: s.no,
                incoherent: s.incoherent,
                yes_pct: s.percent(),
            })
        })
        .collect()
}

/// Sweep cells averaged over random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCellRow {
    pub strategy: String,
    pub k: usize,
    pub draws: usize,
    pub mean_yes_pct: f64,
    pub mean_incoherent: f64,
}

pub fn sweep_cells(rows: &[SweepRow]) -> Vec<SweepCellRow> {
    let mut cells: Vec<SweepCellRow> = Vec::new();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        match cells.iter().position(|c| c.strategy == r.strategy && c.k == r.k) {
            Some(i) => {
                cells[i].draws += 1;
                sums[i].0 += r.yes_pct;
                sums[i].1 += r.incoherent as f64;
            }
            None => {
                cells.push(SweepCellRow {
                    strategy: r.strategy.clone(),
                    k: r.k,
                    draws: 1,
                    mean_yes_pct: 0.0,
                    mean_incoherent: 0.0,
                });
                sums.push((r.yes_pct, r.incoherent as f64));
            }
        }
    }
    for (c, (y, i)) in cells.iter_mut().zip(sums) {
        c.mean_yes_pct = y / c.draws as f64;
        c.mean_incoherent = i / c.draws as f64;
    }
    cells
}

/// Case counts over coherent records. The standard table uses records
/// expecting "yes"; the symmetric table uses records expecting "no".
pub fn case_table(shape: HeadShape, records: &[ConversationRecord], symmetric: bool) -> Result<CaseCountTable> {
    let want = if symmetric { Answer::No } else { Answer::Yes };
    let mut table = CaseCountTable::new(shape);
    for r in records.iter().filter(|r| r.expected_turn2 == want) {
        let labels = label_record(r, shape, symmetric)?;
        table.add(r, &labels)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResultRow {
    pub set: String,
    pub n_heads: usize,
    pub n: usize,
    pub yes: usize,
    pub no: usize,
    pub incoherent: usize,
    pub yes_pct: f64,
}

/// The unmasked row followed by one row per set with records.
pub fn mask_result_rows(sets: &[HeadSet], records: &[ConversationRecord]) -> Result<Vec<MaskResultRow>> {
    let mut keys = vec![(NO_MASK.to_string(), 0)];
    keys.extend(sets.iter().map(|s| (s.provenance.clone(), s.len())));
    let mut out = Vec::new();
    for (key, n_heads) in keys {
        let subset: Vec<&ConversationRecord> = records.iter().filter(|r| mask_key(r) == key).collect();
        if subset.is_empty() {
            continue;
        }
        let s = yes_percentage(subset)?;
        out.push(MaskResultRow {
            set: key,
            n_heads,
            n: s.total,
            yes: s.yes,
            no: s.no,
            incoherent: s.incoherent,
            yes_pct: s.percent(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskCurveRow {
    pub n_heads: usize,
    pub set: String,
    pub yes_pct: f64,
}

/// Masked-head count against the share of "yes" replies.
pub fn mask_curve(rows: &[MaskResultRow]) -> Vec<MaskCurveRow> {
    let mut out: Vec<MaskCurveRow> = rows
        .iter()
        .map(|r| MaskCurveRow {
            n_heads: r.n_heads,
            set: r.set.clone(),
            yes_pct: r.yes_pct,
        })
        .collect();
    out.sort_by_key(|r| r.n_heads);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleRow {
    pub needle_id: String,
    pub factual: bool,
    pub n: usize,
    pub yes: usize,
    pub yes_pct: f64,
}

/// Unmasked share of "yes" replies per needle, sorted by needle id.
pub fn needle_rows(records: &[ConversationRecord]) -> Vec<NeedleRow> {
    let mut by: BTreeMap<&str, (bool, usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.mask_applied.is_none()) {
        let e = by.entry(&r.needle_id).or_insert((r.factual, 0, 0));
        e.1 += 1;
        if r.turn2_class == crate::flip::AnswerClass::Yes {
            e.2 += 1;
        }
    }
    by.into_iter()
        .map(|(id, (factual, n, yes))| NeedleRow {
            needle_id: id.to_string(),
            factual,
            n,
            yes,
            yes_pct: 100.0 * yes as f64 / n as f64,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub set: String,
    pub n_heads: usize,
    pub n: usize,
    pub correct_no: usize,
    pub yes: usize,
    pub incoherent: usize,
    pub no_pct: f64,
}

pub fn control_rows(sets: &[HeadSet], records: &[ConversationRecord]) -> Result<Vec<ControlRow>> {
    mask_result_rows(sets, records).map(|rows| {
        rows.into_iter()
            .map(|r| ControlRow {
                set: r.set,
                n_heads: r.n_heads,
                n: r.n,
                correct_no: r.no,
                yes: r.yes,
                incoherent: r.incoherent,
                no_pct: 100.0 * r.no as f64 / r.n as f64,
            })
            .collect()
    })
}

/// One report per (dataset, mask setting), in order of first appearance.
pub fn downstream_reports(records: &[DownstreamRecord]) -> Result<Vec<DownstreamReport>> {
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for r in records {
        let k = (r.dataset.as_str(), r.mask_setting.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(d, m)| {
            let subset: Vec<&DownstreamRecord> = records
                .iter()
                .filter(|r| r.dataset == d && r.mask_setting == m)
                .collect();
            summarize(d, m, &subset)
        })
        .collect()
}

/// What `cmd_report` produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportSummary {
    pub written: Vec<String>,
    pub notices: Vec<String>,
}

/// Rebuild every table from the records indexed by the manifest.
pub fn cmd_report(output_dir: &Path) -> Result<ReportSummary> {
    let manifest: RunManifest = read_json(&output_dir.join(MANIFEST_FILE))?;
    let cfg_path = output_dir.join(CONFIG_COPY);
    let config =
        ExperimentConfig::from_toml(&std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?)?;
    let shape = manifest.head_shape;
    let dir = output_dir.join("report");
    let mut summary = ReportSummary::default();
    let mut emit = |name: &str, result: Result<()>| -> Result<()> {
        result?;
        summary.written.push(format!("report/{name}"));
        Ok(())
    };
    let mut notices = Vec::new();
    let run = |name: &str| manifest.runs.get(name);

    if run("detect").is_some() {
        let mut tables = Vec::new();
        for marker in [false, true] {
            let path = output_dir
                .join("detect")
                .join(variant_name(marker))
                .join("records.jsonl");
            if path.exists() {
                let records: Vec<DetectionRecord> = read_jsonl(&path)?;
                tables.push((marker, retrieval_table(shape, &records)?));
            }
        }
        emit(
            "bands.csv",
            write_csv(&dir.join("bands.csv"), &band_rows(&tables, config.bands)),
        )?;
        emit(
            "top_heads.csv",
            write_csv(
                &dir.join("top_heads.csv"),
                &top_head_rows(&tables, config.detection.top_n),
            ),
        )?;
    } else {
        notices.push("detect-heads has not run: band and top-head tables skipped".to_string());
    }

    if run("flip").is_some() {
        let records: Vec<ConversationRecord> = read_jsonl(&output_dir.join("flip/records.jsonl"))?;
        emit("flip.csv", write_csv(&dir.join("flip.csv"), &flip_summary(&records)?))?;
    } else {
        notices.push("flip-eval has not run: flip summary skipped".to_string());
    }

    if run("sweep").is_some() {
        let plans: Vec<SweepPlan> = read_json(&output_dir.join("sweep/plans.json"))?;
        let records: Vec<ConversationRecord> = read_jsonl(&output_dir.join("sweep/records.jsonl"))?;
        let rows = sweep_rows(&plans, &records)?;
        emit("sweep.csv", write_csv(&dir.join("sweep.csv"), &rows))?;
        emit(
            "sweep_cells.csv",
            write_csv(&dir.join("sweep_cells.csv"), &sweep_cells(&rows)),
        )?;
    } else {
        notices.push("mask-sweep has not run: sweep tables skipped".to_string());
    }

    if run("uncertainty").is_some() {
        let train: Vec<ConversationRecord> = read_jsonl(&output_dir.join("uncertainty/train_records.jsonl"))?;
        let test: Vec<ConversationRecord> = read_jsonl(&output_dir.join("uncertainty/test_records.jsonl"))?;
        let sets: Vec<HeadSet> = read_json(&output_dir.join("uncertainty/sets.json"))?;
        let cases = case_table(shape, &train, false)?;
        emit("cases.csv", write_case_table(&dir.join("cases.csv"), &cases))?;
        if config.uncertainty.symmetric_labels {
            let sym = case_table(shape, &train, true)?;
            emit(
                "cases_symmetric.csv",
                write_case_table(&dir.join("cases_symmetric.csv"), &sym),
            )?;
        }
        let rows = mask_result_rows(&sets, &test)?;
        emit("masking.csv", write_csv(&dir.join("masking.csv"), &rows))?;
        emit(
            "mask_curve.csv",
            write_csv(&dir.join("mask_curve.csv"), &mask_curve(&rows)),
        )?;
        emit("needles.csv", write_csv(&dir.join("needles.csv"), &needle_rows(&test)))?;
    } else {
        notices.push("uncertainty has not run: case, masking and per-needle tables skipped".to_string());
    }

    if run("control").is_some() {
        let sets: Vec<HeadSet> = read_json(&output_dir.join("control/sets.json"))?;
        let records: Vec<ConversationRecord> = read_jsonl(&output_dir.join("control/records.jsonl"))?;
        emit(
            "control.csv",
            write_csv(&dir.join("control.csv"), &control_rows(&sets, &records)?),
        )?;
    } else {
        notices.push("control has not run: control table skipped".to_string());
    }

    if run("downstream").is_some() {
        let records: Vec<DownstreamRecord> = read_jsonl(&output_dir.join("downstream/records.jsonl"))?;
        emit(
            "downstream.csv",
            write_csv(&dir.join("downstream.csv"), &downstream_reports(&records)?),
        )?;
    } else {
        notices.push("downstream has not run: downstream table skipped".to_string());
    }

    let notice_path = dir.join("notices.txt");
    super::create_parent(&notice_path)?;
    let mut text = notices.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(&notice_path, text).map_err(|e| Error::io(&notice_path, e))?;
    summary.notices = notices;
    Ok(summary)
}

pub fn write_case_table(path: &Path, table: &CaseCountTable) -> Result<()> {
    super::create_parent(path)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    table.write_csv(file)
}

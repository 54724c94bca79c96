// SPDX-License-Identifier: MIT OR Apache-2.0

//! The experiment commands. Each writes its records, derives its tables
//! with the functions in `report`, and registers itself in the manifest.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::downstream::{load_mcq, run_downstream, MaskSetting};
use crate::flip::{inject_incorrect_history, ConversationRecord, FirstTurn, FlipRunner};
use crate::haystack::{mix_seed, write_manifest, HaystackSample};
use crate::head_sets::{mask_plan_from, select_top_of_union, top_heads_for_case, HeadSet};
use crate::metrics::{retrieval_score, top_k_heads, HeadScoreTable};
use crate::probe::{AttentionTrace, HeadId, MaskPlan};

fn write_samples(path: &Path, samples: &[HaystackSample]) -> Result<()> {
    create_parent(path)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_manifest(samples, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl Experiment {
    fn runner<'a>(&'a self, settings: &'a crate::flip::FlipSettings) -> FlipRunner<'a> {
        FlipRunner::new(self.backend(), &self.config.template, settings)
    }

    fn save_trace(&self, run: &str, sample_id: &str, mask: &str, trace: &AttentionTrace) -> Result<()> {
        if !self.config.save_traces {
            return Ok(());
        }
        let path = self
            .path(run)
            .join("traces")
            .join(file_safe(sample_id))
            .join(format!("{}.jsonl", file_safe(mask)));
        create_parent(&path)?;
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        trace.write_jsonl(std::io::BufWriter::new(file))
    }

    /// Run the re-evaluation under every plan. The first turn is shared by
    /// plans that leave it unmasked. Empty plans run unmasked under their own id.
    fn evaluate_plans(
        &self,
        run: &str,
        runner: &FlipRunner<'_>,
        sample: &HaystackSample,
        first: impl Fn(Option<&MaskPlan>) -> Result<FirstTurn>,
        plans: &[MaskPlan],
        with_probe: bool,
    ) -> Result<Vec<ConversationRecord>> {
        let probe = self.probe();
        let probe = with_probe.then_some(&probe);
        let mut shared: Option<FirstTurn> = None;
        let mut out = Vec::with_capacity(plans.len());
        for plan in plans {
            let mask = (!plan.is_empty()).then_some(plan);
            let owned;
            let turn = if plan.active_in(0) {
                owned = first(mask)?;
                &owned
            } else {
                if shared.is_none() {
                    shared = Some(first(None)?);
                }
                shared.as_ref().expect("set above")
            };
            let second = runner.run_reevaluation(turn, mask, probe)?;
            let mut record = runner.record(sample, turn, &second, mask, self.answers());
            // An empty plan runs unmasked but keeps its own label.
            if mask.is_none() && plan.id != NO_MASK {
                record.mask_applied = Some(plan.id.clone());
                record.trace_ref = format!("{}/{}", sample.id, plan.id);
            }
            self.save_trace(run, &sample.id, mask_key(&record), &second.trace)?;
            out.push(record);
        }
        Ok(out)
    }

    fn conversations(
        &self,
        run: &str,
        samples: &[HaystackSample],
        plans: &[MaskPlan],
        with_probe: bool,
    ) -> Result<Vec<ConversationRecord>> {
        let settings = self.config.flip_settings();
        let runner = self.runner(&settings);
        let nested = self.par_map(samples, |s| {
            self.evaluate_plans(
                run,
                &runner,
                s,
                |m| runner.run_first_turn(s, None, m),
                plans,
                with_probe,
            )
        })?;
        Ok(nested.into_iter().flatten().collect())
    }

    /// Retrieval-head detection over both needle variants.
    pub fn cmd_detect_heads(&self) -> Result<RunEntry> {
        let settings = self.config.flip_settings();
        let runner = self.runner(&settings);
        let probe = self.probe();
        let mut entry = RunEntry::default();
        let mut tables = Vec::new();
        for &marker in &self.config.detection.marker_variants {
            let variant = variant_name(marker);
            let samples = self.split_samples(&self.config.detection.split, marker)?;
            let records = self.par_map(&samples, |s| {
                let first = runner.run_first_turn(s, Some(&probe), None)?;
                let scores = retrieval_score(&first.trace, &first.window, &first.generated)?;
                let shape = self.shape();
                self.save_trace("detect", &s.id, variant, &first.trace)?;
                Ok(DetectionRecord {
                    sample_id: s.id.clone(),
                    needle_id: s.needle.id.clone(),
                    with_bot_marker: marker,
                    seed: s.seed,
                    target_length: s.target_length,
                    depth: s.depth,
                    needle_start: first.window.start,
                    answer: first.answer.clone(),
                    recall: first.recall.recall,
                    needle_steps: first
                        .generated
                        .iter()
                        .filter(|t| first.window.tokens.contains(t))
                        .count(),
                    generated: first.generated,
                    scores: scores
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| **s > 0.0)
                        .map(|(i, s)| (shape.head_at(i), *s))
                        .collect(),
                })
            })?;
            let rel = format!("detect/{variant}");
            write_samples(&self.path(&format!("{rel}/samples.jsonl")), &samples)?;
            write_jsonl(&self.path(&format!("{rel}/records.jsonl")), &records)?;
            let table = retrieval_table(self.shape(), &records)?;
            let csv_path = self.path(&format!("{rel}/retrieval.csv"));
            create_parent(&csv_path)?;
            table.write_csv(std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?)?;
            entry.datasets.push(format!("{rel}/samples.jsonl"));
            entry.records.push(format!("{rel}/records.jsonl"));
            entry.tables.push(format!("{rel}/retrieval.csv"));
            entry.n_records += records.len();
            tables.push((marker, table));
        }
        write_csv(&self.path("detect/bands.csv"), &band_rows(&tables, self.config.bands))?;
        write_csv(
            &self.path("detect/top_heads.csv"),
            &top_head_rows(&tables, self.config.detection.top_n),
        )?;
        entry
            .tables
            .extend(["detect/bands.csv".into(), "detect/top_heads.csv".into()]);
        self.register_run("detect", entry.clone())?;
        Ok(entry)
    }

    /// Unmasked two-turn conversations over the flip-test split.
    pub fn cmd_flip_eval(&self) -> Result<RunEntry> {
        let samples = self.split_samples(&self.config.flip_test, false)?;
        let records = self.conversations("flip", &samples, &[MaskPlan::none()], true)?;
        write_samples(&self.path("flip/samples.jsonl"), &samples)?;
        write_jsonl(&self.path("flip/records.jsonl"), &records)?;
        write_csv(&self.path("flip/summary.csv"), &flip_summary(&records)?)?;
        let entry = RunEntry {
            datasets: vec!["flip/samples.jsonl".into()],
            records: vec!["flip/records.jsonl".into()],
            tables: vec!["flip/summary.csv".into()],
            n_records: records.len(),
        };
        self.register_run("flip", entry.clone())?;
        Ok(entry)
    }

    /// The unmasked plan, the top-k retrieval heads for each k, and random
    /// k-head draws.
    pub fn sweep_plans(&self, table: &HeadScoreTable) -> Vec<SweepPlan> {
        let shape = self.shape();
        let cfg = &self.config.sweep;
        let mut plans = vec![SweepPlan {
            id: NO_MASK.into(),
            strategy: "none".into(),
            k: 0,
            draw: None,
            seed: None,
            heads: Vec::new(),
        }];
        for &k in &cfg.k {
            let k = k.min(shape.census());
            let mut top = top_k_heads(table, k);
            top.sort();
            plans.push(SweepPlan {
                id: format!("top{k}"),
                strategy: "top".into(),
                k,
                draw: None,
                seed: None,
                heads: top,
            });
            for d in 0..cfg.random_draws {
                let seed = mix_seed(cfg.seed, &[k as u64, d as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut heads: Vec<HeadId> = rand::seq::index::sample(&mut rng, shape.census(), k)
                    .into_iter()
                    .map(|i| shape.head_at(i))
                    .collect();
                heads.sort();
                plans.push(SweepPlan {
                    id: format!("random{k}-{d}"),
                    strategy: "random".into(),
                    k,
                    draw: Some(d),
                    seed: Some(seed),
                    heads,
                });
            }
        }
        plans
    }

    /// Mask retrieval heads against random heads on the flip-test split.
    pub fn cmd_mask_sweep(&self) -> Result<RunEntry> {
        let variant = variant_name(self.config.sweep.use_marker_table);
        let det_path = self.path(&format!("detect/{variant}/records.jsonl"));
        if !det_path.exists() {
            return Err(Error::Experiment(format!(
                "{} is missing; run detect-heads first",
                det_path.display()
            )));
        }
        let detections: Vec<DetectionRecord> = read_jsonl(&det_path)?;
        let table = retrieval_table(self.shape(), &detections)?;
        let plans = self.sweep_plans(&table);
        let masks: Vec<MaskPlan> = plans
            .iter()
            .map(|p| MaskPlan::new(p.id.clone(), p.heads.iter().copied(), self.config.sweep.scope))
            .collect();
        let samples = self.split_samples(&self.config.flip_test, false)?;
        let records = self.conversations("sweep", &samples, &masks, false)?;
        let rows = sweep_rows(&plans, &records)?;
        write_json(&self.path("sweep/plans.json"), &plans)?;
        write_jsonl(&self.path("sweep/records.jsonl"), &records)?;
        write_csv(&self.path("sweep/summary.csv"), &rows)?;
        write_csv(&self.path("sweep/cells.csv"), &sweep_cells(&rows))?;
        let entry = RunEntry {
            datasets: vec!["sweep/plans.json".into()],
            records: vec!["sweep/records.jsonl".into()],
            tables: vec!["sweep/summary.csv".into(), "sweep/cells.csv".into()],
            n_records: records.len(),
        };
        self.register_run("sweep", entry.clone())?;
        Ok(entry)
    }

    /// Head sets from the case table: the configured set specs plus the
    /// named sets, deduplicated by provenance and without empty sets.
    pub fn build_sets(&self, cases: &crate::head_sets::CaseCountTable) -> Result<Vec<HeadSet>> {
        let cfg = &self.config.uncertainty;
        let shape = self.shape();
        let mut sets = Vec::new();
        if cases.total(1) + cases.total(2) == 0 {
            log::warn!("no flip was labeled; only named head sets are evaluated");
        } else {
            let top = |c: u8, k: usize| top_heads_for_case(cases, c, k, cfg.ranking);
            for spec in &cfg.sets {
                for &k in &spec.k {
                    let set = match spec.op {
                        SetOp::Top => top(spec.cases[0], k),
                        SetOp::Union => select_top_of_union(cases, &spec.cases, k, cfg.ranking, cfg.union_mode),
                        SetOp::Intersection => top(spec.cases[0], k).intersection(&top(spec.cases[1], k))?,
                        SetOp::Difference => top(spec.cases[0], k).difference(&top(spec.cases[1], k))?,
                    };
                    sets.push(set);
                }
            }
        }
        for named in &cfg.named_sets {
            sets.push(HeadSet::new(shape, named.heads.iter().copied(), named.name.clone())?);
        }
        let mut out: Vec<HeadSet> = Vec::new();
        for s in sets {
            if s.is_empty() {
                log::warn!("head set {} is empty and is skipped", s.provenance);
            } else if !out.iter().any(|o| o.provenance == s.provenance) {
                out.push(s);
            }
        }
        Ok(out)
    }

    /// Label training conversations, derive head sets, and mask them on
    /// the test split.
    pub fn cmd_uncertainty_pipeline(&self) -> Result<RunEntry> {
        let cfg = &self.config.uncertainty;
        let train = self.split_samples(&cfg.train, false)?;
        let train_records = self.conversations("uncertainty", &train, &[MaskPlan::none()], true)?;
        let cases = case_table(self.shape(), &train_records, false)?;
        let mut tables = vec!["uncertainty/cases.csv".to_string()];
        write_case_table(&self.path("uncertainty/cases.csv"), &cases)?;
        if cfg.symmetric_labels {
            let sym = case_table(self.shape(), &train_records, true)?;
            write_case_table(&self.path("uncertainty/cases_symmetric.csv"), &sym)?;
            tables.push("uncertainty/cases_symmetric.csv".into());
        }
        let sets = self.build_sets(&cases)?;

        let test = self.split_samples(&cfg.test, false)?;
        let mut plans = vec![MaskPlan::none()];
        plans.extend(sets.iter().map(|s| mask_plan_from(s, cfg.scope)));
        let test_records = self.conversations("uncertainty", &test, &plans, false)?;
        let rows = mask_result_rows(&sets, &test_records)?;

        write_samples(&self.path("uncertainty/train_samples.jsonl"), &train)?;
        write_samples(&self.path("uncertainty/test_samples.jsonl"), &test)?;
        write_jsonl(&self.path("uncertainty/train_records.jsonl"), &train_records)?;
        write_jsonl(&self.path("uncertainty/test_records.jsonl"), &test_records)?;
        write_json(&self.path("uncertainty/sets.json"), &sets)?;
        write_csv(&self.path("uncertainty/masking.csv"), &rows)?;
        write_csv(&self.path("uncertainty/mask_curve.csv"), &mask_curve(&rows))?;
        write_csv(&self.path("uncertainty/needles.csv"), &needle_rows(&test_records))?;
        tables.extend([
            "uncertainty/masking.csv".into(),
            "uncertainty/mask_curve.csv".into(),
            "uncertainty/needles.csv".into(),
        ]);
        let entry = RunEntry {
            datasets: vec![
                "uncertainty/train_samples.jsonl".into(),
                "uncertainty/test_samples.jsonl".into(),
                "uncertainty/sets.json".into(),
            ],
            records: vec![
                "uncertainty/train_records.jsonl".into(),
                "uncertainty/test_records.jsonl".into(),
            ],
            tables,
            n_records: train_records.len() + test_records.len(),
        };
        self.register_run("uncertainty", entry.clone())?;
        Ok(entry)
    }

    fn load_sets(&self) -> Result<Vec<HeadSet>> {
        let path = self.path("uncertainty/sets.json");
        if !path.exists() {
            return Err(Error::Experiment(format!(
                "{} is missing; run uncertainty first",
                path.display()
            )));
        }
        let sets: Vec<HeadSet> = read_json(&path)?;
        for s in &sets {
            if s.shape != self.shape() {
                return Err(Error::ConfigMismatch {
                    left: s.shape.to_string(),
                    right: self.shape().to_string(),
                });
            }
        }
        Ok(sets)
    }

    /// Inject wrong first answers and check that masking does not turn a
    /// justified "no" into "yes".
    pub fn cmd_control(&self) -> Result<RunEntry> {
        let all = self.load_sets()?;
        let wanted = &self.config.control.sets;
        let sets: Vec<HeadSet> = if wanted.is_empty() {
            all
        } else {
            wanted
                .iter()
                .filter_map(|w| {
                    let found = all.iter().find(|s| &s.provenance == w).cloned();
                    if found.is_none() {
                        log::warn!("control set {w} is not among the uncertainty sets");
                    }
                    found
                })
                .collect()
        };
        let mut split = self.config.uncertainty.test.clone();
        let pool = self.select_needles(&split.needles)?;
        split.needles = pool
            .iter()
            .filter(|n| n.wrong_answer.is_some())
            .map(|n| n.id.clone())
            .collect();
        if split.needles.is_empty() {
            return Err(Error::Experiment("no test needle has a wrong_answer".into()));
        }
        let samples = self.split_samples(&split, false)?;
        let scope = self.config.uncertainty.scope;
        let mut plans = vec![MaskPlan::none()];
        plans.extend(sets.iter().map(|s| mask_plan_from(s, scope)));

        let settings = self.config.flip_settings();
        let runner = self.runner(&settings);
        let nested = self.par_map(&samples, |s| {
            let wrong = s.needle.wrong_answer.as_deref().expect("filtered above");
            inject_incorrect_history(s, wrong, settings.threshold)?;
            self.evaluate_plans(
                "control",
                &runner,
                s,
                |_| runner.first_turn_with_answer(s, wrong),
                &plans,
                false,
            )
        })?;
        let records: Vec<ConversationRecord> = nested.into_iter().flatten().collect();
        write_samples(&self.path("control/samples.jsonl"), &samples)?;
        write_json(&self.path("control/sets.json"), &sets)?;
        write_jsonl(&self.path("control/records.jsonl"), &records)?;
        write_csv(&self.path("control/summary.csv"), &control_rows(&sets, &records)?)?;
        let entry = RunEntry {
            datasets: vec!["control/samples.jsonl".into(), "control/sets.json".into()],
            records: vec!["control/records.jsonl".into()],
            tables: vec!["control/summary.csv".into()],
            n_records: records.len(),
        };
        self.register_run("control", entry.clone())?;
        Ok(entry)
    }

    /// Mask settings for the MCQ evaluation: unmasked, the named pair, and
    /// the case 1 + case 2 selection when training records exist.
    pub fn downstream_masks(&self) -> Result<Vec<MaskSetting>> {
        let cfg = &self.config.downstream;
        let shape = self.shape();
        let mut out = vec![MaskSetting {
            name: NO_MASK.into(),
            plan: MaskPlan::none(),
        }];
        match self.config.uncertainty.named_sets.iter().find(|n| n.name == cfg.pair) {
            Some(named) => {
                let set = HeadSet::new(shape, named.heads.iter().copied(), named.name.clone())?;
                out.push(MaskSetting {
                    name: named.name.clone(),
                    plan: mask_plan_from(&set, cfg.scope),
                });
            }
            None => log::warn!("named set {} is not configured; pair setting skipped", cfg.pair),
        }
        let train_path = self.path("uncertainty/train_records.jsonl");
        if train_path.exists() {
            let records: Vec<ConversationRecord> = read_jsonl(&train_path)?;
            let cases = case_table(shape, &records, false)?;
            let u = &self.config.uncertainty;
            let set = select_top_of_union(&cases, &[1, 2], cfg.union_k, u.ranking, u.union_mode);
            if set.is_empty() {
                log::warn!("{} is empty; union setting skipped", set.provenance);
            } else {
                out.push(MaskSetting {
                    name: set.provenance.clone(),
                    plan: mask_plan_from(&set, cfg.scope),
                });
            }
        } else {
            log::warn!("no uncertainty training records; union setting skipped");
        }
        Ok(out)
    }

    /// Two-turn MCQ evaluation under each mask setting.
    pub fn cmd_downstream(&self) -> Result<RunEntry> {
        if self.config.data.mcq.is_empty() {
            return Err(Error::Config("no MCQ datasets configured".into()));
        }
        let masks = self.downstream_masks()?;
        let settings = self.config.downstream_settings();
        let mut records = Vec::new();
        for d in &self.config.data.mcq {
            let items = load_mcq(&d.path)?;
            if items.is_empty() {
                log::warn!("MCQ dataset {} is empty", d.name);
                continue;
            }
            let (r, _) = self.install(|| {
                run_downstream(
                    self.backend(),
                    &self.config.template,
                    &settings,
                    &d.name,
                    &items,
                    &masks,
                )
            })?;
            records.extend(r);
        }
        write_jsonl(&self.path("downstream/records.jsonl"), &records)?;
        write_csv(&self.path("downstream/report.csv"), &downstream_reports(&records)?)?;
        let entry = RunEntry {
            datasets: self.config.data.mcq.iter().map(|d| d.name.clone()).collect(),
            records: vec!["downstream/records.jsonl".into()],
            tables: vec!["downstream/report.csv".into()],
            n_records: records.len(),
        };
        self.register_run("downstream", entry.clone())?;
        Ok(entry)
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;

use common::{scripted_backend, scripted_experiment, split, write_data, FLIP_HEADS};
use headprobe::downstream::{DownstreamRecord, DownstreamReport};
use headprobe::experiment::{
    cmd_report, read_json, read_jsonl, ControlRow, ExperimentConfig, MaskResultRow, RunManifest, SweepPlan, SweepRow,
};
use headprobe::fixtures::sample_mcq;
use headprobe::{ConversationRecord, Error, HeadId};

fn rows<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

/// A small scripted setup: 2 training needles that flip, 2 that keep, and
/// a test split where t01 flips and t03 keeps.
fn config(root: &Path) -> ExperimentConfig {
    let mut cfg = write_data(root);
    cfg.generation.turn1_max_new = 64;
    cfg.detection.split = split(&["d01", "d02"], &[200], &[0.5], 1, 1);
    cfg.flip_test = split(&["t01", "t03"], &[200], &[0.3, 0.7], 1, 2);
    cfg.uncertainty.train = split(&["u01", "u02", "u03", "u04"], &[200], &[0.5], 1, 4);
    cfg.uncertainty.test = split(&["t01", "t02", "t03"], &[200], &[0.5], 1, 5);
    cfg.uncertainty.named_sets[0].heads = FLIP_HEADS.to_vec();
    cfg
}

const FLIPPERS: [&str; 4] = ["u01", "u02", "t01", "t02"];

#[test]
fn report_with_only_detection_lists_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_experiment(config(dir.path()), scripted_backend(&FLIPPERS, false));
    let entry = exp.cmd_detect_heads().unwrap();
    assert_eq!(entry.n_records, 2 * 2);
    let summary = cmd_report(exp.output_dir()).unwrap();
    assert!(summary.written.iter().any(|w| w.ends_with("bands.csv")));
    assert!(summary.written.iter().any(|w| w.ends_with("top_heads.csv")));
    assert_eq!(summary.notices.len(), 5, "{:?}", summary.notices);
    for (name, table) in [
        ("bands.csv", "detect/bands.csv"),
        ("top_heads.csv", "detect/top_heads.csv"),
    ] {
        let a = std::fs::read(exp.output_dir().join("report").join(name)).unwrap();
        let b = std::fs::read(exp.output_dir().join(table)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn report_needs_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cmd_report(dir.path()).is_err());
}

#[test]
fn sweep_matches_hand_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.sweep.k = vec![2, 3];
    cfg.sweep.random_draws = 4;
    let exp = scripted_experiment(cfg, scripted_backend(&FLIPPERS, false));
    exp.cmd_detect_heads().unwrap();
    let entry = exp.cmd_mask_sweep().unwrap();
    let out = exp.output_dir();

    let plans: Vec<SweepPlan> = read_json(&out.join("sweep/plans.json")).unwrap();
    assert_eq!(plans.len(), 1 + 2 * (1 + 4));
    let top2 = plans.iter().find(|p| p.id == "top2").unwrap();
    let copy_heads: Vec<HeadId> = FLIP_HEADS.to_vec();
    assert_eq!(top2.heads, copy_heads);

    // Two samples per test needle; t01 flips unless a flip head is masked.
    let n = 4;
    assert_eq!(entry.n_records, n * plans.len());
    let summary: Vec<SweepRow> = rows(&out.join("sweep/summary.csv"));
    assert_eq!(summary.len(), plans.len());
    for p in &plans {
        let row = summary
            .iter()
            .find(|r| r.strategy == p.strategy && r.k == p.k && r.draw == p.draw)
            .unwrap();
        let blocked = p.heads.iter().any(|h| FLIP_HEADS.contains(h));
        let yes = if blocked { n } else { n / 2 };
        assert_eq!((row.n, row.yes, row.no), (n, yes, n - yes), "{}", p.id);
        assert_eq!(row.yes_pct, 100.0 * (yes as f64 / n as f64));
    }
}

#[test]
fn empty_masks_leave_every_reply_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.sweep.k = vec![0];
    cfg.sweep.random_draws = 2;
    let exp = scripted_experiment(cfg, scripted_backend(&FLIPPERS, false));
    exp.cmd_detect_heads().unwrap();
    exp.cmd_mask_sweep().unwrap();
    let summary: Vec<SweepRow> = rows(&exp.output_dir().join("sweep/summary.csv"));
    assert_eq!(summary.len(), 4);
    assert!(summary
        .iter()
        .all(|r| r.yes_pct == summary[0].yes_pct && r.yes == summary[0].yes));
}

#[test]
fn sweep_requires_detection() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_experiment(config(dir.path()), scripted_backend(&FLIPPERS, false));
    assert!(matches!(exp.cmd_mask_sweep(), Err(Error::Experiment(_))));
}

#[test]
fn no_flips_leave_only_the_unmasked_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.uncertainty.named_sets.clear();
    let exp = scripted_experiment(cfg, scripted_backend(&[], false));
    exp.cmd_uncertainty_pipeline().unwrap();
    let masking: Vec<MaskResultRow> = rows(&exp.output_dir().join("uncertainty/masking.csv"));
    assert_eq!(masking.len(), 1);
    assert_eq!(masking[0].set, "no-mask");
    assert_eq!(masking[0].yes_pct, 100.0);
}

#[test]
fn control_separates_a_yes_bias() {
    for bias in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        cfg.control.sets = vec!["top2(C1+C2)".into(), "pair".into(), "absent".into()];
        let exp = scripted_experiment(cfg, scripted_backend(&FLIPPERS, bias));
        exp.cmd_uncertainty_pipeline().unwrap();
        exp.cmd_control().unwrap();
        let out = exp.output_dir();
        let control: Vec<ControlRow> = rows(&out.join("control/summary.csv"));
        let names: Vec<&str> = control.iter().map(|r| r.set.as_str()).collect();
        assert_eq!(names, ["no-mask", "top2(C1+C2)", "pair"]);
        let records: Vec<ConversationRecord> = read_jsonl(&out.join("control/records.jsonl")).unwrap();
        assert!(records.iter().all(|r| r.injected && !r.turn1_correct));
        assert_eq!(control[0].no_pct, 100.0);
        for r in &control[1..] {
            if bias {
                assert_eq!((r.yes, r.no_pct), (r.n, 0.0), "{}", r.set);
            } else {
                assert_eq!(r.no_pct, control[0].no_pct, "{}", r.set);
            }
        }
    }
}

#[test]
fn downstream_runs_every_mask_setting() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_experiment(config(dir.path()), scripted_backend(&FLIPPERS, false));
    let without = exp.downstream_masks().unwrap();
    assert_eq!(
        without.iter().map(|m| m.name.as_str()).collect::<Vec<_>>(),
        ["no-mask", "pair"]
    );
    exp.cmd_uncertainty_pipeline().unwrap();
    exp.cmd_downstream().unwrap();
    let out = exp.output_dir();
    let report: Vec<DownstreamReport> = rows(&out.join("downstream/report.csv"));
    let settings: BTreeSet<&str> = report.iter().map(|r| r.mask_setting.as_str()).collect();
    assert_eq!(settings, BTreeSet::from(["no-mask", "pair", "top2(C1+C2)"]));
    let items = sample_mcq().len();
    assert!(report.iter().all(|r| r.n == items));
    let records: Vec<DownstreamRecord> = read_jsonl(&out.join("downstream/records.jsonl")).unwrap();
    assert_eq!(records.len(), 3 * items);
}

#[test]
fn config_changes_reset_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let exp = scripted_experiment(cfg.clone(), scripted_backend(&FLIPPERS, false));
    exp.cmd_detect_heads().unwrap();
    exp.cmd_flip_eval().unwrap();
    let manifest: RunManifest = read_json(&exp.output_dir().join("manifest.json")).unwrap();
    assert_eq!(manifest.runs.keys().collect::<Vec<_>>(), ["detect", "flip"]);

    let mut changed = cfg;
    changed.sweep.seed += 1;
    let exp = scripted_experiment(changed, scripted_backend(&FLIPPERS, false));
    exp.cmd_flip_eval().unwrap();
    let after: RunManifest = read_json(&exp.output_dir().join("manifest.json")).unwrap();
    assert_eq!(after.runs.keys().collect::<Vec<_>>(), ["flip"]);
    assert_ne!(after.config_hash, manifest.config_hash);
}

#[test]
fn failures_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_experiment(config(dir.path()), scripted_backend(&FLIPPERS, false));
    let samples = exp.split_samples(&exp_split(), false).unwrap();
    let bad = samples[1].id.clone();
    let err = exp
        .par_map(
            &samples,
            |s| if s.id == bad { Err(Error::EmptyRecords) } else { Ok(()) },
        )
        .unwrap_err();
    match err {
        Error::Sample { sample, source } => {
            assert_eq!(sample, bad);
            assert!(matches!(*source, Error::EmptyRecords));
        }
        other => panic!("unexpected {other}"),
    }
}

fn exp_split() -> headprobe::experiment::SplitConfig {
    split(&["d01", "d02", "d03"], &[150], &[0.5], 1, 9)
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_headprobe"))
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn cli_runs_detection_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let init = cli(&["init-tiny", root]);
    assert!(init.status.success(), "{}", String::from_utf8_lossy(&init.stderr));

    let path = dir.path().join("experiment.toml");
    let mut cfg = ExperimentConfig::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
    cfg.detection.split = split(&["d01"], &[150], &[0.5], 1, 1);
    cfg.detection.marker_variants = vec![false];
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();

    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let run = cli(&["detect-heads", "-c", path.to_str().unwrap(), "-o", out_s, "-j", "1"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).contains("detect-heads: 1 records"));
    let report = cli(&["report", out_s]);
    assert!(report.status.success());
    assert!(out.join("report/bands.csv").exists());

    let missing = cli(&["flip-eval", "-c", "/nonexistent/config.toml"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}

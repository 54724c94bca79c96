// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chat::ChatTemplate;
use crate::downstream::{DownstreamSettings, DEFAULT_MCQ_PROMPT};
use crate::error::{Error, Result};
use crate::flip::{FlipSettings, DEFAULT_CORRECTNESS_THRESHOLD, DEFAULT_QUESTION_PROMPT, DEFAULT_REEVALUATION_PROMPT};
use crate::head_sets::{Ranking, UnionMode};
use crate::metrics::{BandEdges, NO_VARIANTS, YES_VARIANTS};
use crate::probe::{HeadId, MaskScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub threads: usize,
    /// Also write full second-turn traces next to the records.
    pub save_traces: bool,
    pub correctness_threshold: f64,
    /// Upper bound on haystack lengths.
    pub max_haystack_tokens: usize,
    pub model: ModelPaths,
    pub data: DataConfig,
    pub template: ChatTemplate,
    pub prompts: Prompts,
    pub generation: GenerationConfig,
    pub answers: AnswerConfig,
    pub bands: BandEdges,
    pub detection: DetectionConfig,
    pub flip_test: SplitConfig,
    pub sweep: SweepConfig,
    pub uncertainty: UncertaintyConfig,
    pub control: ControlConfig,
    pub downstream: DownstreamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelPaths {
    pub weights: PathBuf,
    pub tokenizer: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `*.txt` filler documents.
    pub corpus: PathBuf,
    pub needles: PathBuf,
    pub mcq: Vec<McqDataset>,
    /// Token prepended to the needle in the marker variant.
    pub marker_token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqDataset {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    /// First-turn prompt with `{context}` and `{question}` placeholders.
    pub question: String,
    pub reevaluation: String,
    /// MCQ prompt with `{question}` and `{choices}` placeholders.
    pub mcq: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub turn1_max_new: usize,
    pub turn2_max_new: usize,
    pub mcq_max_new: usize,
    /// Attention targets kept per head and step; 1 keeps only the argmax.
    pub probe_top_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnswerConfig {
    pub yes_variants: Vec<String>,
    pub no_variants: Vec<String>,
}

/// One dataset split: needles crossed with lengths, depths and repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Needle ids; empty selects every needle in the file.
    pub needles: Vec<String>,
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub per_cell: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    pub split: SplitConfig,
    /// Which needle variants to run: `false` without, `true` with marker.
    pub marker_variants: Vec<bool>,
    /// Heads listed per variant in the top-heads table.
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k: Vec<usize>,
    pub random_draws: usize,
    pub seed: u64,
    /// Rank retrieval heads from the marker variant instead.
    pub use_marker_table: bool,
    pub scope: MaskScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetOp {
    Top,
    Union,
    Intersection,
    Difference,
}

/// A family of case-derived head sets, one per k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    pub op: SetOp,
    pub cases: Vec<u8>,
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedSet {
    pub name: String,
    pub heads: Vec<HeadId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub train: SplitConfig,
    pub test: SplitConfig,
    pub sets: Vec<SetSpec>,
    pub named_sets: Vec<NamedSet>,
    pub ranking: Ranking,
    pub union_mode: UnionMode,
    pub scope: MaskScope,
    /// Also label records whose first answer was wrong; reported separately.
    pub symmetric_labels: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// Provenance strings or named sets to mask; empty uses every set.
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    /// Named set used for the head-pair setting.
    pub pair: String,
    /// Size of the case 1 + case 2 selection.
    pub union_k: usize,
    pub scope: MaskScope,
}

fn ten_depths() -> Vec<f64> {
    vec![0.0, 0.11, 0.22, 0.33, 0.44, 0.56, 0.67, 0.78, 0.89, 1.0]
}

fn default_lengths() -> Vec<usize> {
    vec![1000, 2000, 3000, 4000, 5000]
}

impl Default for ModelPaths {
    fn default() -> Self {
        Self {
            weights: "model".into(),
            tokenizer: "model/tokenizer.json".into(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            needles: "needles.jsonl".into(),
            mcq: Vec::new(),
            marker_token: "<|begin_of_text|>".into(),
        }
    }
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            question: DEFAULT_QUESTION_PROMPT.into(),
            reevaluation: DEFAULT_REEVALUATION_PROMPT.into(),
            mcq: DEFAULT_MCQ_PROMPT.into(),
        }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            turn1_max_new: 32,
            turn2_max_new: 8,
            mcq_max_new: 8,
            probe_top_k: 1,
        }
    }
}

impl Default for AnswerConfig {
    fn default() -> Self {
        Self {
            yes_variants: YES_VARIANTS.iter().map(|s| s.to_string()).collect(),
            no_variants: NO_VARIANTS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            needles: Vec::new(),
            lengths: default_lengths(),
            depths: ten_depths(),
            per_cell: 4,
            seed: 0,
        }
    }
}

impl Default for DetectionConfig {
    /// Three needles: 600 samples.
    fn default() -> Self {
        Self {
            split: SplitConfig {
                seed: 1,
                ..SplitConfig::default()
            },
            marker_variants: vec![false, true],
            top_n: 5,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k: vec![10, 20, 30, 50],
            random_draws: 5,
            seed: 3,
            use_marker_table: false,
            scope: MaskScope::SecondTurnOnly,
        }
    }
}

impl Default for UncertaintyConfig {
    /// 27 training needles give 540 samples; 5 test needles give 400.
    fn default() -> Self {
        Self {
            train: SplitConfig {
                lengths: vec![3000],
                depths: vec![0.1, 0.3, 0.5, 0.7, 0.9],
                per_cell: 4,
                seed: 4,
                ..SplitConfig::default()
            },
            test: SplitConfig {
                depths: vec![0.2, 0.4, 0.6, 0.8],
                per_cell: 4,
                seed: 5,
                ..SplitConfig::default()
            },
            sets: vec![
                SetSpec {
                    op: SetOp::Difference,
                    cases: vec![1, 3],
                    k: vec![10],
                },
                SetSpec {
                    op: SetOp::Intersection,
                    cases: vec![1, 2],
                    k: vec![10],
                },
                SetSpec {
                    op: SetOp::Union,
                    cases: vec![1, 2],
                    k: vec![5, 10, 15, 20],
                },
            ],
            named_sets: vec![NamedSet {
                name: "pair".into(),
                heads: vec![HeadId::new(11, 23), HeadId::new(17, 25)],
            }],
            ranking: Ranking::Count,
            union_mode: UnionMode::SummedCounts,
            scope: MaskScope::SecondTurnOnly,
            symmetric_labels: false,
        }
    }
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            sets: vec!["top5(C1+C2)".into(), "pair".into()],
        }
    }
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            pair: "pair".into(),
            union_k: 5,
            scope: MaskScope::SecondTurnOnly,
        }
    }
}

impl Default for ExperimentConfig {
    /// Settings for an 8B instruct model with user-supplied data.
    fn default() -> Self {
        Self {
            output_dir: "runs/default".into(),
            threads: 0,
            save_traces: false,
            correctness_threshold: DEFAULT_CORRECTNESS_THRESHOLD,
            max_haystack_tokens: 5000,
            model: ModelPaths::default(),
            data: DataConfig::default(),
            template: ChatTemplate::llama3(),
            prompts: Prompts::default(),
            generation: GenerationConfig::default(),
            answers: AnswerConfig::default(),
            bands: BandEdges::default(),
            detection: DetectionConfig::default(),
            flip_test: SplitConfig {
                per_cell: 8,
                seed: 2,
                ..SplitConfig::default()
            },
            sweep: SweepConfig::default(),
            uncertainty: UncertaintyConfig::default(),
            control: ControlConfig::default(),
            downstream: DownstreamConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small grid for the tiny model written by `init-tiny`.
    pub fn tiny() -> Self {
        let split = |needles: &[&str], lengths: Vec<usize>, depths: Vec<f64>, per_cell: usize, seed: u64| SplitConfig {
            needles: needles.iter().map(|s| s.to_string()).collect(),
            lengths,
            depths,
            per_cell,
            seed,
        };
        Self {
            output_dir: "runs/tiny".into(),
            max_haystack_tokens: 400,
            model: ModelPaths {
                weights: "model.safetensors".into(),
                tokenizer: "tokenizer.json".into(),
            },
            data: DataConfig {
                mcq: vec![McqDataset {
                    name: "sample".into(),
                    path: "mcq.jsonl".into(),
                }],
                ..DataConfig::default()
            },
            generation: GenerationConfig {
                turn1_max_new: 12,
                turn2_max_new: 4,
                mcq_max_new: 4,
                probe_top_k: 1,
            },
            detection: DetectionConfig {
                split: split(&["d01", "d02", "d03"], vec![200, 300], vec![0.25, 0.75], 2, 1),
                marker_variants: vec![false, true],
                top_n: 5,
            },
            flip_test: split(&["t01"], vec![200, 300], vec![0.2, 0.5, 0.8], 4, 2),
            sweep: SweepConfig {
                k: vec![2, 4, 8],
                random_draws: 3,
                ..SweepConfig::default()
            },
            uncertainty: UncertaintyConfig {
                train: split(&["u01", "u02", "u03", "u04"], vec![250], vec![0.3, 0.7], 3, 4),
                test: split(&["t01", "t02", "t03"], vec![200, 300], vec![0.5], 4, 5),
                sets: vec![
                    SetSpec {
                        op: SetOp::Difference,
                        cases: vec![1, 3],
                        k: vec![4],
                    },
                    SetSpec {
                        op: SetOp::Union,
                        cases: vec![1, 2],
                        k: vec![2, 4, 8],
                    },
                ],
                named_sets: vec![NamedSet {
                    name: "pair".into(),
                    heads: vec![HeadId::new(1, 3), HeadId::new(2, 5)],
                }],
                ..UncertaintyConfig::default()
            },
            control: ControlConfig {
                sets: vec!["top2(C1+C2)".into(), "pair".into()],
            },
            downstream: DownstreamConfig {
                union_k: 2,
                ..DownstreamConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load a config file and resolve its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.model.weights);
        fix(&mut self.model.tokenizer);
        fix(&mut self.data.corpus);
        fix(&mut self.data.needles);
        for d in &mut self.data.mcq {
            fix(&mut d.path);
        }
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output
    /// directory and thread count, which do not affect results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.threads = 0;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks the model files exist.
    pub fn validate_model_paths(&self) -> Result<()> {
        need(&self.model.weights, "weights")?;
        need(&self.model.tokenizer, "tokenizer")
    }

    /// Checks that do not involve the model.
    pub fn validate(&self) -> Result<()> {
        need(&self.data.corpus, "corpus directory")?;
        need(&self.data.needles, "needle file")?;
        for d in &self.data.mcq {
            need(&d.path, "MCQ dataset")?;
        }
        if !(0.0..=1.0).contains(&self.correctness_threshold) {
            return Err(Error::Config("correctness_threshold must be in [0, 1]".into()));
        }
        let b = self.bands;
        if !(0.0 < b.low && b.low < b.high && b.high <= 1.0) {
            return Err(Error::Config(format!(
                "bands must satisfy 0 < low < high <= 1, got {b:?}"
            )));
        }
        if self.generation.probe_top_k == 0 {
            return Err(Error::Config("probe_top_k must be at least 1".into()));
        }
        let splits = [
            ("detection", &self.detection.split),
            ("flip_test", &self.flip_test),
            ("uncertainty.train", &self.uncertainty.train),
            ("uncertainty.test", &self.uncertainty.test),
        ];
        for (name, s) in splits {
            if s.lengths.is_empty() || s.depths.is_empty() || s.per_cell == 0 {
                return Err(Error::Config(format!("{name}: empty grid")));
            }
            if let Some(l) = s.lengths.iter().find(|l| **l > self.max_haystack_tokens) {
                return Err(Error::Config(format!(
                    "{name}: length {l} exceeds max_haystack_tokens {}",
                    self.max_haystack_tokens
                )));
            }
            if let Some(d) = s.depths.iter().find(|d| !(0.0..=1.0).contains(*d)) {
                return Err(Error::Config(format!("{name}: depth {d} outside [0, 1]")));
            }
        }
        for s in &self.uncertainty.sets {
            let arity = match s.op {
                SetOp::Top => 1,
                SetOp::Union => s.cases.len().max(1),
                SetOp::Intersection | SetOp::Difference => 2,
            };
            if s.cases.len() != arity || s.cases.iter().any(|c| !(1..=4).contains(c)) {
                return Err(Error::Config(format!("bad set spec {s:?}")));
            }
        }
        Ok(())
    }

    pub fn flip_settings(&self) -> FlipSettings {
        FlipSettings {
            question_prompt: self.prompts.question.clone(),
            reevaluation_prompt: self.prompts.reevaluation.clone(),
            turn1_max_new: self.generation.turn1_max_new,
            turn2_max_new: self.generation.turn2_max_new,
            threshold: self.correctness_threshold,
        }
    }

    pub fn downstream_settings(&self) -> DownstreamSettings {
        DownstreamSettings {
            mcq_prompt: self.prompts.mcq.clone(),
            reevaluation_prompt: self.prompts.reevaluation.clone(),
            turn1_max_new: self.generation.mcq_max_new,
            turn2_max_new: self.generation.turn2_max_new,
        }
    }
}

fn need(p: &Path, what: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", p.display())))
    }
}

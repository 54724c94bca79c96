// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment orchestration: configuration, dataset splits, the command
//! implementations behind the CLI, persistence and report generation.
//!
//! Every command writes line-delimited records first and derives its
//! tables from those records with the same functions `report` uses, so a
//! report rebuilt from disk matches the tables written by the commands.

mod config;
mod report;
mod runs;

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use config::*;
pub use report::*;

use crate::backend::{load_model, Backend};
use crate::error::{Error, Result};
use crate::haystack::{load_needles, HaystackBuilder, HaystackSample, NeedleSpec, TokenizedCorpus};
use crate::metrics::AnswerTokens;
use crate::probe::{AttentionProbe, HeadShape};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A loaded configuration bound to a backend and its data.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    backend: Arc<dyn Backend>,
    corpus: TokenizedCorpus,
    needles: Vec<NeedleSpec>,
    answers: AnswerTokens,
    marker: u32,
    pool: rayon::ThreadPool,
}

impl Experiment {
    /// Load a config file and the model it names.
    pub fn open(config_path: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(config_path)?;
        config.validate_model_paths()?;
        let backend = load_model(&config.model.weights, &config.model.tokenizer)?;
        Self::with_backend(config, Arc::new(backend))
    }

    /// Bind a config to an already constructed backend.
    pub fn with_backend(config: ExperimentConfig, backend: Arc<dyn Backend>) -> Result<Self> {
        config.validate()?;
        let tok = backend.tokenizer();
        let marker = tok
            .token_id(&config.data.marker_token)
            .ok_or_else(|| Error::Config(format!("marker {:?} is not a single token", config.data.marker_token)))?;
        let answers = AnswerTokens::resolve(tok, &config.answers.yes_variants, &config.answers.no_variants)?;
        let needles = load_needles(&config.data.needles)?;
        let corpus = TokenizedCorpus::load_dir(tok, &config.data.corpus)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::Experiment(format!("thread pool: {e}")))?;
        Ok(Self {
            config_hash: config.hash(),
            config,
            backend,
            corpus,
            needles,
            answers,
            marker,
            pool,
        })
    }

    pub fn backend(&self) -> &dyn Backend {
        &*self.backend
    }

    pub fn shape(&self) -> HeadShape {
        self.backend.head_shape()
    }

    pub fn answers(&self) -> &AnswerTokens {
        &self.answers
    }

    pub fn needles(&self) -> &[NeedleSpec] {
        &self.needles
    }

    pub fn probe(&self) -> AttentionProbe {
        AttentionProbe {
            top_k: self.config.generation.probe_top_k,
        }
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    fn select_needles(&self, ids: &[String]) -> Result<Vec<NeedleSpec>> {
        if ids.is_empty() {
            return Ok(self.needles.clone());
        }
        ids.iter()
            .map(|id| {
                self.needles
                    .iter()
                    .find(|n| &n.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown needle id {id:?}")))
            })
            .collect()
    }

    /// Build the samples of one split.
    pub fn split_samples(&self, split: &SplitConfig, with_bot_marker: bool) -> Result<Vec<HaystackSample>> {
        let needles = self.select_needles(&split.needles)?;
        let builder = HaystackBuilder::new(&self.corpus, self.backend.tokenizer(), self.marker);
        self.pool.install(|| {
            builder.generate_dataset(
                &needles,
                &split.lengths,
                &split.depths,
                split.per_cell,
                with_bot_marker,
                split.seed,
            )
        })
    }

    /// Map over samples on the worker pool, keeping input order. Errors name
    /// the failing sample.
    pub fn par_map<T, F>(&self, samples: &[HaystackSample], f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&HaystackSample) -> Result<T> + Sync,
    {
        self.pool.install(|| {
            samples
                .par_iter()
                .map(|s| f(s).map_err(|e| e.in_sample(&s.id)))
                .collect()
        })
    }

    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    create_parent(path)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Files produced by one command, relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEntry {
    pub datasets: Vec<String>,
    pub records: Vec<String>,
    pub tables: Vec<String>,
    pub n_records: usize,
}

/// Index of everything written under an output directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub head_shape: HeadShape,
    pub runs: BTreeMap<String, RunEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";

impl Experiment {
    /// Record a finished command in the manifest. Runs made under a
    /// different config are dropped.
    pub(crate) fn register_run(&self, name: &str, entry: RunEntry) -> Result<()> {
        let dir = self.output_dir();
        let path = dir.join(MANIFEST_FILE);
        let mut manifest = match read_json::<RunManifest>(&path) {
            Ok(m) if m.config_hash == self.config_hash => m,
            Ok(_) => {
                log::warn!(
                    "config changed; earlier runs in {} are no longer indexed",
                    dir.display()
                );
                self.fresh_manifest()
            }
            Err(_) => self.fresh_manifest(),
        };
        manifest.runs.insert(name.to_string(), entry);
        write_json(&path, &manifest)?;
        let cfg = dir.join(CONFIG_COPY);
        create_parent(&cfg)?;
        std::fs::write(&cfg, self.config.to_toml()?).map_err(|e| Error::io(&cfg, e))
    }

    fn fresh_manifest(&self) -> RunManifest {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: self.config_hash.clone(),
            head_shape: self.shape(),
            runs: BTreeMap::new(),
        }
    }

    pub(crate) fn path(&self, rel: &str) -> PathBuf {
        self.output_dir().join(rel)
    }
}

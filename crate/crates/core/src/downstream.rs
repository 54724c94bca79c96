// SPDX-License-Identifier: MIT OR Apache-2.0

//! Two-turn multiple-choice evaluation under several mask settings.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Backend;
use crate::chat::{ChatTemplate, Segment};
use crate::error::{Error, Result};
use crate::flip::{parse_answer, AnswerClass, DEFAULT_REEVALUATION_PROMPT, SECOND_TURN};
use crate::probe::MaskPlan;

pub const DEFAULT_MCQ_PROMPT: &str = "{question}\n{choices}\nAnswer with the letter of the correct choice.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<Choice>,
    pub gold: String,
}

impl MCQItem {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.len() < 2 {
            return Err(format!("{}: needs at least two choices", self.id));
        }
        for (i, c) in self.choices.iter().enumerate() {
            if self.choices[..i].iter().any(|p| p.label.eq_ignore_ascii_case(&c.label)) {
                return Err(format!("{}: duplicate label {}", self.id, c.label));
            }
        }
        if !self.choices.iter().any(|c| c.label == self.gold) {
            return Err(format!("{}: gold label {} is not a choice", self.id, self.gold));
        }
        Ok(())
    }

    /// The question with its choices filled into `template`.
    pub fn render(&self, template: &str) -> String {
        let choices: Vec<String> = self
            .choices
            .iter()
            .map(|c| format!("{}. {}", c.label, c.text))
            .collect();
        template
            .replace("{question}", &self.question)
            .replace("{choices}", &choices.join("\n"))
    }
}

/// Read MCQ items from a JSON-lines file. Blank lines are skipped.
pub fn load_mcq(path: &Path) -> Result<Vec<MCQItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let item: MCQItem = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        item.validate().map_err(err)?;
        out.push(item);
    }
    Ok(out)
}

/// The choice label a reply starts with, if any.
pub fn parse_choice(text: &str, item: &MCQItem) -> Option<String> {
    let rest = text.trim_start_matches(|c: char| !c.is_alphanumeric());
    let word: String = rest.chars().take_while(|c| c.is_alphanumeric()).collect();
    item.choices
        .iter()
        .find(|c| c.label.eq_ignore_ascii_case(&word))
        .map(|c| c.label.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamSettings {
    pub mcq_prompt: String,
    pub reevaluation_prompt: String,
    pub turn1_max_new: usize,
    pub turn2_max_new: usize,
}

impl Default for DownstreamSettings {
    fn default() -> Self {
        Self {
            mcq_prompt: DEFAULT_MCQ_PROMPT.into(),
            reevaluation_prompt: DEFAULT_REEVALUATION_PROMPT.into(),
            turn1_max_new: 8,
            turn2_max_new: 8,
        }
    }
}

/// A named mask configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSetting {
    pub name: String,
    pub plan: MaskPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamRecord {
    pub dataset: String,
    pub item_id: String,
    pub mask_setting: String,
    pub turn1_raw: String,
    pub parsed: Option<String>,
    pub correct: bool,
    pub turn2_raw: String,
    pub turn2_class: AnswerClass,
}

impl DownstreamRecord {
    pub fn unparseable(&self) -> bool {
        self.parsed.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamReport {
    pub dataset: String,
    pub mask_setting: String,
    pub n: usize,
    pub n_correct: usize,
    pub n_incorrect: usize,
    pub unparseable: usize,
    pub first_turn_acc: f64,
    /// `None` when no first answer was correct.
    pub yes_given_correct: Option<f64>,
    /// `None` when every first answer was correct.
    pub yes_given_incorrect: Option<f64>,
}

/// Summarize the records of one (dataset, mask setting) pair.
pub fn summarize(dataset: &str, mask_setting: &str, records: &[&DownstreamRecord]) -> Result<DownstreamReport> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let yes_rate = |subset: Vec<&&DownstreamRecord>| {
        (!subset.is_empty())
            .then(|| subset.iter().filter(|r| r.turn2_class == AnswerClass::Yes).count() as f64 / subset.len() as f64)
    };
    let correct: Vec<_> = records.iter().filter(|r| r.correct).collect();
    let incorrect: Vec<_> = records.iter().filter(|r| !r.correct).collect();
    Ok(DownstreamReport {
        dataset: dataset.to_string(),
        mask_setting: mask_setting.to_string(),
        n: records.len(),
        n_correct: correct.len(),
        n_incorrect: incorrect.len(),
        unparseable: records.iter().filter(|r| r.unparseable()).count(),
        first_turn_acc: correct.len() as f64 / records.len() as f64,
        yes_given_correct: yes_rate(correct),
        yes_given_incorrect: yes_rate(incorrect),
    })
}

/// Run every item under every mask setting. Settings whose plan is inactive
/// in the first turn share one first-turn generation per item.
pub fn run_downstream(
    backend: &dyn Backend,
    template: &ChatTemplate,
    settings: &DownstreamSettings,
    dataset: &str,
    items: &[MCQItem],
    masks: &[MaskSetting],
) -> Result<(Vec<DownstreamRecord>, Vec<DownstreamReport>)> {
    let shape = backend.head_shape();
    for m in masks {
        m.plan.validate(shape)?;
    }
    let tok = backend.tokenizer();
    let stop = template.stop_ids(tok);
    let end_of_turn = template.assistant_end_ids(tok);
    let second_prompt = template.render_user_turn(tok, false, &[Segment::Text(&settings.reevaluation_prompt)]);

    let per_item: Vec<Vec<DownstreamRecord>> = items
        .par_iter()
        .map(|item| -> Result<Vec<DownstreamRecord>> {
            let question = item.render(&settings.mcq_prompt);
            let prompt = template.render_user_turn(tok, true, &[Segment::Text(&question)]);
            let first_turn = |mask: Option<&MaskPlan>| -> Result<_> {
                let mut session = backend.session();
                let out = session.generate(&prompt.tokens, 0, settings.turn1_max_new, None, mask, &stop)?;
                if out.stop_token.is_none() {
                    session.push(&end_of_turn, 0);
                }
                Ok((session, out.text))
            };
            let mut shared = None;
            let mut out = Vec::with_capacity(masks.len());
            for m in masks {
                let owned;
                let (session, turn1) = if m.plan.active_in(0) {
                    owned = first_turn(Some(&m.plan))?;
                    (&owned.0, &owned.1)
                } else {
                    if shared.is_none() {
                        shared = Some(first_turn(None)?);
                    }
                    let s = shared.as_ref().expect("set above");
                    (&s.0, &s.1)
                };
                let mut second = session.fork();
                let reply = second.generate(
                    &second_prompt.tokens,
                    SECOND_TURN,
                    settings.turn2_max_new,
                    None,
                    Some(&m.plan),
                    &stop,
                )?;
                let parsed = parse_choice(turn1, item);
                out.push(DownstreamRecord {
                    dataset: dataset.to_string(),
                    item_id: item.id.clone(),
                    mask_setting: m.name.clone(),
                    turn1_raw: turn1.clone(),
                    correct: parsed.as_deref() == Some(item.gold.as_str()),
                    parsed,
                    turn2_class: parse_answer(&reply.text),
                    turn2_raw: reply.text,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let records: Vec<DownstreamRecord> = per_item.into_iter().flatten().collect();
    let reports = masks
        .iter()
        .map(|m| {
            let subset: Vec<&DownstreamRecord> = records.iter().filter(|r| r.mask_setting == m.name).collect();
            summarize(dataset, &m.name, &subset)
        })
        .collect::<Result<_>>()?;
    Ok((records, reports))
}

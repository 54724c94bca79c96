// SPDX-License-Identifier: MIT OR Apache-2.0

//! The two-turn flip protocol: answer a question over a haystack, then
//! answer a yes/no re-evaluation prompt, optionally with heads masked.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, Session};
use crate::chat::{fill_template, ChatTemplate, Segment};
use crate::error::{Error, Result};
use crate::haystack::{needle_span_tokens, HaystackSample};
use crate::metrics::{activation_score, recall_score, Answer, AnswerTokens, NeedleWindow, RecallResult};
use crate::probe::{AttentionProbe, AttentionTrace, HeadId, HeadShape, MaskPlan};

pub const DEFAULT_REEVALUATION_PROMPT: &str =
    "Are you sure about your previous answer to the given question? Answer only with 'yes' or 'no'";

pub const DEFAULT_QUESTION_PROMPT: &str =
    "{context}\n\nAnswer the question using the text above. Reply in a few words.\nQuestion: {question}";

pub const DEFAULT_CORRECTNESS_THRESHOLD: f64 = 0.9;

/// Turn index of the re-evaluation prompt.
pub const SECOND_TURN: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerClass {
    Yes,
    No,
    Incoherent,
}

impl AnswerClass {
    pub fn as_answer(self) -> Option<Answer> {
        match self {
            Self::Yes => Some(Answer::Yes),
            Self::No => Some(Answer::No),
            Self::Incoherent => None,
        }
    }
}

/// Strict yes/no parsing of the first word, ignoring case and surrounding
/// punctuation.
pub fn parse_answer(text: &str) -> AnswerClass {
    let rest = text.trim_start_matches(|c: char| !c.is_alphanumeric());
    let word: String = rest
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    match word.as_str() {
        "yes" => AnswerClass::Yes,
        "no" => AnswerClass::No,
        _ => AnswerClass::Incoherent,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub sample_id: String,
    pub needle_id: String,
    pub factual: bool,
    pub seed: u64,
    pub turn1_answer: String,
    pub turn1_recall: f64,
    pub turn1_correct: bool,
    pub threshold: f64,
    pub turn2_raw: String,
    pub turn2_class: AnswerClass,
    pub expected_turn2: Answer,
    pub mask_applied: Option<String>,
    pub trace_ref: String,
    /// Heads whose second-turn argmax hit a "yes" token.
    #[serde(default)]
    pub attends_yes: Vec<HeadId>,
    #[serde(default)]
    pub attends_no: Vec<HeadId>,
    /// First turn was supplied, not generated.
    #[serde(default)]
    pub injected: bool,
}

impl ConversationRecord {
    pub fn correct_at(&self, threshold: f64) -> bool {
        self.turn1_recall >= threshold
    }

    /// The second turn contradicts the expected answer.
    pub fn flipped(&self) -> bool {
        self.turn2_class.as_answer().is_some_and(|a| a != self.expected_turn2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaseLabel {
    pub head: HeadId,
    pub case: u8,
}

/// Case labels from per-head activations.
///
/// With expected "yes", a wrong reply is a flip to "no": case 1 flags heads
/// attending "no" on a flip, case 2 heads attending "yes" on a flip, case 3
/// and 4 the same on a kept answer. `symmetric` extends this to records
/// expecting "no", reading "no" as the expected token and "yes" as the
/// wrong one.
pub fn label_from_activations(
    record: &ConversationRecord,
    shape: HeadShape,
    attends_yes: &[bool],
    attends_no: &[bool],
    symmetric: bool,
) -> Result<Vec<CaseLabel>> {
    if record.expected_turn2 != Answer::Yes && !symmetric {
        return Err(Error::Experiment(format!(
            "{}: case labels need a correct first answer",
            record.sample_id
        )));
    }
    let Some(reply) = record.turn2_class.as_answer() else {
        return Ok(Vec::new());
    };
    let wrong = reply != record.expected_turn2;
    let (attends_expected, attends_wrong) = match record.expected_turn2 {
        Answer::Yes => (attends_yes, attends_no),
        Answer::No => (attends_no, attends_yes),
    };
    let base = if wrong { 1 } else { 3 };
    let mut out = Vec::new();
    for (i, head) in shape.heads().enumerate() {
        if attends_wrong[i] {
            out.push(CaseLabel { head, case: base });
        }
        if attends_expected[i] {
            out.push(CaseLabel { head, case: base + 1 });
        }
    }
    Ok(out)
}

/// Case labels from a second-turn trace.
pub fn label_cases(
    record: &ConversationRecord,
    trace: &AttentionTrace,
    answers: &AnswerTokens,
) -> Result<Vec<CaseLabel>> {
    let yes = activation_score(trace, &answers.yes, SECOND_TURN);
    let no = activation_score(trace, &answers.no, SECOND_TURN);
    label_from_activations(record, trace.shape, &yes, &no, false)
}

/// Case labels from the activation lists stored on a record.
pub fn label_record(record: &ConversationRecord, shape: HeadShape, symmetric: bool) -> Result<Vec<CaseLabel>> {
    let mut yes = vec![false; shape.census()];
    let mut no = vec![false; shape.census()];
    for h in &record.attends_yes {
        shape.check(*h)?;
        yes[shape.index(*h)] = true;
    }
    for h in &record.attends_no {
        shape.check(*h)?;
        no[shape.index(*h)] = true;
    }
    label_from_activations(record, shape, &yes, &no, symmetric)
}

/// A record whose first answer is a supplied wrong answer.
pub fn inject_incorrect_history(
    sample: &HaystackSample,
    wrong_answer: &str,
    threshold: f64,
) -> Result<ConversationRecord> {
    let recall = recall_score(wrong_answer, &sample.needle.answer_text);
    if recall.recall >= threshold {
        return Err(Error::WrongAnswerIsCorrect {
            id: sample.id.clone(),
            recall: recall.recall,
        });
    }
    Ok(ConversationRecord {
        sample_id: sample.id.clone(),
        needle_id: sample.needle.id.clone(),
        factual: sample.needle.factual,
        seed: sample.seed,
        turn1_answer: wrong_answer.to_string(),
        turn1_recall: recall.recall,
        turn1_correct: false,
        threshold,
        turn2_raw: String::new(),
        turn2_class: AnswerClass::Incoherent,
        expected_turn2: Answer::No,
        mask_applied: None,
        trace_ref: String::new(),
        attends_yes: Vec::new(),
        attends_no: Vec::new(),
        injected: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YesStats {
    pub yes: usize,
    pub no: usize,
    pub incoherent: usize,
    pub total: usize,
}

impl YesStats {
    pub fn fraction(&self) -> f64 {
        self.yes as f64 / self.total as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.fraction()
    }
}

/// Share of "yes" replies; incoherent replies stay in the denominator.
pub fn yes_percentage<'a>(records: impl IntoIterator<Item = &'a ConversationRecord>) -> Result<YesStats> {
    let mut s = YesStats {
        yes: 0,
        no: 0,
        incoherent: 0,
        total: 0,
    };
    for r in records {
        match r.turn2_class {
            AnswerClass::Yes => s.yes += 1,
            AnswerClass::No => s.no += 1,
            AnswerClass::Incoherent => s.incoherent += 1,
        }
        s.total += 1;
    }
    if s.total == 0 {
        return Err(Error::EmptyRecords);
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipSettings {
    pub question_prompt: String,
    pub reevaluation_prompt: String,
    pub turn1_max_new: usize,
    pub turn2_max_new: usize,
    pub threshold: f64,
}

impl Default for FlipSettings {
    fn default() -> Self {
        Self {
            question_prompt: DEFAULT_QUESTION_PROMPT.into(),
            reevaluation_prompt: DEFAULT_REEVALUATION_PROMPT.into(),
            turn1_max_new: 32,
            turn2_max_new: 8,
            threshold: DEFAULT_CORRECTNESS_THRESHOLD,
        }
    }
}

/// A completed first turn, ready to be forked into re-evaluations.
pub struct FirstTurn {
    session: Box<dyn Session>,
    pub answer: String,
    pub generated: Vec<u32>,
    pub recall: RecallResult,
    pub correct: bool,
    pub injected: bool,
    pub trace: AttentionTrace,
    pub window: NeedleWindow,
}

/// Result of one re-evaluation turn.
#[derive(Debug, Clone)]
pub struct SecondTurn {
    pub raw: String,
    pub class: AnswerClass,
    pub trace: AttentionTrace,
}

pub struct FlipRunner<'a> {
    backend: &'a dyn Backend,
    template: &'a ChatTemplate,
    settings: &'a FlipSettings,
    stop: Vec<u32>,
    end_of_turn: Vec<u32>,
}

impl<'a> FlipRunner<'a> {
    pub fn new(backend: &'a dyn Backend, template: &'a ChatTemplate, settings: &'a FlipSettings) -> Self {
        let tok = backend.tokenizer();
        Self {
            backend,
            template,
            settings,
            stop: template.stop_ids(tok),
            end_of_turn: template.assistant_end_ids(tok),
        }
    }

    pub fn settings(&self) -> &FlipSettings {
        self.settings
    }

    fn open(&self, sample: &HaystackSample) -> Result<(Vec<u32>, NeedleWindow)> {
        let segments = fill_template(
            &self.settings.question_prompt,
            &[
                ("context", Segment::Tokens(&sample.context)),
                ("question", Segment::Text(&sample.needle.question)),
            ],
        );
        let ctx_index = segments
            .iter()
            .position(|s| matches!(s, Segment::Tokens(_)))
            .ok_or_else(|| Error::Config("question prompt has no {context} placeholder".into()))?;
        let turn = self
            .template
            .render_user_turn(self.backend.tokenizer(), true, &segments);
        let window = NeedleWindow {
            start: turn.spans[ctx_index].start + sample.needle_span.start,
            tokens: needle_span_tokens(sample).to_vec(),
        };
        Ok((turn.tokens, window))
    }

    /// Ask the needle question and score the reply against the needle answer.
    pub fn run_first_turn(
        &self,
        sample: &HaystackSample,
        probe: Option<&AttentionProbe>,
        mask: Option<&MaskPlan>,
    ) -> Result<FirstTurn> {
        let (prompt, window) = self.open(sample)?;
        let mut session = self.backend.session();
        let out = session.generate(&prompt, 0, self.settings.turn1_max_new, probe, mask, &self.stop)?;
        if out.stop_token.is_none() {
            session.push(&self.end_of_turn, 0);
        }
        let recall = recall_score(&out.text, &sample.needle.answer_text);
        Ok(FirstTurn {
            session,
            correct: recall.recall >= self.settings.threshold,
            answer: out.text,
            generated: out.generated,
            recall,
            injected: false,
            trace: out.trace,
            window,
        })
    }

    /// Place a given answer in the assistant slot instead of generating one.
    pub fn first_turn_with_answer(&self, sample: &HaystackSample, answer: &str) -> Result<FirstTurn> {
        let (prompt, window) = self.open(sample)?;
        let mut session = self.backend.session();
        let answer_tokens = self.backend.tokenizer().encode_plain(answer);
        let needed = prompt.len() + answer_tokens.len() + self.end_of_turn.len();
        if needed > self.backend.max_context() {
            return Err(Error::ContextOverflow {
                needed,
                max: self.backend.max_context(),
            });
        }
        session.push(&prompt, 0);
        session.push(&answer_tokens, 0);
        session.push(&self.end_of_turn, 0);
        let recall = recall_score(answer, &sample.needle.answer_text);
        Ok(FirstTurn {
            session,
            correct: recall.recall >= self.settings.threshold,
            answer: answer.to_string(),
            generated: answer_tokens,
            recall,
            injected: true,
            trace: AttentionTrace::new(self.backend.head_shape()),
            window,
        })
    }

    /// Ask the re-evaluation prompt on a fork of the first turn.
    pub fn run_reevaluation(
        &self,
        first: &FirstTurn,
        mask: Option<&MaskPlan>,
        probe: Option<&AttentionProbe>,
    ) -> Result<SecondTurn> {
        if let Some(plan) = mask {
            plan.validate(self.backend.head_shape())?;
        }
        let mut session = first.session.fork();
        let turn = self.template.render_user_turn(
            self.backend.tokenizer(),
            false,
            &[Segment::Text(&self.settings.reevaluation_prompt)],
        );
        let out = session.generate(
            &turn.tokens,
            SECOND_TURN,
            self.settings.turn2_max_new,
            probe,
            mask,
            &self.stop,
        )?;
        Ok(SecondTurn {
            class: parse_answer(&out.text),
            raw: out.text,
            trace: out.trace,
        })
    }

    /// Assemble the record of a finished conversation.
    pub fn record(
        &self,
        sample: &HaystackSample,
        first: &FirstTurn,
        second: &SecondTurn,
        mask: Option<&MaskPlan>,
        answers: &AnswerTokens,
    ) -> ConversationRecord {
        let shape = second.trace.shape;
        let pick = |flags: Vec<bool>| -> Vec<HeadId> {
            flags
                .into_iter()
                .enumerate()
                .filter(|(_, on)| *on)
                .map(|(i, _)| shape.head_at(i))
                .collect()
        };
        let mask_id = mask.map(|m| m.id.clone());
        ConversationRecord {
            sample_id: sample.id.clone(),
            needle_id: sample.needle.id.clone(),
            factual: sample.needle.factual,
            seed: sample.seed,
            turn1_answer: first.answer.clone(),
            turn1_recall: first.recall.recall,
            turn1_correct: first.correct,
            threshold: self.settings.threshold,
            turn2_raw: second.raw.clone(),
            turn2_class: second.class,
            expected_turn2: if first.correct { Answer::Yes } else { Answer::No },
            trace_ref: format!("{}/{}", sample.id, mask_id.as_deref().unwrap_or("no-mask")),
            mask_applied: mask_id,
            attends_yes: pick(activation_score(&second.trace, &answers.yes, SECOND_TURN)),
            attends_no: pick(activation_score(&second.trace, &answers.no, SECOND_TURN)),
            injected: first.injected,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        assert_eq!(parse_answer("Yes."), AnswerClass::Yes);
        assert_eq!(parse_answer("no, I was wrong"), AnswerClass::No);
        assert_eq!(parse_answer("Sure!"), AnswerClass::Incoherent);
        assert_eq!(parse_answer("I think maybe"), AnswerClass::Incoherent);
        assert_eq!(parse_answer("  **NO**"), AnswerClass::No);
        assert_eq!(parse_answer("Yesterday"), AnswerClass::Incoherent);
        assert_eq!(parse_answer(""), AnswerClass::Incoherent);
    }

    fn record(expected: Answer, class: AnswerClass) -> ConversationRecord {
        ConversationRecord {
            sample_id: "s".into(),
            needle_id: "n".into(),
            factual: false,
            seed: 0,
            turn1_answer: String::new(),
            turn1_recall: 1.0,
            turn1_correct: expected == Answer::Yes,
            threshold: 0.9,
            turn2_raw: String::new(),
            turn2_class: class,
            expected_turn2: expected,
            mask_applied: None,
            trace_ref: String::new(),
            attends_yes: Vec::new(),
            attends_no: Vec::new(),
            injected: false,
        }
    }

    #[test]
    fn dual_membership_and_keep_labels() {
        let shape = HeadShape::new(1, 1);
        let flip = record(Answer::Yes, AnswerClass::No);
        let cases: Vec<u8> = label_from_activations(&flip, shape, &[true], &[true], false)
            .unwrap()
            .iter()
            .map(|l| l.case)
            .collect();
        assert_eq!(cases, vec![1, 2]);
        let keep = record(Answer::Yes, AnswerClass::Yes);
        let cases: Vec<u8> = label_from_activations(&keep, shape, &[true], &[false], false)
            .unwrap()
            .iter()
            .map(|l| l.case)
            .collect();
        assert_eq!(cases, vec![4]);
        let incoherent = record(Answer::Yes, AnswerClass::Incoherent);
        assert!(label_from_activations(&incoherent, shape, &[true], &[true], false)
            .unwrap()
            .is_empty());
        let control = record(Answer::No, AnswerClass::No);
        assert!(label_from_activations(&control, shape, &[true], &[true], false).is_err());
    }

    #[test]
    fn yes_percentage_counts_incoherent_in_denominator() {
        let mut rs = vec![record(Answer::Yes, AnswerClass::Yes); 315];
        rs.extend(vec![record(Answer::Yes, AnswerClass::No); 85]);
        assert_eq!(yes_percentage(&rs).unwrap().percent(), 78.75);
        let mut rs = vec![record(Answer::Yes, AnswerClass::Yes); 270];
        rs.extend(vec![record(Answer::Yes, AnswerClass::Incoherent); 130]);
        let s = yes_percentage(&rs).unwrap();
        assert_eq!((s.percent(), s.incoherent), (67.5, 130));
        assert!(matches!(yes_percentage(&[]), Err(Error::EmptyRecords)));
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::{scripted_backend, DECOY_HEAD, FLIP_HEADS, KEEP_HEAD};
use headprobe::fixtures::{sample_needles, tiny_corpus, tiny_tokenizer};
use headprobe::flip::{inject_incorrect_history, label_cases, label_record, yes_percentage, FlipRunner, FlipSettings};
use headprobe::head_sets::CaseCountTable;
use headprobe::metrics::{Answer, AnswerTokens};
use headprobe::{
    parse_answer, AnswerClass, AttentionProbe, ChatTemplate, Error, HaystackBuilder, HaystackSample, MaskPlan,
    MaskScope, TokenizedCorpus,
};
use proptest::prelude::*;

fn samples(ids: &[&str]) -> Vec<HaystackSample> {
    let tok = tiny_tokenizer();
    let corpus = TokenizedCorpus::from_documents(&tok, &tiny_corpus());
    let marker = tok.token_id("<|begin_of_text|>").unwrap();
    let b = HaystackBuilder::new(&corpus, &tok, marker);
    let needles: Vec<_> = sample_needles()
        .into_iter()
        .filter(|n| ids.contains(&n.id.as_str()))
        .collect();
    b.generate_dataset(&needles, &[200], &[0.5], 1, false, 3).unwrap()
}

fn settings() -> FlipSettings {
    FlipSettings {
        turn1_max_new: 64,
        ..FlipSettings::default()
    }
}

proptest! {
    #[test]
    fn parse_reads_only_the_first_word(
        lead in "[ \\*\"'(]{0,3}",
        word in prop_oneof![Just("yes"), Just("YES"), Just("No"), Just("no")],
        tail in "([.,! ][a-z ]{0,10})?",
    ) {
        let text = [lead.as_str(), word, tail.as_str()].concat();
        let expected = if word.eq_ignore_ascii_case("yes") { AnswerClass::Yes } else { AnswerClass::No };
        prop_assert_eq!(parse_answer(&text), expected);
    }

    #[test]
    fn other_first_words_are_incoherent(word in "[a-z]{1,8}", tail in "[ a-z]{0,10}") {
        prop_assume!(word != "yes" && word != "no");
        prop_assert_eq!(parse_answer(&[word.as_str(), tail.as_str()].concat()), AnswerClass::Incoherent);
    }
}

#[test]
fn scripted_flips_are_labeled_case_one() {
    let backend = scripted_backend(&["u01"], false);
    let template = ChatTemplate::llama3();
    let settings = settings();
    let runner = FlipRunner::new(&backend, &template, &settings);
    let answers = AnswerTokens::default_for(&tiny_tokenizer()).unwrap();
    let mut table = CaseCountTable::new(headprobe::backend::Backend::head_shape(&backend));
    for s in samples(&["u01", "u02"]) {
        let first = runner.run_first_turn(&s, None, None).unwrap();
        assert!(first.correct, "{}", first.answer);
        let second = runner
            .run_reevaluation(&first, None, Some(&AttentionProbe::default()))
            .unwrap();
        let record = runner.record(&s, &first, &second, None, &answers);
        let labels = label_cases(&record, &second.trace, &answers).unwrap();
        assert_eq!(labels, label_record(&record, table.shape, false).unwrap());
        table.add(&record, &labels).unwrap();
        if s.needle.id == "u01" {
            assert_eq!(record.turn2_class, AnswerClass::No);
            assert!(record.flipped());
        } else {
            assert_eq!(record.turn2_class, AnswerClass::Yes);
        }
    }
    for h in FLIP_HEADS {
        assert_eq!(table.count(h, 1), 1);
    }
    assert_eq!(table.count(DECOY_HEAD, 3), 1);
    assert_eq!(table.count(KEEP_HEAD, 4), 1);
    assert_eq!(table.total(2), 0);
    assert_eq!(table.n_labeled, [1, 1, 1, 1]);
}

#[test]
fn forks_of_one_first_turn_are_independent() {
    let backend = scripted_backend(&["u01"], false);
    let template = ChatTemplate::llama3();
    let settings = settings();
    let runner = FlipRunner::new(&backend, &template, &settings);
    let s = &samples(&["u01"])[0];
    let first = runner.run_first_turn(s, None, None).unwrap();
    let plan = MaskPlan::new("flip", FLIP_HEADS, MaskScope::SecondTurnOnly);
    let plain = runner.run_reevaluation(&first, None, None).unwrap();
    let masked = runner.run_reevaluation(&first, Some(&plan), None).unwrap();
    let again = runner.run_reevaluation(&first, None, None).unwrap();
    assert_eq!(plain.class, AnswerClass::No);
    assert_eq!(masked.class, AnswerClass::Yes);
    assert_eq!(again.raw, plain.raw);
    assert_eq!(again.trace, plain.trace);
}

#[test]
fn injected_histories_expect_no() {
    let backend = scripted_backend(&[], false);
    let template = ChatTemplate::llama3();
    let settings = settings();
    let runner = FlipRunner::new(&backend, &template, &settings);
    let answers = AnswerTokens::default_for(&tiny_tokenizer()).unwrap();
    let s = &samples(&["t01"])[0];
    let wrong = s.needle.wrong_answer.clone().expect("control needle");

    assert!(matches!(
        inject_incorrect_history(s, &s.needle.answer_text, 0.9),
        Err(Error::WrongAnswerIsCorrect { .. })
    ));
    let base = inject_incorrect_history(s, &wrong, 0.9).unwrap();
    assert_eq!(base.expected_turn2, Answer::No);
    assert!(base.injected && !base.turn1_correct);

    let first = runner.first_turn_with_answer(s, &wrong).unwrap();
    assert!(!first.correct);
    let second = runner
        .run_reevaluation(&first, None, Some(&AttentionProbe::default()))
        .unwrap();
    let record = runner.record(s, &first, &second, None, &answers);
    assert_eq!(record.expected_turn2, Answer::No);
    assert_eq!(record.turn2_class, AnswerClass::No);
    assert!(!record.flipped());
    assert!(record.injected);
    // Without the symmetric flag a record expecting "no" cannot be labeled.
    assert!(label_record(&record, second.trace.shape, false).is_err());
    let labels = label_record(&record, second.trace.shape, true).unwrap();
    assert!(labels.iter().all(|l| l.case == 4 && l.head == DECOY_HEAD));
}

#[test]
fn yes_percentage_keeps_incoherent_in_the_denominator() {
    let backend = scripted_backend(&["u01"], false);
    let template = ChatTemplate::llama3();
    let settings = settings();
    let runner = FlipRunner::new(&backend, &template, &settings);
    let answers = AnswerTokens::default_for(&tiny_tokenizer()).unwrap();
    let mut records = Vec::new();
    for s in samples(&["u01", "u02", "u03"]) {
        let first = runner.run_first_turn(&s, None, None).unwrap();
        let second = runner.run_reevaluation(&first, None, None).unwrap();
        records.push(runner.record(&s, &first, &second, None, &answers));
    }
    records[2].turn2_class = AnswerClass::Incoherent;
    let stats = yes_percentage(&records).unwrap();
    assert_eq!((stats.yes, stats.no, stats.incoherent, stats.total), (1, 1, 1, 3));
    assert_eq!(stats.percent(), 100.0 * (1.0 / 3.0));
    assert!(matches!(yes_percentage(&[]), Err(Error::EmptyRecords)));
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use headprobe::fixtures::tiny_tokenizer;
use headprobe::Tokenizer;
use proptest::prelude::*;

#[test]
fn specials_are_single_tokens_only_when_recognized() {
    let tok = tiny_tokenizer();
    for s in [
        "<|begin_of_text|>",
        "<|eot_id|>",
        "<|start_header_id|>",
        "<|end_header_id|>",
    ] {
        let id = tok.token_id(s).expect(s);
        assert!(tok.is_special(id));
        assert_eq!(tok.encode(s), vec![id]);
        assert!(tok.encode_plain(s).len() > 1);
        assert_eq!(tok.decode(&[id]), s);
    }
}

#[test]
fn specials_split_surrounding_text() {
    let tok = tiny_tokenizer();
    let eot = tok.token_id("<|eot_id|>").unwrap();
    let ids = tok.encode("yes<|eot_id|>no");
    let at = ids.iter().position(|&i| i == eot).unwrap();
    assert_eq!(tok.decode(&ids[..at]), "yes");
    assert_eq!(tok.decode(&ids[at + 1..]), "no");
}

#[test]
fn json_round_trip_preserves_encoding() {
    let tok = tiny_tokenizer();
    let back = Tokenizer::from_json(&tok.to_json()).unwrap();
    assert_eq!(back.vocab_size(), tok.vocab_size());
    let text = "The keeper of the lighthouse said <|eot_id|> yes, 1234 times.";
    assert_eq!(back.encode(text), tok.encode(text));
}

#[test]
fn malformed_json_is_an_error() {
    assert!(Tokenizer::from_json("{").is_err());
    assert!(Tokenizer::from_json("{\"model\": {}}").is_err());
}

#[test]
fn unknown_ids_decode_to_replacement() {
    let tok = tiny_tokenizer();
    assert_eq!(tok.decode(&[u32::MAX]), "\u{FFFD}");
}

proptest! {
    #[test]
    fn plain_encoding_round_trips(s in "\\PC{0,80}") {
        let tok = tiny_tokenizer();
        prop_assert_eq!(tok.decode(&tok.encode_plain(&s)), s);
    }

    #[test]
    fn ids_stay_inside_the_vocabulary(s in "[a-zA-Z0-9 .,!?'\n]{0,60}") {
        let tok = tiny_tokenizer();
        let ids = tok.encode_plain(&s);
        prop_assert!(ids.iter().all(|&i| (i as usize) < tok.vocab_size() && !tok.is_special(i)));
    }

    #[test]
    fn text_with_blank_lines_round_trips(a in "[a-z ]{0,20}", b in "[a-z ]{0,20}") {
        let tok = tiny_tokenizer();
        let joined = format!("{a}\n\n{b}");
        prop_assert_eq!(tok.decode(&tok.encode_plain(&joined)), joined);
    }
}

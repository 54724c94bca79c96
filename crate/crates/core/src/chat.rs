// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rendering conversation turns with a model's role markers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::tokenizer::Tokenizer;

/// Template strings for wrapping turns. `{content}` marks where the user
/// message goes. Template text may contain special tokens; message content
/// is always encoded as plain text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChatTemplate {
    /// Emitted once, before the first turn.
    pub conversation_start: String,
    /// Wraps `system_prompt` when one is set.
    pub system: String,
    pub system_prompt: Option<String>,
    /// Wraps every user message, including the header that opens the
    /// assistant reply.
    pub user: String,
    /// Closes an assistant reply that did not end on a stop token.
    pub assistant_end: String,
    pub stop: Vec<String>,
}

impl Default for ChatTemplate {
    fn default() -> Self {
        Self::llama3()
    }
}

impl ChatTemplate {
    pub fn llama3() -> Self {
        Self {
            conversation_start: "<|begin_of_text|>".into(),
            system: "<|start_header_id|>system<|end_header_id|>\n\n{content}<|eot_id|>".into(),
            system_prompt: None,
            user: "<|start_header_id|>user<|end_header_id|>\n\n{content}<|eot_id|><|start_header_id|>assistant<|end_header_id|>\n\n".into(),
            assistant_end: "<|eot_id|>".into(),
            stop: vec!["<|eot_id|>".into(), "<|end_of_text|>".into()],
        }
    }

    pub fn stop_ids(&self, tok: &Tokenizer) -> Vec<u32> {
        self.stop.iter().filter_map(|s| tok.token_id(s)).collect()
    }

    pub fn assistant_end_ids(&self, tok: &Tokenizer) -> Vec<u32> {
        tok.encode(&self.assistant_end)
    }

    /// Render one user turn. Returns the tokens and, for each content
    /// segment, its token range within the returned sequence.
    pub fn render_user_turn(&self, tok: &Tokenizer, first_turn: bool, content: &[Segment<'_>]) -> RenderedTurn {
        let mut ids = Vec::new();
        if first_turn {
            ids.extend(tok.encode(&self.conversation_start));
            if let Some(sys) = &self.system_prompt {
                let (before, after) = split_content(&self.system);
                ids.extend(tok.encode(before));
                ids.extend(tok.encode_plain(sys));
                ids.extend(tok.encode(after));
            }
        }
        let (before, after) = split_content(&self.user);
        ids.extend(tok.encode(before));
        let mut spans = Vec::with_capacity(content.len());
        for seg in content {
            let start = ids.len();
            match seg {
                Segment::Text(s) => ids.extend(tok.encode_plain(s)),
                Segment::Tokens(t) => ids.extend_from_slice(t),
            }
            spans.push(start..ids.len());
        }
        ids.extend(tok.encode(after));
        RenderedTurn { tokens: ids, spans }
    }
}

fn split_content(template: &str) -> (&str, &str) {
    template.split_once("{content}").unwrap_or((template, ""))
}

#[derive(Debug, Clone, Copy)]
pub enum Segment<'a> {
    Text(&'a str),
    Tokens(&'a [u32]),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedTurn {
    pub tokens: Vec<u32>,
    pub spans: Vec<Range<usize>>,
}

/// Split a prompt template around `{placeholder}` markers into segments,
/// substituting text values and leaving token values in place.
pub fn fill_template<'a>(template: &'a str, values: &[(&str, Segment<'a>)]) -> Vec<Segment<'a>> {
    let mut out = Vec::new();
    let mut rest = template;
    loop {
        let next = values
            .iter()
            .filter_map(|(name, seg)| {
                let marker = format!("{{{name}}}");
                rest.find(&marker).map(|at| (at, marker.len(), *seg))
            })
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, len, seg)) => {
                if at > 0 {
                    out.push(Segment::Text(&rest[..at]));
                }
                out.push(seg);
                rest = &rest[at + len..];
            }
            None => {
                if !rest.is_empty() {
                    out.push(Segment::Text(rest));
                }
                return out;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_template_orders_segments() {
        let toks = [1u32, 2, 3];
        let segs = fill_template(
            "{context}\n\nQ: {question}",
            &[("context", Segment::Tokens(&toks)), ("question", Segment::Text("why?"))],
        );
        assert_eq!(segs.len(), 3);
        assert!(matches!(segs[0], Segment::Tokens(t) if t == toks));
        assert!(matches!(segs[1], Segment::Text("\n\nQ: ")));
        assert!(matches!(segs[2], Segment::Text("why?")));
    }

    #[test]
    fn rendered_spans_locate_token_segments() {
        let tok = crate::fixtures::tiny_tokenizer();
        let template = ChatTemplate::llama3();
        let ctx = tok.encode_plain("some haystack text");
        let turn = template.render_user_turn(&tok, true, &[Segment::Tokens(&ctx), Segment::Text(" question")]);
        assert_eq!(&turn.tokens[turn.spans[0].clone()], ctx.as_slice());
        assert_eq!(turn.tokens[0], tok.token_id("<|begin_of_text|>").unwrap());
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! C interface to the headprobe runtime.
//!
//! Every fallible function returns an [`HpStatus`]. On failure the message
//! is available from [`hp_last_error`] on the same thread until the next
//! call. Objects are opaque handles created by `*_new`/`*_load` functions
//! and released with the matching `*_free`. Pointers returned by accessor
//! functions borrow from their handle and stay valid until it is freed.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use headprobe::backend::{Backend, DecodeResult, ModelBackend};
use headprobe::{AttentionProbe, Error, HeadId, MaskPlan, MaskScope};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Model = 4,
    Tokenizer = 5,
    HeadOutOfRange = 6,
    ContextOverflow = 7,
    InvalidArgument = 8,
    BufferTooSmall = 9,
    Panic = 10,
    Other = 11,
}

/// Classification of a yes/no reply.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpAnswer {
    Yes = 0,
    No = 1,
    Incoherent = 2,
}

/// Which turns a mask plan applies to.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpMaskScope {
    WholeConversation = 0,
    SecondTurnOnly = 1,
}

/// One head's strongest attention target at one decoding step.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpTraceEntry {
    pub step: u64,
    pub layer: u32,
    pub head: u32,
    pub argmax_pos: u64,
    pub argmax_token: u32,
    pub argmax_weight: f32,
    pub turn: u32,
}

/// A loaded model with its tokenizer.
pub struct HpModel {
    backend: ModelBackend,
}

/// A set of heads to silence during generation.
pub struct HpMaskPlan {
    plan: MaskPlan,
}

/// Output of one greedy generation.
pub struct HpGeneration {
    result: DecodeResult,
    text: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: impl Into<String>) {
    let mut bytes = message.into().into_bytes();
    bytes.retain(|b| *b != 0);
    let msg = CString::new(bytes).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(HpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => HpStatus::Io,
            Error::MissingTensor(_)
            | Error::ShapeMismatch { .. }
            | Error::UnsupportedDtype { .. }
            | Error::Container(_)
            | Error::Config(_) => HpStatus::Model,
            Error::Tokenizer(_) => HpStatus::Tokenizer,
            Error::HeadOutOfRange { .. } => HpStatus::HeadOutOfRange,
            Error::ContextOverflow { .. } => HpStatus::ContextOverflow,
            Error::EmptyPrompt => HpStatus::InvalidArgument,
            _ => HpStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HpStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, turning errors and panics into a status and the last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            HpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(HpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn hp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load safetensors weights and a `tokenizer.json`.
#[no_mangle]
pub unsafe extern "C" fn hp_model_load(
    weights_path: *const c_char,
    tokenizer_path: *const c_char,
    out: *mut *mut HpModel,
) -> HpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let weights = str_arg(weights_path, "weights_path")?;
        let tokenizer = str_arg(tokenizer_path, "tokenizer_path")?;
        let backend = headprobe::load_model(Path::new(weights), Path::new(tokenizer))?;
        *out = Box::into_raw(Box::new(HpModel { backend }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hp_model_free(model: *mut HpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of layers and of query heads per layer.
#[no_mangle]
pub unsafe extern "C" fn hp_model_shape(model: *const HpModel, n_layers: *mut u32, n_heads: *mut u32) -> HpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let shape = model.backend.head_shape();
        *out_arg(n_layers, "n_layers")? = shape.n_layers as u32;
        *out_arg(n_heads, "n_heads")? = shape.n_heads as u32;
        Ok(())
    })
}

/// Maximum context length in tokens.
#[no_mangle]
pub unsafe extern "C" fn hp_model_max_context(model: *const HpModel, out: *mut u64) -> HpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = model.backend.max_context() as u64;
        Ok(())
    })
}

/// Encode text, recognizing special tokens. Writes up to `capacity` ids to
/// `ids` and the full count to `out_len`; returns `BufferTooSmall` when the
/// count exceeds `capacity`. Passing a null `ids` with zero capacity is a
/// valid way to query the length.
#[no_mangle]
pub unsafe extern "C" fn hp_tokenize(
    model: *const HpModel,
    text: *const c_char,
    ids: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> HpStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let text = str_arg(text, "text")?;
        let out_len = out_arg(out_len, "out_len")?;
        let encoded = model.backend.tokenize(text);
        *out_len = encoded.len();
        if encoded.len() > capacity {
            return Err(Failure(
                HpStatus::BufferTooSmall,
                format!("{} ids do not fit in {capacity}", encoded.len()),
            ));
        }
        if !encoded.is_empty() {
            if ids.is_null() {
                return Err(null("ids"));
            }
            ptr::copy_nonoverlapping(encoded.as_ptr(), ids, encoded.len());
        }
        Ok(())
    })
}

/// Decode ids to a newly allocated string, released with [`hp_string_free`].
#[no_mangle]
pub unsafe extern "C" fn hp_detokenize(
    model: *const HpModel,
    ids: *const u32,
    len: usize,
    out: *mut *mut c_char,
) -> HpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let ids = slice_arg(ids, len, "ids")?;
        let text = model.backend.detokenize(ids);
        let c = CString::new(text.replace('\0', "")).expect("nul bytes removed");
        *out = c.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// An empty mask plan. Returns null when `id` is null or not UTF-8.
#[no_mangle]
pub unsafe extern "C" fn hp_mask_new(id: *const c_char, scope: HpMaskScope) -> *mut HpMaskPlan {
    let mut plan = ptr::null_mut();
    let status = guard(|| {
        let id = str_arg(id, "id")?;
        let scope = match scope {
            HpMaskScope::WholeConversation => MaskScope::WholeConversation,
            HpMaskScope::SecondTurnOnly => MaskScope::SecondTurnOnly,
        };
        plan = Box::into_raw(Box::new(HpMaskPlan {
            plan: MaskPlan::new(id, [], scope),
        }));
        Ok(())
    });
    if status == HpStatus::Ok {
        plan
    } else {
        ptr::null_mut()
    }
}

/// Add one head. Range is checked against the model at generation time.
#[no_mangle]
pub unsafe extern "C" fn hp_mask_add_head(plan: *mut HpMaskPlan, layer: u32, head: u32) -> HpStatus {
    guard(|| {
        let plan = plan.as_mut().ok_or_else(|| null("plan"))?;
        plan.plan.heads.insert(HeadId::new(layer as usize, head as usize));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hp_mask_len(plan: *const HpMaskPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.plan.heads.len())
}

#[no_mangle]
pub unsafe extern "C" fn hp_mask_free(plan: *mut HpMaskPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Greedy single-turn decoding of up to `max_new` tokens. `probe_top_k`
/// of 0 disables attention capture; otherwise each trace entry keeps that
/// many strongest positions. `mask` may be null. Decoding stops early on
/// any of the `n_stop` ids in `stop`.
#[no_mangle]
pub unsafe extern "C" fn hp_generate(
    model: *const HpModel,
    prompt: *const u32,
    prompt_len: usize,
    max_new: usize,
    probe_top_k: u32,
    mask: *const HpMaskPlan,
    stop: *const u32,
    n_stop: usize,
    out: *mut *mut HpGeneration,
) -> HpStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let prompt = slice_arg(prompt, prompt_len, "prompt")?;
        let stop = slice_arg(stop, n_stop, "stop")?;
        let vocab = model.backend.config().vocab_size;
        if let Some(bad) = prompt.iter().find(|&&t| t as usize >= vocab) {
            return Err(Failure(
                HpStatus::InvalidArgument,
                format!("token id {bad} is outside the vocabulary of {vocab}"),
            ));
        }
        let probe = (probe_top_k > 0).then_some(AttentionProbe {
            top_k: probe_top_k as usize,
        });
        let mask = mask.as_ref().map(|m| &m.plan);
        if let Some(m) = mask {
            m.validate(model.backend.head_shape())?;
        }
        let result = model.backend.generate(prompt, max_new, probe.as_ref(), mask, stop)?;
        let text = CString::new(result.text.replace('\0', "")).expect("nul bytes removed");
        *out = Box::into_raw(Box::new(HpGeneration { result, text }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn hp_generation_free(generation: *mut HpGeneration) {
    if !generation.is_null() {
        drop(Box::from_raw(generation));
    }
}

/// Generated ids, borrowed. `out_len` receives the count.
#[no_mangle]
pub unsafe extern "C" fn hp_generation_tokens(generation: *const HpGeneration, out_len: *mut usize) -> *const u32 {
    let Some(g) = generation.as_ref() else {
        return ptr::null();
    };
    if let Some(n) = out_len.as_mut() {
        *n = g.result.generated.len();
    }
    g.result.generated.as_ptr()
}

/// Decoded text of the generated ids, borrowed.
#[no_mangle]
pub unsafe extern "C" fn hp_generation_text(generation: *const HpGeneration) -> *const c_char {
    generation.as_ref().map_or(ptr::null(), |g| g.text.as_ptr())
}

/// The stop id that ended decoding, or -1 when none did.
#[no_mangle]
pub unsafe extern "C" fn hp_generation_stop_token(generation: *const HpGeneration) -> i64 {
    generation
        .as_ref()
        .and_then(|g| g.result.stop_token)
        .map_or(-1, i64::from)
}

/// Number of trace entries: steps times heads, step-major.
#[no_mangle]
pub unsafe extern "C" fn hp_generation_trace_len(generation: *const HpGeneration) -> usize {
    generation.as_ref().map_or(0, |g| g.result.trace.len())
}

#[no_mangle]
pub unsafe extern "C" fn hp_generation_trace_entry(
    generation: *const HpGeneration,
    index: usize,
    out: *mut HpTraceEntry,
) -> HpStatus {
    guard(|| {
        let g = generation.as_ref().ok_or_else(|| null("generation"))?;
        let out = out_arg(out, "out")?;
        let e = g.result.trace.entries().get(index).ok_or_else(|| {
            Failure(
                HpStatus::InvalidArgument,
                format!("entry {index} of {}", g.result.trace.len()),
            )
        })?;
        *out = HpTraceEntry {
            step: e.step as u64,
            layer: e.layer as u32,
            head: e.head as u32,
            argmax_pos: e.argmax_pos as u64,
            argmax_token: e.argmax_token,
            argmax_weight: e.argmax_weight,
            turn: e.turn as u32,
        };
        Ok(())
    })
}

/// Strict yes/no reading of a reply. Null or non-UTF-8 text is incoherent.
#[no_mangle]
pub unsafe extern "C" fn hp_parse_answer(text: *const c_char) -> HpAnswer {
    let Ok(text) = str_arg(text, "text") else {
        return HpAnswer::Incoherent;
    };
    match headprobe::parse_answer(text) {
        headprobe::AnswerClass::Yes => HpAnswer::Yes,
        headprobe::AnswerClass::No => HpAnswer::No,
        headprobe::AnswerClass::Incoherent => HpAnswer::Incoherent,
    }
}

/// Word-level recall of `expected` within `answer`.
#[no_mangle]
pub unsafe extern "C" fn hp_recall_score(answer: *const c_char, expected: *const c_char, out: *mut f64) -> HpStatus {
    guard(|| {
        let answer = str_arg(answer, "answer")?;
        let expected = str_arg(expected, "expected")?;
        *out_arg(out, "out")? = headprobe::recall_score(answer, expected).recall;
        Ok(())
    })
}

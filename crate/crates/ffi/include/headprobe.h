/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef HEADPROBE_H
#define HEADPROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_POINTER = 1,
  HP_STATUS_INVALID_UTF8 = 2,
  HP_STATUS_IO = 3,
  HP_STATUS_MODEL = 4,
  HP_STATUS_TOKENIZER = 5,
  HP_STATUS_HEAD_OUT_OF_RANGE = 6,
  HP_STATUS_CONTEXT_OVERFLOW = 7,
  HP_STATUS_INVALID_ARGUMENT = 8,
  HP_STATUS_BUFFER_TOO_SMALL = 9,
  HP_STATUS_PANIC = 10,
  HP_STATUS_OTHER = 11,
} HpStatus;

/**
 * Which turns a mask plan applies to.
 */
typedef enum HpMaskScope {
  HP_MASK_SCOPE_WHOLE_CONVERSATION = 0,
  HP_MASK_SCOPE_SECOND_TURN_ONLY = 1,
} HpMaskScope;

/**
 * Classification of a yes/no reply.
 */
typedef enum HpAnswer {
  HP_ANSWER_YES = 0,
  HP_ANSWER_NO = 1,
  HP_ANSWER_INCOHERENT = 2,
} HpAnswer;

/**
 * Output of one greedy generation.
 */
typedef struct HpGeneration HpGeneration;

/**
 * A set of heads to silence during generation.
 */
typedef struct HpMaskPlan HpMaskPlan;

/**
 * A loaded model with its tokenizer.
 */
typedef struct HpModel HpModel;

/**
 * One head's strongest attention target at one decoding step.
 */
typedef struct HpTraceEntry {
  uint64_t step;
  uint32_t layer;
  uint32_t head;
  uint64_t argmax_pos;
  uint32_t argmax_token;
  float argmax_weight;
  uint32_t turn;
} HpTraceEntry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *hp_version(void);

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call on this thread.
 */
const char *hp_last_error(void);

/**
 * Load safetensors weights and a `tokenizer.json`.
 */
enum HpStatus hp_model_load(const char *weights_path,
                            const char *tokenizer_path,
                            struct HpModel **out);

void hp_model_free(struct HpModel *model);

/**
 * Number of layers and of query heads per layer.
 */
enum HpStatus hp_model_shape(const struct HpModel *model, uint32_t *n_layers, uint32_t *n_heads);

/**
 * Maximum context length in tokens.
 */
enum HpStatus hp_model_max_context(const struct HpModel *model, uint64_t *out);

/**
 * Encode text, recognizing special tokens. Writes up to `capacity` ids to
 * `ids` and the full count to `out_len`; returns `BufferTooSmall` when the
 * count exceeds `capacity`. Passing a null `ids` with zero capacity is a
 * valid way to query the length.
 */
enum HpStatus hp_tokenize(const struct HpModel *model,
                          const char *text,
                          uint32_t *ids,
                          size_t capacity,
                          size_t *out_len);

/**
 * Decode ids to a newly allocated string, released with [`hp_string_free`].
 */
enum HpStatus hp_detokenize(const struct HpModel *model,
                            const uint32_t *ids,
                            size_t len,
                            char **out);

void hp_string_free(char *s);

/**
 * An empty mask plan. Returns null when `id` is null or not UTF-8.
 */
struct HpMaskPlan *hp_mask_new(const char *id, enum HpMaskScope scope);

/**
 * Add one head. Range is checked against the model at generation time.
 */
enum HpStatus hp_mask_add_head(struct HpMaskPlan *plan, uint32_t layer, uint32_t head);

size_t hp_mask_len(const struct HpMaskPlan *plan);

void hp_mask_free(struct HpMaskPlan *plan);

/**
 * Greedy single-turn decoding of up to `max_new` tokens. `probe_top_k`
 * of 0 disables attention capture; otherwise each trace entry keeps that
 * many strongest positions. `mask` may be null. Decoding stops early on
 * any of the `n_stop` ids in `stop`.
 */
enum HpStatus hp_generate(const struct HpModel *model,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          size_t max_new,
                          uint32_t probe_top_k,
                          const struct HpMaskPlan *mask,
                          const uint32_t *stop,
                          size_t n_stop,
                          struct HpGeneration **out);

void hp_generation_free(struct HpGeneration *generation);

/**
 * Generated ids, borrowed. `out_len` receives the count.
 */
const uint32_t *hp_generation_tokens(const struct HpGeneration *generation, size_t *out_len);

/**
 * Decoded text of the generated ids, borrowed.
 */
const char *hp_generation_text(const struct HpGeneration *generation);

/**
 * The stop id that ended decoding, or -1 when none did.
 */
int64_t hp_generation_stop_token(const struct HpGeneration *generation);

/**
 * Number of trace entries: steps times heads, step-major.
 */
size_t hp_generation_trace_len(const struct HpGeneration *generation);

enum HpStatus hp_generation_trace_entry(const struct HpGeneration *generation,
                                        size_t index,
                                        struct HpTraceEntry *out);

/**
 * Strict yes/no reading of a reply. Null or non-UTF-8 text is incoherent.
 */
enum HpAnswer hp_parse_answer(const char *text);

/**
 * Word-level recall of `expected` within `answer`.
 */
enum HpStatus hp_recall_score(const char *answer, const char *expected, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEADPROBE_H */

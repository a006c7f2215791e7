#ifndef DESTA_H
#define DESTA_H

/* Generated by cbindgen from crates/ffi; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum DestaStatus {
  DESTA_STATUS_OK = 0,
  DESTA_STATUS_NULL_ARGUMENT = 1,
  DESTA_STATUS_INVALID_UTF8 = 2,
  DESTA_STATUS_INVALID_ARGUMENT = 3,
  DESTA_STATUS_OUT_OF_RANGE = 4,
  DESTA_STATUS_IO = 5,
  DESTA_STATUS_MODEL = 6,
  DESTA_STATUS_PANIC = 7,
} DestaStatus;

/*
 Opaque model handle.
 */
typedef struct DestaHandle DestaHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or NULL. The pointer
 stays valid until the next call into this library on the same thread.
 */
const char *desta_last_error(void);

/*
 Releases a string returned by this library. NULL is ignored.

 # Safety
 `s` must come from this library and not have been freed already.
 */
void desta_string_free(char *s);

/*
 Builds a model. `config_toml` may be NULL for the toy preset.

 # Safety
 `config_toml` must be NULL or a valid string; `out` must be writable.
 */
enum DestaStatus desta_model_new(const char *config_toml, uint64_t seed, struct DestaHandle **out);

/*
 # Safety
 `handle` must be NULL or come from [`desta_model_new`], freed once.
 */
void desta_model_free(struct DestaHandle *handle);

/*
 Loads trainable weights from a training checkpoint file.

 # Safety
 `handle` must be a live handle; `path` a valid string.
 */
enum DestaStatus desta_model_load_checkpoint(struct DestaHandle *handle, const char *path);

/*
 Sets the LoRA scale; must lie in [0, 1].

 # Safety
 `handle` must be a live handle.
 */
enum DestaStatus desta_model_set_lora_scale(struct DestaHandle *handle, double scale);

/*
 # Safety
 `handle` must be a live handle; `out` writable.
 */
enum DestaStatus desta_model_trainable_params(struct DestaHandle *handle, size_t *out);

/*
 Greedy answer to `instruction` about the audio described by
 `metadata_json` (one metadata record; features are synthesised from it).
 The result must be released with [`desta_string_free`].

 # Safety
 `handle` must be a live handle; strings valid; `out` writable.
 */
enum DestaStatus desta_model_generate(struct DestaHandle *handle,
                                      const char *metadata_json,
                                      const char *instruction,
                                      size_t max_new_tokens,
                                      char **out);

/*
 1 when the strings agree after answer normalization, 0 when not, -1 on
 invalid input.

 # Safety
 Both arguments must be valid strings.
 */
int desta_exact_match(const char *prediction, const char *label);

/*
 Zero-shot metrics over line-delimited JSON responses, each
 `{"question_id","text","label","allowed":[...]}`. Accuracy is NaN when
 nothing followed the instruction.

 # Safety
 `responses_jsonl` must be a valid string; outputs writable.
 */
enum DestaStatus desta_zero_shot_metrics(const char *responses_jsonl,
                                         double *success_rate,
                                         double *accuracy,
                                         double *following_rate);

/*
 Checks a caption against its metadata with the shipped lexicon. Writes 1
 to `passed` when it is accepted, else 0; rejection reasons are then
 available from [`desta_last_error`].

 # Safety
 Strings must be valid; `passed` writable.
 */
enum DestaStatus desta_validate_caption(const char *caption,
                                        const char *metadata_json,
                                        int *passed);

/*
 Cosine-annealed learning rate with linear warmup. Infallible.
 */
double desta_cosine_lr(size_t step,
                       size_t total_steps,
                       double lr_max,
                       double lr_min,
                       size_t warmup_steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DESTA_H */

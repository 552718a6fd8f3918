/* C interface to the idclrec sequential recommender. */

#ifndef IDCLREC_H
#define IDCLREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API function.
 */
typedef enum IdclrecStatus {
  IDCLREC_STATUS_OK = 0,
  IDCLREC_STATUS_IO = 1,
  IDCLREC_STATUS_PARSE = 2,
  IDCLREC_STATUS_CONFIG = 3,
  IDCLREC_STATUS_SHAPE = 4,
  IDCLREC_STATUS_NUMERIC = 5,
  IDCLREC_STATUS_DATA = 6,
  IDCLREC_STATUS_NULL_ARGUMENT = 7,
  IDCLREC_STATUS_INVALID_UTF8 = 8,
  IDCLREC_STATUS_INTERNAL = 9,
} IdclrecStatus;

/**
 * Opaque prepared dataset handle.
 */
typedef struct IdclrecDataset IdclrecDataset;

/**
 * Opaque trained-model handle.
 */
typedef struct IdclrecModel IdclrecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *idclrec_last_error(void);

/**
 * Library version as a static string.
 */
const char *idclrec_version(void);

/**
 * Free a string returned through an out-parameter.
 *
 * # Safety
 * `ptr` must have been returned by this library and not freed before.
 */
void idclrec_string_free(char *ptr);

/**
 * Ingest a raw interaction file (`user<sep>item<sep>timestamp` lines),
 * apply 5-core filtering and sequence construction, and return a dataset
 * handle. `format` is `"tsv"` or `"csv"`.
 *
 * # Safety
 * `input`, `format` must be valid NUL-terminated strings; `out` must be a
 * valid pointer.
 */
enum IdclrecStatus idclrec_dataset_prepare(const char *input,
                                           const char *format,
                                           uintptr_t max_len,
                                           uintptr_t min_len,
                                           uint64_t seed,
                                           struct IdclrecDataset **out);

/**
 * Load a prepared dataset directory (`sequences.tsv` + `manifest.json`).
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string; `out` must be valid.
 */
enum IdclrecStatus idclrec_dataset_load(const char *dir, struct IdclrecDataset **out);

/**
 * Write a dataset as `sequences.tsv` + `manifest.json` under `dir`.
 *
 * # Safety
 * `dataset` must be a live handle; `dir` a valid string.
 */
enum IdclrecStatus idclrec_dataset_save(const struct IdclrecDataset *dataset, const char *dir);

/**
 * Number of users in the dataset; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be a live handle or null.
 */
uintptr_t idclrec_dataset_num_users(const struct IdclrecDataset *dataset);

/**
 * Number of items in the dataset; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be a live handle or null.
 */
uintptr_t idclrec_dataset_num_items(const struct IdclrecDataset *dataset);

/**
 * Free a dataset handle.
 *
 * # Safety
 * `dataset` must have come from this library and not be freed twice.
 */
void idclrec_dataset_free(struct IdclrecDataset *dataset);

/**
 * Train one model on the dataset with the given seed. `config_json` is a
 * JSON object of training hyperparameters (any subset of the config
 * fields; missing ones keep their defaults); null means all
 * defaults.
 *
 * # Safety
 * `dataset` must be a live handle, `out` valid; `config_json` null or a
 * valid string.
 */
enum IdclrecStatus idclrec_train(const struct IdclrecDataset *dataset,
                                 const char *config_json,
                                 uint64_t seed,
                                 struct IdclrecModel **out);

/**
 * Load a checkpoint written by the trainer (`<prefix>.json` +
 * `<prefix>.bin`).
 *
 * # Safety
 * `prefix` must be a valid string; `out` valid.
 */
enum IdclrecStatus idclrec_model_load(const char *prefix, struct IdclrecModel **out);

/**
 * Write the model as a checkpoint under `prefix`.
 *
 * # Safety
 * `model` must be a live handle; `prefix` a valid string.
 */
enum IdclrecStatus idclrec_model_save(const struct IdclrecModel *model, const char *prefix);

/**
 * Free a model handle.
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void idclrec_model_free(struct IdclrecModel *model);

/**
 * Full-ranking evaluation on `split` (`"valid"` or `"test"`). On success
 * `out_json` receives a JSON report; free it with
 * [`idclrec_string_free`].
 *
 * # Safety
 * `model` and `dataset` must be live handles; `split`/`variant` valid
 * strings; `out_json` valid.
 */
enum IdclrecStatus idclrec_evaluate(const struct IdclrecModel *model,
                                    const struct IdclrecDataset *dataset,
                                    const char *split,
                                    double delta,
                                    const char *variant,
                                    char **out_json);

/**
 * Score an item history (1-based item indices, most recent last) and
 * return the top-k recommendations. `out_items` and `out_scores` must
 * hold at least `k` entries; `*out_count` reports the number written
 * (less than `k` when the catalog is smaller).
 *
 * # Safety
 * `model` must be a live handle; `items` must point to `len` values;
 * `out_items`/`out_scores` must hold `k` entries; `variant` a valid
 * string; `out_count` valid.
 */
enum IdclrecStatus idclrec_recommend(const struct IdclrecModel *model,
                                     const uint32_t *items,
                                     uintptr_t len,
                                     uintptr_t k,
                                     double delta,
                                     const char *variant,
                                     uint32_t *out_items,
                                     double *out_scores,
                                     uintptr_t *out_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* IDCLREC_H */

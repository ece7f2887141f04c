#ifndef MUSIC_H
#define MUSIC_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MusicStatus {
  MUSIC_STATUS_OK = 0,
  MUSIC_STATUS_NULL_POINTER = 1,
  MUSIC_STATUS_INVALID_ARGUMENT = 2,
  MUSIC_STATUS_IO = 3,
  MUSIC_STATUS_FORMAT = 4,
  MUSIC_STATUS_DATA = 5,
  MUSIC_STATUS_CONFIG = 6,
  MUSIC_STATUS_SAMPLING = 7,
  MUSIC_STATUS_NUMERIC = 8,
  MUSIC_STATUS_CONTRACT = 9,
  MUSIC_STATUS_PANIC = 10,
} MusicStatus;

typedef enum MusicSetting {
  MUSIC_SETTING_INDUCTIVE = 0,
  MUSIC_SETTING_TRANSDUCTIVE = 1,
  MUSIC_SETTING_DISTRACTIVE = 2,
} MusicSetting;

typedef enum MusicMode {
  MUSIC_MODE_FULL = 0,
  MUSIC_MODE_ONLY_NEG = 1,
  MUSIC_MODE_ONLY_POS = 2,
  MUSIC_MODE_NO_DELTA = 3,
  MUSIC_MODE_NO_MINENT = 4,
  MUSIC_MODE_ALTERNATING_NEG_FIRST = 5,
  MUSIC_MODE_ALTERNATING_POS_FIRST = 6,
  MUSIC_MODE_SUPPORT_ONLY = 7,
} MusicMode;

typedef enum MusicDeltaSchedule {
  MUSIC_DELTA_SCHEDULE_FIXED = 0,
  MUSIC_DELTA_SCHEDULE_ADMISSIBLE = 1,
} MusicDeltaSchedule;

// Opaque benchmark report handle.
typedef struct MusicReport MusicReport;

// Opaque feature store handle.
typedef struct MusicStore MusicStore;

// Parameters of the Gaussian-cluster generator.
typedef struct MusicSyntheticConfig {
  uint32_t num_classes;
  uint32_t dim;
  uint32_t samples_per_class;
  double separation;
  double noise_sigma;
  uint64_t seed;
} MusicSyntheticConfig;

// Episode, engine and scheduling options for [`music_run`].
//
// Obtain defaults from [`music_run_options_default`] and override fields.
typedef struct MusicRunOptions {
  uint32_t ways;
  uint32_t shots;
  uint32_t unlabeled_per_class;
  uint32_t queries_per_class;
  enum MusicSetting setting;
  uint32_t distractor_classes;
  // Negative means "same as `unlabeled_per_class`".
  int64_t distractor_unlabeled_per_class;
  uint32_t episodes;
  uint64_t base_seed;
  enum MusicMode mode;
  // Reject threshold. Zero or negative means `1 / ways`.
  double delta;
  enum MusicDeltaSchedule delta_schedule;
  double minent_weight;
  double pos_threshold;
  uint32_t steps;
  double learning_rate;
  double momentum;
  bool anchor_support;
  bool bias;
  // Worker threads; 0 uses every core. Results do not depend on it.
  uint32_t threads;
} MusicRunOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
//
// The pointer stays valid until the next failing call on the same thread.
const char *music_last_error_message(void);

// Static name of a status code, e.g. `"format"`.
const char *music_status_name(enum MusicStatus status);

// Reads a store (and its manifest sidecar, if present) from `path`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum MusicStatus music_store_read(const char *path, struct MusicStore **out);

// Decodes a store from an in-memory buffer.
//
// # Safety
// `bytes` must point to `len` readable bytes (it may be null when `len` is 0).
enum MusicStatus music_store_decode(const uint8_t *bytes, size_t len, struct MusicStore **out);

// Writes `store` to `path`, plus its manifest sidecar when it has one.
//
// # Safety
// `store` must come from this library; `path` must be NUL-terminated.
enum MusicStatus music_store_write(const struct MusicStore *store, const char *path);

// Generates a synthetic Gaussian-cluster store.
//
// # Safety
// `config` must be readable and `out` writable.
enum MusicStatus music_store_generate_synthetic(const struct MusicSyntheticConfig *config,
                                                struct MusicStore **out);

// Feature dimension, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t music_store_dim(const struct MusicStore *store);

// Number of classes declared in the header, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t music_store_num_classes(const struct MusicStore *store);

// Number of records, or 0 for a null handle.
//
// # Safety
// `store` must be null or a live handle.
size_t music_store_len(const struct MusicStore *store);

// # Safety
// `store` must be null or a handle not yet freed.
void music_store_free(struct MusicStore *store);

struct MusicRunOptions music_run_options_default(void);

// Runs `options.episodes` episodes on `store` and returns the report.
//
// # Safety
// `store` and `options` must be live and readable; `out` writable.
enum MusicStatus music_run(const struct MusicStore *store,
                           const struct MusicRunOptions *options,
                           struct MusicReport **out);

// Mean query accuracy as a fraction in [0, 1], or NaN for a null handle.
//
// # Safety
// `report` must be null or a live handle.
double music_report_mean_accuracy(const struct MusicReport *report);

// 95% confidence half-width of the mean accuracy (same units), or NaN for
// a null handle.
//
// # Safety
// `report` must be null or a live handle.
double music_report_ci95(const struct MusicReport *report);

// # Safety
// `report` must be null or a live handle.
uint64_t music_report_episodes(const struct MusicReport *report);

// Serializes the report as JSON into a new string; free it with
// [`music_string_free`].
//
// # Safety
// `report` must be a live handle and `out` writable.
enum MusicStatus music_report_to_json(const struct MusicReport *report, char **out);

// # Safety
// `s` must be null or a string returned by this library and not yet freed.
void music_string_free(char *s);

// # Safety
// `report` must be null or a handle not yet freed.
void music_report_free(struct MusicReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MUSIC_H */

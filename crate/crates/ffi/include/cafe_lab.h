#ifndef CAFE_LAB_H
#define CAFE_LAB_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values below 50 mirror the library's error codes.
typedef enum CafeLabStatus {
  CAFE_LAB_STATUS_OK = 0,
  CAFE_LAB_STATUS_DIMENSION = 10,
  CAFE_LAB_STATUS_INVALID_ARGUMENT = 11,
  CAFE_LAB_STATUS_ENUMERATION_CAP = 12,
  CAFE_LAB_STATUS_KEY_MISMATCH = 13,
  CAFE_LAB_STATUS_REGENERATIONS_EXHAUSTED = 20,
  CAFE_LAB_STATUS_FORMAT = 30,
  CAFE_LAB_STATUS_TRUNCATED = 31,
  CAFE_LAB_STATUS_IO = 32,
  CAFE_LAB_STATUS_CONFIG = 40,
  // A required pointer argument was null.
  CAFE_LAB_STATUS_NULL_POINTER = 50,
  // A string argument was not valid UTF-8.
  CAFE_LAB_STATUS_UTF8 = 51,
  // Caller buffer too small; the needed length is still reported.
  CAFE_LAB_STATUS_BUFFER_TOO_SMALL = 52,
  // The library panicked. This is a bug.
  CAFE_LAB_STATUS_PANIC = 60,
} CafeLabStatus;

// Opaque experiment configuration.
typedef struct CafeLabConfig CafeLabConfig;

// Opaque result of one attack run.
typedef struct CafeLabOutcome CafeLabOutcome;

// Scalar summary of an outcome.
typedef struct CafeLabSummary {
  double psnr_db;
  double mse;
  // Server rounds consumed.
  uint64_t rounds;
  // First round reaching the PSNR target, or 0 when never reached.
  uint64_t target_reached_at;
  uint64_t warnings;
} CafeLabSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into the library.
const char *cafe_lab_last_error(void);

// Loads a shipped preset by name into `*out`.
//
// # Safety
// `name` must be a nul-terminated string and `out` a valid pointer.
enum CafeLabStatus cafe_lab_config_from_preset(const char *name, struct CafeLabConfig **out);

// Parses a TOML config document into `*out`.
//
// # Safety
// `text` must be a nul-terminated string and `out` a valid pointer.
enum CafeLabStatus cafe_lab_config_from_toml(const char *text, struct CafeLabConfig **out);

// Replaces the master seed.
//
// # Safety
// `cfg` must be a live handle.
enum CafeLabStatus cafe_lab_config_set_seed(struct CafeLabConfig *cfg, uint64_t seed);

// Writes the config as TOML into `buf` (nul-terminated). `*needed` receives
// the required size including the terminator, also on `BufferTooSmall`.
//
// # Safety
// `cfg` must be a live handle, `buf` valid for `len` bytes (or null with
// `len == 0`) and `needed` a valid pointer.
enum CafeLabStatus cafe_lab_config_to_toml(const struct CafeLabConfig *cfg,
                                           char *buf,
                                           uintptr_t len,
                                           uintptr_t *needed);

// Frees a config. Null is ignored.
//
// # Safety
// `cfg` must come from this library and not be used afterwards.
void cafe_lab_config_free(struct CafeLabConfig *cfg);

// Runs the configured attack (with the configured defense) into `*out`.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum CafeLabStatus cafe_lab_attack_run(const struct CafeLabConfig *cfg,
                                       struct CafeLabOutcome **out);

// Runs the `attack` command, writing its output files under `dir`.
//
// # Safety
// `cfg` must be a live handle and `dir` a nul-terminated string.
enum CafeLabStatus cafe_lab_attack_to_dir(const struct CafeLabConfig *cfg, const char *dir);

// Fills `*out` with the outcome's metrics.
//
// # Safety
// `outcome` must be a live handle and `out` a valid pointer.
enum CafeLabStatus cafe_lab_outcome_summary(const struct CafeLabOutcome *outcome,
                                            struct CafeLabSummary *out);

// Copies the recovered inputs (row-major, one row per sample) into `buf`.
// `*needed` receives the element count, also on `BufferTooSmall`.
//
// # Safety
// `outcome` must be a live handle, `buf` valid for `len` doubles (or null
// with `len == 0`) and `needed` a valid pointer.
enum CafeLabStatus cafe_lab_outcome_fake_data(const struct CafeLabOutcome *outcome,
                                              double *buf,
                                              uintptr_t len,
                                              uintptr_t *needed);

// Frees an outcome. Null is ignored.
//
// # Safety
// `outcome` must come from this library and not be used afterwards.
void cafe_lab_outcome_free(struct CafeLabOutcome *outcome);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAFE_LAB_H */

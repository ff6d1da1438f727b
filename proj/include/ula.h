/* ula — unlearning-metric audit toolkit, public C API.
 *
 * The core library trains a small language model, produces finetuned and
 * unlearned variants, scores membership/forgetting metrics, generates a
 * filtered surrogate dataset, and quantifies metric disagreement.  This
 * header is the only supported ABI surface: everything is reachable through
 * an opaque run-configuration handle plus status codes, so callers need no
 * C++ toolchain and stay insulated from internal types.
 *
 * Conventions
 *   - Every fallible call returns ula_status; ULA_OK is 0.
 *   - On failure, ula_last_error() returns a human-readable message for the
 *     calling thread, valid until that thread's next API call.
 *   - Strings returned through out-parameters are heap-allocated and must be
 *     released with ula_string_free().
 *   - threads <= 0 is rejected; threads == 1 reproduces bit-identical
 *     artifacts across runs and machines of the same word size.
 */
#ifndef ULA_H
#define ULA_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ula_status {
  ULA_OK = 0,
  ULA_ERR_CONFIG = 1,      /* invalid config value, unknown name, or
                              artifacts incompatible with the request */
  ULA_ERR_UNDER_YIELD = 2, /* surrogate generation accepted no candidates
                              within its pass budget */
  ULA_ERR_NUMERIC = 3,     /* non-finite loss, gradient, or score */
  ULA_ERR_IO = 4,          /* unreadable or unwritable file */
  ULA_ERR_INVALID = 5,     /* invalid API usage: null handle or argument */
  ULA_ERR_INTERNAL = 6     /* unexpected failure; see ula_last_error() */
} ula_status;

/* Library semantic version, e.g. "0.1.0".  Static storage; do not free. */
const char* ula_version(void);

/* Stable identifier for a status code, e.g. "config".  Unknown values map
 * to "internal".  Static storage; do not free. */
const char* ula_status_name(ula_status status);

/* Message describing the calling thread's most recent failure, or "" if the
 * thread has not observed one.  Valid until the thread's next API call. */
const char* ula_last_error(void);

/* Releases a string allocated by this library.  NULL is a no-op. */
void ula_string_free(char* s);

/* ---------------------------------------------------------------------------
 * Run configuration
 *
 * A JSON document describing one end-to-end run: corpus manifest path,
 * model/training sections, unlearning method, metric settings, surrogate
 * generation settings, evaluation settings, output directory, and a global
 * seed.  Sections that omit "seed" get one derived from the global seed, so
 * a minimal config is fully reproducible.
 * ------------------------------------------------------------------------- */
typedef struct ula_config ula_config;

/* Loads and validates a JSON run configuration from a file. */
ula_status ula_config_load(const char* path, ula_config** out);

/* Parses and validates a JSON run configuration from a string. */
ula_status ula_config_parse(const char* json_text, ula_config** out);

/* Releases a configuration handle.  NULL is a no-op. */
void ula_config_free(ula_config* cfg);

/* Points the run at a different artifact directory. */
ula_status ula_config_set_output_dir(ula_config* cfg, const char* dir);

/* Replaces the global seed and rederives every per-stage seed from it,
 * including seeds the config pinned explicitly. */
ula_status ula_config_override_seed(ula_config* cfg, uint64_t seed);

/* Canonical JSON of the resolved configuration (seeds materialized, output
 * directory omitted).  Free the result with ula_string_free(). */
ula_status ula_config_to_json(const ula_config* cfg, char** out_json);

/* ---------------------------------------------------------------------------
 * Pipeline execution
 *
 * Stages run in a fixed order, communicate only through files under the
 * output directory, and are skipped when a manifest digest proves their
 * inputs and settings are unchanged.  Running stages one at a time yields
 * byte-identical artifacts to one full run.
 * ------------------------------------------------------------------------- */

/* Number of pipeline stages, in execution order. */
size_t ula_stage_count(void);

/* Name of stage i ("corpus", "train", ...), or NULL if out of range.
 * Static storage; do not free. */
const char* ula_stage_name(size_t i);

/* Runs every stage in order.  If out_report is non-NULL it receives a JSON
 * array of {"stage": name, "skipped": bool}; free with ula_string_free(). */
ula_status ula_run_pipeline(const ula_config* cfg, int64_t threads,
                            char** out_report);

/* Runs one stage by name (the cheap corpus stage is refreshed first so a
 * fresh directory needs no separate bootstrap).  Heavier upstream artifacts
 * must already exist; a missing one fails with ULA_ERR_CONFIG naming the
 * stage that produces it.  Report as in ula_run_pipeline(). */
ula_status ula_run_stage(const ula_config* cfg, const char* stage,
                         int64_t threads, char** out_report);

/* ---------------------------------------------------------------------------
 * Ablation sweeps
 *
 * Regenerates surrogates at each grid point along one axis and reports the
 * per-metric effect sizes.  kind selects the axis and fixes the vocabulary
 * of values:
 *   "coefficient"      values are decimal numbers, e.g. "1.0" "1.5" "2.0"
 *   "distance_metric"  values in {"l2", "cosine"}
 *   "generation_mode"  values in {"continue_from_du", "from_scratch"}
 * Requires the trained checkpoints in the config's output directory; the
 * report is also written to eval/ablation_<kind>.json under that directory.
 * If out_report is non-NULL it receives the report JSON; free with
 * ula_string_free(). */
ula_status ula_run_ablation(const ula_config* cfg, const char* kind,
                            const char* const* values, size_t n_values,
                            int64_t threads, char** out_report);

#ifdef __cplusplus
}
#endif

#endif /* ULA_H */

/* C interface of the cascade-clock atomic-clock simulator. */

#ifndef CASCADE_CLOCK_H
#define CASCADE_CLOCK_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome. Anything but `Ok` leaves a message in `cc_last_error`.
 */
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_CONFIG_ERROR = 1,
  CC_STATUS_RUNTIME_ERROR = 2,
  CC_STATUS_NULL_POINTER = 3,
  CC_STATUS_INVALID_UTF8 = 4,
} CcStatus;

/**
 * Opaque experiment handle.
 */
typedef struct CcExperiment CcExperiment;

/**
 * Aggregated stability of a batch of trials.
 */
typedef struct CcStability {
  /**
   * RMS fractional frequency offset sigma_gamma(tau).
   */
  double sigma;
  /**
   * Bootstrap standard error of sigma.
   */
  double sigma_stderr;
  /**
   * omega^2 sigma^2 tau / gamma.
   */
  double figure_of_merit;
  /**
   * Fraction of trials aborted by degenerate adaptive updates.
   */
  double abort_rate;
  uint64_t trials_completed;
  uint64_t trials_aborted;
} CcStability;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread. The pointer stays valid
 * until the next failing call on the same thread.
 */
const char *cc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cc_version(void);

/**
 * Static human-readable name of a status code.
 */
const char *cc_status_message(enum CcStatus status);

/**
 * Parse a flat key=value configuration (or a manifest JSON) for the given
 * mode. Returns a handle to free with `cc_experiment_free`, or NULL with the
 * error available via `cc_last_error`.
 *
 * # Safety
 * `mode` and `config_text` must be NUL-terminated strings valid for the
 * duration of the call, or NULL (NULL `config_text` means defaults only).
 */
struct CcExperiment *cc_experiment_parse(const char *mode, const char *config_text);

/**
 * Free a handle returned by `cc_experiment_parse`. NULL is a no-op.
 *
 * # Safety
 * `handle` must be a pointer previously returned by `cc_experiment_parse`
 * and not freed since.
 */
void cc_experiment_free(struct CcExperiment *handle);

/**
 * Run the experiment's trials in memory and fill `out` with the aggregated
 * stability. Does not touch the filesystem.
 *
 * # Safety
 * `handle` must be a live `cc_experiment_parse` result; `out` must point to
 * writable memory for one `CcStability`.
 */
enum CcStatus cc_experiment_stability(const struct CcExperiment *handle, struct CcStability *out);

/**
 * Mean frequency offset of a single trial (deterministic in the config seed
 * and `trial`).
 *
 * # Safety
 * `handle` must be a live `cc_experiment_parse` result; `out` must point to
 * writable memory for one `double`.
 */
enum CcStatus cc_experiment_trial_offset(const struct CcExperiment *handle,
                                         uint64_t trial,
                                         double *out);

/**
 * Execute the experiment exactly as the CLI would, writing CSV outputs and
 * the manifest into `out_dir` (NULL keeps the configured directory).
 *
 * # Safety
 * `handle` must be a live `cc_experiment_parse` result; `out_dir`, when not
 * NULL, must be a NUL-terminated path string.
 */
enum CcStatus cc_experiment_run(const struct CcExperiment *handle, const char *out_dir);

/**
 * Closed-form stability prediction for m cascaded ensembles of N atoms.
 * Returns NaN for invalid arguments.
 */
double cc_theory_stability(uint32_t m,
                           uint64_t n_atoms,
                           double beta1,
                           double beta,
                           double gamma,
                           double tau,
                           double omega);

/**
 * Minimum ensemble size for a Ramsey-time factor `a` per stage at phase-jump
 * budget `beta`. Returns -1 for invalid arguments.
 */
int64_t cc_min_atoms(double a, double beta);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCADE_CLOCK_H */

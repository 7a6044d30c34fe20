/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef FCACCEL_H
#define FCACCEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum FcaStatus {
  FCA_STATUS_OK = 0,
  FCA_STATUS_NULL_POINTER = 1,
  FCA_STATUS_INVALID_ARGUMENT = 2,
  FCA_STATUS_INVALID_CONFIG = 3,
  FCA_STATUS_SIMULATION_FAILED = 4,
  FCA_STATUS_BUFFER_TOO_SMALL = 5,
  FCA_STATUS_PANIC = 6,
} FcaStatus;

typedef enum FcaMode {
  FCA_MODE_ANALYTIC = 0,
  /**
   * Two-clock event simulation with a feasibility verdict.
   */
  FCA_MODE_DETAILED = 1,
} FcaMode;

typedef enum FcaBlock {
  FCA_BLOCK_MV_MULT = 0,
  FCA_BLOCK_V_ACCUM = 1,
  FCA_BLOCK_ADD_BIAS_RELU = 2,
} FcaBlock;

/**
 * Opaque layer configuration.
 */
typedef struct FcaLayer FcaLayer;

/**
 * Opaque simulation report.
 */
typedef struct FcaReport FcaReport;

/**
 * Scalar view of a report. `feasible` is -1 for analytic reports.
 */
typedef struct FcaSummary {
  uint64_t passes;
  uint64_t slots_per_pass;
  uint32_t cycles_per_slot;
  uint64_t total_cycles;
  double rd_clk_hz;
  double latency_s;
  double effective_gops;
  double power_w;
  double energy_j;
  int32_t feasible;
  uint64_t stall_cycles;
  uint64_t fifo_faults;
} FcaSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fca_version(void);

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length without the NUL.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
uintptr_t fca_last_error_message(char *buf, uintptr_t len);

/**
 * Create a layer from a preset name such as `"fc8-alex"` or `"fc7"`.
 *
 * # Safety
 * `name` must be a valid NUL-terminated string and `out` writable.
 */
enum FcaStatus fca_layer_new_preset(const char *name, struct FcaLayer **out);

/**
 * Create a layer with `in_features` inputs and `out_features` outputs.
 * The reference clock follows `pipelined`.
 *
 * # Safety
 * `out` must be writable.
 */
enum FcaStatus fca_layer_new_custom(uintptr_t in_features,
                                    uintptr_t out_features,
                                    uintptr_t tile,
                                    uintptr_t pe_count,
                                    bool pipelined,
                                    struct FcaLayer **out);

/**
 * Replace the layer's bias with `len` raw words in the layer's format.
 *
 * # Safety
 * `layer` must be a live handle; `bias` must point to `len` values.
 */
enum FcaStatus fca_layer_set_bias(struct FcaLayer *layer, const int16_t *bias, uintptr_t len);

/**
 * # Safety
 * `layer` must be null or a handle not yet freed.
 */
void fca_layer_free(struct FcaLayer *layer);

/**
 * Simulate one inference. `rd_clk_hz <= 0` selects the layer's reference
 * clock. An infeasible detailed run still returns `FCA_STATUS_OK`; check
 * `feasible` in the summary.
 *
 * # Safety
 * `layer` must be a live handle and `out` writable.
 */
enum FcaStatus fca_simulate(const struct FcaLayer *layer,
                            enum FcaMode mode,
                            double rd_clk_hz,
                            struct FcaReport **out);

/**
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum FcaStatus fca_report_summary(const struct FcaReport *report, struct FcaSummary *out);

/**
 * Copy the report as JSON into `buf` with a trailing NUL. `needed` receives
 * the JSON length without the NUL; `FCA_STATUS_BUFFER_TOO_SMALL` when
 * `len <= needed`.
 *
 * # Safety
 * `report` must be a live handle, `buf` null or `len` writable bytes,
 * `needed` null or writable.
 */
enum FcaStatus fca_report_json(const struct FcaReport *report,
                               char *buf,
                               uintptr_t len,
                               uintptr_t *needed);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void fca_report_free(struct FcaReport *report);

/**
 * Peak throughput of one block at the layer's reference clock, in GOPS.
 *
 * # Safety
 * `layer` must be a live handle and `out` writable.
 */
enum FcaStatus fca_peak_gops(const struct FcaLayer *layer, enum FcaBlock block, double *out);

/**
 * Round `x` half-to-even onto a 16-bit grid with `frac_bits` fractional
 * bits, saturating.
 *
 * # Safety
 * `out` must be writable.
 */
enum FcaStatus fca_quantize(double x, uint32_t frac_bits, int16_t *out);

/**
 * Narrow a raw accumulator (scale `2^(-2*frac_bits)`) to a 16-bit word.
 *
 * # Safety
 * `out` must be writable.
 */
enum FcaStatus fca_requantize(int64_t acc, uint32_t frac_bits, int16_t *out);

/**
 * Tiled evaluation of `ReLU(W x + b)`. `weights` is row-major
 * `out_features x in_features`, `x` has `in_features` words and `out`
 * room for `out_features`.
 *
 * # Safety
 * All pointers must be valid for the lengths above.
 */
enum FcaStatus fca_run_inference(const struct FcaLayer *layer,
                                 const int16_t *weights,
                                 const int16_t *x,
                                 int16_t *out,
                                 uintptr_t out_len);

/**
 * Row-by-row evaluation with the same numerics, for cross-checking.
 *
 * # Safety
 * As for [`fca_run_inference`].
 */
enum FcaStatus fca_reference_serial(const struct FcaLayer *layer,
                                    const int16_t *weights,
                                    const int16_t *x,
                                    int16_t *out,
                                    uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCACCEL_H */

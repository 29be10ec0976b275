// SPDX-License-Identifier: Apache-2.0

#ifndef FUNCGNN_H
#define FUNCGNN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum FgStatus {
  FG_STATUS_OK = 0,
  FG_STATUS_NULL_POINTER = 1,
  FG_STATUS_INVALID_UTF8 = 2,
  FG_STATUS_PARSE = 3,
  FG_STATUS_IO = 4,
  FG_STATUS_INVALID_ARGUMENT = 5,
  FG_STATUS_BUFFER_TOO_SMALL = 6,
  FG_STATUS_NUMERICAL = 7,
  FG_STATUS_PANIC = 8,
} FgStatus;

// Parsed circuit with its model input tensors.
typedef struct FgAig FgAig;

// Trained model loaded from a checkpoint.
typedef struct FgModel FgModel;

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call into this library on the same thread.
const char *fg_last_error_message(void);

// Library version, static storage.
const char *fg_version(void);

// Parses ASCII AIGER text into a new handle.
//
// # Safety
// `text` must be a NUL-terminated string and `out` a writable pointer.
enum FgStatus fg_aig_parse(const char *text, struct FgAig **out);

// # Safety
// `aig` must be null or a handle from `fg_aig_parse` not yet freed.
void fg_aig_free(struct FgAig *aig);

// # Safety
// `aig` must be a live handle and `out` writable.
enum FgStatus fg_aig_num_nodes(const struct FgAig *aig, size_t *out);

// # Safety
// `aig` must be a live handle and `out` writable.
enum FgStatus fg_aig_num_inputs(const struct FgAig *aig, size_t *out);

// Positive over negative fanin edges, the circuit-level model prior.
//
// # Safety
// `aig` must be a live handle and `out` writable.
enum FgStatus fg_aig_gate_ratio(const struct FgAig *aig, double *out);

// Logic level of every node into `out[0..num_nodes]`.
//
// # Safety
// `aig` must be a live handle; `out` must hold `len` `uint32_t`.
enum FgStatus fg_aig_levels(const struct FgAig *aig, uint32_t *out, size_t len);

// Exact signal probability of every node by exhaustive simulation.
// Fails with `FG_STATUS_INVALID_ARGUMENT` above 16 inputs.
//
// # Safety
// `aig` must be a live handle; `out` must hold `len` doubles.
enum FgStatus fg_exact_probs(const struct FgAig *aig, double *out, size_t len);

// Signal probabilities estimated from `n_vectors` seeded random patterns.
//
// # Safety
// `aig` must be a live handle; `out` must hold `len` doubles.
enum FgStatus fg_mc_probs(const struct FgAig *aig,
                          size_t n_vectors,
                          uint64_t seed,
                          double *out,
                          size_t len);

// Loads a checkpoint file into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum FgStatus fg_model_load(const char *path, struct FgModel **out);

// # Safety
// `model` must be null or a handle from `fg_model_load` not yet freed.
void fg_model_free(struct FgModel *model);

// Embedding width of the model.
//
// # Safety
// `model` must be a live handle and `out` writable.
enum FgStatus fg_model_hidden(const struct FgModel *model, size_t *out);

// Predicted signal probability of every node.
//
// # Safety
// `model` and `aig` must be live handles; `out` must hold `len` doubles.
enum FgStatus fg_model_predict_spp(const struct FgModel *model,
                                   const struct FgAig *aig,
                                   double *out,
                                   size_t len);

// Node embeddings, row-major `num_nodes x hidden`.
//
// # Safety
// `model` and `aig` must be live handles; `out` must hold `len` doubles.
enum FgStatus fg_model_embed(const struct FgModel *model,
                             const struct FgAig *aig,
                             double *out,
                             size_t len);

#endif  /* FUNCGNN_H */

/* Copyright (c) 2026, MUSE toy tokenizer authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface of the MUSE toy tokenizer library. Objects are opaque handles
 * released with their *_free function. Every fallible call returns a status;
 * muse_last_error() describes the most recent failure on the calling thread.
 * Strings returned through char** are released with muse_string_free().
 */
#ifndef MUSE_MUSE_H
#define MUSE_MUSE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MUSE_API __declspec(dllexport)
#else
#define MUSE_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum muse_status {
    MUSE_OK = 0,
    MUSE_ERR_CONFIG = 1,
    MUSE_ERR_ARGUMENT = 2,
    MUSE_ERR_DIMENSION = 3,
    MUSE_ERR_IO = 4,
    MUSE_ERR_PARSE = 5,
    MUSE_ERR_NUMERIC = 6,
    MUSE_ERR_ORACLE = 7,
    MUSE_ERR_INTERNAL = 8
} muse_status;

typedef struct muse_dataset muse_dataset;
typedef struct muse_checkpoint muse_checkpoint;
typedef struct muse_train_config muse_train_config;

MUSE_API const char* muse_version(void);
MUSE_API const char* muse_last_error(void);
/* Process exit code for a status: 0 ok, 2 config/usage, 3 I/O, 4 numeric. */
MUSE_API int muse_exit_code(muse_status status);
MUSE_API void muse_string_free(char* s);

/* Datasets */
MUSE_API muse_status muse_dataset_generate(size_t count, uint64_t seed, size_t image_size, size_t patch,
                                           size_t classes, muse_dataset** out);
MUSE_API muse_status muse_dataset_read(const char* path, muse_dataset** out);
MUSE_API muse_status muse_dataset_write(const muse_dataset* dataset, const char* path);
MUSE_API size_t muse_dataset_count(const muse_dataset* dataset);
/* Header as JSON: count, image_h, image_w, patch, classes, base_seed. */
MUSE_API muse_status muse_dataset_header_json(const muse_dataset* dataset, char** out);
MUSE_API void muse_dataset_free(muse_dataset* dataset);

/* Training configuration. `json` may be NULL for defaults. */
MUSE_API muse_status muse_train_config_new(const char* json, muse_train_config** out);
/* Applies the keys of a JSON object on top of the current values. */
MUSE_API muse_status muse_train_config_merge(muse_train_config* config, const char* json);
/* Image size, patch and class count taken from the dataset header. */
MUSE_API muse_status muse_train_config_adopt_dataset(muse_train_config* config, const muse_dataset* dataset);
/* Fully materialized configuration (validated). */
MUSE_API muse_status muse_train_config_json(const muse_train_config* config, char** out);
MUSE_API void muse_train_config_free(muse_train_config* config);

typedef void (*muse_step_callback)(long step, int stage, double total_loss, void* user);

/* Runs the curriculum; writes metrics.csv, violin.csv and checkpoints into
 * out_dir. The callback may be NULL. */
MUSE_API muse_status muse_train(const muse_train_config* config, const muse_dataset* dataset,
                                const char* out_dir, muse_step_callback callback, void* user);

/* Checkpoints */
MUSE_API muse_status muse_checkpoint_read(const char* path, muse_checkpoint** out);
MUSE_API muse_status muse_checkpoint_write(const muse_checkpoint* checkpoint, const char* path);
MUSE_API long muse_checkpoint_step(const muse_checkpoint* checkpoint);
MUSE_API void muse_checkpoint_free(muse_checkpoint* checkpoint);

/* Evaluation report as JSON. `label` is recorded as the checkpoint name. */
MUSE_API muse_status muse_evaluate(const muse_checkpoint* checkpoint, const muse_dataset* dataset,
                                   uint64_t seed, const char* label, char** json_out);

/* Gradient probe of a checkpoint. `pairs` is a comma-separated list such as
 * "anchor:topo,topo:rec", or NULL for the default pairs. Writes the cosine
 * report CSV and the gradient-norm (violin) CSV. */
MUSE_API muse_status muse_diagnose(const muse_checkpoint* checkpoint, const muse_dataset* dataset,
                                   const char* pairs, uint64_t seed, size_t batch,
                                   const char* report_path, const char* violin_path);

#ifdef __cplusplus
}
#endif

#endif /* MUSE_MUSE_H */

#ifndef ODT_C_H
#define ODT_C_H

/* C interface to the reconstruction pipeline: opaque handles and integer
 * status codes only, no C++ types cross this boundary. Status values double
 * as process exit codes. On failure, odt_last_error() returns a thread-local
 * human-readable message for the most recent failing call. */

#ifdef __cplusplus
extern "C" {
#endif

typedef enum odt_status {
    ODT_OK = 0,
    ODT_ERR_USAGE = 2,   /* bad arguments or preconditions */
    ODT_ERR_FORMAT = 3,  /* malformed or incompatible file */
    ODT_ERR_NUMERIC = 4, /* numeric failure (non-finite loss, ...) */
    ODT_ERR_INTERNAL = 5
} odt_status;

const char* odt_version(void);
const char* odt_last_error(void);

/* Synthesizes a phantom dataset (sparse raw scans, dense targets, network
 * inputs, manifest.json) under out_dir. depth/width are the scene grid;
 * noise_sigma is the additive spectral noise level. */
odt_status odt_gen_dataset(const char* out_dir, int n_scans, int delta,
                           unsigned long long seed, int depth, int width, double noise_sigma,
                           double train_fraction);

/* Runs the classical chain on one raw scan (dense or sparse) and writes
 * <stem>.mag.odtr, <stem>.phase.odtr and <stem>.input.odtr under out_dir. */
odt_status odt_preprocess(const char* raw_path, const char* out_dir);

/* Trains on the "train" split of a generated dataset. config_path may be
 * NULL for the built-in desk preset, or a JSON file with optional "model"
 * and "train" sections overriding individual fields. Writes <tag>.final.assn,
 * <tag>.best.assn and <tag>.loss.csv under out_dir. */
odt_status odt_train(const char* data_dir, const char* config_path, const char* out_dir,
                     const char* tag);

typedef struct odt_model odt_model;

odt_status odt_model_open(const char* checkpoint_path, odt_model** out);
void odt_model_close(odt_model* model);
odt_status odt_model_delta(const odt_model* model, int* delta);

/* Reconstructs a dense flow map from a sparse raw scan. out_png may be NULL
 * to skip the rendered image. */
odt_status odt_reconstruct(const odt_model* model, const char* sparse_path,
                           const char* out_odtr, const char* out_png);

/* Evaluates the test split of a dataset. checkpoint_path may be NULL
 * (baseline-only report); baseline is "linear", "nearest" or NULL. At least
 * one method must be requested. Writes a JSON report. */
odt_status odt_evaluate(const char* checkpoint_path, const char* data_dir,
                        const char* baseline, const char* report_path);

/* Maximum intensity projection over every flow-map .odtr in volume_dir
 * (sorted by filename), written as an 8-bit PNG. */
odt_status odt_mip(const char* volume_dir, const char* out_png);

#ifdef __cplusplus
}
#endif

#endif /* ODT_C_H */

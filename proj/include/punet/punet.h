/*
 * punet: rater-aware prompt segmentation pipeline behind a C ABI.
 *
 * All pipeline entry points work on directories (datasets, checkpoints,
 * report folders) plus an opaque configuration handle. Functions return
 * PUNET_OK or an error code; punet_last_error() holds a thread-local
 * description of the most recent failure.
 */
#ifndef PUNET_PUNET_H
#define PUNET_PUNET_H

#include <stdint.h>

#if defined(_WIN32)
#define PUNET_API __declspec(dllexport)
#else
#define PUNET_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Error codes; the CLI uses them verbatim as process exit codes. */
enum {
  PUNET_OK = 0,
  PUNET_ERR_CONFIG = 2,  /* bad config, bad arguments, contract violations */
  PUNET_ERR_NUMERIC = 3, /* non-finite loss, failed numeric check */
  PUNET_ERR_IO = 4       /* missing or unwritable files */
};

typedef struct punet_config punet_config;
typedef struct punet_model punet_model;

PUNET_API const char* punet_version(void);
PUNET_API const char* punet_last_error(void);

/* ---- configuration ----------------------------------------------------- */

/* Fresh config with the documented defaults. The PUNET_SEED environment
 * variable is used as the seed when neither a file nor an override sets one. */
PUNET_API punet_config* punet_config_create(void);
PUNET_API void punet_config_free(punet_config* cfg);

/* Merge a JSON config file (flat key set; unknown keys are rejected). */
PUNET_API int punet_config_load(punet_config* cfg, const char* json_path);

/* Override one key, value parsed per key type. Arrays use commas. */
PUNET_API int punet_config_set(punet_config* cfg, const char* key, const char* value);

PUNET_API int punet_config_write(const punet_config* cfg, const char* json_path);

/* ---- pipeline ----------------------------------------------------------- */

/* Generate a synthetic multi-rater dataset under out_dir. When suite is
 * nonzero, writes source/, target_train/ and target_test/ subsets instead.
 * scenes/samples receive the generated counts when non-NULL (for the single
 * dataset; the suite reports the source set). */
PUNET_API int punet_synth(const punet_config* cfg, const char* out_dir, int suite,
                          int* scenes, int* samples);

/* Full-mode training (all parameters) on the dataset; for the punet variant
 * this uses the majority-vote labels through the aggregation prompt. */
PUNET_API int punet_pretrain(const punet_config* cfg, const char* dataset_dir,
                             const char* out_dir);

/* Fine-tune from an existing checkpoint in the configured mode
 * (full | head | prompt) and strategy (mix | individual | fusion).
 * resume != 0 continues a partially trained out_dir. trainable/total receive
 * the parameter counts of the applied freeze partition when non-NULL. */
PUNET_API int punet_finetune(const punet_config* cfg, const char* dataset_dir,
                             const char* init_ckpt_dir, const char* out_dir, int resume,
                             uint64_t* trainable, uint64_t* total);

/* Evaluate a checkpoint against every label source of a test dataset and
 * write the report directory (eval_matrix.csv/.md, params.txt, overlays). */
PUNET_API int punet_eval(const punet_config* cfg, const char* ckpt_dir,
                         const char* dataset_dir, const char* report_dir);

/* which = "locations" | "strategy". data_root must contain source/,
 * target_train/, target_test/ (see punet_synth with suite=1). */
PUNET_API int punet_ablate(const punet_config* cfg, const char* which, const char* data_root,
                           const char* out_dir);

/* Finite-difference gradient checks for all primitives plus the full model
 * composite. Returns PUNET_ERR_NUMERIC when any check fails; worst relative
 * error goes to max_rel_err when non-NULL. verbose prints one line per check
 * to stdout. */
PUNET_API int punet_gradcheck(int verbose, double* max_rel_err);

/* ---- trained model handle ------------------------------------------------ */

PUNET_API punet_model* punet_model_open(const char* ckpt_dir);
PUNET_API void punet_model_free(punet_model* model);

PUNET_API int punet_model_input_size(const punet_model* model, int* h, int* w);
PUNET_API int punet_model_classes(const punet_model* model);
PUNET_API int punet_model_raters(const punet_model* model);

/* image: input_h*input_w*3 floats, row-major HWC in [0,1].
 * rater: 0 selects the aggregation prompt, 1..R an individual rater prompt.
 * logits_out: input_h*input_w*classes floats. */
PUNET_API int punet_model_predict(const punet_model* model, const float* image, int rater,
                                  float* logits_out);

#ifdef __cplusplus
}
#endif

#endif /* PUNET_PUNET_H */

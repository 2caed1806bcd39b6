/* C interface to the chemcpa library.
 *
 * Every function returns a cpa_status. On failure the message of the most
 * recent error on the calling thread is available from cpa_last_error() and
 * its short name (e.g. "UnclosedRing") from cpa_last_error_code().
 * Strings returned through char** out-parameters are owned by the caller and
 * must be released with cpa_string_free(). Option arguments are JSON objects
 * and may be NULL for defaults.
 */
#ifndef CHEMCPA_H_
#define CHEMCPA_H_

#include <stddef.h>
#include <stdint.h>

#if defined(CHEMCPA_BUILDING)
#define CHEMCPA_API __attribute__((visibility("default")))
#else
#define CHEMCPA_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cpa_status {
  CPA_OK = 0,
  CPA_ERR_INVALID_ARGUMENT = 1,
  CPA_ERR_DIMENSION = 2,
  CPA_ERR_NON_FINITE = 3,
  CPA_ERR_STATE = 4,
  CPA_ERR_PARSE = 5,
  CPA_ERR_DATA = 6,
  CPA_ERR_IO = 7,
  CPA_ERR_INTERNAL = 8
} cpa_status;

typedef struct cpa_dataset cpa_dataset_t;
typedef struct cpa_model cpa_model_t;

CHEMCPA_API const char* cpa_version(void);
CHEMCPA_API const char* cpa_last_error(void);
CHEMCPA_API const char* cpa_last_error_code(void);
CHEMCPA_API void cpa_string_free(char* s);

/* Writes `dim` values (0.0 or 1.0) to `out`. */
CHEMCPA_API cpa_status cpa_fingerprint(const char* smiles, int dim, int max_path_len, double* out);

CHEMCPA_API cpa_status cpa_dataset_load(const char* path, cpa_dataset_t** out);
CHEMCPA_API cpa_status cpa_dataset_save(const cpa_dataset_t* dataset, const char* path);
CHEMCPA_API void cpa_dataset_free(cpa_dataset_t* dataset);
/* {"rows", "genes", "state", "drugs", "covariates", "splits": {"train", "valid", "test"}} */
CHEMCPA_API cpa_status cpa_dataset_info(const cpa_dataset_t* dataset, char** json_out);
CHEMCPA_API cpa_status cpa_dataset_preprocess(const cpa_dataset_t* dataset, cpa_dataset_t** out);
/* options: {"holdout_drugs": [...], "holdout_combos": [[drug, covariate], ...],
 *           "valid_fraction", "control_test_fraction", "seed"} */
CHEMCPA_API cpa_status cpa_dataset_split(const cpa_dataset_t* dataset, const char* options_json,
                                         cpa_dataset_t** out);

/* Raw-count synthetic dataset; ground_truth_json_out may be NULL. */
CHEMCPA_API cpa_status cpa_synth_generate(const char* config_json, cpa_dataset_t** out,
                                          char** ground_truth_json_out);

/* Vocabularies (genes, drugs, covariates) are taken from the dataset. */
CHEMCPA_API cpa_status cpa_model_create(const char* hparams_json, const cpa_dataset_t* dataset, uint64_t seed,
                                        cpa_model_t** out);
CHEMCPA_API void cpa_model_free(cpa_model_t* model);
CHEMCPA_API cpa_status cpa_model_info(const cpa_model_t* model, char** json_out);
/* options: {"epochs", "seed", "eval_every", "threads", "max_steps", "record_steps"}.
 * epoch_csv_out and step_csv_out may be NULL. */
CHEMCPA_API cpa_status cpa_model_fit(cpa_model_t* model, const cpa_dataset_t* dataset, const char* options_json,
                                     char** epoch_csv_out, char** step_csv_out);
CHEMCPA_API cpa_status cpa_model_save(const cpa_model_t* model, const char* path, const char* provenance_json);
CHEMCPA_API cpa_status cpa_model_load(const char* path, cpa_model_t** out);

/* Surgery (by gene name, or from a genes.map CSV when gene_map_path is not
 * NULL), vocabulary merge and training on `target`. */
CHEMCPA_API cpa_status cpa_finetune(const cpa_model_t* pretrained, const cpa_dataset_t* target,
                                    const char* gene_map_path, const char* options_json, cpa_model_t** out,
                                    char** epoch_csv_out);

/* Mean counterfactual expression over the split's control cells. `out`
 * receives one value per model gene; `n` must equal that count. */
CHEMCPA_API cpa_status cpa_predict(const cpa_model_t* model, const cpa_dataset_t* dataset, const char* drug,
                                   double dose, const char* covariate, const char* split, double* out, size_t n);

/* options: {"split": "test", "threads", "k", "min_cells"} */
CHEMCPA_API cpa_status cpa_evaluate(const cpa_model_t* model, const cpa_dataset_t* dataset, const char* options_json,
                                    char** scores_csv_out, char** summary_json_out);
/* options: {"target": "drug" | "covariate", "seed", "epochs", "width", "layers",
 *           "learning_rate", "batch_size", "train_fraction"} */
CHEMCPA_API cpa_status cpa_probe(const cpa_model_t* model, const cpa_dataset_t* dataset, const char* options_json,
                                 char** report_json_out);

#ifdef __cplusplus
}
#endif

#endif /* CHEMCPA_H_ */

/* C interface to the benchmark library: experiment verbs plus direct
 * checkpoint scoring. All entry points are thread-compatible (no shared
 * mutable state between sessions); a session carries the last error text.
 *
 * Return codes: 0 success, 1 usage error (bad names, flags, config values),
 * 2 runtime failure (missing files, bad data, training divergence).
 */
#ifndef CVCQA_H
#define CVCQA_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define CVCQA_OK 0
#define CVCQA_EUSAGE 1
#define CVCQA_ERUNTIME 2

typedef struct cvcqa_session cvcqa_session;
typedef struct cvcqa_model cvcqa_model;

/* Library version string ("major.minor.patch"); storage is static. */
const char* cvcqa_version(void);

cvcqa_session* cvcqa_session_new(void);
void cvcqa_session_free(cvcqa_session* s);

/* Message for the most recent failing call on this session; empty string
 * after a success. Storage lives until the next call on the session. */
const char* cvcqa_last_error(const cvcqa_session* s);

/* Experiment verbs. `config_path` is required; the remaining string
 * arguments are optional overrides (pass NULL to use the config file):
 * `out` replaces [experiment] out, `seed` (decimal text) replaces
 * [experiment] seed, `kinds`/`methods`/`augment` are comma lists. */
int cvcqa_gen_data(cvcqa_session* s, const char* config_path, const char* out,
                   const char* seed);
int cvcqa_attack(cvcqa_session* s, const char* config_path, const char* out,
                 const char* seed, const char* kinds);
int cvcqa_train(cvcqa_session* s, const char* config_path, const char* out,
                const char* seed, const char* augment);
int cvcqa_eval(cvcqa_session* s, const char* config_path, const char* out,
               const char* methods);
int cvcqa_muting_study(cvcqa_session* s, const char* config_path, const char* out);
int cvcqa_report(cvcqa_session* s, const char* run_dir);

/* Checkpoint access. cvcqa_model_load returns NULL on failure (see
 * cvcqa_last_error). */
cvcqa_model* cvcqa_model_load(cvcqa_session* s, const char* path);
void cvcqa_model_free(cvcqa_model* m);

/* Number of options the model scores (K), or -1 for NULL. */
int cvcqa_model_options(const cvcqa_model* m);

/* Attach a trained calibration network so the "cvc-mv-adaptor" method
 * becomes available on this model handle. */
int cvcqa_model_attach_adaptor(cvcqa_session* s, cvcqa_model* m, const char* path);

/* Score one instance. `options` holds K token sequences back to back;
 * `option_lens` gives their lengths. `method` is one of: ct, np, cvc-iv,
 * cvc-mv, cvc-mv-adaptor, cvc-mv-js, cvc-mv-euc. `scores_out` must hold K
 * doubles; `pred_out` (may be NULL) receives the argmax index. */
int cvcqa_predict(cvcqa_session* s, const cvcqa_model* m, const int32_t* passage,
                  int32_t passage_len, const int32_t* question, int32_t question_len,
                  const int32_t* options, const int32_t* option_lens,
                  const char* method, double* scores_out, int32_t* pred_out);

#ifdef __cplusplus
}
#endif

#endif /* CVCQA_H */

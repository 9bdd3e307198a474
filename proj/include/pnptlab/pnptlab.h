#ifndef PNPTLAB_PNPTLAB_H
#define PNPTLAB_PNPTLAB_H

#include <stddef.h>
#include <stdint.h>

#if defined(PNPTLAB_BUILDING)
#define PNPT_API __attribute__((visibility("default")))
#else
#define PNPT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes double as process exit codes. */
typedef enum pnpt_status {
  PNPT_OK = 0,
  PNPT_ERR_FAILURE = 1,
  PNPT_ERR_CONFIG = 2,
  PNPT_ERR_DEPENDENCY = 3,
  PNPT_ERR_NUMERICAL = 4,
  PNPT_ERR_INVALID_ARGUMENT = 5
} pnpt_status;

typedef struct pnpt_result pnpt_result;
typedef struct pnpt_embeddings pnpt_embeddings;

PNPT_API const char* pnpt_version(void);
PNPT_API int pnpt_command_count(void);
PNPT_API const char* pnpt_command_name(int index); /* NULL when out of range */

/* Built-in defaults as JSON. Release with pnpt_string_free. */
PNPT_API char* pnpt_default_config_json(void);
PNPT_API void pnpt_string_free(char* s);

/* Runs one command. config_path and flags_json may be NULL; flags take
   precedence over the file, the file over built-in defaults. *out is always
   set and must be released with pnpt_result_free. */
PNPT_API pnpt_status pnpt_run(const char* command, const char* config_path, const char* flags_json, int verbose,
                              pnpt_result** out);
PNPT_API pnpt_status pnpt_result_status(const pnpt_result* r);
PNPT_API const char* pnpt_result_message(const pnpt_result* r);  /* "" on success */
PNPT_API const char* pnpt_result_manifest(const pnpt_result* r); /* manifest JSON, "" on failure */
PNPT_API const char* pnpt_result_out_dir(const pnpt_result* r);
PNPT_API void pnpt_result_free(pnpt_result* r);

/* z_n + gamma * (z_p - z_n), elementwise; out may alias either input. */
PNPT_API pnpt_status pnpt_fuse(const float* z_p, const float* z_n, size_t n, float gamma, float* out);

/* Embedding artifacts. */
PNPT_API pnpt_status pnpt_embeddings_load(const char* path, pnpt_embeddings** out, char* err, size_t err_cap);
PNPT_API pnpt_status pnpt_embeddings_save(const pnpt_embeddings* e, const char* path);
PNPT_API int pnpt_embeddings_dim(const pnpt_embeddings* e);
PNPT_API int pnpt_embeddings_count(const pnpt_embeddings* e);
/* Entry metadata; polarity is 'p' or 'n'. Returns NULL when out of range. */
PNPT_API const char* pnpt_embeddings_name(const pnpt_embeddings* e, int index, char* polarity, int* k);
PNPT_API const float* pnpt_embeddings_vectors(const pnpt_embeddings* e, int index); /* k*dim values */
PNPT_API void pnpt_embeddings_free(pnpt_embeddings* e);

#ifdef __cplusplus
}
#endif

#endif /* PNPTLAB_PNPTLAB_H */

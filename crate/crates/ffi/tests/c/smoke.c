#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "canf.h"

#define CHECK(call)                                                            \
  do {                                                                         \
    CanfStatus s_ = (call);                                                    \
    if (s_ != CANF_STATUS_OK) {                                                \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, canf_last_error());    \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(int argc, char **argv) {
  if (argc < 2) return 2;
  const char *cfg = "width = 16\ndepth = 2\nheads = 2\ncond_dim = 8\n";
  CanfModel *m = NULL;
  CHECK(canf_model_new(cfg, 3, &m));
  uint64_t params = 0;
  CHECK(canf_model_param_count(m, &params));
  uint32_t c, size, k;
  CHECK(canf_model_geometry(m, &c, &size, &k));
  size_t per = (size_t)c * size * size;

  float *x = calloc(2 * per, sizeof(float));
  float *y = calloc(2 * per, sizeof(float));
  uint32_t labels[2] = {0, k};
  uint32_t ts[2] = {10, 500};
  CHECK(canf_model_predict(m, x, 2, labels, ts, y, 2 * per));
  CHECK(canf_model_sample(m, labels, 1, 4, 1.5, 7, y, per));

  CHECK(canf_model_save(m, argv[1]));
  CanfModel *loaded = NULL;
  CHECK(canf_model_load(argv[1], &loaded));
  uint64_t params2 = 0;
  CHECK(canf_model_param_count(loaded, &params2));

  uint32_t bad[1] = {k + 1};
  CanfStatus s = canf_model_sample(loaded, bad, 1, 4, 1.5, 7, y, per);
  if (s != CANF_STATUS_RANGE || canf_last_error() == NULL) return 3;

  printf("params %llu %llu\n", (unsigned long long)params, (unsigned long long)params2);
  canf_model_free(m);
  canf_model_free(loaded);
  free(x);
  free(y);
  return params == params2 ? 0 : 4;
}

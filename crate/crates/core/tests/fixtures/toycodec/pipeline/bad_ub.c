#include <limits.h>
#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  tc_config cfg;
  tc_codec *c;
  int q = INT_MAX;
  tc_default_config(&cfg);
  c = tc_create(&cfg);
  if (!c) {
    return 0;
  }
  q += (int)(size % 7) + 1;
  tc_set_quality(c, q);
  tc_destroy(c);
  return 0;
}

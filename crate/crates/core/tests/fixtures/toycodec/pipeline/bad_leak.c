#include <stdint.h>
#include <stdlib.h>
#include <string.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  tc_config cfg;
  tc_codec *c;
  uint8_t *copy = malloc(size + 1);
  if (!copy) {
    return 0;
  }
  memcpy(copy, data, size);
  tc_default_config(&cfg);
  c = tc_create(&cfg);
  if (!c) {
    return 0;
  }
  tc_feed(c, copy, size);
  tc_destroy(c);
  return 0;
}

#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  tc_config cfg;
  tc_codec *c;
  tc_default_config(&cfg);
  c = tc_create(&cfg);
  if (!c) {
    return 0;
  }
  tc_configure(c, 9);
  tc_feed(c, data, size);
  tc_destroy(c);
  return 0;
}

#include <stddef.h>
#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  char line[64];
  tc_config cfg;
  tc_codec *c;
  const char *fmt = "size=%d";
  tc_format(line, sizeof(line), fmt, (int)size);
  tc_default_config(&cfg);
  c = tc_create(&cfg);
  if (!c) {
    return 0;
  }
  tc_log(c, "first byte %d of %s", size ? data[0] : -1, line);
  tc_feed(c, data, size);
  tc_destroy(c);
  return 0;
}

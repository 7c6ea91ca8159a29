#include <stdio.h>
#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  tc_config cfg;
  tc_codec *c;
  FILE *fp = fopen("input_file", "wb");
  if (!fp) {
    return 0;
  }
  fwrite(data, 1, size, fp);
  fclose(fp);
  tc_default_config(&cfg);
  c = tc_create(&cfg);
  if (!c) {
    return 0;
  }
  tc_load_file(c, "input_file");
  tc_set_quality(c, 80);
  tc_log(c, "loaded %zu bytes", size);
  tc_destroy(c);
  return 0;
}

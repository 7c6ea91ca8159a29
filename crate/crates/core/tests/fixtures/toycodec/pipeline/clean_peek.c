#include <stdint.h>
#include <string.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  char out[32];
  int v = 0;
  if (size > 0) {
    v = tc_peek(data, size, size / 2);
  }
  tc_format(out, sizeof(out), "value=%d", v);
  return strlen(out) > sizeof(out);
}

#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  int v = tc_peek(data, size, 0)
  return v;
}

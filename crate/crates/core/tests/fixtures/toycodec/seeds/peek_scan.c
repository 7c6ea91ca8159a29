#include <stddef.h>
#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  size_t i;
  int acc = 0;
  if (size == 0) {
    return 0;
  }
  for (i = 0; i < size; i++) {
    acc += tc_peek(data, size, i);
  }
  acc += tc_peek(data, size, (size_t)data[0] % size);
  return acc == -1;
}

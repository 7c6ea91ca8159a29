#include <stdint.h>
#include "toycodec.h"

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
  tc_config cfg;
  tc_codec *c;
  tc_iter it = {0};
  const tc_frame *f;
  tc_default_config(&cfg);
  c = tc_create(&cfg);
  if (!c) {
    return 0;
  }
  if (size > 65536) {
    tc_configure(c, 0);
    tc_feed(c, data, size);
    f = tc_next_frame(c, &it);
    tc_frame_checksum(f);
  }
  tc_destroy(c);
  return 0;
}

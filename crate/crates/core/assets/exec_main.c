/* Standalone entry for exec-mode drivers: runs the harness once on the file
 * named by argv[1], or on empty input without an argument. */

#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size);
__attribute__((weak)) int LLVMFuzzerInitialize(int *argc, char ***argv);

int main(int argc, char **argv) {
  uint8_t *buf = NULL;
  size_t len = 0;
  if (LLVMFuzzerInitialize) {
    LLVMFuzzerInitialize(&argc, &argv);
  }
  if (argc > 1) {
    FILE *fp = fopen(argv[1], "rb");
    long n;
    if (!fp) {
      perror(argv[1]);
      return 2;
    }
    fseek(fp, 0, SEEK_END);
    n = ftell(fp);
    fseek(fp, 0, SEEK_SET);
    len = n > 0 ? (size_t)n : 0;
    /* Exact-size allocation so overreads hit the redzone. */
    buf = malloc(len ? len : 1);
    if (!buf || fread(buf, 1, len, fp) != len) {
      fclose(fp);
      return 2;
    }
    fclose(fp);
  }
  LLVMFuzzerTestOneInput(len ? buf : (const uint8_t *)"", len);
  free(buf);
  return 0;
}

/* Coverage, call-site and heap-peak runtime linked into exec-mode drivers.
 *
 * Library objects are built with -fsanitize-coverage=trace-pc-guard,pc-table.
 * At exit (or sanitizer death) the file named by DF_COV_OUT receives:
 *
 *   driverforge-cov 1
 *   <hex pc offset> <pc flags> <hit 0|1>     one line per guard
 *   site <k>                                 one line per executed marker
 *
 * When DF_ALLOC_OUT is set, the peak of live heap bytes is written there. */

#include <link.h>
#include <stdint.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#define DF_MAX_SITES 4096

#ifndef DF_SITES_ONLY

extern void __sanitizer_set_death_callback(void (*)(void));
extern int __sanitizer_install_malloc_and_free_hooks(
    void (*)(const volatile void *, size_t), void (*)(const volatile void *));
extern size_t __sanitizer_get_allocated_size(const volatile void *);

static uint32_t *df_guard_start;
static uint32_t *df_guard_stop;
static const uintptr_t *df_pcs;
static size_t df_npcs;
static uint8_t *df_hits;
static uint8_t df_sites[DF_MAX_SITES];
static int df_dumped;

static size_t df_live;
static size_t df_peak;

static uintptr_t df_image_base(void) {
  /* The executable is the first object reported by the loader. */
  static uintptr_t base;
  static int done;
  struct link_map *lm;
  if (!done) {
    lm = _r_debug.r_map;
    base = lm ? (uintptr_t)lm->l_addr : 0;
    done = 1;
  }
  return base;
}

static void df_dump(void) {
  const char *path;
  FILE *out;
  size_t i;
  if (df_dumped) {
    return;
  }
  df_dumped = 1;
  path = getenv("DF_ALLOC_OUT");
  if (path && (out = fopen(path, "w"))) {
    fprintf(out, "peak %zu\n", df_peak);
    fclose(out);
  }
  path = getenv("DF_COV_OUT");
  if (!path || !(out = fopen(path, "w"))) {
    return;
  }
  fprintf(out, "driverforge-cov 1\n");
  for (i = 0; df_pcs && i < df_npcs && df_hits; i++) {
    fprintf(out, "%lx %lu %d\n", (unsigned long)(df_pcs[2 * i] - df_image_base()),
            (unsigned long)df_pcs[2 * i + 1], df_hits[i] ? 1 : 0);
  }
  for (i = 0; i < DF_MAX_SITES; i++) {
    if (df_sites[i]) {
      fprintf(out, "site %zu\n", i);
    }
  }
  fclose(out);
}

static void df_malloc_hook(const volatile void *p, size_t n) {
  (void)p;
  df_live += n;
  if (df_live > df_peak) {
    df_peak = df_live;
  }
}

static void df_free_hook(const volatile void *p) {
  size_t n = p ? __sanitizer_get_allocated_size(p) : 0;
  df_live = n > df_live ? 0 : df_live - n;
}

__attribute__((constructor)) static void df_init(void) {
  df_image_base();
  atexit(df_dump);
  __sanitizer_set_death_callback(df_dump);
  if (getenv("DF_ALLOC_OUT")) {
    __sanitizer_install_malloc_and_free_hooks(df_malloc_hook, df_free_hook);
  }
}

void __sanitizer_cov_trace_pc_guard_init(uint32_t *start, uint32_t *stop) {
  uint32_t *g;
  if (start == stop || *start) {
    return;
  }
  df_guard_start = start;
  df_guard_stop = stop;
  df_hits = calloc((size_t)(stop - start), 1);
  for (g = start; g < stop; g++) {
    *g = (uint32_t)(g - start) + 1;
  }
}

void __sanitizer_cov_pcs_init(const uintptr_t *beg, const uintptr_t *end) {
  df_pcs = beg;
  df_npcs = (size_t)(end - beg) / 2;
}

void __sanitizer_cov_trace_pc_guard(uint32_t *guard) {
  if (*guard && df_hits) {
    df_hits[*guard - 1] = 1;
  }
}

void __df_site(unsigned k) {
  if (k < DF_MAX_SITES) {
    df_sites[k] = 1;
  }
}

#else

void __df_site(unsigned k) { (void)k; }

#endif

/* toycodec: a deterministic codec-shaped library used as a fuzzing target. */
#ifndef TOYCODEC_H
#define TOYCODEC_H

#include <stddef.h>
#include <stdint.h>

typedef struct tc_options {
  unsigned level;
  unsigned mode;
} tc_options;

typedef struct tc_config {
  tc_options opts;
  size_t max_frame;
} tc_config;

typedef struct tc_codec tc_codec;
typedef struct tc_source tc_source;

typedef struct tc_frame {
  const uint8_t *data;
  size_t len;
  unsigned index;
} tc_frame;

typedef struct tc_iter {
  size_t pos;
} tc_iter;

typedef enum tc_status {
  TC_OK = 0,
  TC_ERR_ARG = -1,
  TC_ERR_STATE = -2,
  TC_ERR_IO = -3,
  TC_ERR_NOMEM = -4
} tc_status;

/* Fills cfg with defaults. */
void tc_default_config(tc_config *cfg);
/* Returns NULL when cfg is NULL or invalid. */
tc_codec *tc_create(const tc_config *cfg);
/* Flags above 7 select the experimental interleaved path. */
int tc_configure(tc_codec *c, unsigned flags);
/* len is the number of readable bytes in buf. */
int tc_feed(tc_codec *c, const uint8_t *buf, size_t len);
/* Returns NULL when no frame is left. */
const tc_frame *tc_next_frame(tc_codec *c, tc_iter *it);
int tc_frame_checksum(const tc_frame *f);
void tc_destroy(tc_codec *c);
/* idx must be smaller than len. */
int tc_peek(const uint8_t *buf, size_t len, size_t idx);
/* Reads the whole file at path into the codec input. */
int tc_load_file(tc_codec *c, const char *path);
/* snprintf-like: writes at most out_len bytes into out. */
int tc_format(char *out, size_t out_len, const char *fmt, int value);
/* printf-like diagnostics attached to the codec. */
int tc_log(tc_codec *c, const char *fmt, ...);
/* Allocates a pool of n frame slots. */
int tc_alloc_frames(tc_codec *c, size_t n);
/* Reserves scratch space; n is clamped to 4096. */
int tc_reserve(tc_codec *c, size_t n);
/* q in [0, 100]; out-of-range values are clamped. */
int tc_set_quality(tc_codec *c, int q);
/* Reads all bytes from an open descriptor. */
int tc_read_fd(tc_codec *c, int fd);
tc_source *tc_open_source(const char *path);
int tc_source_read(tc_source *s, uint8_t *buf, size_t len);
void tc_close_source(tc_source *s);

/* Not part of the public surface. */
int _tc_debug_dump(void);

#endif

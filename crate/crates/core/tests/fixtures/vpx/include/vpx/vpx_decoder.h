#ifndef VPX_DECODER_H
#define VPX_DECODER_H

#include <stddef.h>
#include <stdint.h>

#define VPX_DECODER_ABI_VERSION 12

typedef enum {
  VPX_CODEC_OK = 0,
  VPX_CODEC_ERROR = 1,
  VPX_CODEC_UNSUP_BITSTREAM = 5
} vpx_codec_err_t;

typedef struct vpx_codec_iface vpx_codec_iface_t;

typedef struct vpx_codec_ctx {
  const char *name;
  vpx_codec_iface_t *iface;
  vpx_codec_err_t err;
  void *priv;
} vpx_codec_ctx_t;

typedef struct vpx_codec_dec_cfg {
  unsigned int threads;
  unsigned int w;
  unsigned int h;
} vpx_codec_dec_cfg_t;

typedef const void *vpx_codec_iter_t;

typedef struct vpx_image {
  unsigned int d_w;
  unsigned int d_h;
  unsigned char *planes[4];
  int stride[4];
} vpx_image_t;

vpx_codec_err_t vpx_codec_dec_init_ver(vpx_codec_ctx_t *ctx, vpx_codec_iface_t *iface,
                                       const vpx_codec_dec_cfg_t *cfg, long flags, int ver);
vpx_codec_err_t vpx_codec_decode(vpx_codec_ctx_t *ctx, const uint8_t *data, unsigned int data_sz,
                                 void *user_priv, long deadline);
vpx_image_t *vpx_codec_get_frame(vpx_codec_ctx_t *ctx, vpx_codec_iter_t *iter);
vpx_codec_err_t vpx_codec_destroy(vpx_codec_ctx_t *ctx);
void vpx_img_flip(vpx_image_t *img);

#endif

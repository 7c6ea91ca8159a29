#ifndef VPX_VP8CX_H
#define VPX_VP8CX_H
#include "vpx_decoder.h"
vpx_codec_iface_t *vpx_codec_vp8_cx(void);
#endif

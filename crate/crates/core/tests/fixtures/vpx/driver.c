#include <vpx/vp8dx.h>
#include <vpx/vp8cx.h>
#include <vpx/vpx_decoder.h>

int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {
    // Create the decoder configuration
    vpx_codec_dec_cfg_t dec_cfg = {0};
    /* ... */
    // Initialize the decoder
    vpx_codec_ctx_t decoder;
    vpx_codec_iface_t *decoder_iface = vpx_codec_vp8_dx();
    vpx_codec_err_t decoder_init_res = vpx_codec_dec_init_ver(&decoder, decoder_iface, &dec_cfg, 0, VPX_DECODER_ABI_VERSION);
    if (decoder_init_res != VPX_CODEC_OK) {
        return 0;
    }
    // Process the input data
    vpx_codec_err_t decode_res = vpx_codec_decode(&decoder, data, size, NULL, 0);
    if (decode_res != VPX_CODEC_OK) {
        vpx_codec_destroy(&decoder);
        return 0;
    }
    // Get the decoded frame
    vpx_image_t *frame = NULL;
    vpx_codec_iter_t iter = NULL;
    while ((frame = vpx_codec_get_frame(&decoder, &iter)) != NULL) {
        // Process the frame
        vpx_img_flip(frame);
        /* ... */
    }
    // Cleanup
    vpx_codec_destroy(&decoder);
    return 0;
}

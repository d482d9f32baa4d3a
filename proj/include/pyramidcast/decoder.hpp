#pragma once

#include <optional>
#include <vector>

#include "pyramidcast/embedding.hpp"
#include "pyramidcast/encoder.hpp"
#include "pyramidcast/layers.hpp"
#include "pyramidcast/tensor.hpp"

namespace pyramidcast {

/// One cross-scale block. Keys and values are the same scale-projected
/// encoder tokens (a single linear per scale); queries are the decoder
/// tokens themselves, so the attention carries no q/k/v projections, only
/// an output projection after the heads are merged.
struct CrossBlockParams {
  LayerNormParams ln_enc;   // sized for the attended scale width
  LinearParams kv_proj;     // d_enc(scale) -> d_dec
  LayerNormParams ln_dec;
  LinearParams attn_out;    // d_dec -> d_dec
  LayerNormParams ln2;
  MlpParams mlp;
};

struct DecoderParams {
  LinearParams seg;                 // [d_dec, L*C] query segment embedding
  LinearParams fuse;                // decoder-owned ST-PE fuse
  std::optional<Tensor> pos_table;  // [P_dec, d_dec] in learned-position mode
  std::vector<CrossBlockParams> blocks;
  LinearParams head;                // [L*C, d_dec], shared across segments
};

/// Segment-embeds the intermediate prediction and applies positional
/// encoding with FUTURE temporal indices (tables shared with the encoder
/// embedding, fuse linear decoder-owned).
Tensor build_queries(const Tensor& intermediate, int64_t segment_len,
                     const DecoderParams& dec, const EmbeddingParams& emb,
                     bool use_stpe, const std::vector<int64_t>& sensor_ids,
                     const std::vector<int64_t>& tid_future,
                     const std::vector<int64_t>& diw_future);

/// Attention over [P_dec x P_enc] with per-head scale 1/sqrt(d_dec/heads);
/// output length is always P_dec regardless of the encoder scale length.
/// `enc_kv` is the already normalized+projected encoder scale.
Tensor cross_scale_attention(const Tensor& enc_kv, const Tensor& queries,
                             int64_t heads, std::vector<Tensor>* capture = nullptr);

/// Pre-norm residual: H' = H_dec + MCA(LN(H_enc), LN(H_dec));
/// H'' = H' + MLP(LN(H')).
Tensor cross_scale_transformer_layer(const Tensor& enc_scale, const Tensor& queries,
                                     int64_t heads, const CrossBlockParams& params,
                                     std::vector<Tensor>* capture = nullptr);

/// Runs one cross-scale block per pyramid scale (order given by
/// `scale_order_coarse_to_fine`), then maps each query token through the
/// shared head and concatenates segments to [B, T_f, C].
Tensor decoder_forward(const ScalePyramid& pyramid, const Tensor& queries,
                       const DecoderParams& params, int64_t heads,
                       int64_t segment_len, int64_t channels,
                       bool scale_order_coarse_to_fine,
                       std::vector<Tensor>* capture = nullptr);

}  // namespace pyramidcast

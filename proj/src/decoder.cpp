#include "pyramidcast/decoder.hpp"

#include <cmath>

#include "pyramidcast/errors.hpp"

namespace pyramidcast {

Tensor build_queries(const Tensor& intermediate, int64_t segment_len,
                     const DecoderParams& dec, const EmbeddingParams& emb,
                     bool use_stpe, const std::vector<int64_t>& sensor_ids,
                     const std::vector<int64_t>& tid_future,
                     const std::vector<int64_t>& diw_future) {
  const int64_t future_len = intermediate.extent(1);
  if (future_len % segment_len != 0) {
    throw ConfigError("future length " + std::to_string(future_len) +
                      " is not divisible by segment length " +
                      std::to_string(segment_len));
  }
  auto tokens = segment_embed(intermediate, segment_len, dec.seg);
  if (!use_stpe) {
    if (!dec.pos_table) throw ConfigError("decoder positional table missing");
    return positional_table_encode(tokens, *dec.pos_table);
  }
  // shares the embedding tables with the encoder; the fuse linear is
  // decoder-owned
  EmbeddingParams shared = emb;
  shared.fuse = dec.fuse;
  return st_positional_encode(tokens, shared, sensor_ids, tid_future, diw_future);
}

Tensor cross_scale_attention(const Tensor& enc_kv, const Tensor& queries,
                             int64_t heads, std::vector<Tensor>* capture) {
  const int64_t d_dec = queries.extent(-1);
  if (enc_kv.extent(-1) != d_dec) {
    throw ConfigError("cross attention: projected keys width " +
                      std::to_string(enc_kv.extent(-1)) + " != query width " +
                      std::to_string(d_dec));
  }
  if (d_dec % heads != 0) {
    throw ConfigError("query width " + std::to_string(d_dec) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  const int64_t head_dim = d_dec / heads;
  auto q = split_heads(queries, heads);
  auto kv = split_heads(enc_kv, heads);
  auto scores = mul_scalar(matmul(q, transpose_last2(kv)),
                           1.0 / std::sqrt(static_cast<double>(head_dim)));
  auto probs = softmax_last(scores);
  if (capture) capture->push_back(probs);
  // keys double as values
  return merge_heads(matmul(probs, kv), heads);
}

Tensor cross_scale_transformer_layer(const Tensor& enc_scale, const Tensor& queries,
                                     int64_t heads, const CrossBlockParams& params,
                                     std::vector<Tensor>* capture) {
  auto enc_kv = apply_linear(apply_layer_norm(enc_scale, params.ln_enc), params.kv_proj);
  auto attended = cross_scale_attention(enc_kv, apply_layer_norm(queries, params.ln_dec),
                                        heads, capture);
  auto mid = add(queries, apply_linear(attended, params.attn_out));
  return add(mid, apply_mlp(apply_layer_norm(mid, params.ln2), params.mlp));
}

Tensor decoder_forward(const ScalePyramid& pyramid, const Tensor& queries,
                       const DecoderParams& params, int64_t heads,
                       int64_t segment_len, int64_t channels,
                       bool scale_order_coarse_to_fine,
                       std::vector<Tensor>* capture) {
  const size_t num_scales = pyramid.scales.size();
  if (params.blocks.size() != num_scales) {
    throw ConfigError("decoder block count " + std::to_string(params.blocks.size()) +
                      " != pyramid scale count " + std::to_string(num_scales));
  }
  Tensor h = queries;
  for (size_t k = 0; k < num_scales; ++k) {
    const size_t scale_idx = scale_order_coarse_to_fine ? num_scales - 1 - k : k;
    h = cross_scale_transformer_layer(pyramid.scales[scale_idx], h, heads,
                                      params.blocks[k], capture);
  }
  const int64_t batch = h.extent(0);
  const int64_t num_segments = h.extent(1);
  auto per_segment = apply_linear(h, params.head);  // [B, P_dec, L*C]
  return reshape(per_segment, {batch, num_segments * segment_len, channels});
}

}  // namespace pyramidcast

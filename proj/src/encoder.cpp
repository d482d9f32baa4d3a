#include "pyramidcast/encoder.hpp"

#include <cmath>

#include "pyramidcast/errors.hpp"

namespace pyramidcast {

Tensor split_heads(const Tensor& x, int64_t heads) {
  const int64_t tokens = x.extent(-2);
  const int64_t width = x.extent(-1);
  if (width % heads != 0) {
    throw ConfigError("hidden width " + std::to_string(width) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  const int64_t head_dim = width / heads;
  const int64_t groups = x.numel() / (tokens * width);
  auto by_head = reshape(x, {groups, tokens, heads, head_dim});
  auto swapped = swap_axes(by_head, 1, 2);
  return reshape(swapped, {groups * heads, tokens, head_dim});
}

Tensor merge_heads(const Tensor& x, int64_t heads) {
  const int64_t tokens = x.extent(-2);
  const int64_t head_dim = x.extent(-1);
  const int64_t groups = x.extent(0) / heads;
  auto by_head = reshape(x, {groups, heads, tokens, head_dim});
  auto swapped = swap_axes(by_head, 1, 2);
  return reshape(swapped, {groups, tokens, heads * head_dim});
}

Tensor window_attention(const Tensor& tokens, int64_t window_size, int64_t heads,
                        const AttentionParams& params, std::vector<Tensor>* capture) {
  if (tokens.ndim() != 3) {
    throw ConfigError("window_attention expects [B, P, d] tokens, got " +
                      shape_str(tokens.shape()));
  }
  const int64_t batch = tokens.extent(0);
  const int64_t seq = tokens.extent(1);
  const int64_t width = tokens.extent(2);
  if (window_size < 1 || seq % window_size != 0) {
    throw ConfigError("sequence length " + std::to_string(seq) +
                      " is not divisible by window size " +
                      std::to_string(window_size));
  }
  if (width % heads != 0) {
    throw ConfigError("hidden width " + std::to_string(width) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  const int64_t windows = seq / window_size;
  const int64_t head_dim = width / heads;

  auto windowed = reshape(tokens, {batch * windows, window_size, width});
  auto q = split_heads(apply_linear(windowed, params.q), heads);
  auto k = split_heads(matmul(windowed, transpose_last2(params.k_weight)), heads);
  auto v = split_heads(apply_linear(windowed, params.v), heads);

  auto scores = mul_scalar(matmul(q, transpose_last2(k)),
                           1.0 / std::sqrt(static_cast<double>(head_dim)));
  auto probs = softmax_last(scores);
  if (capture) capture->push_back(probs);
  auto context = merge_heads(matmul(probs, v), heads);
  auto projected = apply_linear(context, params.out);
  return reshape(projected, {batch, seq, width});
}

Tensor window_transformer_layer(const Tensor& tokens, int64_t window_size,
                                int64_t heads, const WindowBlockParams& params,
                                std::vector<Tensor>* capture) {
  auto attended = window_attention(apply_layer_norm(tokens, params.ln1), window_size,
                                   heads, params.attn, capture);
  auto mid = add(tokens, attended);
  auto out = add(mid, apply_mlp(apply_layer_norm(mid, params.ln2), params.mlp));
  return out;
}

Tensor segment_merge(const Tensor& tokens) {
  const int64_t seq = tokens.extent(-2);
  const int64_t width = tokens.extent(-1);
  if (seq % 2 != 0) {
    throw ConfigError("segment_merge requires an even token count, got " +
                      std::to_string(seq));
  }
  Shape out_shape = tokens.shape();
  out_shape[out_shape.size() - 2] = seq / 2;
  out_shape[out_shape.size() - 1] = width * 2;
  // adjacent pairs are contiguous in row-major order, so merging is a pure
  // rearrangement
  return reshape(tokens, out_shape);
}

ScalePyramid encoder_forward(const Tensor& tokens, const EncoderParams& params,
                             int64_t window_size, int64_t heads, int64_t future_len,
                             int64_t channels, bool hierarchy,
                             std::vector<Tensor>* capture) {
  if (params.blocks.empty()) throw ConfigError("encoder needs at least one block");
  const int64_t batch = tokens.extent(0);

  ScalePyramid pyr;
  Tensor h = tokens;
  for (size_t l = 0; l < params.blocks.size(); ++l) {
    if (l > 0 && hierarchy) {
      h = segment_merge(h);
      if (params.blocks[l].merge_proj) {
        h = apply_linear(h, *params.blocks[l].merge_proj);
      }
    }
    const int64_t win = hierarchy ? window_size : h.extent(1);
    h = window_transformer_layer(h, win, heads, params.blocks[l], capture);
    pyr.scales.push_back(h);
  }

  const Tensor& top = pyr.scales.back();
  auto flat = reshape(top, {batch, top.extent(1) * top.extent(2)});
  auto pred = apply_linear(flat, params.head);
  pyr.intermediate = reshape(pred, {batch, future_len, channels});
  return pyr;
}

Tensor masked_mae_loss(const Tensor& pred, const Tensor& truth, const Tensor& mask) {
  if (pred.shape() != truth.shape() || pred.shape() != mask.shape()) {
    throw ConfigError("masked_mae_loss: shapes differ, pred " +
                      shape_str(pred.shape()) + ", truth " + shape_str(truth.shape()) +
                      ", mask " + shape_str(mask.shape()));
  }
  double count = 0.0;
  for (double m : mask.data()) count += m;
  if (count <= 0.0) throw NumericError("degenerate loss: mask excludes every entry");
  auto masked = mul(abs(sub(pred, truth)), mask);
  return mul_scalar(sum(masked), 1.0 / count);
}

}  // namespace pyramidcast

#pragma once

#include <optional>
#include <vector>

#include "pyramidcast/layers.hpp"
#include "pyramidcast/tensor.hpp"

namespace pyramidcast {

// The key projection carries no bias: softmax rows are invariant to a
// constant shift, so a key bias is an exactly flat direction of the loss.
struct AttentionParams {
  LinearParams q;
  Tensor k_weight;  // [d, d]
  LinearParams v, out;
};

struct WindowBlockParams {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
  std::optional<LinearParams> merge_proj;  // optional square map after merging
};

/// Multi-head scaled dot-product attention inside contiguous non-overlapping
/// windows of `window_size` tokens; per-head scale 1/sqrt(d/heads). When
/// `capture` is non-null every softmax output is appended to it.
Tensor window_attention(const Tensor& tokens, int64_t window_size, int64_t heads,
                        const AttentionParams& params,
                        std::vector<Tensor>* capture = nullptr);

/// Pre-norm residual block: H' = H + W-MSA(LN(H)); H'' = H' + MLP(LN(H')).
Tensor window_transformer_layer(const Tensor& tokens, int64_t window_size,
                                int64_t heads, const WindowBlockParams& params,
                                std::vector<Tensor>* capture = nullptr);

/// Concatenates adjacent token pairs: [..., P, d] -> [..., P/2, 2d].
Tensor segment_merge(const Tensor& tokens);

/// Encoder outputs: one token sequence per block, fine to coarse, plus the
/// intermediate prediction from the coarsest scale.
struct ScalePyramid {
  std::vector<Tensor> scales;
  Tensor intermediate;  // [B, T_f, C], normalized units
};

struct EncoderParams {
  std::vector<WindowBlockParams> blocks;
  LinearParams head;  // [T_f*C, P_S*d_S]
};

/// Block 1 applies no merging; blocks 2..S merge then transform. With
/// hierarchy disabled every block keeps (P, d) and attends globally.
ScalePyramid encoder_forward(const Tensor& tokens, const EncoderParams& params,
                             int64_t window_size, int64_t heads, int64_t future_len,
                             int64_t channels, bool hierarchy,
                             std::vector<Tensor>* capture = nullptr);

/// Masked mean absolute error; `mask` entries are 0/1 and at least one must
/// be set. Gradient through `pred` is sign(pred-truth)/count on masked-in
/// entries.
Tensor masked_mae_loss(const Tensor& pred, const Tensor& truth, const Tensor& mask);

}  // namespace pyramidcast

#pragma once

#include "pyramidcast/tensor.hpp"

namespace pyramidcast {

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct MlpParams {
  LinearParams fc1;  // d -> ratio*d
  LinearParams fc2;  // ratio*d -> d
};

inline Tensor apply_linear(const Tensor& x, const LinearParams& p) {
  return linear(x, p.weight, p.bias);
}

inline Tensor apply_layer_norm(const Tensor& x, const LayerNormParams& p,
                               double eps = 1e-5) {
  return layer_norm(x, p.gain, p.bias, eps);
}

inline Tensor apply_mlp(const Tensor& x, const MlpParams& p) {
  return apply_linear(gelu(apply_linear(x, p.fc1)), p.fc2);
}

/// Splits [..., tokens, width] into `heads` along the feature axis, giving
/// [... * heads, tokens, width/heads] with heads folded into the batch.
Tensor split_heads(const Tensor& x, int64_t heads);

/// Inverse of split_heads.
Tensor merge_heads(const Tensor& x, int64_t heads);

}  // namespace pyramidcast

#pragma once

#include <optional>
#include <vector>

#include "pyramidcast/layers.hpp"
#include "pyramidcast/tensor.hpp"

namespace pyramidcast {

/// Input embedding parameters: shared segment projection plus the learned
/// spatial / time-of-day / day-of-week tables and the fuse linear that maps
/// the concatenation back to width d. `pos_table` replaces the tables when
/// positional encoding runs in plain learned-position mode.
struct EmbeddingParams {
  LinearParams seg;        // [d, L*C]
  Tensor e_spatial;        // [N, d1]
  Tensor t_tid;            // [N_D, d2]
  Tensor t_diw;            // [7, d3]
  LinearParams fuse;       // [d, d+d1+d2+d3]
  std::optional<Tensor> pos_table;  // [P, d]
};

/// Splits [B, T, C] history into P = T/L non-overlapping segments and
/// projects each flattened segment with the shared linear map -> [B, P, d].
Tensor segment_embed(const Tensor& history, int64_t segment_len,
                     const LinearParams& seg);

/// Concatenates each token with its sensor row and the temporal rows of the
/// segment's first step, then fuses back to the token width. Index vectors
/// are flattened [B*P].
Tensor st_positional_encode(const Tensor& tokens, const EmbeddingParams& params,
                            const std::vector<int64_t>& sensor_ids,
                            const std::vector<int64_t>& tid,
                            const std::vector<int64_t>& diw);

/// Learned per-position table alternative: tokens + pos_table broadcast over
/// the batch.
Tensor positional_table_encode(const Tensor& tokens, const Tensor& pos_table);

}  // namespace pyramidcast

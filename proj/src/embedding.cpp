#include "pyramidcast/embedding.hpp"

#include "pyramidcast/errors.hpp"

namespace pyramidcast {

Tensor segment_embed(const Tensor& history, int64_t segment_len,
                     const LinearParams& seg) {
  if (history.ndim() != 3) {
    throw ConfigError("segment_embed expects [B, T, C] history, got " +
                      shape_str(history.shape()));
  }
  const int64_t batch = history.extent(0);
  const int64_t steps = history.extent(1);
  const int64_t channels = history.extent(2);
  if (segment_len < 1 || steps % segment_len != 0) {
    throw ConfigError("history length " + std::to_string(steps) +
                      " is not divisible by segment length " +
                      std::to_string(segment_len));
  }
  const int64_t num_segments = steps / segment_len;
  auto segments = reshape(history, {batch, num_segments, segment_len * channels});
  return apply_linear(segments, seg);
}

Tensor st_positional_encode(const Tensor& tokens, const EmbeddingParams& params,
                            const std::vector<int64_t>& sensor_ids,
                            const std::vector<int64_t>& tid,
                            const std::vector<int64_t>& diw) {
  const int64_t batch = tokens.extent(0);
  const int64_t num_segments = tokens.extent(1);
  const Shape lead = {batch, num_segments};
  auto spatial = embedding_lookup(params.e_spatial, sensor_ids, lead);
  auto tod = embedding_lookup(params.t_tid, tid, lead);
  auto dow = embedding_lookup(params.t_diw, diw, lead);
  auto fused = concat({tokens, spatial, tod, dow}, 2);
  return apply_linear(fused, params.fuse);
}

Tensor positional_table_encode(const Tensor& tokens, const Tensor& pos_table) {
  const int64_t batch = tokens.extent(0);
  const int64_t num_segments = tokens.extent(1);
  if (pos_table.ndim() != 2 || pos_table.extent(0) != num_segments ||
      pos_table.extent(1) != tokens.extent(2)) {
    throw ConfigError("positional table shape " + shape_str(pos_table.shape()) +
                      " does not match tokens " + shape_str(tokens.shape()));
  }
  std::vector<int64_t> idx(batch * num_segments);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < num_segments; ++p) idx[b * num_segments + p] = p;
  }
  auto table_rows = embedding_lookup(pos_table, idx, {batch, num_segments});
  return add(tokens, table_rows);
}

}  // namespace pyramidcast

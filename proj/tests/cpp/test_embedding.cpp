#include "pyramidcast/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "pyramidcast/errors.hpp"

using namespace pyramidcast;

namespace {

Tensor randn(Shape shape, std::mt19937_64& rng, bool rg = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), rg);
}

EmbeddingParams default_params(std::mt19937_64& rng, int64_t d = 32, int64_t d1 = 32,
                               int64_t d2 = 8, int64_t d3 = 32, int64_t seg_width = 12,
                               int64_t sensors = 4, int64_t slots = 288) {
  EmbeddingParams p;
  p.seg.weight = randn({d, seg_width}, rng);
  p.seg.bias = randn({d}, rng);
  p.e_spatial = randn({sensors, d1}, rng);
  p.t_tid = randn({slots, d2}, rng);
  p.t_diw = randn({7, d3}, rng);
  p.fuse.weight = randn({d, d + d1 + d2 + d3}, rng);
  p.fuse.bias = randn({d}, rng);
  return p;
}

}  // namespace

TEST_CASE("segment counts") {
  std::mt19937_64 rng(3);
  auto params = default_params(rng);
  auto hist = randn({2, 288, 1}, rng, false);
  auto tokens = segment_embed(hist, 12, params.seg);
  CHECK(tokens.shape() == Shape{2, 24, 32});

  // T == L collapses to a single token
  LinearParams tiny;
  tiny.weight = randn({4, 6}, rng);
  tiny.bias = randn({4}, rng);
  auto one = segment_embed(randn({1, 6, 1}, rng, false), 6, tiny);
  CHECK(one.shape() == Shape{1, 1, 4});

  CHECK_THROWS_AS(segment_embed(randn({1, 287, 1}, rng, false), 12, params.seg),
                  ConfigError);
}

TEST_CASE("identity segment embedding") {
  LinearParams seg;
  seg.weight = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  seg.bias = Tensor::zeros({2});
  auto hist = Tensor::from_data({1, 4, 1}, {1, 2, 3, 4});
  auto tokens = segment_embed(hist, 2, seg);
  REQUIRE(tokens.shape() == Shape{1, 2, 2});
  CHECK(tokens.at({0, 0, 0}) == 1.0);
  CHECK(tokens.at({0, 0, 1}) == 2.0);
  CHECK(tokens.at({0, 1, 0}) == 3.0);
  CHECK(tokens.at({0, 1, 1}) == 4.0);
}

TEST_CASE("positional encoding concatenates to width 104 and fuses to 32") {
  std::mt19937_64 rng(5);
  auto params = default_params(rng);
  CHECK(params.fuse.weight.shape() == Shape{32, 104});
  auto tokens = randn({1, 24, 32}, rng, false);
  std::vector<int64_t> sensor(24, 1), tid(24), diw(24, 2);
  for (int64_t j = 0; j < 24; ++j) tid[j] = (j * 12) % 288;
  auto out = st_positional_encode(tokens, params, sensor, tid, diw);
  CHECK(out.shape() == Shape{1, 24, 32});
}

TEST_CASE("zero tables with zero-extended identity fuse pass tokens through") {
  std::mt19937_64 rng(7);
  const int64_t d = 6, d1 = 3, d2 = 2, d3 = 3;
  EmbeddingParams p;
  p.seg.weight = randn({d, 4}, rng);
  p.seg.bias = randn({d}, rng);
  p.e_spatial = Tensor::zeros({5, d1});
  p.t_tid = Tensor::zeros({10, d2});
  p.t_diw = Tensor::zeros({7, d3});
  std::vector<double> fuse(d * (d + d1 + d2 + d3), 0.0);
  for (int64_t i = 0; i < d; ++i) fuse[i * (d + d1 + d2 + d3) + i] = 1.0;
  p.fuse.weight = Tensor::from_data({d, d + d1 + d2 + d3}, std::move(fuse));
  p.fuse.bias = Tensor::zeros({d});

  auto tokens = randn({2, 4, d}, rng, false);
  std::vector<int64_t> sensor(8, 3), tid(8, 1), diw(8, 6);
  auto out = st_positional_encode(tokens, p, sensor, tid, diw);
  for (int64_t i = 0; i < tokens.numel(); ++i) {
    CHECK(out.data()[i] == tokens.data()[i]);
  }
}

TEST_CASE("sensors with identical histories but different rows differ") {
  std::mt19937_64 rng(9);
  auto p = default_params(rng, 8, 4, 4, 4, 6, 3, 12);
  auto row = randn({1, 2, 8}, rng, false);
  auto tokens = concat({row, row}, 0);  // identical content per batch row

  std::vector<int64_t> sensors = {0, 0, 1, 1};
  std::vector<int64_t> tid = {3, 4, 3, 4}, diw = {2, 2, 2, 2};
  auto out = st_positional_encode(tokens, p, sensors, tid, diw);
  bool differs = false;
  for (int64_t j = 0; j < 2 * 8; ++j) {
    differs |= (out.data()[j] != out.data()[2 * 8 + j]);
  }
  CHECK(differs);
}

TEST_CASE("segment embedding is local to its slice") {
  std::mt19937_64 rng(11);
  auto p = default_params(rng, 8, 4, 4, 4, 6, 3, 12);
  std::vector<double> base(1 * 24 * 1);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : base) v = dist(rng);
  auto perturbed = base;
  for (int64_t k = 6; k < 12; ++k) perturbed[k] += 3.0;  // segment 1 only

  std::vector<int64_t> sensor(4, 0), tid = {0, 6, 0, 6}, diw(4, 0);
  auto run = [&](std::vector<double> h) {
    auto hist = Tensor::from_data({1, 24, 1}, std::move(h));
    auto tokens = segment_embed(hist, 6, p.seg);
    return st_positional_encode(tokens, p, sensor, tid, diw);
  };
  auto a = run(base);
  auto b = run(perturbed);
  for (int64_t j = 0; j < 4; ++j) {
    if (j == 1) continue;
    for (int64_t c = 0; c < 8; ++c) CHECK(a.at({0, j, c}) == b.at({0, j, c}));
  }
  bool changed = false;
  for (int64_t c = 0; c < 8; ++c) changed |= (a.at({0, 1, c}) != b.at({0, 1, c}));
  CHECK(changed);
}

TEST_CASE("gradient reaches only referenced embedding rows") {
  std::mt19937_64 rng(13);
  auto p = default_params(rng, 8, 4, 4, 4, 6, 5, 12);
  auto tokens = randn({1, 2, 8}, rng, false);
  std::vector<int64_t> sensor = {2, 2}, tid = {7, 1}, diw = {3, 3};
  auto out = st_positional_encode(tokens, p, sensor, tid, diw);
  backward(sum(out));

  auto check_rows = [](const Tensor& table, std::vector<int64_t> hot) {
    REQUIRE(table.has_grad());
    const int64_t width = table.extent(1);
    for (int64_t r = 0; r < table.extent(0); ++r) {
      double mag = 0.0;
      for (int64_t c = 0; c < width; ++c) {
        mag += std::fabs(table.grad()[r * width + c]);
      }
      const bool is_hot = std::find(hot.begin(), hot.end(), r) != hot.end();
      if (is_hot) {
        CHECK(mag > 0.0);
      } else {
        CHECK(mag == 0.0);
      }
    }
  };
  check_rows(p.e_spatial, {2});
  check_rows(p.t_tid, {7, 1});
  check_rows(p.t_diw, {3});
}

TEST_CASE("embedding is independent of batch order") {
  std::mt19937_64 rng(17);
  auto p = default_params(rng, 8, 4, 4, 4, 6, 3, 12);
  auto h0 = randn({1, 12, 1}, rng, false);
  auto h1 = randn({1, 12, 1}, rng, false);
  auto joined = concat({h0, h1}, 0);
  auto flipped = concat({h1, h0}, 0);

  std::vector<int64_t> s01 = {0, 0, 1, 1}, s10 = {1, 1, 0, 0};
  std::vector<int64_t> tid = {0, 6, 0, 6}, diw = {0, 0, 0, 0};
  auto a = st_positional_encode(segment_embed(joined, 6, p.seg), p, s01, tid, diw);
  auto b = st_positional_encode(segment_embed(flipped, 6, p.seg), p, s10, tid, diw);
  for (int64_t j = 0; j < 2; ++j) {
    for (int64_t c = 0; c < 8; ++c) {
      CHECK(a.at({0, j, c}) == b.at({1, j, c}));
      CHECK(a.at({1, j, c}) == b.at({0, j, c}));
    }
  }
}

TEST_CASE("learned positional table mode") {
  std::mt19937_64 rng(19);
  auto tokens = randn({2, 4, 6}, rng, false);
  auto table = randn({4, 6}, rng);
  auto out = positional_table_encode(tokens, table);
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t j = 0; j < 4; ++j) {
      for (int64_t c = 0; c < 6; ++c) {
        CHECK(out.at({b, j, c}) ==
              doctest::Approx(tokens.at({b, j, c}) + table.at({j, c})).epsilon(1e-15));
      }
    }
  }
  CHECK_THROWS_AS(positional_table_encode(tokens, randn({5, 6}, rng)), ConfigError);
}

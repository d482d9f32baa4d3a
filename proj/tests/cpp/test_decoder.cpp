#include "pyramidcast/decoder.hpp"

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

LinearParams random_linear(int64_t out, int64_t in, std::mt19937_64& rng,
                           double scale = 0.3, bool rg = true) {
  LinearParams p;
  auto w = randn({out, in}, rng, rg);
  for (double& v : w.mutable_data()) v *= scale;
  p.weight = w;
  p.bias = Tensor::zeros({out}, rg);
  return p;
}

LayerNormParams unit_norm(int64_t width, bool rg = true) {
  return {Tensor::full({width}, 1.0, rg), Tensor::zeros({width}, rg)};
}

CrossBlockParams random_cross_block(int64_t enc_width, int64_t d_dec, int64_t hidden,
                                    std::mt19937_64& rng) {
  CrossBlockParams b;
  b.ln_enc = unit_norm(enc_width);
  b.kv_proj = random_linear(d_dec, enc_width, rng);
  b.ln_dec = unit_norm(d_dec);
  b.attn_out = random_linear(d_dec, d_dec, rng);
  b.ln2 = unit_norm(d_dec);
  b.mlp.fc1 = random_linear(hidden, d_dec, rng);
  b.mlp.fc2 = random_linear(d_dec, hidden, rng);
  return b;
}

EmbeddingParams shared_tables(std::mt19937_64& rng, int64_t d_tok, int64_t d1,
                              int64_t d2, int64_t d3, int64_t sensors, int64_t slots) {
  EmbeddingParams p;
  p.seg.weight = randn({d_tok, 1}, rng);  // unused by build_queries
  p.seg.bias = Tensor::zeros({d_tok}, true);
  p.e_spatial = randn({sensors, d1}, rng);
  p.t_tid = randn({slots, d2}, rng);
  p.t_diw = randn({7, d3}, rng);
  p.fuse.weight = randn({d_tok, d_tok + d1 + d2 + d3}, rng);
  p.fuse.bias = Tensor::zeros({d_tok}, true);
  return p;
}

}  // namespace

TEST_CASE("query construction counts and zero case") {
  std::mt19937_64 rng(3);
  const int64_t d_dec = 8;
  DecoderParams dec;
  dec.seg = random_linear(d_dec, 12, rng);
  dec.fuse = random_linear(d_dec, d_dec + 4 + 4 + 4, rng);
  auto emb = shared_tables(rng, d_dec, 4, 4, 4, 3, 288);

  auto intermediate = randn({2, 288, 1}, rng, false);
  std::vector<int64_t> sensor(2 * 24, 1), tid(2 * 24, 0), diw(2 * 24, 0);
  auto queries = build_queries(intermediate, 12, dec, emb, true, sensor, tid, diw);
  CHECK(queries.shape() == Shape{2, 24, d_dec});

  CHECK_THROWS_AS(build_queries(randn({1, 287, 1}, rng, false), 12, dec, emb, true,
                                sensor, tid, diw),
                  ConfigError);
}

TEST_CASE("zero inputs with zero tables produce zero queries") {
  std::mt19937_64 rng(5);
  const int64_t d_dec = 6;
  DecoderParams dec;
  dec.seg = random_linear(d_dec, 4, rng);
  dec.fuse = random_linear(d_dec, d_dec + 2 + 2 + 2, rng);
  EmbeddingParams emb;
  emb.e_spatial = Tensor::zeros({3, 2});
  emb.t_tid = Tensor::zeros({12, 2});
  emb.t_diw = Tensor::zeros({7, 2});

  auto intermediate = Tensor::zeros({1, 8, 1});
  std::vector<int64_t> sensor(2, 0), tid(2, 0), diw(2, 0);
  auto queries = build_queries(intermediate, 4, dec, emb, true, sensor, tid, diw);
  for (double v : queries.data()) CHECK(v == 0.0);
}

TEST_CASE("cross attention shapes and singleton broadcast") {
  std::mt19937_64 rng(7);
  auto queries = randn({1, 24, 8}, rng, false);

  // P_enc = 3 gives a 24x3 attention matrix per head
  auto kv3 = randn({1, 3, 8}, rng, false);
  std::vector<Tensor> capture;
  auto out = cross_scale_attention(kv3, queries, 2, &capture);
  CHECK(out.shape() == Shape{1, 24, 8});
  REQUIRE(capture.size() == 1);
  CHECK(capture[0].shape() == Shape{2, 24, 3});

  // single encoder token: every attention row is [1.0] and the token value
  // is broadcast to all queries
  auto kv1 = randn({1, 1, 8}, rng, false);
  capture.clear();
  auto broadcast = cross_scale_attention(kv1, queries, 2, &capture);
  for (double w : capture[0].data()) CHECK(w == 1.0);
  for (int64_t q = 0; q < 24; ++q) {
    for (int64_t c = 0; c < 8; ++c) {
      CHECK(broadcast.at({0, q, c}) == kv1.at({0, 0, c}));
    }
  }
}

TEST_CASE("identical encoder tokens attend uniformly") {
  std::mt19937_64 rng(11);
  auto queries = randn({1, 5, 4}, rng, false);
  auto row = randn({1, 1, 4}, rng, false);
  auto kv = concat({row, row, row, row}, 1);  // 4 identical tokens
  std::vector<Tensor> capture;
  cross_scale_attention(kv, queries, 2, &capture);
  for (double w : capture[0].data()) {
    CHECK(w == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("cross attention rows sum to one") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int64_t> enc_len(1, 9);
    auto kv = randn({1, enc_len(rng), 8}, rng, false);
    auto queries = randn({1, 6, 8}, rng, false);
    std::vector<Tensor> capture;
    cross_scale_attention(kv, queries, 4, &capture);
    const int64_t width = capture[0].extent(-1);
    const int64_t rows = capture[0].numel() / width;
    for (int64_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (int64_t i = 0; i < width; ++i) s += capture[0].data()[r * width + i];
      CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("zeroed residual branches make the cross block an identity on queries") {
  std::mt19937_64 rng(17);
  auto block = random_cross_block(12, 8, 16, rng);
  for (double& v : block.attn_out.weight.mutable_data()) v = 0.0;
  for (double& v : block.mlp.fc2.weight.mutable_data()) v = 0.0;
  auto enc = randn({2, 6, 12}, rng, false);
  auto queries = randn({2, 4, 8}, rng, false);
  auto out = cross_scale_transformer_layer(enc, queries, 2, block);
  REQUIRE(out.shape() == queries.shape());
  for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == queries.data()[i]);
}

TEST_CASE("decoder output length is invariant to encoder scale lengths") {
  std::mt19937_64 rng(19);
  auto block = random_cross_block(10, 8, 16, rng);
  auto queries = randn({1, 7, 8}, rng, false);
  for (int64_t p_enc : {1, 2, 5, 24, 31}) {
    auto enc = randn({1, p_enc, 10}, rng, false);
    auto out = cross_scale_transformer_layer(enc, queries, 4, block);
    CHECK(out.shape() == Shape{1, 7, 8});
  }
}

namespace {

struct SmallDecoderSetup {
  ScalePyramid pyramid;
  DecoderParams dec;
  Tensor queries;
};

SmallDecoderSetup make_decoder_setup(std::mt19937_64& rng, int64_t scales,
                                     int64_t p_top, int64_t d_base, int64_t d_dec,
                                     int64_t p_dec) {
  SmallDecoderSetup s;
  int64_t p = p_top;
  int64_t width = d_base;
  for (int64_t l = 0; l < scales; ++l) {
    s.pyramid.scales.push_back(randn({1, p, width}, rng, false));
    if (l + 1 < scales) {
      p /= 2;
      width *= 2;
    }
  }
  for (int64_t k = 0; k < scales; ++k) {
    const int64_t enc_width = s.pyramid.scales[scales - 1 - k].extent(2);
    s.dec.blocks.push_back(random_cross_block(enc_width, d_dec, 2 * d_dec, rng));
  }
  s.dec.head = random_linear(2, d_dec, rng);  // segment_len 2, C = 1
  s.queries = randn({1, p_dec, d_dec}, rng, false);
  return s;
}

}  // namespace

TEST_CASE("decoder visits scales coarse to fine") {
  std::mt19937_64 rng(23);
  auto s = make_decoder_setup(rng, 3, 8, 4, 6, 5);
  std::vector<Tensor> capture;
  auto out = decoder_forward(s.pyramid, s.queries, s.dec, 2, 2, 1, true, &capture);
  CHECK(out.shape() == Shape{1, 10, 1});
  REQUIRE(capture.size() == 3);
  CHECK(capture[0].extent(-1) == 2);  // coarsest scale first (8/4 = 2 tokens)
  CHECK(capture[1].extent(-1) == 4);
  CHECK(capture[2].extent(-1) == 8);

  // fine-to-coarse option flips the order; use a flat pyramid so block
  // widths fit both orders
  std::mt19937_64 rng2(24);
  SmallDecoderSetup flat;
  for (int64_t len : {8, 4, 2}) flat.pyramid.scales.push_back(randn({1, len, 4}, rng2, false));
  for (int k = 0; k < 3; ++k) {
    flat.dec.blocks.push_back(random_cross_block(4, 6, 12, rng2));
  }
  flat.dec.head = random_linear(2, 6, rng2);
  flat.queries = randn({1, 5, 6}, rng2, false);
  capture.clear();
  decoder_forward(flat.pyramid, flat.queries, flat.dec, 2, 2, 1, false, &capture);
  CHECK(capture[0].extent(-1) == 8);
  capture.clear();
  decoder_forward(flat.pyramid, flat.queries, flat.dec, 2, 2, 1, true, &capture);
  CHECK(capture[0].extent(-1) == 2);

  // block count must match the scale count
  ScalePyramid trimmed = s.pyramid;
  trimmed.scales.pop_back();
  CHECK_THROWS_AS(decoder_forward(trimmed, s.queries, s.dec, 2, 2, 1, true),
                  ConfigError);
}

TEST_CASE("single-scale decoder works") {
  std::mt19937_64 rng(29);
  auto s = make_decoder_setup(rng, 1, 4, 6, 6, 3);
  auto out = decoder_forward(s.pyramid, s.queries, s.dec, 2, 2, 1, true);
  CHECK(out.shape() == Shape{1, 6, 1});
}

TEST_CASE("per-segment head is shared: permuting tokens permutes outputs") {
  std::mt19937_64 rng(31);
  auto head = random_linear(3, 5, rng, 0.5, false);
  auto tokens = randn({1, 4, 5}, rng, false);
  auto permuted = index_select(tokens, 1, {2, 0, 3, 1});
  auto a = apply_linear(tokens, head);
  auto b = apply_linear(permuted, head);
  const std::vector<int64_t> perm = {2, 0, 3, 1};
  for (int64_t j = 0; j < 4; ++j) {
    for (int64_t c = 0; c < 3; ++c) {
      CHECK(b.at({0, j, c}) == a.at({0, perm[j], c}));
    }
  }
}

TEST_CASE("frozen encoder scales receive no gradient in stage-2 graphs") {
  std::mt19937_64 rng(37);
  auto s = make_decoder_setup(rng, 2, 4, 4, 6, 3);
  // frozen pyramid: requires_grad stays false; trainable decoder
  auto out = decoder_forward(s.pyramid, s.queries, s.dec, 2, 2, 1, true);
  auto loss = mean(out);
  backward(loss);
  for (const auto& scale : s.pyramid.scales) CHECK_FALSE(scale.has_grad());
  CHECK(s.dec.blocks[0].kv_proj.weight.has_grad());
  CHECK(s.dec.head.weight.has_grad());
}

TEST_CASE("full decoder loss passes the gradient check on a tiny config") {
  std::mt19937_64 rng(41);
  auto s = make_decoder_setup(rng, 2, 4, 4, 4, 4);
  auto queries = randn({1, 4, 4}, rng, true);
  auto truth = randn({1, 8, 1}, rng, false);
  auto mask = Tensor::full({1, 8, 1}, 1.0);

  std::vector<std::pair<std::string, Tensor>> params = {{"queries", queries}};
  int i = 0;
  for (auto& b : s.dec.blocks) {
    const std::string base = "b" + std::to_string(i++);
    params.emplace_back(base + ".ln_enc.g", b.ln_enc.gain);
    params.emplace_back(base + ".ln_enc.b", b.ln_enc.bias);
    params.emplace_back(base + ".kv.w", b.kv_proj.weight);
    params.emplace_back(base + ".kv.b", b.kv_proj.bias);
    params.emplace_back(base + ".ln_dec.g", b.ln_dec.gain);
    params.emplace_back(base + ".ln_dec.b", b.ln_dec.bias);
    params.emplace_back(base + ".out.w", b.attn_out.weight);
    params.emplace_back(base + ".out.b", b.attn_out.bias);
    params.emplace_back(base + ".ln2.g", b.ln2.gain);
    params.emplace_back(base + ".ln2.b", b.ln2.bias);
    params.emplace_back(base + ".fc1.w", b.mlp.fc1.weight);
    params.emplace_back(base + ".fc1.b", b.mlp.fc1.bias);
    params.emplace_back(base + ".fc2.w", b.mlp.fc2.weight);
    params.emplace_back(base + ".fc2.b", b.mlp.fc2.bias);
  }
  params.emplace_back("head.w", s.dec.head.weight);
  params.emplace_back("head.b", s.dec.head.bias);

  auto fn = [&]() {
    auto out = decoder_forward(s.pyramid, queries, s.dec, 2, 2, 1, true);
    return masked_mae_loss(out, truth, mask);
  };
  auto res = grad_check(fn, params, 1e-5);
  CHECK(res.max_rel_err < 1e-4);
}

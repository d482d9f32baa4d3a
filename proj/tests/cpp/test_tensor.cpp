#include "pyramidcast/tensor.hpp"

#include <cmath>
#include <random>

#include "doctest.h"
#include "pyramidcast/errors.hpp"

using namespace pyramidcast;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("linear matches hand values") {
  // y = 2*3 + 1
  auto x = Tensor::from_data({1}, {3.0});
  auto w = Tensor::from_data({1, 1}, {2.0});
  auto b = Tensor::from_data({1}, {1.0});
  CHECK(linear(x, w, b).value() == doctest::Approx(7.0).epsilon(1e-15));

  // identity on a 2-vector
  auto x2 = Tensor::from_data({2}, {1.0, 2.0});
  auto eye = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});
  auto z = Tensor::zeros({2});
  auto y2 = linear(x2, eye, z);
  CHECK(y2.at({0}) == 1.0);
  CHECK(y2.at({1}) == 2.0);
}

TEST_CASE("linear matches triple-loop oracle on random data") {
  std::mt19937_64 rng(7);
  auto x = random_tensor({4, 8}, rng);
  auto w = random_tensor({5, 8}, rng);
  auto b = random_tensor({5}, rng);
  auto y = linear(x, w, b);
  REQUIRE(y.shape() == Shape{4, 5});
  for (int64_t r = 0; r < 4; ++r) {
    for (int64_t k = 0; k < 5; ++k) {
      double acc = b.at({k});
      for (int64_t m = 0; m < 8; ++m) acc += w.at({k, m}) * x.at({r, m});
      CHECK(std::fabs(y.at({r, k}) - acc) < 1e-12);
    }
  }
}

TEST_CASE("linear rejects mismatched shapes naming both") {
  auto x = Tensor::zeros({3, 4});
  auto w = Tensor::zeros({2, 5});
  auto b = Tensor::zeros({2});
  CHECK_THROWS_WITH_AS(linear(x, w, b),
                       doctest::Contains("[3, 4]"), ConfigError);
  try {
    linear(x, w, b);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("[2, 5]") != std::string::npos);
  }
}

TEST_CASE("softmax_last hand values") {
  auto a = softmax_last(Tensor::from_data({2}, {0.0, 0.0}));
  CHECK(a.at({0}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(a.at({1}) == doctest::Approx(0.5).epsilon(1e-15));

  auto b = softmax_last(Tensor::from_data({1}, {123.456}));
  CHECK(b.at({0}) == doctest::Approx(1.0).epsilon(1e-15));

  auto c = softmax_last(Tensor::from_data({2}, {std::log(2.0), 0.0}));
  CHECK(std::fabs(c.at({0}) - 2.0 / 3.0) < 1e-12);
  CHECK(std::fabs(c.at({1}) - 1.0 / 3.0) < 1e-12);
}

TEST_CASE("softmax_last rows sum to one and shift invariance") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> shift_dist(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_tensor({3, 7}, rng, false);
    auto y = softmax_last(x);
    for (int64_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (int64_t i = 0; i < 7; ++i) {
        const double v = y.at({r, i});
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::fabs(s - 1.0) <= 1e-12);
    }
    // adding a per-row constant leaves the result unchanged
    const double c = shift_dist(rng);
    std::vector<double> shifted(x.data().begin(), x.data().end());
    for (double& v : shifted) v += c;
    auto y2 = softmax_last(Tensor::from_data({3, 7}, std::move(shifted)));
    for (int64_t i = 0; i < y.numel(); ++i) {
      CHECK(std::fabs(y.data()[i] - y2.data()[i]) < 1e-12);
    }
  }
}

TEST_CASE("softmax_last rejects non-finite input") {
  auto x = Tensor::from_data({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(softmax_last(x), NumericError);
}

TEST_CASE("layer_norm hand values") {
  auto gain = Tensor::full({4}, 1.0);
  auto zero = Tensor::zeros({4});
  auto y = layer_norm(Tensor::full({4}, 5.0), gain, zero, 1e-5);
  for (int64_t i = 0; i < 4; ++i) CHECK(std::fabs(y.at({i})) < 1e-6);

  auto c = Tensor::full({4}, 3.25);
  auto collapsed = layer_norm(Tensor::from_data({4}, {1.0, -2.0, 7.0, 0.5}),
                              Tensor::zeros({4}), c, 1e-5);
  for (int64_t i = 0; i < 4; ++i) CHECK(collapsed.at({i}) == 3.25);

  auto g2 = Tensor::full({2}, 1.0);
  auto y2 = layer_norm(Tensor::from_data({2}, {1.0, 3.0}), g2, Tensor::zeros({2}), 1e-5);
  CHECK(y2.at({0}) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y2.at({1}) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm per-token mean and variance") {
  std::mt19937_64 rng(13);
  auto x = random_tensor({5, 16}, rng, false);
  auto y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-5);
  for (int64_t r = 0; r < 5; ++r) {
    double mu = 0.0, var = 0.0;
    for (int64_t i = 0; i < 16; ++i) mu += y.at({r, i});
    mu /= 16.0;
    for (int64_t i = 0; i < 16; ++i) {
      const double d = y.at({r, i}) - mu;
      var += d * d;
    }
    var /= 16.0;
    CHECK(std::fabs(mu) < 1e-10);
    CHECK(std::fabs(var - 1.0) < 1e-3);  // eps-induced shrinkage only
  }
}

TEST_CASE("backward accumulates over fan-out") {
  auto x = Tensor::from_data({1}, {1.5}, true);
  auto y = add(x, x);
  backward(y);
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 2.0);
}

TEST_CASE("backward requires a scalar loss") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  auto y = add(x, x);
  CHECK_THROWS_AS(backward(y), ConfigError);
}

TEST_CASE("frozen tensors receive no gradient") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  auto w = Tensor::from_data({2}, {3.0, 4.0}, false);
  auto loss = sum(mul(x, w));
  backward(loss);
  CHECK(x.has_grad());
  CHECK_FALSE(w.has_grad());
  CHECK(x.grad()[0] == 3.0);
  CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("grad_check: linear layer below 1e-6") {
  std::mt19937_64 rng(17);
  auto x = random_tensor({4, 8}, rng);
  auto w = random_tensor({5, 8}, rng);
  auto b = random_tensor({5}, rng);
  auto target = random_tensor({4, 5}, rng, false);
  auto fn = [&]() { return mean(mul(sub(linear(x, w, b), target),
                                    sub(linear(x, w, b), target))); };
  auto res = grad_check(fn, {{"x", x}, {"w", w}, {"b", b}}, 1e-5);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: constant function has zero error") {
  auto p = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
  auto fn = []() { return Tensor::scalar(4.0, false); };
  auto res = grad_check(fn, {{"p", p}}, 1e-5);
  CHECK(res.max_rel_err == 0.0);
}

TEST_CASE("grad_check: matmul and softmax below 1e-6") {
  std::mt19937_64 rng(19);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 4, 5}, rng);
  auto shared = random_tensor({4, 5}, rng);
  auto fn = [&]() {
    auto y = matmul(a, b);
    auto z = matmul(a, shared);
    return add(sum(mul(y, y)), sum(softmax_last(z)));
  };
  auto res = grad_check(fn, {{"a", a}, {"b", b}, {"shared", shared}}, 1e-5);
  CHECK(res.max_rel_err < 1e-6);

  auto q = random_tensor({3, 6}, rng);
  auto probe = random_tensor({3, 6}, rng, false);
  auto fn2 = [&]() { return sum(mul(softmax_last(q), probe)); };
  auto res2 = grad_check(fn2, {{"q", q}}, 1e-5);
  CHECK(res2.max_rel_err < 1e-6);
}

TEST_CASE("grad_check: remaining primitives below 1e-4") {
  std::mt19937_64 rng(23);
  auto a = random_tensor({2, 6}, rng);
  auto b = random_tensor({2, 6}, rng);
  auto gain = random_tensor({6}, rng);
  auto bias = random_tensor({6}, rng);
  auto table = random_tensor({5, 3}, rng);
  auto probe = random_tensor({2, 2, 3}, rng, false);
  auto probe2 = random_tensor({2, 6}, rng, false);

  auto fn = [&]() {
    auto ln = layer_norm(a, gain, bias, 1e-5);
    auto parts = split(ln, 1, {2, 4});
    auto rejoined = concat({parts[0], parts[1]}, 1);
    auto moved = swap_axes(reshape(rejoined, {2, 2, 3}), 0, 1);
    auto looked = embedding_lookup(table, {0, 4, 2, 2}, {2, 2});
    auto affine = channel_affine(looked, {2.0, -1.0, 0.5}, {0.1, 0.2, 0.3});
    auto g = gelu(add(moved, affine));
    auto t = transpose_last2(g);
    auto scaled = mul_scalar(add_scalar(abs(t), 0.25), 1.75);
    return add(mean(scaled), sum(mul(sub(a, b), probe2)));
  };
  auto res = grad_check(fn,
                        {{"a", a}, {"b", b}, {"gain", gain}, {"bias", bias},
                         {"table", table}},
                        1e-5);
  CHECK(res.max_rel_err < 1e-4);
  (void)probe;
}

TEST_CASE("embedding_lookup gradient hits only referenced rows") {
  auto table = Tensor::from_data({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  auto y = embedding_lookup(table, {1, 1, 3}, {3});
  backward(sum(y));
  REQUIRE(table.has_grad());
  auto g = table.grad();
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] == 2.0);  // row 1 referenced twice
  CHECK(g[3] == 2.0);
  CHECK(g[4] == 0.0);
  CHECK(g[5] == 0.0);
  CHECK(g[6] == 1.0);
  CHECK(g[7] == 1.0);
}

TEST_CASE("concat and slice are inverse") {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 4, 5}, rng, false);
    for (int axis = 0; axis < 3; ++axis) {
      const int64_t extent = x.shape()[axis];
      std::vector<int64_t> sizes;
      int64_t rest = extent;
      std::uniform_int_distribution<int64_t> cut(1, extent);
      while (rest > 0) {
        int64_t c = std::min<int64_t>(cut(rng), rest);
        sizes.push_back(c);
        rest -= c;
      }
      auto parts = split(x, axis, sizes);
      auto back = concat(parts, axis);
      REQUIRE(back.shape() == x.shape());
      for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
    }
  }
}

TEST_CASE("swap_axes round trips and matmul shares 2-D operand") {
  std::mt19937_64 rng(31);
  auto x = random_tensor({2, 3, 4, 5}, rng, false);
  auto y = swap_axes(swap_axes(x, 1, 3), 1, 3);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);

  auto a = random_tensor({3, 2, 4}, rng, false);
  auto b2 = random_tensor({4, 6}, rng, false);
  auto z = matmul(a, b2);
  REQUIRE(z.shape() == Shape{3, 2, 6});
  for (int64_t t = 0; t < 3; ++t) {
    for (int64_t i = 0; i < 2; ++i) {
      for (int64_t j = 0; j < 6; ++j) {
        double acc = 0.0;
        for (int64_t k = 0; k < 4; ++k) acc += a.at({t, i, k}) * b2.at({k, j});
        CHECK(std::fabs(z.at({t, i, j}) - acc) < 1e-12);
      }
    }
  }
}

TEST_CASE("mutable_data and set_requires_grad reject op outputs") {
  auto x = Tensor::from_data({2}, {1.0, 2.0}, true);
  auto y = add(x, x);
  CHECK_THROWS_AS(y.mutable_data(), ConfigError);
  CHECK_THROWS_AS(y.set_requires_grad(false), ConfigError);
}

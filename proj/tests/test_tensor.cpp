#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "segkit/gradcheck.hpp"
#include "segkit/rng.hpp"
#include "segkit/tensor.hpp"
#include "support/oracles.hpp"

using namespace segkit;

namespace {

Tensor randt(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool rg = false) {
  Tensor t = Tensor::zeros(std::move(shape), rg);
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
  Tape tape(false);
  Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor b({1}, {0.0});
  Tensor y = conv2d(tape, x, w, b);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  for (size_t i = 0; i < 9; ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("conv2d: all-ones 3x3 valid convolution sums to 9") {
  Tape tape(false);
  Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(tape, x, w, Tensor{});
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("conv2d: dilated case matches the nested-loop oracle") {
  Rng rng(11);
  Tensor x = randt(rng, {1, 2, 8, 8});
  Tensor w = randt(rng, {3, 2, 3, 3});
  Tensor b = randt(rng, {3});
  Tape tape(false);
  Tensor y = conv2d(tape, x, w, b, /*stride=*/1, /*padding=*/2, /*dilation=*/2);

  oracles::ConvShape s{1, 2, 8, 8, 3, 3, 3, 1, 2, 2, 2};
  auto ref = oracles::conv2d_ref(x.values(), w.values(), b.values(), s);
  REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
  for (size_t i = 0; i < ref.size(); ++i) {
    CHECK(std::abs(y.values()[i] - ref[i]) < 1e-6);
  }
}

TEST_CASE("conv2d: strided case matches the nested-loop oracle") {
  Rng rng(12);
  Tensor x = randt(rng, {2, 3, 7, 9});
  Tensor w = randt(rng, {2, 3, 3, 3});
  Tape tape(false);
  Tensor y = conv2d(tape, x, w, Tensor{}, /*stride=*/2, /*padding=*/1, /*dilation=*/1);
  oracles::ConvShape s{2, 3, 7, 9, 2, 3, 3, 2, 1, 1, 1};
  REQUIRE(y.shape() == Shape{2, 2, s.out_h(), s.out_w()});
  auto ref = oracles::conv2d_ref(x.values(), w.values(), {}, s);
  for (size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.values()[i] - ref[i]) < 1e-6);
}

TEST_CASE("conv2d: channel mismatch is rejected naming both shapes") {
  Tape tape(false);
  Tensor x = Tensor::zeros({1, 2, 4, 4});
  Tensor w = Tensor::zeros({1, 3, 3, 3});
  try {
    conv2d(tape, x, w, Tensor{}, 1, 1, 1);
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[1x2x4x4]") != std::string::npos);
    CHECK(msg.find("[1x3x3x3]") != std::string::npos);
  }
}

TEST_CASE("conv2d: padded extent below effective kernel extent is rejected") {
  Tape tape(false);
  Tensor x = Tensor::zeros({1, 1, 3, 3});
  Tensor w = Tensor::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(tape, x, w, Tensor{}, 1, 0, 2), std::invalid_argument);
}

TEST_CASE("conv2d is linear in its input") {
  Rng rng(13);
  Tensor x = randt(rng, {1, 2, 6, 6});
  Tensor y = randt(rng, {1, 2, 6, 6});
  Tensor w = randt(rng, {2, 2, 3, 3});
  const double a = 1.7, b = -0.6;
  Tape tape(false);
  Tensor mix = Tensor::zeros({1, 2, 6, 6});
  for (int64_t i = 0; i < mix.numel(); ++i) {
    mix.values()[i] = a * x.values()[i] + b * y.values()[i];
  }
  Tensor lhs = conv2d(tape, mix, w, Tensor{}, 1, 1, 1);
  Tensor cx = conv2d(tape, x, w, Tensor{}, 1, 1, 1);
  Tensor cy = conv2d(tape, y, w, Tensor{}, 1, 1, 1);
  for (int64_t i = 0; i < lhs.numel(); ++i) {
    CHECK(std::abs(lhs.values()[i] - (a * cx.values()[i] + b * cy.values()[i])) < 1e-6);
  }
}

TEST_CASE("conv_separable_pair: zero weights give a zero map") {
  Tape tape(false);
  Rng rng(14);
  Tensor x = randt(rng, {1, 3, 8, 8});
  SeparablePairWeights w;
  w.a_row_w = Tensor::zeros({2, 3, 1, 5});
  w.a_col_w = Tensor::zeros({1, 2, 5, 1});
  w.b_col_w = Tensor::zeros({2, 3, 5, 1});
  w.b_row_w = Tensor::zeros({1, 2, 1, 5});
  Tensor y = conv_separable_pair(tape, x, w);
  REQUIRE(y.shape() == Shape{1, 1, 8, 8});
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv_separable_pair: k=1 degenerates to a sum of two 1x1 pipelines") {
  Tape tape(false);
  Rng rng(15);
  Tensor x = randt(rng, {1, 2, 4, 4});
  SeparablePairWeights w;
  w.a_row_w = randt(rng, {2, 2, 1, 1});
  w.a_col_w = randt(rng, {1, 2, 1, 1});
  w.b_col_w = randt(rng, {2, 2, 1, 1});
  w.b_row_w = randt(rng, {1, 2, 1, 1});
  Tensor y = conv_separable_pair(tape, x, w);
  Tensor a = conv2d(tape, conv2d(tape, x, w.a_row_w, Tensor{}), w.a_col_w, Tensor{});
  Tensor b = conv2d(tape, conv2d(tape, x, w.b_col_w, Tensor{}), w.b_row_w, Tensor{});
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.values()[i] == doctest::Approx(a.values()[i] + b.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv_separable_pair: k=7 equals the explicit four-conv composition") {
  Tape tape(false);
  Rng rng(16);
  Tensor x = randt(rng, {1, 4, 16, 16});
  SeparablePairWeights w;
  w.a_row_w = randt(rng, {3, 4, 1, 7});
  w.a_col_w = randt(rng, {2, 3, 7, 1});
  w.b_col_w = randt(rng, {3, 4, 7, 1});
  w.b_row_w = randt(rng, {2, 3, 1, 7});
  Tensor y = conv_separable_pair(tape, x, w);
  REQUIRE(y.shape() == Shape{1, 2, 16, 16});

  Tensor a = conv2d(tape, x, w.a_row_w, Tensor{}, Conv2dOpts{1, 0, 3, 1});
  a = conv2d(tape, a, w.a_col_w, Tensor{}, Conv2dOpts{1, 3, 0, 1});
  Tensor b = conv2d(tape, x, w.b_col_w, Tensor{}, Conv2dOpts{1, 3, 0, 1});
  b = conv2d(tape, b, w.b_row_w, Tensor{}, Conv2dOpts{1, 0, 3, 1});
  for (int64_t i = 0; i < y.numel(); ++i) {
    CHECK(std::abs(y.values()[i] - (a.values()[i] + b.values()[i])) < 1e-9);
  }
}

TEST_CASE("conv_separable_pair rejects even kernel extents") {
  Tape tape(false);
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  SeparablePairWeights w;
  w.a_row_w = Tensor::zeros({1, 1, 1, 4});
  w.a_col_w = Tensor::zeros({1, 1, 4, 1});
  w.b_col_w = Tensor::zeros({1, 1, 4, 1});
  w.b_row_w = Tensor::zeros({1, 1, 1, 4});
  CHECK_THROWS_AS(conv_separable_pair(tape, x, w), std::invalid_argument);
}

TEST_CASE("max_pool2d: single window picks the max") {
  Tape tape(false);
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor y = max_pool2d(tape, x);
  CHECK(y.item() == 4.0);
}

TEST_CASE("max_pool2d: constant input routes gradient to the first window element") {
  Tape tape;
  Tensor x = Tensor::full({1, 1, 4, 4}, 2.5, true);
  Tensor y = max_pool2d(tape, x);
  for (double v : y.values()) CHECK(v == 2.5);
  Tensor total = sum(tape, y);
  tape.backward(total);
  const auto& g = x.grad();
  for (int h = 0; h < 4; ++h) {
    for (int w = 0; w < 4; ++w) {
      double expect = (h % 2 == 0 && w % 2 == 0) ? 1.0 : 0.0;
      CHECK(g[static_cast<size_t>(h) * 4 + w] == expect);
    }
  }
}

TEST_CASE("max_pool2d matches the nested-loop oracle") {
  Rng rng(17);
  Tensor x = randt(rng, {1, 1, 8, 8});
  Tape tape(false);
  Tensor y = max_pool2d(tape, x);
  auto ref = oracles::maxpool_ref(x.values(), 1, 1, 8, 8);
  for (size_t i = 0; i < ref.size(); ++i) CHECK(y.values()[i] == ref[i]);
}

TEST_CASE("max_pool2d rejects odd extents") {
  Tape tape(false);
  CHECK_THROWS_AS(max_pool2d(tape, Tensor::zeros({1, 1, 5, 4})), std::invalid_argument);
  CHECK_THROWS_AS(max_pool2d(tape, Tensor::zeros({1, 1, 4, 7})), std::invalid_argument);
}

TEST_CASE("bilinear_upsample2x: 1x1 input broadcasts its value") {
  Tape tape(false);
  Tensor x = Tensor::full({1, 1, 1, 1}, 3.25);
  Tensor y = bilinear_upsample2x(tape, x);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  for (double v : y.values()) CHECK(v == 3.25);
}

TEST_CASE("bilinear_upsample2x: constant field stays constant") {
  Tape tape(false);
  Tensor x = Tensor::full({2, 3, 4, 6}, -1.5);
  Tensor y = bilinear_upsample2x(tape, x);
  for (double v : y.values()) CHECK(v == doctest::Approx(-1.5).epsilon(1e-15));
}

TEST_CASE("bilinear_upsample2x matches the interpolation oracle on a 2x2 input") {
  Tape tape(false);
  Tensor x({1, 1, 2, 2}, {0, 1, 2, 3});
  Tensor y = bilinear_upsample2x(tape, x);
  auto ref = oracles::upsample2x_ref(x.values(), 2, 2);
  REQUIRE(y.numel() == 16);
  for (size_t i = 0; i < ref.size(); ++i) {
    CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("bilinear_upsample2x matches the interpolation oracle on random input") {
  Rng rng(18);
  Tensor x = randt(rng, {1, 1, 5, 7});
  Tape tape(false);
  Tensor y = bilinear_upsample2x(tape, x);
  auto ref = oracles::upsample2x_ref(x.values(), 5, 7);
  for (size_t i = 0; i < ref.size(); ++i) {
    CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("pointwise: closed-form spot checks") {
  Tape tape(false);
  Tensor z = Tensor::scalar(0.0);
  CHECK(sigmoid(tape, z).item() == doctest::Approx(0.5).epsilon(1e-15));
  Tensor a({3}, {-3.0, 0.0, 3.0});
  Tensor r = relu(tape, a);
  CHECK(r.values()[0] == 0.0);
  CHECK(r.values()[1] == 0.0);
  CHECK(r.values()[2] == 3.0);
}

TEST_CASE("pointwise: sigmoid gradient at 0 is 0.25 and matches finite differences") {
  Tape tape;
  Tensor x = Tensor::scalar(0.0, true);
  Tensor y = sigmoid(tape, x);
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));

  const double h = 1e-4;
  Tape t2(false);
  double up = sigmoid(t2, Tensor::scalar(h)).item();
  double down = sigmoid(t2, Tensor::scalar(-h)).item();
  double fd = (up - down) / (2 * h);
  CHECK(std::abs(x.grad()[0] - fd) < 1e-6);
}

TEST_CASE("pointwise: log rejects non-positive input") {
  Tape tape(false);
  CHECK_THROWS_AS(log(tape, Tensor::scalar(0.0)), std::invalid_argument);
  CHECK_THROWS_AS(log(tape, Tensor::scalar(-1.0)), std::invalid_argument);
}

TEST_CASE("batch_norm2d: training mode normalizes each channel") {
  Rng rng(19);
  Tensor x = randt(rng, {4, 3, 6, 6}, -3.0, 5.0);
  Tensor gamma = Tensor::full({3}, 1.0);
  Tensor beta = Tensor::zeros({3});
  BatchNormStats stats;
  Tape tape(false);
  Tensor y = batch_norm2d(tape, x, gamma, beta, stats, true);

  const int64_t plane = 36;
  for (int c = 0; c < 3; ++c) {
    double mean_acc = 0.0, var_acc = 0.0;
    int64_t count = 0;
    for (int n = 0; n < 4; ++n) {
      for (int64_t i = 0; i < plane; ++i) {
        mean_acc += y.values()[(static_cast<size_t>(n) * 3 + c) * plane + i];
        ++count;
      }
    }
    double m = mean_acc / count;
    for (int n = 0; n < 4; ++n) {
      for (int64_t i = 0; i < plane; ++i) {
        double d = y.values()[(static_cast<size_t>(n) * 3 + c) * plane + i] - m;
        var_acc += d * d;
      }
    }
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(var_acc / count - 1.0) < 1e-4);
  }
}

TEST_CASE("batch_norm2d: gamma=0 collapses to beta") {
  Rng rng(20);
  Tensor x = randt(rng, {2, 2, 4, 4});
  Tensor gamma = Tensor::zeros({2});
  Tensor beta({2}, {0.7, -0.3});
  BatchNormStats stats;
  Tape tape(false);
  Tensor y = batch_norm2d(tape, x, gamma, beta, stats, true);
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < 16; ++i) {
        CHECK(y.values()[(static_cast<size_t>(n) * 2 + c) * 16 + i] == beta.values()[c]);
      }
    }
  }
}

TEST_CASE("batch_norm2d: training updates running stats with momentum 0.1") {
  Rng rng(25);
  Tensor x = randt(rng, {2, 1, 4, 4}, 1.0, 3.0);
  Tensor gamma = Tensor::full({1}, 1.0);
  Tensor beta = Tensor::zeros({1});
  BatchNormStats stats;
  stats.running_mean = {0.5};
  stats.running_var = {2.0};
  Tape tape(false);
  batch_norm2d(tape, x, gamma, beta, stats, true);

  double mu = 0.0;
  for (double v : x.values()) mu += v;
  mu /= 32.0;
  double var = 0.0;
  for (double v : x.values()) var += (v - mu) * (v - mu);
  var /= 32.0;
  CHECK(stats.running_mean[0] == doctest::Approx(0.9 * 0.5 + 0.1 * mu).epsilon(1e-12));
  CHECK(stats.running_var[0] == doctest::Approx(0.9 * 2.0 + 0.1 * var).epsilon(1e-12));
}

TEST_CASE("batch_norm2d: eval mode equals the closed form with stored stats") {
  Rng rng(21);
  Tensor x = randt(rng, {2, 2, 3, 3}, -2.0, 2.0);
  Tensor gamma({2}, {1.3, 0.8});
  Tensor beta({2}, {0.1, -0.4});
  BatchNormStats stats;
  stats.running_mean = {0.25, -0.5};
  stats.running_var = {1.5, 0.7};
  Tape tape(false);
  Tensor y = batch_norm2d(tape, x, gamma, beta, stats, false);
  const double eps = 1e-5;
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 2; ++c) {
      for (int i = 0; i < 9; ++i) {
        size_t off = (static_cast<size_t>(n) * 2 + c) * 9 + i;
        double expect = (x.values()[off] - stats.running_mean[c]) /
                            std::sqrt(stats.running_var[c] + eps) * gamma.values()[c] +
                        beta.values()[c];
        CHECK(y.values()[off] == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("backward: sum of weights gives unit gradients") {
  Tape tape;
  Tensor w = Tensor::full({5}, 2.0, true);
  Tensor s = sum(tape, w);
  tape.backward(s);
  for (double g : w.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward: d(w^2)/dw at w=3 is 6") {
  Tape tape;
  Tensor w = Tensor::scalar(3.0, true);
  Tensor y = mul(tape, w, w);
  tape.backward(y);
  CHECK(w.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("backward: rejected for non-scalar losses") {
  Tape tape;
  Tensor w = Tensor::full({3}, 1.0, true);
  Tensor y = mul_scalar(tape, w, 2.0);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: repeated calls without zeroing accumulate") {
  Tape tape;
  Tensor w = Tensor::scalar(3.0, true);
  Tensor y = mul(tape, w, w);
  tape.backward(y);
  tape.backward(y);
  CHECK(w.grad()[0] == doctest::Approx(12.0).epsilon(1e-15));
}

TEST_CASE("backward: composite conv graph passes a finite-difference sweep") {
  Rng rng(22);
  Tensor x = randt(rng, {1, 1, 6, 6}, -1.0, 1.0, true);
  Tensor w1 = randt(rng, {2, 1, 3, 3}, -0.5, 0.5, true);
  Tensor b1 = randt(rng, {2}, -0.2, 0.2, true);
  auto res = check_gradients(
      "composite",
      [](Tape& tape, std::vector<Tensor>& leaves) {
        Tensor h = relu(tape, conv2d(tape, leaves[0], leaves[1], leaves[2], 1, 1, 1));
        return sum(tape, h);
      },
      {x, w1, b1});
  CHECK(res.pass);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("determinism: identical seeds give bitwise-identical forward and grads") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    Tensor x = randt(rng, {2, 2, 8, 8}, -1, 1, true);
    Tensor w = randt(rng, {2, 2, 3, 3}, -1, 1, true);
    Tape tape;
    Tensor y = mean(tape, relu(tape, conv2d(tape, x, w, Tensor{}, 1, 1, 1)));
    tape.backward(y);
    return std::make_pair(y.item(), w.grad());
  };
  auto [v1, g1] = run(99);
  auto [v2, g2] = run(99);
  CHECK(v1 == v2);
  REQUIRE(g1.size() == g2.size());
  for (size_t i = 0; i < g1.size(); ++i) CHECK(g1[i] == g2[i]);
}

TEST_CASE("thread count does not change conv results") {
  Rng rng(23);
  Tensor x = randt(rng, {4, 3, 16, 16});
  Tensor w = randt(rng, {5, 3, 3, 3});
  Tensor b = randt(rng, {5});
  Tape tape(false);
  set_num_threads(1);
  Tensor y1 = conv2d(tape, x, w, b, 1, 1, 1);
  set_num_threads(4);
  Tensor y4 = conv2d(tape, x, w, b, 1, 1, 1);
  set_num_threads(1);
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.values()[i] == y4.values()[i]);
}

TEST_CASE("shape algebra: four pools then four upsamples restore spatial shape") {
  Rng rng(24);
  for (auto [h, w] : {std::pair{16, 16}, std::pair{64, 32}, std::pair{48, 80}}) {
    Tensor x = randt(rng, {1, 1, h, w});
    Tape tape(false);
    Tensor t = x;
    for (int i = 0; i < 4; ++i) t = max_pool2d(tape, t);
    for (int i = 0; i < 4; ++i) t = bilinear_upsample2x(tape, t);
    CHECK(t.shape() == x.shape());
  }
}

TEST_CASE("gradcheck suite: every op and loss passes at reduced trial count") {
  auto results = run_gradcheck_suite(1234, 3);
  REQUIRE(!results.empty());
  for (const auto& r : results) {
    INFO(r.name, " max_rel_err=", r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("gradcheck suite: broken-gradient fixture is caught") {
  auto results = run_gradcheck_suite(1234, 1, {"fixture"}, true);
  bool found = false;
  for (const auto& r : results) {
    if (r.name == "fixture.broken_gradient") {
      found = true;
      CHECK(!r.pass);
    }
  }
  CHECK(found);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>

#include "segkit/nets.hpp"
#include "segkit/rng.hpp"

using namespace segkit;

namespace {

Tensor randt(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

ModelSpec micro_spec(Family family = Family::unet, int depth = 2, int width = 4) {
  ModelSpec s;
  s.family = family;
  s.depth = depth;
  s.base_width = width;
  s.batch_norm = false;
  if (s.uses_gcn()) s.gcn_kernel = 5;
  if (family == Family::dilated_unet && depth != 4) s.dilation_scheme.assign(depth, 2);
  return s;
}

}  // namespace

TEST_CASE("build: doubling base width doubles every conv channel extent") {
  ModelSpec a = micro_spec(Family::unet, 4, 32);
  ModelSpec b = a;
  b.base_width = 64;
  Model ma = Model::build(a, 1);
  Model mb = Model::build(b, 1);
  REQUIRE(ma.parameters().size() == mb.parameters().size());
  for (size_t i = 0; i < ma.parameters().size(); ++i) {
    const auto& [name_a, ta] = ma.parameters()[i];
    const auto& [name_b, tb] = mb.parameters()[i];
    CHECK(name_a == name_b);
    if (ta.ndim() == 4) {
      // conv weights: O and C double (except the fixed image/score channels)
      int oa = ta.dim(0), ob = tb.dim(0);
      int ca = ta.dim(1), cb = tb.dim(1);
      CHECK((ob == 2 * oa || oa == 1));
      CHECK((cb == 2 * ca || ca == 1));
      CHECK(ta.dim(2) == tb.dim(2));
      CHECK(ta.dim(3) == tb.dim(3));
    }
  }
}

TEST_CASE("build: width_multiplier 2 equals doubling base width") {
  ModelSpec a = micro_spec(Family::unet, 3, 8);
  a.width_multiplier = 2;
  ModelSpec b = micro_spec(Family::unet, 3, 16);
  Model ma = Model::build(a, 7);
  Model mb = Model::build(b, 7);
  CHECK(ma.parameter_count() == mb.parameter_count());
  for (size_t i = 0; i < ma.parameters().size(); ++i) {
    CHECK(ma.parameters()[i].second.shape() == mb.parameters()[i].second.shape());
  }
}

TEST_CASE("build: identical seeds give identical parameters") {
  ModelSpec s = micro_spec(Family::unet, 2, 4);
  Model a = Model::build(s, 42);
  Model b = Model::build(s, 42);
  Model c = Model::build(s, 43);
  REQUIRE(a.parameters().size() == b.parameters().size());
  bool any_diff_c = false;
  for (size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i].second.values() == b.parameters()[i].second.values());
    if (a.parameters()[i].second.values() != c.parameters()[i].second.values()) any_diff_c = true;
  }
  CHECK(any_diff_c);
}

TEST_CASE("build: depth-1 base-1 parameter count matches the hand count") {
  // enc0: conv1 1->1 (9+1) + conv2 1->1 (9+1)            = 20
  // bottleneck: conv1 1->2 (18+2) + conv2 2->2 (36+2)    = 58
  // dec0: conv1 3->1 (27+1) + conv2 1->1 (9+1)           = 38
  // head: 1x1 1->1 (1+1)                                 = 2
  ModelSpec s;
  s.family = Family::unet;
  s.depth = 1;
  s.base_width = 1;
  s.batch_norm = false;
  CHECK(Model::build(s, 1).parameter_count() == 118);

  // batch norm adds gamma+beta per conv output: 2+2 (enc) + 4+4 (bottleneck)
  // + 2+2 (dec) = 16
  s.batch_norm = true;
  CHECK(Model::build(s, 1).parameter_count() == 134);
}

TEST_CASE("build: invalid family/kernel combinations are rejected") {
  ModelSpec s = micro_spec(Family::unet_gcn_head);
  s.gcn_kernel = 0;
  CHECK_THROWS_AS(Model::build(s, 1), std::invalid_argument);
  s.gcn_kernel = 6;
  CHECK_THROWS_AS(Model::build(s, 1), std::invalid_argument);

  ModelSpec p = micro_spec(Family::unet);
  p.gcn_kernel = 9;
  CHECK_THROWS_AS(Model::build(p, 1), std::invalid_argument);

  ModelSpec d = micro_spec(Family::dilated_unet, 3, 4);
  d.dilation_scheme = {2, 2};  // wrong length
  CHECK_THROWS_AS(Model::build(d, 1), std::invalid_argument);

  ModelSpec w = micro_spec(Family::unet);
  w.width_multiplier = 3;
  CHECK_THROWS_AS(Model::build(w, 1), std::invalid_argument);
}

TEST_CASE("dilated_unet and unet have identical parameter counts") {
  ModelSpec u = micro_spec(Family::unet, 4, 8);
  ModelSpec d = micro_spec(Family::dilated_unet, 4, 8);
  Model mu = Model::build(u, 5);
  Model md = Model::build(d, 5);
  CHECK(mu.parameter_count() == md.parameter_count());
  // same seed, same draw order: identical values too
  for (size_t i = 0; i < mu.parameters().size(); ++i) {
    CHECK(mu.parameters()[i].second.values() == md.parameters()[i].second.values());
  }
}

TEST_CASE("gcn_block: receptive field is exactly k x k") {
  Rng rng(61);
  const int k = 5, half = 2;
  GcnParams p;
  p.k = k;
  p.w.a_row_w = randt(rng, {1, 2, 1, k});
  p.w.a_col_w = randt(rng, {1, 1, k, 1});
  p.w.b_col_w = randt(rng, {1, 2, k, 1});
  p.w.b_row_w = randt(rng, {1, 1, 1, k});

  Tensor x = randt(rng, {1, 2, 16, 16});
  Tape tape(false);
  Tensor base = gcn_block(tape, x, p);
  const int oy = 8, ox = 8;
  double center = base.at({0, 0, oy, ox});

  auto probe = [&](int py, int px) {
    Tensor x2(x.shape(), x.values());
    x2.at({0, 1, py, px}) += 0.77;
    Tensor out = gcn_block(tape, x2, p);
    return out.at({0, 0, oy, ox});
  };
  // outside the k x k neighborhood: unchanged
  CHECK(probe(oy, ox + half + 1) == center);
  CHECK(probe(oy + half + 1, ox) == center);
  CHECK(probe(oy - half - 1, ox - half - 1) == center);
  // inside (including the corner of the k x k box): changed
  CHECK(probe(oy, ox + half) != center);
  CHECK(probe(oy + half, ox + half) != center);
}

TEST_CASE("br_block: zero residual weights give the exact identity") {
  Rng rng(62);
  BrParams p;
  p.c1.w = Tensor::zeros({1, 1, 3, 3}, true);
  p.c1.b = Tensor::zeros({1}, true);
  p.c2.w = Tensor::zeros({1, 1, 3, 3}, true);
  p.c2.b = Tensor::zeros({1}, true);
  Tensor x = randt(rng, {1, 1, 8, 8});
  Tape tape(false);
  Tensor y = br_block(tape, x, p);
  CHECK(y.values() == x.values());
}

TEST_CASE("br_block: affine with zero biases, and matches explicit composition") {
  Rng rng(63);
  BrParams p;
  p.c1.w = randt(rng, {1, 1, 3, 3});
  p.c1.b = Tensor::zeros({1});
  p.c2.w = randt(rng, {1, 1, 3, 3});
  p.c2.b = Tensor::zeros({1});
  Tensor x = randt(rng, {1, 1, 8, 8});
  Tape tape(false);

  Tensor y = br_block(tape, x, p);
  // linearity in the input
  Tensor xs = Tensor::zeros({1, 1, 8, 8});
  for (int i = 0; i < 64; ++i) xs.values()[i] = 2.5 * x.values()[i];
  Tensor ys = br_block(tape, xs, p);
  for (int i = 0; i < 64; ++i) {
    CHECK(ys.values()[i] == doctest::Approx(2.5 * y.values()[i]).epsilon(1e-9));
  }

  // explicit conv2d composition plus input
  Tensor r = conv2d(tape, conv2d(tape, x, p.c1.w, p.c1.b, 1, 1, 1), p.c2.w, p.c2.b, 1, 1, 1);
  for (int i = 0; i < 64; ++i) {
    CHECK(y.values()[i] == doctest::Approx(x.values()[i] + r.values()[i]).epsilon(1e-12));
  }
}

TEST_CASE("forward: probabilities strictly inside (0,1), shape preserved") {
  Rng rng(64);
  for (Family fam :
       {Family::unet, Family::dilated_unet, Family::unet_gcn_head, Family::gcn_unet}) {
    ModelSpec s = micro_spec(fam, fam == Family::dilated_unet ? 4 : 2, 2);
    if (fam == Family::dilated_unet) s.dilation_scheme.clear();  // default 2,2,2,4
    Model m = Model::build(s, 11);
    int factor = 1 << s.depth;
    int hw = factor * 4;
    Tensor x = randt(rng, {1, 1, hw, hw}, 0.0, 1.0);
    Tape tape(false);
    Tensor p = m.forward(tape, x);
    CHECK(p.shape() == Shape{1, 1, hw, hw});
    for (double v : p.values()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
}

TEST_CASE("forward: 64x64 through the default depth-4 unet keeps its shape") {
  ModelSpec s = micro_spec(Family::unet, 4, 2);
  s.batch_norm = true;
  Model m = Model::build(s, 3);
  Rng rng(65);
  Tensor x = randt(rng, {2, 1, 64, 64}, 0.0, 1.0);
  Tape tape(false);
  CHECK(m.forward(tape, x, true).shape() == Shape{2, 1, 64, 64});
}

TEST_CASE("forward: indivisible extents are rejected with a padding hint") {
  ModelSpec s = micro_spec(Family::unet, 4, 2);
  Model m = Model::build(s, 3);
  Tape tape(false);
  try {
    m.forward(tape, Tensor::zeros({1, 1, 60, 64}));
    FAIL("expected a shape error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("divisible by 16") != std::string::npos);
    CHECK(msg.find("pad") != std::string::npos);
  }
}

TEST_CASE("forward: the gcn head diverges from plain unet only downstream of the head") {
  ModelSpec su = micro_spec(Family::unet, 2, 4);
  ModelSpec sg = micro_spec(Family::unet_gcn_head, 2, 4);
  sg.gcn_kernel = 9;
  Model mu = Model::build(su, 21);
  Model mg = Model::build(sg, 21);

  Rng rng(66);
  Tensor x = randt(rng, {1, 1, 32, 32}, 0.0, 1.0);
  Tape tape(false);
  auto ru = mu.forward_with_features(tape, x);
  auto rg = mg.forward_with_features(tape, x);

  // identical trunk: the pre-head feature maps agree bitwise
  CHECK(ru.features.values() == rg.features.values());
  // the heads differ
  bool differs = false;
  for (int64_t i = 0; i < ru.prob.numel(); ++i) {
    if (ru.prob.values()[i] != rg.prob.values()[i]) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("forward: translation covariance on the interior") {
  ModelSpec s = micro_spec(Family::unet, 2, 3);
  Model m = Model::build(s, 9);
  const int H = 80, W = 96, shift = 1 << s.depth, margin = 32;
  Rng rng(67);
  Tensor x = randt(rng, {1, 1, H, W}, 0.0, 1.0);
  Tensor xs = Tensor::zeros({1, 1, H, W});
  for (int r = 0; r + shift < H; ++r) {
    for (int c = 0; c < W; ++c) {
      xs.values()[static_cast<size_t>(r + shift) * W + c] =
          x.values()[static_cast<size_t>(r) * W + c];
    }
  }
  Tape tape(false);
  Tensor y = m.forward(tape, x);
  Tensor ys = m.forward(tape, xs);
  for (int r = margin; r < H - margin - shift; ++r) {
    for (int c = margin; c < W - margin; ++c) {
      double a = y.values()[static_cast<size_t>(r) * W + c];
      double b = ys.values()[static_cast<size_t>(r + shift) * W + c];
      CHECK(std::abs(a - b) < 1e-4);
    }
  }
}

TEST_CASE("gcn variants preserve output shape on assorted valid inputs") {
  Rng rng(68);
  ModelSpec a = micro_spec(Family::gcn_unet, 3, 2);
  a.gcn_kernel = 7;
  ModelSpec b = micro_spec(Family::unet_gcn_head, 2, 2);
  b.gcn_kernel = 15;
  Model ma = Model::build(a, 1);
  Model mb = Model::build(b, 1);
  Tape tape(false);
  for (auto [h, w] : {std::pair{32, 32}, std::pair{64, 32}, std::pair{32, 64}}) {
    Tensor x = randt(rng, {1, 1, h, w}, 0.0, 1.0);
    CHECK(ma.forward(tape, x).shape() == Shape{1, 1, h, w});
    CHECK(mb.forward(tape, x).shape() == Shape{1, 1, h, w});
  }
}

TEST_CASE("separate models on separate threads match serial execution") {
  ModelSpec s = micro_spec(Family::unet, 2, 3);
  Model a = Model::build(s, 100);
  Model b = Model::build(s, 200);
  Rng rng(70);
  Tensor xa = randt(rng, {1, 1, 32, 32}, 0.0, 1.0);
  Tensor xb = randt(rng, {1, 1, 32, 32}, 0.0, 1.0);

  Tape ts(false);
  std::vector<double> serial_a = a.forward(ts, xa).values();
  std::vector<double> serial_b = b.forward(ts, xb).values();

  std::vector<double> conc_a, conc_b;
  std::thread ta([&]() {
    Tape t(false);
    conc_a = a.forward(t, xa).values();
  });
  std::thread tb([&]() {
    Tape t(false);
    conc_b = b.forward(t, xb).values();
  });
  ta.join();
  tb.join();
  CHECK(conc_a == serial_a);
  CHECK(conc_b == serial_b);
}

TEST_CASE("model gradients flow to every parameter") {
  ModelSpec s = micro_spec(Family::unet, 2, 2);
  s.batch_norm = true;
  Model m = Model::build(s, 2);
  Rng rng(69);
  Tensor x = randt(rng, {2, 1, 16, 16}, 0.0, 1.0);
  Tape tape;
  Tensor p = m.forward(tape, x, true);
  Tensor loss = mean(tape, p);
  tape.backward(loss);
  for (auto& [name, t] : m.parameters()) {
    INFO(name);
    REQUIRE(t.has_grad());
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
}

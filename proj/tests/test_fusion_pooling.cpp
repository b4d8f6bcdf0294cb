#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "sermtl/fusion.hpp"
#include "sermtl/gradcheck.hpp"
#include "sermtl/pooling.hpp"
#include "sermtl/rng.hpp"
#include "test_util.hpp"

using namespace sermtl;
using testutil::max_abs_diff;
using testutil::rand_tensor;

namespace {

LayerStack two_layer_stack() {
  // H0 = [[1,2]], H1 = [[3,4]]
  return LayerStack(Tensor({2, 1, 2}, {1, 2, 3, 4}));
}

}  // namespace

TEST_CASE("fuse_layers: worked examples") {
  SUBCASE("zero logits give the uniform average") {
    Tensor out = fuse_layers(two_layer_stack(), FusionParams::uniform(2));
    CHECK(out(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx(3.0).epsilon(1e-12));
  }
  SUBCASE("logits [0, ln 3] weight the layers (0.25, 0.75)") {
    // direct softmax: (1, 3) / 4
    const double w1 = 1.0 / 4.0, w2 = 3.0 / 4.0;
    const double e0 = w1 * 1 + w2 * 3, e1 = w1 * 2 + w2 * 4;
    FusionParams p{Tensor::row({0.0, std::log(3.0)})};
    Tensor out = fuse_layers(two_layer_stack(), p);
    CHECK(out(0, 0) == doctest::Approx(e0).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx(e1).epsilon(1e-12));
    CHECK(e0 == doctest::Approx(2.5));
    CHECK(e1 == doctest::Approx(3.5));
  }
  SUBCASE("logit margin 40 selects a single layer to 1e-12") {
    FusionParams p{Tensor::row({0.0, 40.0})};
    Tensor out = fuse_layers(two_layer_stack(), p);
    CHECK(std::abs(out(0, 0) - 3.0) <= 1e-12);
    CHECK(std::abs(out(0, 1) - 4.0) <= 1e-12);
  }
  SUBCASE("logit length mismatch") {
    Tape t;
    Var s = t.constant(two_layer_stack().layers);
    Var logits = t.constant(Tensor::row({0, 0, 0}));
    CHECK_THROWS_AS(fuse_layers(t, s, logits), ShapeError);
  }
}

TEST_CASE("select_last") {
  SUBCASE("single layer returns it unchanged") {
    LayerStack s(Tensor({1, 2, 2}, {1, 2, 3, 4}));
    Tensor out = select_last(s);
    CHECK(out(1, 1) == 4.0);
  }
  SUBCASE("three distinct layers: index 2 comes back") {
    LayerStack s(Tensor({3, 1, 1}, {10, 20, 30}));
    CHECK(select_last(s)(0, 0) == 30.0);
  }
  SUBCASE("one-hot fusion equals select_last within 1e-12") {
    auto eng = make_engine(9);
    LayerStack s(rand_tensor({3, 4, 5}, -2, 2, eng));
    FusionParams p{Tensor::row({0, 0, 40})};
    CHECK(max_abs_diff(fuse_layers(s, p), select_last(s)) <= 1e-12);
  }
}

TEST_CASE("fusion properties") {
  auto eng = make_engine(17);
  SUBCASE("weights form a probability vector") {
    Tape t;
    Var logits = t.leaf(rand_tensor({5}, -3, 3, eng));
    const Tensor& w = t.val(t.softmax(logits, 0));
    double sum = 0.0;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      CHECK(w[i] > 0.0);
      sum += w[i];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
  SUBCASE("permutation equivariance") {
    const std::size_t L = 4, T = 3, D = 2;
    Tensor stack = rand_tensor({L, T, D}, -2, 2, eng);
    Tensor logits = rand_tensor({L}, -1, 1, eng);
    Tensor base = fuse_layers(LayerStack(stack), FusionParams{logits});

    std::vector<std::size_t> perm = {2, 0, 3, 1};
    Tensor pstack({L, T, D});
    Tensor plogits({L});
    for (std::size_t l = 0; l < L; ++l) {
      plogits[l] = logits[perm[l]];
      for (std::size_t i = 0; i < T * D; ++i) {
        pstack.data()[l * T * D + i] = stack.data()[perm[l] * T * D + i];
      }
    }
    Tensor permuted = fuse_layers(LayerStack(pstack), FusionParams{plogits});
    CHECK(max_abs_diff(base, permuted) <= 1e-12);
  }
  SUBCASE("gradient w.r.t. layer logits passes finite differences") {
    GradCheckReport r = finite_diff_check(
        "fuse_layers",
        [](Tape& t, const std::vector<Var>& v) {
          return fuse_layers(t, v[0], v[1]);
        },
        {rand_tensor({3, 2, 3}, -1, 1, eng), rand_tensor({3}, -1, 1, eng)},
        1e-4);
    CHECK(r.passed);
  }
}

TEST_CASE("attentive statistics pooling: worked examples") {
  SUBCASE("zero scorer weights reduce to plain mean and population std") {
    const double eps = 1e-6;
    PoolingParams p;
    p.w_att = Tensor::zeros({2, 1});
    p.b_att = Tensor::zeros({1});
    p.v_att = Tensor::row({0.7});
    p.eps = eps;
    Tensor seq = Tensor::matrix(2, 2, {1, 1, 3, 3});
    Tensor out = attentive_stats_pool(seq, p);
    CHECK(out.numel() == 4);
    CHECK(out[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(std::sqrt(1.0 + eps)).epsilon(1e-12));
    CHECK(out[3] == doctest::Approx(std::sqrt(1.0 + eps)).epsilon(1e-12));
  }
  SUBCASE("constant sequence floors the std at sqrt(eps)") {
    const double eps = 1e-6;
    PoolingParams p;
    p.w_att = Tensor::zeros({2, 1});
    p.b_att = Tensor::zeros({1});
    p.v_att = Tensor::row({1.0});
    p.eps = eps;
    Tensor seq = Tensor::matrix(2, 2, {5, 5, 5, 5});
    Tensor out = attentive_stats_pool(seq, p);
    CHECK(out[0] == doctest::Approx(5.0));
    CHECK(out[2] == doctest::Approx(std::sqrt(eps)).epsilon(1e-12));
  }
  SUBCASE("explicit logits (0, 0, ln 2): weighted moments by hand") {
    // alpha = (0.25, 0.25, 0.5); mu = 2.75; second moment 9.25
    const double eps = 1e-6;
    const double a0 = 0.25, a1 = 0.25, a2 = 0.5;
    const double mu = a0 * 1 + a1 * 2 + a2 * 4;
    const double m2 = a0 * 1 + a1 * 4 + a2 * 16;
    const double sigma = std::sqrt(m2 - mu * mu + eps);
    CHECK(mu == doctest::Approx(2.75));
    CHECK(m2 - mu * mu == doctest::Approx(1.6875));

    Tape t;
    Var seq = t.constant(Tensor::matrix(3, 1, {1, 2, 4}));
    Var logits = t.constant(Tensor::row({0.0, 0.0, std::log(2.0)}));
    const Tensor& out = t.val(weighted_stats_pool(t, seq, logits, eps));
    CHECK(out[0] == doctest::Approx(mu).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(sigma).epsilon(1e-12));
  }
  SUBCASE("empty sequence errors") {
    Tape t;
    Var seq = t.constant(Tensor({0, 2}));
    Var logits = t.constant(Tensor({0}));
    CHECK_THROWS_AS(weighted_stats_pool(t, seq, logits, 1e-6), ShapeError);
  }
}

TEST_CASE("pooling properties") {
  auto eng = make_engine(23);
  const std::size_t T = 5, D = 3;
  PoolingParams p;
  p.w_att = rand_tensor({D, 2}, -1, 1, eng);
  p.b_att = rand_tensor({2}, -0.5, 0.5, eng);
  p.v_att = rand_tensor({2}, -1, 1, eng);
  p.eps = 1e-6;

  for (int trial = 0; trial < 20; ++trial) {
    Tensor seq = rand_tensor({T, D}, -2, 2, eng);
    Tensor out = attentive_stats_pool(seq, p);
    for (std::size_t d = 0; d < D; ++d) {
      double lo = seq(0, d), hi = seq(0, d);
      for (std::size_t t = 1; t < T; ++t) {
        lo = std::min(lo, seq(t, d));
        hi = std::max(hi, seq(t, d));
      }
      CHECK(out[d] >= lo - 1e-12);       // mu inside the frame hull
      CHECK(out[d] <= hi + 1e-12);
      CHECK(out[D + d] >= std::sqrt(p.eps) - 1e-15);  // sigma floor
    }
  }

  SUBCASE("frame permutation invariance") {
    Tensor seq = rand_tensor({T, D}, -2, 2, eng);
    Tensor perm({T, D});
    const std::size_t order[T] = {3, 0, 4, 1, 2};
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t d = 0; d < D; ++d) perm(t, d) = seq(order[t], d);
    }
    CHECK(max_abs_diff(attentive_stats_pool(seq, p),
                       attentive_stats_pool(perm, p)) <= 1e-12);
  }

  SUBCASE("gradients pass finite differences") {
    GradCheckReport r = finite_diff_check(
        "attentive_stats_pool",
        [](Tape& t, const std::vector<Var>& v) {
          return attentive_stats_pool(t, v[0], v[1], v[2], v[3], 1e-6);
        },
        {rand_tensor({4, 3}, -1, 1, eng), rand_tensor({3, 2}, -1, 1, eng),
         rand_tensor({2}, -0.5, 0.5, eng), rand_tensor({2}, -1, 1, eng)},
        1e-4);
    CHECK(r.passed);
  }
}

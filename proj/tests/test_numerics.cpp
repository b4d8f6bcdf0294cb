#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sermtl/gradcheck.hpp"
#include "sermtl/kernels.hpp"
#include "sermtl/rng.hpp"
#include "sermtl/tape.hpp"
#include "test_util.hpp"

using namespace sermtl;
using testutil::bitwise_equal;
using testutil::rand_tensor;

namespace {

// Independent oracle: plain triple-loop matrix product.
Tensor matmul_oracle(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c(i, j) += a(i, p) * b(p, j);
  return c;
}

// Independent oracle: direct exp/normalize, no max subtraction.
std::vector<double> softmax_oracle(const std::vector<double>& x) {
  double z = 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) z += std::exp(x[i]);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]) / z;
  return out;
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS_AS(Tensor({2}, {1.0, 2.0}).item(), ShapeError);
  Tensor nan = Tensor::scalar(std::nan(""));
  CHECK_FALSE(nan.all_finite());
}

TEST_CASE("matmul kernels: serial and OpenMP agree bitwise") {
  auto eng = make_engine(7);
  for (auto [m, k, n] : {std::tuple<int, int, int>{3, 4, 5},
                         {17, 33, 9},
                         {64, 48, 32},
                         {1, 1, 1}}) {
    Tensor a = rand_tensor({std::size_t(m), std::size_t(k)}, -2, 2, eng);
    Tensor b = rand_tensor({std::size_t(k), std::size_t(n)}, -2, 2, eng);
    Tensor c1({std::size_t(m), std::size_t(n)});
    Tensor c2 = c1;
    kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n);
    kernels::matmul_omp(a.data(), b.data(), c2.data(), m, k, n);
    CHECK(bitwise_equal(c1, c2));

    Tensor d1({std::size_t(m), std::size_t(n)});
    Tensor d2 = d1;
    Tensor bt = rand_tensor({std::size_t(n), std::size_t(k)}, -2, 2, eng);
    kernels::matmul_nt_serial(a.data(), bt.data(), d1.data(), m, k, n);
    kernels::matmul_nt_omp(a.data(), bt.data(), d2.data(), m, k, n);
    CHECK(bitwise_equal(d1, d2));

    Tensor at = rand_tensor({std::size_t(k), std::size_t(m)}, -2, 2, eng);
    Tensor e1({std::size_t(m), std::size_t(n)});
    Tensor e2 = e1;
    kernels::matmul_tn_serial(at.data(), b.data(), e1.data(), m, k, n);
    kernels::matmul_tn_omp(at.data(), b.data(), e2.data(), m, k, n);
    CHECK(bitwise_equal(e1, e2));
  }
}

TEST_CASE("affine: worked examples") {
  Tape t;
  SUBCASE("identity weights") {
    Var x = t.constant(Tensor::matrix(1, 2, {1, 2}));
    Var w = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    Var b = t.constant(Tensor::row({0, 0}));
    const Tensor& out = t.val(t.affine(x, w, b));
    CHECK(out(0, 0) == 1.0);
    CHECK(out(0, 1) == 2.0);
  }
  SUBCASE("zero weights pass the bias through") {
    Var x = t.constant(Tensor::matrix(1, 2, {1, 2}));
    Var w = t.constant(Tensor::matrix(2, 2, {0, 0, 0, 0}));
    Var b = t.constant(Tensor::row({3, 4}));
    const Tensor& out = t.val(t.affine(x, w, b));
    CHECK(out(0, 0) == 3.0);
    CHECK(out(0, 1) == 4.0);
  }
  SUBCASE("general case matches the direct-arithmetic oracle") {
    // x=[[1,2]], W=[[1,2],[3,4]], b=[1,1] -> [[8,11]]
    Tensor x = Tensor::matrix(1, 2, {1, 2});
    Tensor w = Tensor::matrix(2, 2, {1, 2, 3, 4});
    Tensor expected = matmul_oracle(x, w);
    expected(0, 0) += 1.0;
    expected(0, 1) += 1.0;
    CHECK(expected(0, 0) == 8.0);
    CHECK(expected(0, 1) == 11.0);
    Var out = t.affine(t.constant(x), t.constant(w),
                       t.constant(Tensor::row({1, 1})));
    CHECK(bitwise_equal(t.val(out), expected));
  }
  SUBCASE("shape mismatch") {
    Var x = t.constant(Tensor::matrix(1, 3, {1, 2, 3}));
    Var w = t.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    Var b = t.constant(Tensor::row({0, 0}));
    CHECK_THROWS_AS(t.affine(x, w, b), ShapeError);
  }
}

TEST_CASE("softmax: examples and stability") {
  Tape t;
  SUBCASE("symmetry") {
    const Tensor& out = t.val(t.softmax(t.constant(Tensor::row({0, 0})), 0));
    CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("no overflow at |x|=1000") {
    const Tensor& out =
        t.val(t.softmax(t.constant(Tensor::row({1000, 0})), 0));
    CHECK(out.all_finite());
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("matches the direct exp/normalize oracle") {
    const std::vector<double> x = {0.3, -0.2, 0.9};
    const std::vector<double> expected = softmax_oracle(x);
    CHECK(expected[0] == doctest::Approx(0.2917).epsilon(1e-3));
    CHECK(expected[1] == doctest::Approx(0.1769).epsilon(1e-3));
    CHECK(expected[2] == doctest::Approx(0.5314).epsilon(1e-3));
    const Tensor& out = t.val(t.softmax(t.constant(Tensor::row(x)), 0));
    for (int i = 0; i < 3; ++i) {
      CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-9));
    }
  }
  SUBCASE("sums to one up to |x| = 1e4") {
    auto eng = make_engine(3);
    for (double scale : {1.0, 100.0, 1e4}) {
      Tensor x = rand_tensor({7}, -scale, scale, eng);
      const Tensor& out = t.val(t.softmax(t.constant(x), 0));
      double sum = 0.0;
      for (std::size_t i = 0; i < out.numel(); ++i) {
        CHECK(out[i] >= 0.0);  // may underflow to 0 when the spread > ~745
        sum += out[i];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    // strictly positive whenever exp(x - max) stays representable
    Tensor x = rand_tensor({7}, -300.0, 300.0, eng);
    const Tensor& out = t.val(t.softmax(t.constant(x), 0));
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] > 0.0);
  }
  SUBCASE("shift invariance") {
    auto eng = make_engine(4);
    Tensor x = rand_tensor({6}, -3, 3, eng);
    Tensor shifted = x;
    for (std::size_t i = 0; i < x.numel(); ++i) shifted[i] += 17.5;
    const Tensor& a = t.val(t.softmax(t.constant(x), 0));
    const Tensor& b = t.val(t.softmax(t.constant(shifted), 0));
    CHECK(testutil::max_abs_diff(a, b) <= 1e-12);
  }
  SUBCASE("empty axis errors") {
    CHECK_THROWS_AS(t.softmax(t.constant(Tensor({0})), 0), ShapeError);
  }
  SUBCASE("row softmax on axis 1") {
    Tensor x = Tensor::matrix(2, 2, {0, 0, 1000, 0});
    const Tensor& out = t.val(t.softmax(t.constant(x), 1));
    CHECK(out(0, 0) == doctest::Approx(0.5));
    CHECK(out(1, 0) == doctest::Approx(1.0));
  }
}

TEST_CASE("layer_norm: examples") {
  Tape t;
  SUBCASE("constant row maps to bias") {
    Var x = t.constant(Tensor::matrix(1, 2, {2, 2}));
    Var g = t.constant(Tensor::row({1, 1}));
    Var b = t.constant(Tensor::row({0, 0}));
    const Tensor& out = t.val(t.layer_norm(x, g, b, 1e-5));
    CHECK(out(0, 0) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(out(0, 1) == doctest::Approx(0.0).epsilon(1e-9));
  }
  SUBCASE("row [1,3]: mean 2, population variance 1") {
    Var x = t.constant(Tensor::matrix(1, 2, {1, 3}));
    Var g = t.constant(Tensor::row({1, 1}));
    Var b = t.constant(Tensor::row({0, 0}));
    const Tensor& out = t.val(t.layer_norm(x, g, b, 1e-12));
    CHECK(out(0, 0) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(out(0, 1) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("zero gain maps anything to the bias") {
    auto eng = make_engine(5);
    Var x = t.constant(rand_tensor({3, 2}, -5, 5, eng));
    Var g = t.constant(Tensor::row({0, 0}));
    Var b = t.constant(Tensor::row({5, 5}));
    const Tensor& out = t.val(t.layer_norm(x, g, b, 1e-5));
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 5.0);
  }
}

TEST_CASE("ops are deterministic") {
  auto eng = make_engine(11);
  Tensor x = rand_tensor({4, 3}, -2, 2, eng);
  Tensor w = rand_tensor({3, 5}, -2, 2, eng);
  Tensor b = rand_tensor({5}, -1, 1, eng);
  Tape t1, t2;
  const Tensor& o1 =
      t1.val(t1.affine(t1.constant(x), t1.constant(w), t1.constant(b)));
  const Tensor& o2 =
      t2.val(t2.affine(t2.constant(x), t2.constant(w), t2.constant(b)));
  CHECK(bitwise_equal(o1, o2));
  Tape t3, t4;
  CHECK(bitwise_equal(t3.val(t3.softmax(t3.constant(x), 1)),
                      t4.val(t4.softmax(t4.constant(x), 1))));
}

TEST_CASE("finite_diff_check: reference behaviours") {
  auto eng = make_engine(21);
  SUBCASE("softmax at a random point in [-1,1]^5 is below 1e-6") {
    GradCheckReport r = finite_diff_check(
        "softmax",
        [](Tape& t, const std::vector<Var>& v) { return t.softmax(v[0], 0); },
        {rand_tensor({5}, -1, 1, eng)}, 1e-6);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-6);
  }
  SUBCASE("affine is linear, so central differences are near-exact") {
    GradCheckReport r = finite_diff_check(
        "affine",
        [](Tape& t, const std::vector<Var>& v) {
          return t.affine(v[0], v[1], v[2]);
        },
        {rand_tensor({2, 3}, -1, 1, eng), rand_tensor({3, 2}, -1, 1, eng),
         rand_tensor({2}, -1, 1, eng)},
        1e-9);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-9);
  }
  SUBCASE("layer_norm at a random non-constant row") {
    GradCheckReport r = finite_diff_check(
        "layer_norm",
        [](Tape& t, const std::vector<Var>& v) {
          return t.layer_norm(v[0], v[1], v[2], 1e-5);
        },
        {rand_tensor({2, 4}, -1, 1, eng), rand_tensor({4}, 0.5, 1.5, eng),
         rand_tensor({4}, -0.5, 0.5, eng)},
        1e-5);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-5);
  }
  SUBCASE("report invariant: passed iff max rel error <= tolerance") {
    GradCheckReport r = finite_diff_check(
        "tanh",
        [](Tape& t, const std::vector<Var>& v) { return t.tanh(v[0]); },
        {rand_tensor({4}, -1, 1, eng)}, 1e-4);
    CHECK(r.passed == (r.max_rel_error <= r.tolerance));
  }
  SUBCASE("non-finite forward value raises") {
    CHECK_THROWS_AS(
        finite_diff_check(
            "log",
            [](Tape& t, const std::vector<Var>& v) { return t.log(v[0]); },
            {Tensor::row({-1.0})}, 1e-4),
        NumericError);
  }
}

TEST_CASE("gradient sweep covers elementwise and reduction primitives") {
  auto eng = make_engine(33);
  auto check = [&](const char* name, const GradCheckBuild& build,
                   std::vector<Tensor> point, double tol = 1e-6) {
    GradCheckReport r = finite_diff_check(name, build, point, tol);
    INFO(name, " max rel err ", r.max_rel_error);
    CHECK(r.passed);
  };
  check("mul",
        [](Tape& t, const std::vector<Var>& v) { return t.mul(v[0], v[1]); },
        {rand_tensor({5}, -1, 1, eng), rand_tensor({5}, -1, 1, eng)});
  check("sub",
        [](Tape& t, const std::vector<Var>& v) { return t.sub(v[0], v[1]); },
        {rand_tensor({5}, -1, 1, eng), rand_tensor({5}, -1, 1, eng)});
  check("sqrt",
        [](Tape& t, const std::vector<Var>& v) { return t.sqrt(v[0]); },
        {rand_tensor({5}, 0.5, 2, eng)});
  check("pow_const",
        [](Tape& t, const std::vector<Var>& v) {
          return t.pow_const(v[0], 2.5);
        },
        {rand_tensor({5}, 0.2, 2, eng)});
  check("matvec",
        [](Tape& t, const std::vector<Var>& v) {
          return t.matvec(v[0], v[1]);
        },
        {rand_tensor({3, 4}, -1, 1, eng), rand_tensor({4}, -1, 1, eng)});
  check("vecmat",
        [](Tape& t, const std::vector<Var>& v) {
          return t.vecmat(v[0], v[1]);
        },
        {rand_tensor({3}, -1, 1, eng), rand_tensor({3, 4}, -1, 1, eng)});
  check("sum",
        [](Tape& t, const std::vector<Var>& v) { return t.sum(v[0]); },
        {rand_tensor({2, 3}, -1, 1, eng)});
  check("scale_vec",
        [](Tape& t, const std::vector<Var>& v) {
          return t.scale_vec(v[0], v[1]);
        },
        {rand_tensor({4}, -1, 1, eng), rand_tensor({1}, 0.5, 1.5, eng)});
  check("slice_row",
        [](Tape& t, const std::vector<Var>& v) {
          return t.slice_row(v[0], 1);
        },
        {rand_tensor({3, 4}, -1, 1, eng)});
  check("element",
        [](Tape& t, const std::vector<Var>& v) { return t.element(v[0], 2); },
        {rand_tensor({4}, -1, 1, eng)});
  check("gram_rows",
        [](Tape& t, const std::vector<Var>& v) { return t.gram_rows(v[0]); },
        {rand_tensor({3, 4}, -1, 1, eng)}, 1e-5);
  check("reshape",
        [](Tape& t, const std::vector<Var>& v) {
          return t.reshape(v[0], {6});
        },
        {rand_tensor({2, 3}, -1, 1, eng)});
}

// The full finite-difference suite over every differentiable op.

#include <algorithm>
#include <functional>
#include <utility>

#include "sermtl/coattention.hpp"
#include "sermtl/fusion.hpp"
#include "sermtl/gradcheck.hpp"
#include "sermtl/heads.hpp"
#include "sermtl/losses.hpp"
#include "sermtl/pooling.hpp"
#include "sermtl/rng.hpp"

namespace sermtl {

namespace {

Tensor rand_tensor(Shape shape, double lo, double hi, std::mt19937_64& eng) {
  std::uniform_real_distribution<double> unif(lo, hi);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = unif(eng);
  return t;
}

// Away from the ReLU kink.
Tensor rand_offkink(Shape shape, std::mt19937_64& eng) {
  std::uniform_real_distribution<double> unif(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    t[i] = sign(eng) ? unif(eng) : -unif(eng);
  }
  return t;
}

struct OpCase {
  std::string name;
  // Fresh random point + builder for one check.
  std::function<std::pair<std::vector<Tensor>, GradCheckBuild>(
      std::mt19937_64&)>
      instance;
};

std::vector<OpCase> suite_cases() {
  std::vector<OpCase> ops;

  ops.push_back({"affine", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {
                       rand_tensor({2, 3}, -1, 1, eng),
                       rand_tensor({3, 2}, -1, 1, eng),
                       rand_tensor({2}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.affine(v[0], v[1], v[2]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"matmul", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({2, 3}, -1, 1, eng),
                                             rand_tensor({3, 2}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.matmul(v[0], v[1]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"softmax", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({5}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.softmax(v[0], 0);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"layer_norm", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({2, 4}, -1, 1, eng),
                                             rand_tensor({4}, 0.5, 1.5, eng),
                                             rand_tensor({4}, -0.5, 0.5, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.layer_norm(v[0], v[1], v[2], 1e-5);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"relu", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_offkink({6}, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.relu(v[0]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"exp", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({5}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.exp(v[0]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"log", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({5}, 0.5, 2.0, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.log(v[0]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"tanh", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({5}, -1.5, 1.5, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.tanh(v[0]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"sigmoid", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({5}, -1.5, 1.5, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.sigmoid(v[0]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"concat", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({3}, -1, 1, eng),
                                             rand_tensor({2}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.concat({v[0], v[1]});
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"dot", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({4}, -1, 1, eng),
                                             rand_tensor({4}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return t.dot(v[0], v[1]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back(
      {"l2_normalize_rows", [](std::mt19937_64& eng) {
         std::vector<Tensor> pt = {rand_offkink({3, 4}, eng)};
         GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
           return t.l2_normalize_rows(v[0]);
         };
         return std::make_pair(pt, b);
       }});

  ops.push_back({"recurrent_cell", [](std::mt19937_64& eng) {
                   const std::size_t T = 3, D = 4, H = 3;
                   std::vector<Tensor> pt = {
                       rand_tensor({T, D}, -1, 1, eng),
                       rand_tensor({4 * H, D}, -0.5, 0.5, eng),
                       rand_tensor({4 * H, H}, -0.5, 0.5, eng),
                       rand_tensor({4 * H}, -0.5, 0.5, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return lstm_seq(t, v[0], v[1], v[2], v[3]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"attentive_stats_pool", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {
                       rand_tensor({4, 3}, -1, 1, eng),
                       rand_tensor({3, 2}, -1, 1, eng),
                       rand_tensor({2}, -0.5, 0.5, eng),
                       rand_tensor({2}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return attentive_stats_pool(t, v[0], v[1], v[2], v[3],
                                                 1e-6);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"fuse_layers", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({3, 2, 3}, -1, 1, eng),
                                             rand_tensor({3}, -1, 1, eng)};
                   GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
                     return fuse_layers(t, v[0], v[1]);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back(
      {"coattend", [](std::mt19937_64& eng) {
         const std::size_t dh = 4, dr = 3, dc = 4, T = 3;
         std::vector<Tensor> pt = {
             rand_tensor({dh}, -1, 1, eng),      // emo
             rand_tensor({dh}, -1, 1, eng),      // gen
             rand_tensor({dh}, -1, 1, eng),      // spk
             rand_tensor({T, dr}, -1, 1, eng),   // asr
             rand_tensor({dh, dc}, -1, 1, eng), rand_tensor({dc}, -1, 1, eng),
             rand_tensor({dh, dc}, -1, 1, eng), rand_tensor({dc}, -1, 1, eng),
             rand_tensor({dh, dc}, -1, 1, eng), rand_tensor({dc}, -1, 1, eng),
             rand_tensor({dr, dc}, -1, 1, eng), rand_tensor({dc}, -1, 1, eng)};
         GradCheckBuild b = [](Tape& t, const std::vector<Var>& v) {
           CoAttentionVars params;
           params.w_emo = v[4];
           params.b_emo = v[5];
           params.w_gen = v[6];
           params.b_gen = v[7];
           params.w_spk = v[8];
           params.b_spk = v[9];
           params.w_asr = v[10];
           params.b_asr = v[11];
           return coattend(t, v[0], v[1], v[2], v[3], params);
         };
         return std::make_pair(pt, b);
       }});

  ops.push_back({"cross_entropy", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({3, 4}, -2, 2, eng)};
                   std::uniform_int_distribution<int> lab(0, 3);
                   std::vector<int> labels = {lab(eng), lab(eng), lab(eng)};
                   GradCheckBuild b = [labels](Tape& t,
                                               const std::vector<Var>& v) {
                     return cross_entropy(t, v[0], labels);
                   };
                   return std::make_pair(pt, b);
                 }});

  ops.push_back({"ctc_loss", [](std::mt19937_64& eng) {
                   std::vector<Tensor> pt = {rand_tensor({5, 4}, -2, 2, eng)};
                   std::uniform_int_distribution<int> tok(1, 3);
                   std::uniform_int_distribution<int> len(1, 2);
                   std::vector<int> target(len(eng));
                   for (int& v : target) v = tok(eng);
                   GradCheckBuild b = [target](Tape& t,
                                               const std::vector<Var>& v) {
                     return ctc_loss(t, v[0], target);
                   };
                   return std::make_pair(pt, b);
                 }});

  auto swfc_case = [](SwfcVariant variant) {
    return [variant](std::mt19937_64& eng) {
      std::vector<Tensor> pt = {rand_offkink({5, 4}, eng)};
      std::uniform_int_distribution<int> lab(0, 2);
      std::vector<int> labels(5);
      for (int& v : labels) v = lab(eng);
      labels[1] = labels[0];  // guarantee at least one positive pair
      std::vector<long> counts(3, 0);
      for (int v : labels) ++counts[v];
      for (long& c : counts) c = std::max(c, 1L);
      SwfcConfig cfg;
      cfg.variant = variant;
      GradCheckBuild b = [labels, counts, cfg](Tape& t,
                                               const std::vector<Var>& v) {
        return swfc_loss(t, v[0], labels, cfg, counts);
      };
      return std::make_pair(pt, b);
    };
  };
  ops.push_back({"swfc_eq2_literal", swfc_case(SwfcVariant::eq2_literal)});
  ops.push_back({"swfc_focal_supcon", swfc_case(SwfcVariant::focal_supcon)});

  return ops;
}

}  // namespace

std::vector<GradCheckReport> run_gradient_suite(std::uint64_t seed,
                                                int points_per_op) {
  constexpr double kTol = 1e-4;
  std::vector<GradCheckReport> reports;
  std::uint64_t op_index = 0;
  for (const OpCase& op : suite_cases()) {
    auto eng = make_engine(mix_seed(seed, ++op_index));
    GradCheckReport worst;
    worst.op_name = op.name;
    worst.tolerance = kTol;
    worst.passed = true;
    for (int i = 0; i < points_per_op; ++i) {
      auto [point, build] = op.instance(eng);
      GradCheckReport r = finite_diff_check(op.name, build, point, kTol,
                                            mix_seed(seed, i));
      worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
    }
    worst.passed = worst.max_rel_error <= kTol;
    reports.push_back(worst);
  }
  return reports;
}

}  // namespace sermtl

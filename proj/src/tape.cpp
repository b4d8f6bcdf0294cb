#include "sermtl/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sermtl/kernels.hpp"

namespace sermtl {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require_shape(a.same_shape(b), std::string(op) + ": shape mismatch " +
                                     shape_str(a.shape()) + " vs " +
                                     shape_str(b.shape()));
}

}  // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::make_node(Tensor value, BackFn back, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

bool Tape::any_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs) {
    if (nodes_[v.id].requires_grad) return true;
  }
  return false;
}

Tensor Tape::grad_or_zeros(Var v) const {
  const Node& n = nodes_[v.id];
  if (!n.grad.same_shape(n.value)) return Tensor::zeros(n.value.shape());
  return n.grad;
}

void Tape::accum_grad(Var v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.requires_grad) return;
  check_same_shape(n.value, g, "accum_grad");
  if (!n.grad.same_shape(n.value)) {
    n.grad = Tensor::zeros(n.value.shape());
  }
  double* dst = n.grad.data();
  const double* src = g.data();
  for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

void Tape::backward(Var root) {
  if (nodes_[root.id].value.numel() != 1) {
    throw ShapeError("backward root must be a scalar, got shape " +
                     shape_str(nodes_[root.id].value.shape()));
  }
  accum_grad(root, Tensor::scalar(1.0));
  backward_seeded();
}

void Tape::backward_seeded() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.back && n.grad.same_shape(n.value)) {
      n.back(*this, Var{static_cast<std::uint32_t>(i)});
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  check_same_shape(val(a), val(b), "add");
  Tensor out = val(a);
  const double* pb = val(b).data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
  return make_node(std::move(out),
                   [a, b](Tape& t, Var self) {
                     t.accum_grad(a, t.grad(self));
                     t.accum_grad(b, t.grad(self));
                   },
                   any_grad({a, b}));
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(val(a), val(b), "sub");
  Tensor out = val(a);
  const double* pb = val(b).data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return make_node(std::move(out),
                   [a, b](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     t.accum_grad(a, g);
                     Tensor ng(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i) ng[i] = -g[i];
                     t.accum_grad(b, ng);
                   },
                   any_grad({a, b}));
}

Var Tape::mul(Var a, Var b) {
  check_same_shape(val(a), val(b), "mul");
  Tensor out = val(a);
  const double* pb = val(b).data();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return make_node(std::move(out),
                   [a, b](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     Tensor ga(g.shape()), gb(g.shape());
                     const double* pa = t.val(a).data();
                     const double* pb2 = t.val(b).data();
                     for (std::size_t i = 0; i < g.numel(); ++i) {
                       ga[i] = g[i] * pb2[i];
                       gb[i] = g[i] * pa[i];
                     }
                     t.accum_grad(a, ga);
                     t.accum_grad(b, gb);
                   },
                   any_grad({a, b}));
}

Var Tape::scale(Var a, double c) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return make_node(std::move(out),
                   [a, c](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] * c;
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::add_scalar(Var a, double c) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c;
  return make_node(std::move(out),
                   [a](Tape& t, Var self) { t.accum_grad(a, t.grad(self)); },
                   any_grad({a}));
}

Var Tape::relu(Var a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], 0.0);
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& x = t.val(a);
                     Tensor ga(g.shape());
                     // subgradient at 0 is 0
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = x[i] > 0.0 ? g[i] : 0.0;
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::tanh(Var a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] * (1.0 - y[i] * y[i]);
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::sigmoid(Var a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] * y[i] * (1.0 - y[i]);
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::exp(Var a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] * y[i];
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::log(Var a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& x = t.val(a);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] / x[i];
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::sqrt(Var a) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] / (2.0 * y[i]);
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::pow_const(Var a, double p) {
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
  return make_node(std::move(out),
                   [a, p](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& x = t.val(a);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] * p * std::pow(x[i], p - 1.0);
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::mul_const(Var a, Tensor m) {
  check_same_shape(val(a), m, "mul_const");
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= m[i];
  return make_node(std::move(out),
                   [a, m = std::move(m)](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     Tensor ga(g.shape());
                     for (std::size_t i = 0; i < g.numel(); ++i)
                       ga[i] = g[i] * m[i];
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require_shape(ta.rank() == 2 && tb.rank() == 2 &&
                    ta.extent(1) == tb.extent(0),
                "matmul: incompatible shapes " + shape_str(ta.shape()) +
                    " x " + shape_str(tb.shape()));
  const std::size_t m = ta.extent(0), k = ta.extent(1), n = tb.extent(1);
  Tensor out({m, n});
  kernels::matmul(ta.data(), tb.data(), out.data(), m, k, n);
  return make_node(
      std::move(out),
      [a, b, m, k, n](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(a)) {
          Tensor ga({m, k});
          kernels::matmul_nt(g.data(), t.val(b).data(), ga.data(), m, n, k);
          t.accum_grad(a, ga);
        }
        if (t.requires_grad(b)) {
          Tensor gb({k, n});
          kernels::matmul_tn(t.val(a).data(), g.data(), gb.data(), k, m, n);
          t.accum_grad(b, gb);
        }
      },
      any_grad({a, b}));
}

Var Tape::affine(Var x, Var w, Var b) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  require_shape(tx.rank() == 2 && tw.rank() == 2 && tb.rank() == 1 &&
                    tx.extent(1) == tw.extent(0) &&
                    tw.extent(1) == tb.extent(0),
                "affine: incompatible shapes x" + shape_str(tx.shape()) +
                    " W" + shape_str(tw.shape()) + " b" +
                    shape_str(tb.shape()));
  const std::size_t n = tx.extent(0), din = tx.extent(1), dout = tw.extent(1);
  Tensor out({n, dout});
  kernels::matmul(tx.data(), tw.data(), out.data(), n, din, dout);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dout; ++j) out(i, j) += tb[j];
  return make_node(
      std::move(out),
      [x, w, b, n, din, dout](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(x)) {
          Tensor gx({n, din});
          kernels::matmul_nt(g.data(), t.val(w).data(), gx.data(), n, dout,
                             din);
          t.accum_grad(x, gx);
        }
        if (t.requires_grad(w)) {
          Tensor gw({din, dout});
          kernels::matmul_tn(t.val(x).data(), g.data(), gw.data(), din, n,
                             dout);
          t.accum_grad(w, gw);
        }
        if (t.requires_grad(b)) {
          Tensor gb({dout});
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < dout; ++j) gb[j] += g(i, j);
          t.accum_grad(b, gb);
        }
      },
      any_grad({x, w, b}));
}

Var Tape::matvec(Var a, Var x) {
  const Tensor& ta = val(a);
  const Tensor& tx = val(x);
  require_shape(ta.rank() == 2 && tx.rank() == 1 &&
                    ta.extent(1) == tx.extent(0),
                "matvec: incompatible shapes " + shape_str(ta.shape()) +
                    " x " + shape_str(tx.shape()));
  const std::size_t m = ta.extent(0), n = ta.extent(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) acc += ta(i, j) * tx[j];
    out[i] = acc;
  }
  return make_node(std::move(out),
                   [a, x, m, n](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     if (t.requires_grad(a)) {
                       Tensor ga({m, n});
                       const Tensor& vx = t.val(x);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           ga(i, j) = g[i] * vx[j];
                       t.accum_grad(a, ga);
                     }
                     if (t.requires_grad(x)) {
                       Tensor gx({n});
                       const Tensor& va = t.val(a);
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < n; ++j)
                           gx[j] += va(i, j) * g[i];
                       t.accum_grad(x, gx);
                     }
                   },
                   any_grad({a, x}));
}

Var Tape::vecmat(Var x, Var a) {
  const Tensor& tx = val(x);
  const Tensor& ta = val(a);
  require_shape(tx.rank() == 1 && ta.rank() == 2 &&
                    tx.extent(0) == ta.extent(0),
                "vecmat: incompatible shapes " + shape_str(tx.shape()) +
                    " x " + shape_str(ta.shape()));
  const std::size_t n = ta.extent(0), m = ta.extent(1);
  Tensor out({m});
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = tx[i];
    for (std::size_t j = 0; j < m; ++j) out[j] += xi * ta(i, j);
  }
  return make_node(std::move(out),
                   [x, a, n, m](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     if (t.requires_grad(x)) {
                       Tensor gx({n});
                       const Tensor& va = t.val(a);
                       for (std::size_t i = 0; i < n; ++i) {
                         double acc = 0.0;
                         for (std::size_t j = 0; j < m; ++j)
                           acc += va(i, j) * g[j];
                         gx[i] = acc;
                       }
                       t.accum_grad(x, gx);
                     }
                     if (t.requires_grad(a)) {
                       Tensor ga({n, m});
                       const Tensor& vx = t.val(x);
                       for (std::size_t i = 0; i < n; ++i)
                         for (std::size_t j = 0; j < m; ++j)
                           ga(i, j) = vx[i] * g[j];
                       t.accum_grad(a, ga);
                     }
                   },
                   any_grad({x, a}));
}

Var Tape::dot(Var x, Var y) {
  check_same_shape(val(x), val(y), "dot");
  const Tensor& tx = val(x);
  const Tensor& ty = val(y);
  double acc = 0.0;
  for (std::size_t i = 0; i < tx.numel(); ++i) acc += tx[i] * ty[i];
  return make_node(Tensor::scalar(acc),
                   [x, y](Tape& t, Var self) {
                     const double g = t.grad(self)[0];
                     const Tensor& vx = t.val(x);
                     const Tensor& vy = t.val(y);
                     if (t.requires_grad(x)) {
                       Tensor gx(vx.shape());
                       for (std::size_t i = 0; i < vx.numel(); ++i)
                         gx[i] = g * vy[i];
                       t.accum_grad(x, gx);
                     }
                     if (t.requires_grad(y)) {
                       Tensor gy(vy.shape());
                       for (std::size_t i = 0; i < vy.numel(); ++i)
                         gy[i] = g * vx[i];
                       t.accum_grad(y, gy);
                     }
                   },
                   any_grad({x, y}));
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, Shape shape) {
  Tensor out = val(a).reshaped(shape);
  return make_node(std::move(out),
                   [a](Tape& t, Var self) {
                     t.accum_grad(a, t.grad(self).reshaped(t.val(a).shape()));
                   },
                   any_grad({a}));
}

Var Tape::concat(const std::vector<Var>& parts) {
  require_shape(!parts.empty(), "concat: no parts");
  std::size_t total = 0;
  for (Var p : parts) {
    require_shape(val(p).rank() == 1,
                  "concat: parts must be rank-1, got " +
                      shape_str(val(p).shape()));
    total += val(p).numel();
  }
  Tensor out({total});
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& tp = val(p);
    for (std::size_t i = 0; i < tp.numel(); ++i) out[off + i] = tp[i];
    off += tp.numel();
  }
  bool rg = false;
  for (Var p : parts) rg = rg || requires_grad(p);
  return make_node(std::move(out),
                   [parts](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     std::size_t off2 = 0;
                     for (Var p : parts) {
                       const std::size_t np = t.val(p).numel();
                       if (t.requires_grad(p)) {
                         Tensor gp({np});
                         for (std::size_t i = 0; i < np; ++i)
                           gp[i] = g[off2 + i];
                         t.accum_grad(p, gp);
                       }
                       off2 += np;
                     }
                   },
                   rg);
}

Var Tape::slice_row(Var x, std::size_t r) {
  const Tensor& tx = val(x);
  require_shape(tx.rank() == 2 && r < tx.extent(0),
                "slice_row: row " + std::to_string(r) + " out of " +
                    shape_str(tx.shape()));
  const std::size_t n = tx.extent(1);
  Tensor out({n});
  for (std::size_t j = 0; j < n; ++j) out[j] = tx(r, j);
  return make_node(std::move(out),
                   [x, r, n](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     Tensor gx(t.val(x).shape());
                     for (std::size_t j = 0; j < n; ++j) gx(r, j) = g[j];
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

Var Tape::element(Var x, std::size_t i) {
  const Tensor& tx = val(x);
  require_shape(i < tx.numel(), "element: index out of range");
  return make_node(Tensor::scalar(tx[i]),
                   [x, i](Tape& t, Var self) {
                     Tensor gx(t.val(x).shape());
                     gx[i] = t.grad(self)[0];
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

// ---------------------------------------------------------------------------
// normalization & reductions
// ---------------------------------------------------------------------------

Var Tape::softmax(Var x, std::size_t axis) {
  const Tensor& tx = val(x);
  require_shape(axis < tx.rank(), "softmax: axis out of range");
  const std::size_t m = tx.extent(axis);
  require_shape(m >= 1, "softmax: empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= tx.extent(i);
  for (std::size_t i = axis + 1; i < tx.rank(); ++i) inner *= tx.extent(i);

  Tensor out(tx.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * m * inner + in;
      double mx = tx[base];
      for (std::size_t t = 1; t < m; ++t)
        mx = std::max(mx, tx[base + t * inner]);
      double z = 0.0;
      for (std::size_t t = 0; t < m; ++t) {
        const double e = std::exp(tx[base + t * inner] - mx);
        out[base + t * inner] = e;
        z += e;
      }
      for (std::size_t t = 0; t < m; ++t) out[base + t * inner] /= z;
    }
  }
  return make_node(std::move(out),
                   [x, m, outer, inner](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor gx(y.shape());
                     for (std::size_t o = 0; o < outer; ++o) {
                       for (std::size_t in = 0; in < inner; ++in) {
                         const std::size_t base = o * m * inner + in;
                         double gy = 0.0;
                         for (std::size_t k = 0; k < m; ++k)
                           gy += g[base + k * inner] * y[base + k * inner];
                         for (std::size_t k = 0; k < m; ++k) {
                           const std::size_t idx = base + k * inner;
                           gx[idx] = y[idx] * (g[idx] - gy);
                         }
                       }
                     }
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

Var Tape::masked_softmax_rows(Var x, Tensor mask) {
  const Tensor& tx = val(x);
  require_shape(tx.rank() == 2, "masked_softmax_rows: need rank-2 input");
  check_same_shape(tx, mask, "masked_softmax_rows");
  const std::size_t n = tx.extent(0), m = tx.extent(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j)
      if (mask(i, j) != 0.0) mx = std::max(mx, tx(i, j));
    if (!std::isfinite(mx)) continue;  // fully masked row -> zeros
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (mask(i, j) != 0.0) {
        out(i, j) = std::exp(tx(i, j) - mx);
        z += out(i, j);
      }
    }
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= z;
  }
  return make_node(std::move(out),
                   [x, mask = std::move(mask), n, m](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor gx({n, m});
                     for (std::size_t i = 0; i < n; ++i) {
                       double gy = 0.0;
                       for (std::size_t j = 0; j < m; ++j)
                         if (mask(i, j) != 0.0) gy += g(i, j) * y(i, j);
                       for (std::size_t j = 0; j < m; ++j)
                         if (mask(i, j) != 0.0)
                           gx(i, j) = y(i, j) * (g(i, j) - gy);
                     }
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

Var Tape::log_masked(Var x, Tensor mask) {
  const Tensor& tx = val(x);
  check_same_shape(tx, mask, "log_masked");
  Tensor out(tx.shape());
  for (std::size_t i = 0; i < tx.numel(); ++i)
    out[i] = mask[i] != 0.0 ? std::log(tx[i]) : 0.0;
  return make_node(std::move(out),
                   [x, mask = std::move(mask)](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& vx = t.val(x);
                     Tensor gx(vx.shape());
                     for (std::size_t i = 0; i < vx.numel(); ++i)
                       gx[i] = mask[i] != 0.0 ? g[i] / vx[i] : 0.0;
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  const Tensor& tb = val(bias);
  require_shape(tx.rank() == 2 && tg.rank() == 1 && tb.rank() == 1 &&
                    tg.extent(0) == tx.extent(1) &&
                    tb.extent(0) == tx.extent(1),
                "layer_norm: incompatible shapes x" + shape_str(tx.shape()) +
                    " gain" + shape_str(tg.shape()) + " bias" +
                    shape_str(tb.shape()));
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be > 0");
  const std::size_t n = tx.extent(0), d = tx.extent(1);

  Tensor out({n, d});
  Tensor xhat({n, d});
  Tensor inv_std({n});
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += tx(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = tx(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat(i, j) = (tx(i, j) - mean) * is;
      out(i, j) = xhat(i, j) * tg[j] + tb[j];
    }
  }
  return make_node(
      std::move(out),
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), n,
       d](Tape& t, Var self) {
        const Tensor& g = t.grad(self);
        const Tensor& vg = t.val(gain);
        if (t.requires_grad(gain)) {
          Tensor gg({d});
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g(i, j) * xhat(i, j);
          t.accum_grad(gain, gg);
        }
        if (t.requires_grad(bias)) {
          Tensor gb({d});
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g(i, j);
          t.accum_grad(bias, gb);
        }
        if (t.requires_grad(x)) {
          Tensor gx({n, d});
          for (std::size_t i = 0; i < n; ++i) {
            double mean_h = 0.0, mean_hx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double h = g(i, j) * vg[j];
              mean_h += h;
              mean_hx += h * xhat(i, j);
            }
            mean_h /= static_cast<double>(d);
            mean_hx /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double h = g(i, j) * vg[j];
              gx(i, j) = (h - mean_h - xhat(i, j) * mean_hx) * inv_std[i];
            }
          }
          t.accum_grad(x, gx);
        }
      },
      any_grad({x, gain, bias}));
}

Var Tape::sum(Var a) {
  const Tensor& ta = val(a);
  double acc = 0.0;
  for (std::size_t i = 0; i < ta.numel(); ++i) acc += ta[i];
  return make_node(Tensor::scalar(acc),
                   [a](Tape& t, Var self) {
                     const double g = t.grad(self)[0];
                     Tensor ga(t.val(a).shape());
                     for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] = g;
                     t.accum_grad(a, ga);
                   },
                   any_grad({a}));
}

Var Tape::scale_vec(Var v, Var s) {
  const Tensor& tv = val(v);
  require_shape(val(s).numel() == 1, "scale_vec: s must be scalar");
  const double sv = val(s)[0];
  Tensor out = tv;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= sv;
  return make_node(std::move(out),
                   [v, s](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& vv = t.val(v);
                     const double sv2 = t.val(s)[0];
                     if (t.requires_grad(v)) {
                       Tensor gv(vv.shape());
                       for (std::size_t i = 0; i < vv.numel(); ++i)
                         gv[i] = g[i] * sv2;
                       t.accum_grad(v, gv);
                     }
                     if (t.requires_grad(s)) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < vv.numel(); ++i)
                         acc += g[i] * vv[i];
                       t.accum_grad(s, Tensor::scalar(acc));
                     }
                   },
                   any_grad({v, s}));
}

// ---------------------------------------------------------------------------
// fused model ops
// ---------------------------------------------------------------------------

Var Tape::weighted_layer_sum(Var stack, Var w) {
  const Tensor& ts = val(stack);
  const Tensor& tw = val(w);
  require_shape(ts.rank() == 3 && tw.rank() == 1 &&
                    tw.extent(0) == ts.extent(0),
                "weighted_layer_sum: stack " + shape_str(ts.shape()) +
                    " vs weights " + shape_str(tw.shape()));
  const std::size_t L = ts.extent(0), T = ts.extent(1), D = ts.extent(2);
  Tensor out({T, D});
  for (std::size_t l = 0; l < L; ++l) {
    const double wl = tw[l];
    const double* layer = ts.data() + l * T * D;
    for (std::size_t i = 0; i < T * D; ++i) out[i] += wl * layer[i];
  }
  return make_node(std::move(out),
                   [stack, w, L, T, D](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& ts2 = t.val(stack);
                     const Tensor& tw2 = t.val(w);
                     if (t.requires_grad(stack)) {
                       Tensor gs({L, T, D});
                       for (std::size_t l = 0; l < L; ++l) {
                         const double wl = tw2[l];
                         double* dst = gs.data() + l * T * D;
                         for (std::size_t i = 0; i < T * D; ++i)
                           dst[i] = wl * g[i];
                       }
                       t.accum_grad(stack, gs);
                     }
                     if (t.requires_grad(w)) {
                       Tensor gw({L});
                       for (std::size_t l = 0; l < L; ++l) {
                         const double* layer = ts2.data() + l * T * D;
                         double acc = 0.0;
                         for (std::size_t i = 0; i < T * D; ++i)
                           acc += layer[i] * g[i];
                         gw[l] = acc;
                       }
                       t.accum_grad(w, gw);
                     }
                   },
                   any_grad({stack, w}));
}

Var Tape::l2_normalize_rows(Var x) {
  const Tensor& tx = val(x);
  require_shape(tx.rank() == 2, "l2_normalize_rows: need rank-2 input");
  const std::size_t n = tx.extent(0), e = tx.extent(1);
  Tensor out({n, e});
  Tensor inv_norm({n});
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < e; ++j) sq += tx(i, j) * tx(i, j);
    const double norm = std::sqrt(sq);
    if (norm == 0.0)
      throw NumericError("l2_normalize_rows: zero row " + std::to_string(i));
    inv_norm[i] = 1.0 / norm;
    for (std::size_t j = 0; j < e; ++j) out(i, j) = tx(i, j) * inv_norm[i];
  }
  return make_node(std::move(out),
                   [x, inv_norm = std::move(inv_norm), n, e](Tape& t,
                                                             Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& y = t.val(self);
                     Tensor gx({n, e});
                     for (std::size_t i = 0; i < n; ++i) {
                       double gy = 0.0;
                       for (std::size_t j = 0; j < e; ++j)
                         gy += g(i, j) * y(i, j);
                       for (std::size_t j = 0; j < e; ++j)
                         gx(i, j) = (g(i, j) - y(i, j) * gy) * inv_norm[i];
                     }
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

Var Tape::gram_rows(Var x) {
  const Tensor& tx = val(x);
  require_shape(tx.rank() == 2, "gram_rows: need rank-2 input");
  const std::size_t n = tx.extent(0), e = tx.extent(1);
  Tensor out({n, n});
  kernels::matmul_nt(tx.data(), tx.data(), out.data(), n, e, n);
  return make_node(std::move(out),
                   [x, n, e](Tape& t, Var self) {
                     const Tensor& g = t.grad(self);
                     const Tensor& vx = t.val(x);
                     // d/dX of tr(G^T X X^T) = (G + G^T) X
                     Tensor gsym({n, n});
                     for (std::size_t i = 0; i < n; ++i)
                       for (std::size_t j = 0; j < n; ++j)
                         gsym(i, j) = g(i, j) + g(j, i);
                     Tensor gx({n, e});
                     kernels::matmul(gsym.data(), vx.data(), gx.data(), n, n,
                                     e);
                     t.accum_grad(x, gx);
                   },
                   any_grad({x}));
}

}  // namespace sermtl

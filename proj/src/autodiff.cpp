#include "jstts/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "jstts/error.hpp"

namespace jstts {

// ---- Var / Tape ------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw Error("Var: use of an empty handle");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p, bool trainable) {
  Node n;
  n.external = &p.value;
  n.requires_grad = trainable;
  n.param = trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(std::string_view op, Tensor value, std::vector<Var> parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents) {
    if (p.tape_ != this) throw Error(std::string(op) + ": operands live on different tapes");
    if (nodes_[p.id_].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) {
    n.parents.reserve(parents.size());
    for (const Var& p : parents) n.parents.push_back(p.id_);
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_slot(int id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(value(id).shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (loss.tape_ != this) throw Error("backward: loss is not on this tape");
  if (consumed_) throw Error("backward: tape already consumed");
  if (value(loss.id_).numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(value(loss.id_).shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_slot(loss.id_).fill(1.0);

  std::vector<Tensor*> slots;
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad) continue;
    if (n.backward) {
      slots.assign(n.parents.size(), nullptr);
      for (size_t i = 0; i < n.parents.size(); ++i) {
        if (nodes_[n.parents[i]].requires_grad) slots[i] = &grad_slot(n.parents[i]);
      }
      n.backward(nodes_[id].grad, slots);
      n.backward = nullptr;
    }
    if (n.param) n.param->grad.add_(n.grad);
  }
}

std::optional<Tensor> Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id_];
  if (!n.requires_grad || !n.has_grad) return std::nullopt;
  return n.grad;
}

// ---- helpers -----------------------------------------------------------------

namespace {

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
  throw ShapeError(std::string(op) + ": shape " + shape_str(a) + " " + std::string(why));
}

Tape& tape_of(const Var& v) {
  if (!v.tape()) throw Error("op on empty Var");
  return *v.tape();
}

// C += A(m x k) * B(k x n)
void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += A(m x k) * B(n x k)^T
void gemm_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C += A(k x m)^T * B(k x n)
void gemm_tn(const double* a, const double* b, double* c, int64_t k, int64_t m, int64_t n) {
  for (int64_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename F, typename D>
Var unary(std::string_view op, const Var& a, F f, D df) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  Var av = a;
  return tape_of(a).record(op, std::move(out), {a}, [av, df](const Tensor& g, std::span<Tensor* const> pg) {
    const Tensor& xv = av.value();
    Tensor& ga = *pg[0];
    for (int64_t i = 0; i < xv.numel(); ++i) ga[i] += g[i] * df(xv[i]);
  });
}

}  // namespace

// ---- linear algebra ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape().size() != 2 || y.shape().size() != 2 || x.cols() != y.rows()) shape_fail("matmul", x.shape(), y.shape());
  const int64_t m = x.rows(), k = x.cols(), n = y.cols();
  Tensor out({m, n});
  gemm_nn(x.data(), y.data(), out.data(), m, k, n);
  Var av = a, bv = b;
  return tape_of(a).record("matmul", std::move(out), {a, b},
                           [av, bv, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
                             if (pg[0]) gemm_nt(g.data(), bv.value().data(), pg[0]->data(), m, n, k);
                             if (pg[1]) gemm_tn(av.value().data(), g.data(), pg[1]->data(), m, k, n);
                           });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.shape().size() != 2 || y.shape().size() != 2 || x.cols() != y.cols()) {
    shape_fail("matmul_nt", x.shape(), y.shape());
  }
  const int64_t m = x.rows(), k = x.cols(), n = y.rows();
  Tensor out({m, n});
  gemm_nt(x.data(), y.data(), out.data(), m, k, n);
  Var av = a, bv = b;
  return tape_of(a).record("matmul_nt", std::move(out), {a, b},
                           [av, bv, m, k, n](const Tensor& g, std::span<Tensor* const> pg) {
                             // dA = G B ; dB = G^T A
                             if (pg[0]) gemm_nn(g.data(), bv.value().data(), pg[0]->data(), m, n, k);
                             if (pg[1]) gemm_tn(g.data(), av.value().data(), pg[1]->data(), m, n, k);
                           });
}

Var transpose(const Var& a) {
  const Tensor& x = a.value();
  if (x.shape().size() != 2) shape_fail("transpose", x.shape(), "is not a matrix");
  const int64_t r = x.rows(), c = x.cols();
  Tensor out({c, r});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out(j, i) = x(i, j);
  return tape_of(a).record("transpose", std::move(out), {a}, [r, c](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& ga = *pg[0];
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) ga(i, j) += g(j, i);
  });
}

// ---- elementwise -----------------------------------------------------------

namespace {

enum class Bin { kAdd, kSub, kMul };

Var binary(std::string_view op, Bin kind, const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  const bool same = x.shape() == y.shape();
  const bool bcast = !same && y.rows() == 1 && x.shape().size() == 2 && y.numel() == x.cols();
  if (!same && !bcast) shape_fail(op, x.shape(), y.shape());
  const int64_t n = x.numel(), c = x.cols();
  Tensor out(x.shape());
  for (int64_t i = 0; i < n; ++i) {
    const double yv = same ? y[i] : y[i % c];
    switch (kind) {
      case Bin::kAdd: out[i] = x[i] + yv; break;
      case Bin::kSub: out[i] = x[i] - yv; break;
      case Bin::kMul: out[i] = x[i] * yv; break;
    }
  }
  Var av = a, bv = b;
  return tape_of(a).record(op, std::move(out), {a, b},
                           [av, bv, kind, same, n, c](const Tensor& g, std::span<Tensor* const> pg) {
                             const Tensor& xv = av.value();
                             const Tensor& yv = bv.value();
                             for (int64_t i = 0; i < n; ++i) {
                               const int64_t j = same ? i : i % c;
                               switch (kind) {
                                 case Bin::kAdd:
                                   if (pg[0]) (*pg[0])[i] += g[i];
                                   if (pg[1]) (*pg[1])[j] += g[i];
                                   break;
                                 case Bin::kSub:
                                   if (pg[0]) (*pg[0])[i] += g[i];
                                   if (pg[1]) (*pg[1])[j] -= g[i];
                                   break;
                                 case Bin::kMul:
                                   if (pg[0]) (*pg[0])[i] += g[i] * yv[j];
                                   if (pg[1]) (*pg[1])[j] += g[i] * xv[i];
                                   break;
                               }
                             }
                           });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary("add", Bin::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary("sub", Bin::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary("mul", Bin::kMul, a, b); }

Var scale(const Var& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double x) {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      });
}

Var sigmoid(const Var& a) {
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return unary("sigmoid", a, sig, [sig](double x) {
    const double s = sig(x);
    return s * (1.0 - s);
  });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var abs(const Var& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

// ---- row-wise reductions ------------------------------------------------------

Var softmax(const Var& a) {
  const Tensor& x = a.value();
  const int64_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    double* oi = out.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += (oi[j] = std::exp(xi[j] - mx));
    for (int64_t j = 0; j < c; ++j) oi[j] /= s;
  }
  Tensor y = out;
  return tape_of(a).record("softmax", std::move(out), {a},
                           [y = std::move(y), r, c](const Tensor& g, std::span<Tensor* const> pg) {
                             Tensor& ga = *pg[0];
                             for (int64_t i = 0; i < r; ++i) {
                               double dot = 0.0;
                               for (int64_t j = 0; j < c; ++j) dot += g(i, j) * y(i, j);
                               for (int64_t j = 0; j < c; ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
                             }
                           });
}

Var log_softmax(const Var& a) {
  const Tensor& x = a.value();
  const int64_t r = x.rows(), c = x.cols();
  Tensor out(x.shape());
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(xi[j] - mx);
    const double lse = mx + std::log(s);
    for (int64_t j = 0; j < c; ++j) out(i, j) = xi[j] - lse;
  }
  Tensor y = out;
  return tape_of(a).record("log_softmax", std::move(out), {a},
                           [y = std::move(y), r, c](const Tensor& g, std::span<Tensor* const> pg) {
                             Tensor& ga = *pg[0];
                             for (int64_t i = 0; i < r; ++i) {
                               double gs = 0.0;
                               for (int64_t j = 0; j < c; ++j) gs += g(i, j);
                               for (int64_t j = 0; j < c; ++j) ga(i, j) += g(i, j) - std::exp(y(i, j)) * gs;
                             }
                           });
}

Var logsumexp(const Var& a) {
  const Tensor& x = a.value();
  const int64_t r = x.rows(), c = x.cols();
  if (c == 0) shape_fail("logsumexp", x.shape(), "has no columns");
  Tensor out({r, 1});
  for (int64_t i = 0; i < r; ++i) {
    const double* xi = x.data() + i * c;
    const double mx = *std::max_element(xi, xi + c);
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) s += std::exp(xi[j] - mx);
    out[i] = mx + std::log(s);
  }
  Tensor lse = out;
  Var av = a;
  return tape_of(a).record("logsumexp", std::move(out), {a},
                           [av, lse = std::move(lse), r, c](const Tensor& g, std::span<Tensor* const> pg) {
                             const Tensor& xv = av.value();
                             Tensor& ga = *pg[0];
                             for (int64_t i = 0; i < r; ++i)
                               for (int64_t j = 0; j < c; ++j) ga(i, j) += g[i] * std::exp(xv(i, j) - lse[i]);
                           });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const int64_t r = xv.rows(), c = xv.cols();
  if (gain.value().numel() != c || bias.value().numel() != c) shape_fail("layer_norm", xv.shape(), gain.shape());
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(static_cast<size_t>(r));
  Tensor out(xv.shape());
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (int64_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += xv(i, j);
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) {
      xhat(i, j) = (xv(i, j) - mu) * inv_std[i];
      out(i, j) = xhat(i, j) * gv[j] + bv[j];
    }
  }
  Var gvar = gain;
  return tape_of(x).record(
      "layer_norm", std::move(out), {x, gain, bias},
      [gvar, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](const Tensor& g,
                                                                         std::span<Tensor* const> pg) {
        const Tensor& gv2 = gvar.value();
        for (int64_t i = 0; i < r; ++i) {
          if (pg[0]) {
            double s1 = 0.0, s2 = 0.0;
            for (int64_t j = 0; j < c; ++j) {
              const double dy = g(i, j) * gv2[j];
              s1 += dy;
              s2 += dy * xhat(i, j);
            }
            const double cn = static_cast<double>(c);
            for (int64_t j = 0; j < c; ++j) {
              const double dy = g(i, j) * gv2[j];
              (*pg[0])(i, j) += inv_std[i] * (dy - s1 / cn - xhat(i, j) * s2 / cn);
            }
          }
          for (int64_t j = 0; j < c; ++j) {
            if (pg[1]) (*pg[1])[j] += g(i, j) * xhat(i, j);
            if (pg[2]) (*pg[2])[j] += g(i, j);
          }
        }
      });
}

// ---- indexing / structure -------------------------------------------------------

Var embedding(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  const int64_t v = tv.rows(), d = tv.cols();
  const auto n = static_cast<int64_t>(ids.size());
  Tensor out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " out of range for table " + shape_str(tv.shape()));
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return tape_of(table).record("embedding", std::move(out), {table},
                               [idv = std::move(idv), d](const Tensor& g, std::span<Tensor* const> pg) {
                                 Tensor& gt = *pg[0];
                                 for (size_t i = 0; i < idv.size(); ++i)
                                   for (int64_t j = 0; j < d; ++j) gt(idv[i], j) += g(static_cast<int64_t>(i), j);
                               });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t r = parts[0].rows();
  std::vector<int64_t> widths;
  int64_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != r || p.shape().size() != 2) shape_fail("concat_cols", parts[0].shape(), p.shape());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({r, total});
  int64_t off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (int64_t i = 0; i < r; ++i) std::copy_n(pv.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return tape_of(parts[0]).record("concat_cols", std::move(out), parts,
                                  [widths, r, total](const Tensor& g, std::span<Tensor* const> pg) {
                                    int64_t o = 0;
                                    for (size_t k = 0; k < widths.size(); ++k) {
                                      if (pg[k]) {
                                        for (int64_t i = 0; i < r; ++i)
                                          for (int64_t j = 0; j < widths[k]; ++j)
                                            (*pg[k])(i, j) += g[i * total + o + j];
                                      }
                                      o += widths[k];
                                    }
                                  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int64_t c = parts[0].cols();
  int64_t total = 0;
  std::vector<int64_t> counts;
  for (const Var& p : parts) {
    if (p.cols() != c) shape_fail("concat_rows", parts[0].shape(), p.shape());
    counts.push_back(p.value().numel());
    total += p.rows();
  }
  Tensor out({total, c});
  int64_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.data() + off);
    off += p.value().numel();
  }
  return tape_of(parts[0]).record("concat_rows", std::move(out), parts,
                                  [counts](const Tensor& g, std::span<Tensor* const> pg) {
                                    int64_t o = 0;
                                    for (size_t k = 0; k < counts.size(); ++k) {
                                      if (pg[k])
                                        for (int64_t i = 0; i < counts[k]; ++i) (*pg[k])[i] += g[o + i];
                                      o += counts[k];
                                    }
                                  });
}

Var slice_rows(const Var& a, int64_t start, int64_t count) {
  const Tensor& x = a.value();
  if (start < 0 || count < 0 || start + count > x.rows()) {
    shape_fail("slice_rows", x.shape(), "cannot provide rows [" + std::to_string(start) + ", " +
                                            std::to_string(start + count) + ")");
  }
  const int64_t c = x.cols();
  Tensor out({count, c});
  std::copy_n(x.data() + start * c, count * c, out.data());
  return tape_of(a).record("slice_rows", std::move(out), {a},
                           [start, count, c](const Tensor& g, std::span<Tensor* const> pg) {
                             for (int64_t i = 0; i < count * c; ++i) (*pg[0])[start * c + i] += g[i];
                           });
}

Var slice_cols(const Var& a, int64_t start, int64_t count) {
  const Tensor& x = a.value();
  if (start < 0 || count < 0 || start + count > x.cols()) {
    shape_fail("slice_cols", x.shape(), "cannot provide cols [" + std::to_string(start) + ", " +
                                            std::to_string(start + count) + ")");
  }
  const int64_t r = x.rows(), c = x.cols();
  Tensor out({r, count});
  for (int64_t i = 0; i < r; ++i) std::copy_n(x.data() + i * c + start, count, out.data() + i * count);
  return tape_of(a).record("slice_cols", std::move(out), {a},
                           [start, count, r, c](const Tensor& g, std::span<Tensor* const> pg) {
                             for (int64_t i = 0; i < r; ++i)
                               for (int64_t j = 0; j < count; ++j) (*pg[0])(i, start + j) += g(i, j);
                           });
}

Var sum(const Var& a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  const int64_t n = x.numel();
  return tape_of(a).record("sum", Tensor::scalar(s), {a}, [n](const Tensor& g, std::span<Tensor* const> pg) {
    for (int64_t i = 0; i < n; ++i) (*pg[0])[i] += g[0];
  });
}

Var mean(const Var& a) {
  const int64_t n = a.value().numel();
  if (n == 0) shape_fail("mean", a.shape(), "is empty");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var mean_rows(const Var& a) {
  const Tensor& x = a.value();
  const int64_t r = x.rows(), c = x.cols();
  if (r == 0) shape_fail("mean_rows", x.shape(), "has no rows");
  Tensor out({1, c});
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[j] += x(i, j);
  for (int64_t j = 0; j < c; ++j) out[j] /= static_cast<double>(r);
  return tape_of(a).record("mean_rows", std::move(out), {a}, [r, c](const Tensor& g, std::span<Tensor* const> pg) {
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) (*pg[0])(i, j) += g[j] / static_cast<double>(r);
  });
}

Var broadcast_rows(const Var& a, int64_t n) {
  const Tensor& x = a.value();
  if (x.rows() != 1) shape_fail("broadcast_rows", x.shape(), "must have one row");
  const int64_t c = x.cols();
  Tensor out({n, c});
  for (int64_t i = 0; i < n; ++i) std::copy_n(x.data(), c, out.data() + i * c);
  return tape_of(a).record("broadcast_rows", std::move(out), {a},
                           [n, c](const Tensor& g, std::span<Tensor* const> pg) {
                             for (int64_t i = 0; i < n; ++i)
                               for (int64_t j = 0; j < c; ++j) (*pg[0])[j] += g(i, j);
                           });
}

Var repeat_rows(const Var& a, std::span<const int> counts) {
  const Tensor& x = a.value();
  if (static_cast<int64_t>(counts.size()) != x.rows()) {
    shape_fail("repeat_rows", x.shape(), "does not match " + std::to_string(counts.size()) + " repeat counts");
  }
  const int64_t c = x.cols();
  int64_t total = 0;
  for (int k : counts) {
    if (k < 0) throw ShapeError("repeat_rows: negative repeat count");
    total += k;
  }
  Tensor out({total, c});
  int64_t o = 0;
  for (size_t i = 0; i < counts.size(); ++i)
    for (int k = 0; k < counts[i]; ++k, ++o) std::copy_n(x.data() + static_cast<int64_t>(i) * c, c, out.data() + o * c);
  std::vector<int> cv(counts.begin(), counts.end());
  return tape_of(a).record("repeat_rows", std::move(out), {a},
                           [cv = std::move(cv), c](const Tensor& g, std::span<Tensor* const> pg) {
                             int64_t row = 0;
                             for (size_t i = 0; i < cv.size(); ++i)
                               for (int k = 0; k < cv[i]; ++k, ++row)
                                 for (int64_t j = 0; j < c; ++j) (*pg[0])(static_cast<int64_t>(i), j) += g(row, j);
                           });
}

Var outer_add(const Var& a, const Var& b) {
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  if (x.cols() != y.cols()) shape_fail("outer_add", x.shape(), y.shape());
  const int64_t t = x.rows(), u = y.rows(), j = x.cols();
  Tensor out({t * u, j});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t k = 0; k < u; ++k) {
      double* o = out.data() + (i * u + k) * j;
      const double* xi = x.data() + i * j;
      const double* yk = y.data() + k * j;
      for (int64_t c = 0; c < j; ++c) o[c] = xi[c] + yk[c];
    }
  return tape_of(a).record("outer_add", std::move(out), {a, b},
                           [t, u, j](const Tensor& g, std::span<Tensor* const> pg) {
                             for (int64_t i = 0; i < t; ++i)
                               for (int64_t k = 0; k < u; ++k) {
                                 const double* gr = g.data() + (i * u + k) * j;
                                 if (pg[0])
                                   for (int64_t c = 0; c < j; ++c) (*pg[0])[i * j + c] += gr[c];
                                 if (pg[1])
                                   for (int64_t c = 0; c < j; ++c) (*pg[1])[k * j + c] += gr[c];
                               }
                           });
}

Var depthwise_conv1d(const Var& x, const Var& w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.cols() != xv.cols() || wv.rows() % 2 != 1) shape_fail("depthwise_conv1d", xv.shape(), wv.shape());
  const int64_t t = xv.rows(), c = xv.cols(), k = wv.rows(), half = k / 2;
  Tensor out({t, c});
  for (int64_t i = 0; i < t; ++i)
    for (int64_t m = 0; m < k; ++m) {
      const int64_t src = i + m - half;
      if (src < 0 || src >= t) continue;
      for (int64_t ch = 0; ch < c; ++ch) out(i, ch) += wv(m, ch) * xv(src, ch);
    }
  Var xa = x, wa = w;
  return tape_of(x).record("depthwise_conv1d", std::move(out), {x, w},
                           [xa, wa, t, c, k, half](const Tensor& g, std::span<Tensor* const> pg) {
                             const Tensor& xv2 = xa.value();
                             const Tensor& wv2 = wa.value();
                             for (int64_t i = 0; i < t; ++i)
                               for (int64_t m = 0; m < k; ++m) {
                                 const int64_t src = i + m - half;
                                 if (src < 0 || src >= t) continue;
                                 for (int64_t ch = 0; ch < c; ++ch) {
                                   if (pg[0]) (*pg[0])(src, ch) += g(i, ch) * wv2(m, ch);
                                   if (pg[1]) (*pg[1])(m, ch) += g(i, ch) * xv2(src, ch);
                                 }
                               }
                           });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return tape_of(a).record("reshape", std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> pg) {
    pg[0]->add_(g);
  });
}

Var stop_gradient(const Var& a) { return tape_of(a).constant(a.value()); }

}  // namespace jstts

#include "mmclip/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace mmclip {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.borrowed = &value;
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::variable_ref(const Tensor& value) {
  Node n;
  n.borrowed = &value;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, Backward fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backward fn) {
  Node n;
  n.owned = std::move(value);
  for (const Var& p : parents) {
    if (p.tape != this) throw Error("op mixes variables from different tapes");
    n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.owned;
}

Tensor& Tape::grad_mut(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(value(id).shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Tensor(value(v.id).shape(), 0.0);
}

void Tape::backward(Var loss) {
  if (value(loss.id).size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(value(loss.id).shape()));
  }
  Seed seed{loss, Tensor(value(loss.id).shape(), 1.0)};
  backward(std::span<const Seed>(&seed, 1));
}

void Tape::backward(std::span<const Seed> seeds) {
  for (Node& n : nodes_) n.has_grad = false;
  std::uint32_t last = 0;
  for (const Seed& s : seeds) {
    if (s.var.tape != this) throw Error("backward seed from a different tape");
    if (s.grad.shape() != value(s.var.id).shape()) {
      throw ShapeError("seed gradient " + shape_str(s.grad.shape()) + " does not match " +
                       shape_str(value(s.var.id).shape()));
    }
    Tensor& g = grad_mut(s.var.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s.grad[i];
    last = std::max(last, s.var.id);
  }
  if (!seeds.empty()) run_backward(last);
}

void Tape::run_backward(std::uint32_t last) {
  for (std::int64_t i = last; i >= 0; --i) {
    const auto id = static_cast<std::uint32_t>(i);
    Node& n = nodes_[id];
    if (n.has_grad && n.requires_grad && n.backward) n.backward(*this, id);
  }
}

namespace ops {
namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void accumulate(Tape& t, std::uint32_t id, const Tensor& g) {
  if (!t.requires_grad(id)) return;
  Tensor& dst = t.grad_mut(id);
  auto d = dst.data();
  auto s = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void require_matrix(Var v, const char* op) {
  require(v.value().rank() == 2,
          std::string(op) + " expects a rank-2 tensor, got " + shape_str(v.shape()));
}

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out = mmclip::matmul(a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    if (t.requires_grad(ia))
      kernels::gemm(g.data().data(), B.data().data(), t.grad_mut(ia).data().data(), m, n, k,
                    false, true, true);
    if (t.requires_grad(ib))
      kernels::gemm(A.data().data(), g.data().data(), t.grad_mut(ib).data().data(), k, m, n,
                    true, false, true);
  });
}

Var matmul_nt(Var a, Var b) {
  Tensor out = mmclip::matmul_nt(a.value(), b.value());
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    const Tensor& A = t.value(ia);
    const Tensor& B = t.value(ib);
    const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
    if (t.requires_grad(ia))
      kernels::gemm(g.data().data(), B.data().data(), t.grad_mut(ia).data().data(), m, n, k,
                    false, false, true);
    if (t.requires_grad(ib))
      kernels::gemm(g.data().data(), A.data().data(), t.grad_mut(ib).data().data(), n, m, k,
                    true, false, true);
  });
}

Var transpose(Var a) {
  Tensor out = mmclip::transpose(a.value());
  const auto ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    accumulate(t, ia, mmclip::transpose(t.grad_of(self)));
  });
}

Var add(Var a, Var b) {
  require(a.shape() == b.shape(),
          "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const auto av = a.value().data(), bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    accumulate(t, ia, t.grad_of(self));
    accumulate(t, ib, t.grad_of(self));
  });
}

Var sub(Var a, Var b) {
  require(a.shape() == b.shape(),
          "sub shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const auto av = a.value().data(), bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] - bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    accumulate(t, ia, t.grad_of(self));
    if (t.requires_grad(ib)) {
      auto d = t.grad_mut(ib).data();
      const auto g = t.grad_of(self).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require(a.shape() == b.shape(),
          "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const auto av = a.value().data(), bv = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self).data();
    const auto av = t.value(ia).data(), bv = t.value(ib).data();
    if (t.requires_grad(ia)) {
      auto d = t.grad_mut(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto d = t.grad_mut(ib).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  out.set_requires_grad(false);
  for (double& v : out.data()) v *= s;
  const auto ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, s](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ia)) return;
    auto d = t.grad_mut(ia).data();
    const auto g = t.grad_of(self).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
  });
}

Var mul_scalar(Var a, Var s) {
  require(s.value().size() == 1, "mul_scalar expects a scalar, got " + shape_str(s.shape()));
  const double sv = s.value().data()[0];
  Tensor out(a.shape());
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * sv;
  const auto ia = a.id, is = s.id;
  return a.tape->record(std::move(out), {a, s}, [ia, is](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self).data();
    const auto av = t.value(ia).data();
    const double sv = t.value(is).data()[0];
    if (t.requires_grad(ia)) {
      auto d = t.grad_mut(ia).data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * sv;
    }
    if (t.requires_grad(is)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
      t.grad_mut(is).data()[0] += acc;
    }
  });
}

Var add_bias(Var x, Var bias) {
  require_matrix(x, "add_bias");
  const std::size_t m = x.value().rows(), n = x.value().cols();
  require(bias.value().size() == n && bias.value().rank() <= 2,
          "add_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(x.shape()));
  Tensor out = x.value();
  out.set_requires_grad(false);
  const auto b = bias.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < n; ++j) r[j] += b[j];
  }
  const auto ix = x.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, bias}, [ix, ib, m, n](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    accumulate(t, ix, g);
    if (t.requires_grad(ib)) {
      auto d = t.grad_mut(ib).data();
      for (std::size_t i = 0; i < m; ++i) {
        const auto gr = g.row(i);
        for (std::size_t j = 0; j < n; ++j) d[j] += gr[j];
      }
    }
  });
}

Var exp(Var a) {
  Tensor out(a.shape());
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(av[i]);
  const auto ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ia)) return;
    const auto g = t.grad_of(self).data();
    const auto y = t.value(self).data();
    auto d = t.grad_mut(ia).data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
  });
}

Var gelu(Var a) {
  Tensor out(a.shape());
  const auto av = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double x = av[i];
    o[i] = 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  }
  const auto ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ia)) return;
    const auto g = t.grad_of(self).data();
    const auto xv = t.value(ia).data();
    auto d = t.grad_mut(ia).data();
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double x = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      d[i] += g[i] * (cdf + x * pdf);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.value().rows(), n = x.value().cols();
  require(gamma.value().size() == n && beta.value().size() == n,
          "layer_norm: affine params do not match width " + std::to_string(n));
  Tensor xhat(Shape{m, n});
  std::vector<double> inv_std(m);
  Tensor out(Shape{m, n});
  const auto gv = gamma.value().data(), bv = beta.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = x.value().row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    auto xh = xhat.row(i);
    auto o = out.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      xh[j] = (r[j] - mean) * inv_std[i];
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  const auto ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad_of(self);
        const auto gv = t.value(ig).data();
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          std::vector<double> dg(n, 0.0), db(n, 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            const auto gr = g.row(i);
            const auto xh = xhat.row(i);
            for (std::size_t j = 0; j < n; ++j) {
              dg[j] += gr[j] * xh[j];
              db[j] += gr[j];
            }
          }
          if (t.requires_grad(ig)) {
            auto d = t.grad_mut(ig).data();
            for (std::size_t j = 0; j < n; ++j) d[j] += dg[j];
          }
          if (t.requires_grad(ib)) {
            auto d = t.grad_mut(ib).data();
            for (std::size_t j = 0; j < n; ++j) d[j] += db[j];
          }
        }
        if (t.requires_grad(ix)) {
          Tensor& dx = t.grad_mut(ix);
          std::vector<double> gy(n);
          for (std::size_t i = 0; i < m; ++i) {
            const auto gr = g.row(i);
            const auto xh = xhat.row(i);
            double mean_gy = 0.0, mean_gyx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              gy[j] = gr[j] * gv[j];
              mean_gy += gy[j];
              mean_gyx += gy[j] * xh[j];
            }
            mean_gy /= static_cast<double>(n);
            mean_gyx /= static_cast<double>(n);
            auto d = dx.row(i);
            for (std::size_t j = 0; j < n; ++j)
              d[j] += inv_std[i] * (gy[j] - mean_gy - xh[j] * mean_gyx);
          }
        }
      });
}

Var softmax_rows(Var m, double scale, std::vector<unsigned char> allowed) {
  Tensor out = mmclip::softmax_rows(m.value(), scale, allowed);
  const auto im = m.id;
  return m.tape->record(std::move(out), {m}, [im, scale](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(im)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& d = t.grad_mut(im);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      const auto yr = y.row(i), gr = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto dr = d.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += scale * yr[j] * (gr[j] - dot);
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t len) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.value().rows(), n = a.value().cols();
  require(len > 0 && start + len <= n, "slice_cols out of range for " + shape_str(a.shape()));
  Tensor out(Shape{m, len});
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = a.value().row(i);
    std::copy(r.begin() + start, r.begin() + start + len, out.row(i).begin());
  }
  const auto ia = a.id;
  return a.tape->record(std::move(out), {a}, [ia, start, len, m](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ia)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& d = t.grad_mut(ia);
    for (std::size_t i = 0; i < m; ++i) {
      auto dr = d.row(i);
      const auto gr = g.row(i);
      for (std::size_t j = 0; j < len; ++j) dr[start + j] += gr[j];
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_matrix(p, "concat_cols");
    require(p.value().rows() == m, "concat_cols row mismatch");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out(Shape{m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i) {
      const auto r = parts[k].value().row(i);
      std::copy(r.begin(), r.end(), out.row(i).begin() + off);
    }
    off += widths[k];
  }
  std::vector<std::uint32_t> ids;
  for (const Var& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(
      std::move(out), parts, [ids, widths, m](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad_of(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            Tensor& d = t.grad_mut(ids[k]);
            for (std::size_t i = 0; i < m; ++i) {
              auto dr = d.row(i);
              const auto gr = g.row(i);
              for (std::size_t j = 0; j < widths[k]; ++j) dr[j] += gr[off + j];
            }
          }
          off += widths[k];
        }
      });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  require_matrix(table, "gather_rows");
  require(!ids.empty(), "gather_rows with no ids");
  const std::size_t v = table.value().rows(), c = table.value().cols();
  Tensor out(Shape{ids.size(), c});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] < v, "gather_rows id " + std::to_string(ids[i]) + " out of range " +
                            std::to_string(v));
    const auto r = table.value().row(ids[i]);
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const auto it = table.id;
  return table.tape->record(std::move(out), {table}, [it, idv](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(it)) return;
    const Tensor& g = t.grad_of(self);
    Tensor& d = t.grad_mut(it);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      auto dr = d.row(idv[i]);
      const auto gr = g.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) dr[j] += gr[j];
    }
  });
}

Var select_rows(Var x, Var replacement, std::span<const unsigned char> mask) {
  require_matrix(x, "select_rows");
  require(x.shape() == replacement.shape(), "select_rows shape mismatch: " +
                                                shape_str(x.shape()) + " vs " +
                                                shape_str(replacement.shape()));
  const std::size_t m = x.value().rows();
  require(mask.size() == m, "select_rows mask length " + std::to_string(mask.size()) +
                                " != rows " + std::to_string(m));
  Tensor out = x.value();
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < m; ++i) {
    if (mask[i]) {
      const auto r = replacement.value().row(i);
      std::copy(r.begin(), r.end(), out.row(i).begin());
    }
  }
  std::vector<unsigned char> mv(mask.begin(), mask.end());
  const auto ix = x.id, ir = replacement.id;
  return x.tape->record(std::move(out), {x, replacement}, [ix, ir, mv](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    for (std::size_t i = 0; i < mv.size(); ++i) {
      const std::uint32_t dst = mv[i] ? ir : ix;
      if (!t.requires_grad(dst)) continue;
      auto dr = t.grad_mut(dst).row(i);
      const auto gr = g.row(i);
      for (std::size_t j = 0; j < gr.size(); ++j) dr[j] += gr[j];
    }
  });
}

Var mean_rows(Var x, std::span<const unsigned char> valid) {
  require_matrix(x, "mean_rows");
  const std::size_t m = x.value().rows(), c = x.value().cols();
  require(valid.size() == m, "mean_rows validity mask length mismatch");
  std::size_t count = 0;
  for (auto v : valid) count += v ? 1 : 0;
  if (count == 0) throw Error("mean_rows: no valid rows");
  Tensor out(Shape{c});
  for (std::size_t i = 0; i < m; ++i) {
    if (!valid[i]) continue;
    const auto r = x.value().row(i);
    for (std::size_t j = 0; j < c; ++j) out[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : out.data()) v *= inv;
  std::vector<unsigned char> vv(valid.begin(), valid.end());
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, vv, inv](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    const auto g = t.grad_of(self).data();
    Tensor& d = t.grad_mut(ix);
    for (std::size_t i = 0; i < vv.size(); ++i) {
      if (!vv[i]) continue;
      auto dr = d.row(i);
      for (std::size_t j = 0; j < dr.size(); ++j) dr[j] += g[j] * inv;
    }
  });
}

Var l2_normalize(Var x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 1 || xv.rank() == 2, "l2_normalize expects rank 1 or 2");
  const std::size_t m = xv.rows();
  Tensor out(xv.shape());
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = xv.row(i);
    double s = 0.0;
    for (double v : r) s += v * v;
    norms[i] = std::sqrt(s);
    if (!(norms[i] > 0.0)) throw Error("l2_normalize: zero-norm row " + std::to_string(i));
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = r[j] / norms[i];
  }
  const auto ix = x.id;
  return x.tape->record(std::move(out), {x}, [ix, norms](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ix)) return;
    const Tensor& g = t.grad_of(self);
    const Tensor& y = t.value(self);
    Tensor& d = t.grad_mut(ix);
    for (std::size_t i = 0; i < norms.size(); ++i) {
      const auto yr = y.row(i), gr = g.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < yr.size(); ++j) dot += yr[j] * gr[j];
      auto dr = d.row(i);
      for (std::size_t j = 0; j < yr.size(); ++j) dr[j] += (gr[j] - yr[j] * dot) / norms[i];
    }
  });
}

Var stack_rows(std::span<const Var> rows) {
  require(!rows.empty(), "stack_rows of nothing");
  const std::size_t c = rows[0].value().size();
  Tensor out(Shape{rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i].value().rank() == 1 && rows[i].value().size() == c,
            "stack_rows expects equal-length rank-1 tensors");
    const auto r = rows[i].value().data();
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  std::vector<std::uint32_t> ids;
  for (const Var& r : rows) ids.push_back(r.id);
  return rows[0].tape->record(std::move(out), rows, [ids](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.requires_grad(ids[i])) continue;
      auto d = t.grad_mut(ids[i]).data();
      const auto gr = g.row(i);
      for (std::size_t j = 0; j < d.size(); ++j) d[j] += gr[j];
    }
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const auto ia = a.id;
  return a.tape->record(Tensor::scalar(s), {a}, [ia](Tape& t, std::uint32_t self) {
    if (!t.requires_grad(ia)) return;
    const double g = t.grad_of(self).data()[0];
    for (double& d : t.grad_mut(ia).data()) d += g;
  });
}

Var masked_mse(Var y, const Tensor& target, std::span<const std::size_t> rows) {
  require_matrix(y, "masked_mse");
  require(y.shape() == target.shape(), "masked_mse shape mismatch: " + shape_str(y.shape()) +
                                           " vs " + shape_str(target.shape()));
  if (rows.empty()) return y.tape->constant(Tensor::scalar(0.0));
  const std::size_t p = y.value().cols();
  const double inv = 1.0 / static_cast<double>(rows.size() * p);
  double s = 0.0;
  for (auto r : rows) {
    require(r < y.value().rows(), "masked_mse row out of range");
    const auto yr = y.value().row(r), tr = target.row(r);
    for (std::size_t j = 0; j < p; ++j) s += (yr[j] - tr[j]) * (yr[j] - tr[j]);
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  const auto iy = y.id;
  return y.tape->record(Tensor::scalar(s * inv), {y},
                        [iy, rv, inv, target](Tape& t, std::uint32_t self) {
                          if (!t.requires_grad(iy)) return;
                          const double g = t.grad_of(self).data()[0];
                          const Tensor& yv = t.value(iy);
                          Tensor& d = t.grad_mut(iy);
                          for (auto r : rv) {
                            const auto yr = yv.row(r), tr = target.row(r);
                            auto dr = d.row(r);
                            for (std::size_t j = 0; j < dr.size(); ++j)
                              dr[j] += g * 2.0 * inv * (yr[j] - tr[j]);
                          }
                        });
}

namespace {

// Softmax of one row, also returning log-sum-exp.
double row_softmax(std::span<const double> r, std::vector<double>& p) {
  double mx = r[0];
  for (double v : r) mx = std::max(mx, v);
  double s = 0.0;
  p.resize(r.size());
  for (std::size_t j = 0; j < r.size(); ++j) {
    p[j] = std::exp(r[j] - mx);
    s += p[j];
  }
  for (double& v : p) v /= s;
  return mx + std::log(s);
}

}  // namespace

Var nll_rows(Var logits, std::span<const std::size_t> targets,
             std::span<const std::size_t> positions) {
  require_matrix(logits, "nll_rows");
  const std::size_t n = logits.value().rows(), v = logits.value().cols();
  require(targets.size() == n, "nll_rows: targets length " + std::to_string(targets.size()) +
                                   " != rows " + std::to_string(n));
  if (positions.empty()) return logits.tape->constant(Tensor::scalar(0.0));
  double s = 0.0;
  std::vector<double> p;
  for (auto pos : positions) {
    require(pos < n, "nll_rows position out of range");
    if (targets[pos] >= v) {
      throw Error("nll_rows: target id " + std::to_string(targets[pos]) +
                  " outside vocabulary of " + std::to_string(v));
    }
    const auto r = logits.value().row(pos);
    s += row_softmax(r, p) - r[targets[pos]];
  }
  const double inv = 1.0 / static_cast<double>(positions.size());
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  std::vector<std::size_t> pv(positions.begin(), positions.end());
  const auto il = logits.id;
  return logits.tape->record(Tensor::scalar(s * inv), {logits},
                             [il, tv, pv, inv](Tape& t, std::uint32_t self) {
                               if (!t.requires_grad(il)) return;
                               const double g = t.grad_of(self).data()[0] * inv;
                               const Tensor& lv = t.value(il);
                               Tensor& d = t.grad_mut(il);
                               std::vector<double> p;
                               for (auto pos : pv) {
                                 row_softmax(lv.row(pos), p);
                                 auto dr = d.row(pos);
                                 for (std::size_t j = 0; j < dr.size(); ++j) dr[j] += g * p[j];
                                 dr[tv[pos]] -= g;
                               }
                             });
}

Var diag_cross_entropy(Var logits) {
  require_matrix(logits, "diag_cross_entropy");
  const std::size_t b = logits.value().rows();
  require(logits.value().cols() == b, "diag_cross_entropy needs a square matrix, got " +
                                          shape_str(logits.shape()));
  double s = 0.0;
  std::vector<double> p;
  for (std::size_t i = 0; i < b; ++i) {
    const auto r = logits.value().row(i);
    s += row_softmax(r, p) - r[i];
  }
  const double inv = 1.0 / static_cast<double>(b);
  const auto il = logits.id;
  return logits.tape->record(Tensor::scalar(s * inv), {logits},
                             [il, b, inv](Tape& t, std::uint32_t self) {
                               if (!t.requires_grad(il)) return;
                               const double g = t.grad_of(self).data()[0] * inv;
                               const Tensor& lv = t.value(il);
                               Tensor& d = t.grad_mut(il);
                               std::vector<double> p;
                               for (std::size_t i = 0; i < b; ++i) {
                                 row_softmax(lv.row(i), p);
                                 auto dr = d.row(i);
                                 for (std::size_t j = 0; j < b; ++j) dr[j] += g * p[j];
                                 dr[i] -= g;
                               }
                             });
}

}  // namespace ops
}  // namespace mmclip

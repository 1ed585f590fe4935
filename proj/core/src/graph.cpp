#include "prunelab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "prunelab/errors.hpp"

namespace prunelab {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

std::size_t last_dim(const Shape& s) { return s.empty() ? 0 : s.back(); }

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(s));
}

}  // namespace

Var Graph::push(Shape shape, std::vector<double> values, bool needs_grad) {
  Node n;
  n.shape = std::move(shape);
  n.own = std::move(values);
  n.needs_grad = record_ && needs_grad;
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw StateError("variable does not belong to this graph");
  return nodes_[v.id];
}

bool Graph::any_needs(std::initializer_list<Var> vs) const {
  return std::any_of(vs.begin(), vs.end(), [this](Var v) { return needs(v); });
}

std::vector<double>& Graph::grad_buf(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.numel(), 0.0);
  return n.grad;
}

const Shape& Graph::shape(Var v) const { return node(v).shape; }

std::span<const double> Graph::data(Var v) const {
  const auto& n = node(v);
  return {n.ptr(), n.numel()};
}

Tensor Graph::value(Var v) const {
  auto d = data(v);
  return Tensor(node(v).shape, std::vector<double>(d.begin(), d.end()));
}

Var Graph::constant(Tensor t) { return push(std::move(t.shape), std::move(t.data), false); }

Var Graph::param(Tensor& t) {
  Node n;
  n.shape = t.shape;
  n.external = &t;
  n.param = &t;
  n.needs_grad = record_ && t.requires_grad;
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::constant_ref(const Tensor& t) {
  Node n;
  n.shape = t.shape;
  n.external = &t;
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Graph::matmul(Var a, Var b) {
  const auto sa = shape(a);
  const auto sb = shape(b);
  require_rank2(sa, "matmul");
  require_rank2(sb, "matmul");
  if (sa[1] != sb[0])
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(sa) + " * " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(m * n, 0.0);
  const double* A = node(a).ptr();
  const double* B = node(b).ptr();
  for (std::size_t i = 0; i < m; ++i) {
    double* c = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  Var c = push({m, n}, std::move(out), any_needs({a, b}));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, b, c, m, k, n] {
      const auto& dC = grad_of(c.id);
      const double* A = nodes_[a.id].ptr();
      const double* B = nodes_[b.id].ptr();
      if (nodes_[a.id].needs_grad) {
        auto& dA = grad_buf(a.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* dc = dC.data() + i * n;
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) s += dc[j] * brow[j];
            dA[i * k + p] += s;
          }
      }
      if (nodes_[b.id].needs_grad) {
        auto& dB = grad_buf(b.id);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* dc = dC.data() + i * n;
            double* db = dB.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) db[j] += av * dc[j];
          }
      }
    };
  }
  return c;
}

Var Graph::add(Var a, Var b) {
  const auto sa = shape(a);
  const auto sb = shape(b);
  const std::size_t na = node(a).numel(), nb = node(b).numel();
  const bool broadcast = sa != sb;
  if (broadcast && !(nb == last_dim(sa) && (sb.size() == 1 || (sb.size() == 2 && sb[0] == 1))))
    throw DimensionError("add shapes incompatible: " + shape_str(sa) + " + " + shape_str(sb));
  std::vector<double> out(node(a).ptr(), node(a).ptr() + na);
  const double* B = node(b).ptr();
  for (std::size_t i = 0; i < na; ++i) out[i] += B[broadcast ? i % nb : i];
  Var c = push(sa, std::move(out), any_needs({a, b}));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, b, c, na, nb, broadcast] {
      const auto& dC = grad_of(c.id);
      if (nodes_[a.id].needs_grad) {
        auto& dA = grad_buf(a.id);
        for (std::size_t i = 0; i < na; ++i) dA[i] += dC[i];
      }
      if (nodes_[b.id].needs_grad) {
        auto& dB = grad_buf(b.id);
        for (std::size_t i = 0; i < na; ++i) dB[broadcast ? i % nb : i] += dC[i];
      }
    };
  }
  return c;
}

Var Graph::scale(Var a, double s) {
  auto d = data(a);
  std::vector<double> out(d.begin(), d.end());
  for (auto& x : out) x *= s;
  Var c = push(shape(a), std::move(out), needs(a));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, c, s] {
      const auto& dC = grad_of(c.id);
      auto& dA = grad_buf(a.id);
      for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += s * dC[i];
    };
  }
  return c;
}

Var Graph::softmax(Var a) {
  const auto sa = shape(a);
  const std::size_t cols = last_dim(sa);
  const std::size_t total = node(a).numel();
  const std::size_t rows = total / cols;
  const double* X = node(a).ptr();
  std::vector<double> out(total);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = X + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < cols; ++j) y[j] /= sum;
  }
  Var c = push(sa, std::move(out), needs(a));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, c, rows, cols] {
      const auto& dY = grad_of(c.id);
      const double* Y = nodes_[c.id].ptr();
      auto& dX = grad_buf(a.id);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = Y + r * cols;
        const double* dy = dY.data() + r * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) dX[r * cols + j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return c;
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const auto sx = shape(x);
  const std::size_t cols = last_dim(sx);
  if (node(gamma).numel() != cols || node(beta).numel() != cols)
    throw DimensionError("layer_norm affine parameters must match last axis " + std::to_string(cols));
  const std::size_t rows = node(x).numel() / cols;
  const double* X = node(x).ptr();
  const double* G = node(gamma).ptr();
  const double* Bt = node(beta).ptr();
  std::vector<double> out(rows * cols);
  std::vector<double> xhat(rows * cols);
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(cols);
    // A zero-variance row with eps = 0 normalizes to zeros.
    rstd[r] = (var + eps) > 0.0 ? 1.0 / std::sqrt(var + eps) : 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      xhat[r * cols + j] = (xr[j] - mean) * rstd[r];
      out[r * cols + j] = G[j] * xhat[r * cols + j] + Bt[j];
    }
  }
  Var c = push(sx, std::move(out), any_needs({x, gamma, beta}));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, x, gamma, beta, c, rows, cols, xhat = std::move(xhat),
                             rstd = std::move(rstd)] {
      const auto& dY = grad_of(c.id);
      const double* G = nodes_[gamma.id].ptr();
      if (nodes_[gamma.id].needs_grad) {
        auto& dG = grad_buf(gamma.id);
        for (std::size_t i = 0; i < rows * cols; ++i) dG[i % cols] += dY[i] * xhat[i];
      }
      if (nodes_[beta.id].needs_grad) {
        auto& dB = grad_buf(beta.id);
        for (std::size_t i = 0; i < rows * cols; ++i) dB[i % cols] += dY[i];
      }
      if (nodes_[x.id].needs_grad) {
        auto& dX = grad_buf(x.id);
        const double n = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            const double d = dY[r * cols + j] * G[j];
            mean_d += d;
            mean_dx += d * xhat[r * cols + j];
          }
          mean_d /= n;
          mean_dx /= n;
          for (std::size_t j = 0; j < cols; ++j) {
            const double d = dY[r * cols + j] * G[j];
            dX[r * cols + j] += rstd[r] * (d - mean_d - xhat[r * cols + j] * mean_dx);
          }
        }
      }
    };
  }
  return c;
}

Var Graph::gelu(Var a) {
  auto d = data(a);
  std::vector<double> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  }
  Var c = push(shape(a), std::move(out), needs(a));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, c] {
      const auto& dY = grad_of(c.id);
      const double* X = nodes_[a.id].ptr();
      auto& dX = grad_buf(a.id);
      for (std::size_t i = 0; i < dY.size(); ++i) {
        const double x = X[i];
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        dX[i] += dY[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
      }
    };
  }
  return c;
}

Var Graph::embedding(Var table, std::span<const int> ids) {
  const auto st = shape(table);
  require_rank2(st, "embedding");
  const std::size_t vocab = st[0], dim = st[1];
  const double* T = node(table).ptr();
  std::vector<double> out(ids.size() * dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw IndexError("embedding id " + std::to_string(ids[i]) + " out of range for table of " +
                       std::to_string(vocab) + " rows");
    std::copy_n(T + ids[i] * dim, dim, out.data() + i * dim);
  }
  if (ids.empty()) throw DimensionError("embedding lookup with no ids");
  std::vector<int> idv(ids.begin(), ids.end());
  Var c = push({ids.size(), dim}, std::move(out), needs(table));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, table, c, dim, idv = std::move(idv)] {
      const auto& dY = grad_of(c.id);
      auto& dT = grad_buf(table.id);
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j) dT[idv[i] * dim + j] += dY[i * dim + j];
    };
  }
  return c;
}

Var Graph::conv1d(Var x, Var w, std::size_t stride, std::size_t pad) {
  const auto sx = shape(x);
  const auto sw = shape(w);
  require_rank2(sx, "conv1d");
  if (sw.size() != 3 || sw[1] != sx[1])
    throw DimensionError("conv1d weight " + shape_str(sw) + " incompatible with input " + shape_str(sx));
  if (stride == 0) throw DimensionError("conv1d stride must be positive");
  const std::size_t T = sx[0], cin = sx[1], cout = sw[0], K = sw[2];
  if (T + 2 * pad < K) throw DimensionError("conv1d input shorter than kernel");
  const std::size_t tout = (T + 2 * pad - K) / stride + 1;
  const double* X = node(x).ptr();
  const double* W = node(w).ptr();
  std::vector<double> out(tout * cout, 0.0);
  for (std::size_t t = 0; t < tout; ++t)
    for (std::size_t k = 0; k < K; ++k) {
      const long src = static_cast<long>(t * stride + k) - static_cast<long>(pad);
      if (src < 0 || src >= static_cast<long>(T)) continue;
      const double* xr = X + src * cin;
      for (std::size_t o = 0; o < cout; ++o) {
        double s = 0.0;
        const double* wr = W + o * cin * K + k;
        for (std::size_t c = 0; c < cin; ++c) s += wr[c * K] * xr[c];
        out[t * cout + o] += s;
      }
    }
  Var c = push({tout, cout}, std::move(out), any_needs({x, w}));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, x, w, c, T, cin, cout, K, tout, stride, pad] {
      const auto& dY = grad_of(c.id);
      const double* X = nodes_[x.id].ptr();
      const double* W = nodes_[w.id].ptr();
      const bool gx = nodes_[x.id].needs_grad, gw = nodes_[w.id].needs_grad;
      double* dX = gx ? grad_buf(x.id).data() : nullptr;
      double* dW = gw ? grad_buf(w.id).data() : nullptr;
      for (std::size_t t = 0; t < tout; ++t)
        for (std::size_t k = 0; k < K; ++k) {
          const long src = static_cast<long>(t * stride + k) - static_cast<long>(pad);
          if (src < 0 || src >= static_cast<long>(T)) continue;
          for (std::size_t o = 0; o < cout; ++o) {
            const double dy = dY[t * cout + o];
            for (std::size_t ci = 0; ci < cin; ++ci) {
              if (gw) dW[o * cin * K + ci * K + k] += dy * X[src * cin + ci];
              if (gx) dX[src * cin + ci] += dy * W[o * cin * K + ci * K + k];
            }
          }
        }
    };
  }
  return c;
}

Var Graph::transpose(Var a) {
  const auto sa = shape(a);
  require_rank2(sa, "transpose");
  const std::size_t m = sa[0], n = sa[1];
  const double* A = node(a).ptr();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  Var c = push({n, m}, std::move(out), needs(a));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, c, m, n] {
      const auto& dY = grad_of(c.id);
      auto& dA = grad_buf(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dA[i * n + j] += dY[j * m + i];
    };
  }
  return c;
}

Var Graph::reshape(Var a, Shape s) {
  if (shape_numel(s) != node(a).numel())
    throw DimensionError("cannot reshape " + shape_str(shape(a)) + " to " + shape_str(s));
  auto d = data(a);
  Var c = push(std::move(s), std::vector<double>(d.begin(), d.end()), needs(a));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, c] {
      const auto& dY = grad_of(c.id);
      auto& dA = grad_buf(a.id);
      for (std::size_t i = 0; i < dY.size(); ++i) dA[i] += dY[i];
    };
  }
  return c;
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t count) {
  const auto sa = shape(a);
  require_rank2(sa, "slice_cols");
  if (count == 0 || begin + count > sa[1])
    throw DimensionError("column slice out of range for " + shape_str(sa));
  const std::size_t m = sa[0], n = sa[1];
  const double* A = node(a).ptr();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A + i * n + begin, count, out.data() + i * count);
  Var c = push({m, count}, std::move(out), needs(a));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, c, m, n, begin, count] {
      const auto& dY = grad_of(c.id);
      auto& dA = grad_buf(a.id);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) dA[i * n + begin + j] += dY[i * count + j];
    };
  }
  return c;
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t m = shape(parts[0])[0];
  std::size_t total = 0;
  bool ng = false;
  for (auto p : parts) {
    const auto& sp = shape(p);
    require_rank2(sp, "concat_cols");
    if (sp[0] != m) throw DimensionError("concat_cols row counts differ");
    total += sp[1];
    ng = ng || needs(p);
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (auto p : parts) {
    const std::size_t w = shape(p)[1];
    const double* P = node(p).ptr();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(P + i * w, w, out.data() + i * total + off);
    off += w;
  }
  std::vector<Var> pv(parts.begin(), parts.end());
  Var c = push({m, total}, std::move(out), ng);
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, c, m, total, pv = std::move(pv)] {
      const auto& dY = grad_of(c.id);
      std::size_t off = 0;
      for (auto p : pv) {
        const std::size_t w = nodes_[p.id].shape[1];
        if (nodes_[p.id].needs_grad) {
          auto& dP = grad_buf(p.id);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) dP[i * w + j] += dY[i * total + off + j];
        }
        off += w;
      }
    };
  }
  return c;
}

Var Graph::concat_rows(Var a, Var b) {
  const auto sa = shape(a);
  const auto sb = shape(b);
  require_rank2(sa, "concat_rows");
  require_rank2(sb, "concat_rows");
  if (sa[1] != sb[1]) throw DimensionError("concat_rows column counts differ: " + shape_str(sa) + ", " + shape_str(sb));
  const std::size_t na = node(a).numel();
  std::vector<double> out(node(a).ptr(), node(a).ptr() + na);
  out.insert(out.end(), node(b).ptr(), node(b).ptr() + node(b).numel());
  Var c = push({sa[0] + sb[0], sa[1]}, std::move(out), any_needs({a, b}));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, a, b, c, na] {
      const auto& dY = grad_of(c.id);
      if (nodes_[a.id].needs_grad) {
        auto& dA = grad_buf(a.id);
        for (std::size_t i = 0; i < na; ++i) dA[i] += dY[i];
      }
      if (nodes_[b.id].needs_grad) {
        auto& dB = grad_buf(b.id);
        for (std::size_t i = 0; i < dB.size(); ++i) dB[i] += dY[na + i];
      }
    };
  }
  return c;
}

Var Graph::cross_entropy(Var logits, std::span<const int> targets) {
  const auto sl = shape(logits);
  require_rank2(sl, "cross_entropy");
  const std::size_t T = sl[0], V = sl[1];
  if (targets.size() != T)
    throw DimensionError("cross_entropy has " + std::to_string(T) + " rows but " +
                         std::to_string(targets.size()) + " targets");
  const double* L = node(logits).ptr();
  std::vector<double> probs(T * V);
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V)
      throw IndexError("target id " + std::to_string(targets[t]) + " out of range for vocabulary " +
                       std::to_string(V));
    const double* l = L + t * V;
    const double mx = *std::max_element(l, l + V);
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      probs[t * V + j] = std::exp(l[j] - mx);
      sum += probs[t * V + j];
    }
    for (std::size_t j = 0; j < V; ++j) probs[t * V + j] /= sum;
    loss += -(l[targets[t]] - mx - std::log(sum));
  }
  loss /= static_cast<double>(T);
  std::vector<int> tv(targets.begin(), targets.end());
  Var c = push({1}, {loss}, needs(logits));
  if (nodes_[c.id].needs_grad) {
    nodes_[c.id].backward = [this, logits, c, T, V, probs = std::move(probs), tv = std::move(tv)] {
      const double g = grad_of(c.id)[0] / static_cast<double>(T);
      auto& dL = grad_buf(logits.id);
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < V; ++j)
          dL[t * V + j] += g * (probs[t * V + j] - (static_cast<int>(j) == tv[t] ? 1.0 : 0.0));
    };
  }
  return c;
}

void Graph::backward(Var loss, double seed) {
  if (nodes_.empty() || !loss.valid() || loss.id >= nodes_.size())
    throw StateError("backward called before any forward computation");
  if (!record_) throw StateError("backward on a graph built without recording");
  if (backward_done_) throw StateError("backward already run on this graph");
  if (nodes_[loss.id].numel() != 1) throw DimensionError("backward requires a scalar loss");
  backward_done_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  grad_buf(loss.id)[0] = seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward();
    if (n.param) {
      if (n.param->grad.size() != n.grad.size()) n.param->grad.assign(n.grad.size(), 0.0);
      for (std::size_t j = 0; j < n.grad.size(); ++j) n.param->grad[j] += n.grad[j];
    }
  }
}

}  // namespace prunelab

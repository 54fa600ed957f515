#include "ditmem/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "ditmem/errors.hpp"

namespace ditmem {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StrideMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStrideMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

CMapMat as_mat(const Tensor& t) {
  return CMapMat(t.ptr(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}
MapMat as_mat(Tensor& t) {
  return MapMat(t.ptr(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

void accumulate(const NodePtr& n, Tensor g) {
  if (!n->requires_grad) return;
  if (n->grad.empty()) {
    n->grad = std::move(g);
  } else {
    n->grad += g;
  }
}

// Builds the output node. The backward closure is attached only when some
// parent requires gradients.
Var make_result(Tensor value, std::vector<NodePtr> parents,
                std::function<void(const Tensor&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  const bool needs =
      std::any_of(parents.begin(), parents.end(), [](const NodePtr& p) { return p->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward_fn);
  }
  return Var::from_node(std::move(node));
}

void require_rank(const Var& v, std::size_t rank, const char* op) {
  if (v.value().rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_to_string(v.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                                " vs " + shape_to_string(b.shape()));
  }
}

}  // namespace

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return from_node(std::move(n));
}

Var Var::leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return from_node(std::move(n));
}

Var Var::from_node(std::shared_ptr<detail::Node> n) {
  Var v;
  v.node_ = std::move(n);
  return v;
}

void Var::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (!on) node_->grad = Tensor();
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  Tensor seed(loss.shape(), 1.0);
  accumulate(loss.node(), std::move(seed));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(n->grad);
      // Interior gradients are no longer needed once propagated.
      n->grad = Tensor();
    }
  }
}

namespace ag {

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value() + b.value();
  auto pa = a.node(), pb = b.node();
  return make_result(std::move(out), {pa, pb}, [pa, pb](const Tensor& g) {
    accumulate(pa, g);
    accumulate(pb, g);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value() - b.value();
  auto pa = a.node(), pb = b.node();
  return make_result(std::move(out), {pa, pb}, [pa, pb](const Tensor& g) {
    accumulate(pa, g);
    accumulate(pb, -1.0 * g);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto pa = a.node(), pb = b.node();
  return make_result(std::move(out), {pa, pb}, [pa, pb](const Tensor& g) {
    if (pa->requires_grad) {
      Tensor ga = g;
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= pb->value[i];
      accumulate(pa, std::move(ga));
    }
    if (pb->requires_grad) {
      Tensor gb = g;
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= pa->value[i];
      accumulate(pb, std::move(gb));
    }
  });
}

Var scale(const Var& a, double s) {
  auto pa = a.node();
  return make_result(s * a.value(), {pa}, [pa, s](const Tensor& g) { accumulate(pa, s * g); });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += s;
  auto pa = a.node();
  return make_result(std::move(out), {pa}, [pa](const Tensor& g) { accumulate(pa, g); });
}

Var add_rows(const Var& x, const Var& bias) {
  require_rank(x, 2, "add_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (bias.value().numel() != d) throw std::invalid_argument("add_rows: bias width mismatch");
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bias.value()[c];
  auto px = x.node(), pb = bias.node();
  return make_result(std::move(out), {px, pb}, [px, pb, n, d](const Tensor& g) {
    accumulate(px, g);
    if (pb->requires_grad) {
      Tensor gb(pb->value.shape());
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
      accumulate(pb, std::move(gb));
    }
  });
}

Var mul_rows(const Var& x, const Var& gain) {
  require_rank(x, 2, "mul_rows");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (gain.value().numel() != d) throw std::invalid_argument("mul_rows: gain width mismatch");
  Tensor out = x.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= gain.value()[c];
  auto px = x.node(), pg = gain.node();
  return make_result(std::move(out), {px, pg}, [px, pg, n, d](const Tensor& g) {
    if (px->requires_grad) {
      Tensor gx = g;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] *= pg->value[c];
      accumulate(px, std::move(gx));
    }
    if (pg->requires_grad) {
      Tensor gg(pg->value.shape());
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * px->value[r * d + c];
      accumulate(pg, std::move(gg));
    }
  });
}

Var modulate(const Var& x, const Var& shift, const Var& scale_v) {
  return add_rows(mul_rows(x, add_scalar(scale_v, 1.0)), shift);
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: inner dims " + shape_to_string(a.shape()) + " x " +
                                shape_to_string(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  auto pa = a.node(), pb = b.node();
  return make_result(std::move(out), {pa, pb}, [pa, pb](const Tensor& g) {
    if (pa->requires_grad) {
      Tensor ga(pa->value.shape());
      as_mat(ga).noalias() = as_mat(g) * as_mat(pb->value).transpose();
      accumulate(pa, std::move(ga));
    }
    if (pb->requires_grad) {
      Tensor gb(pb->value.shape());
      as_mat(gb).noalias() = as_mat(pa->value).transpose() * as_mat(g);
      accumulate(pb, std::move(gb));
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) { return add_rows(matmul(x, w), b); }

Var layer_norm(const Var& x, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> rstd(n);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < n; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += xv[r * d + c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double t = xv[r * d + c] - mu;
      var += t * t;
    }
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (xv[r * d + c] - mu) * rstd[r];
  }
  auto px = x.node();
  Tensor y = out;
  return make_result(std::move(out), {px},
                     [px, y = std::move(y), rstd = std::move(rstd), n, d](const Tensor& g) {
                       Tensor gx(px->value.shape());
                       for (std::size_t r = 0; r < n; ++r) {
                         double mg = 0.0, mgy = 0.0;
                         for (std::size_t c = 0; c < d; ++c) {
                           mg += g[r * d + c];
                           mgy += g[r * d + c] * y[r * d + c];
                         }
                         mg /= static_cast<double>(d);
                         mgy /= static_cast<double>(d);
                         for (std::size_t c = 0; c < d; ++c) {
                           gx[r * d + c] = rstd[r] * (g[r * d + c] - mg - y[r * d + c] * mgy);
                         }
                       }
                       accumulate(px, std::move(gx));
                     });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  auto px = x.node();
  return make_result(std::move(out), {px}, [px](const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      if (!(px->value[i] > 0.0)) gx[i] = 0.0;
    }
    accumulate(px, std::move(gx));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    v = 0.5 * v * (1.0 + t);
  }
  auto px = x.node();
  return make_result(std::move(out), {px}, [px](const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const double v = px->value[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      gx[i] *= 0.5 * (1.0 + t) + 0.5 * v * dt;
    }
    accumulate(px, std::move(gx));
  });
}

Var silu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v / (1.0 + std::exp(-v));
  auto px = x.node();
  return make_result(std::move(out), {px}, [px](const Tensor& g) {
    Tensor gx = g;
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      const double v = px->value[i];
      const double s = 1.0 / (1.0 + std::exp(-v));
      gx[i] *= s * (1.0 + v * (1.0 - s));
    }
    accumulate(px, std::move(gx));
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  const std::size_t n = q.dim(0), m = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != m) {
    throw std::invalid_argument("attention: q/k/v widths disagree");
  }
  if (n_heads == 0 || d % n_heads != 0) throw std::invalid_argument("attention: bad head count");
  const std::size_t dh = d / n_heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto N = static_cast<Eigen::Index>(n), M = static_cast<Eigen::Index>(m),
             DH = static_cast<Eigen::Index>(dh), D = static_cast<Eigen::Index>(d);

  Tensor out({n, d});
  auto probs = std::make_shared<std::vector<RowMat>>(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto off = static_cast<Eigen::Index>(h * dh);
    CStrideMap qh(q.value().ptr() + off, N, DH, Eigen::OuterStride<>(D));
    CStrideMap kh(k.value().ptr() + off, M, DH, Eigen::OuterStride<>(D));
    CStrideMap vh(v.value().ptr() + off, M, DH, Eigen::OuterStride<>(D));
    RowMat sc = (qh * kh.transpose()) * s;
    for (Eigen::Index r = 0; r < N; ++r) {
      const double mx = sc.row(r).maxCoeff();
      double z = 0.0;
      for (Eigen::Index c = 0; c < M; ++c) {
        sc(r, c) = std::exp(sc(r, c) - mx);
        z += sc(r, c);
      }
      sc.row(r) /= z;
    }
    StrideMap oh(out.ptr() + off, N, DH, Eigen::OuterStride<>(D));
    oh.noalias() = sc * vh;
    (*probs)[h] = std::move(sc);
  }
  auto pq = q.node(), pk = k.node(), pv = v.node();
  return make_result(
      std::move(out), {pq, pk, pv},
      [pq, pk, pv, probs, n_heads, dh, s, N, M, DH, D](const Tensor& g) {
        Tensor gq(pq->value.shape()), gk(pk->value.shape()), gv(pv->value.shape());
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto off = static_cast<Eigen::Index>(h * dh);
          const RowMat& p = (*probs)[h];
          CStrideMap qh(pq->value.ptr() + off, N, DH, Eigen::OuterStride<>(D));
          CStrideMap kh(pk->value.ptr() + off, M, DH, Eigen::OuterStride<>(D));
          CStrideMap vh(pv->value.ptr() + off, M, DH, Eigen::OuterStride<>(D));
          CStrideMap gh(g.ptr() + off, N, DH, Eigen::OuterStride<>(D));
          StrideMap gvh(gv.ptr() + off, M, DH, Eigen::OuterStride<>(D));
          gvh.noalias() = p.transpose() * gh;
          RowMat dp = gh * vh.transpose();
          RowMat ds(N, M);
          for (Eigen::Index r = 0; r < N; ++r) {
            const double inner = dp.row(r).dot(p.row(r));
            for (Eigen::Index c = 0; c < M; ++c) ds(r, c) = p(r, c) * (dp(r, c) - inner) * s;
          }
          StrideMap gqh(gq.ptr() + off, N, DH, Eigen::OuterStride<>(D));
          StrideMap gkh(gk.ptr() + off, M, DH, Eigen::OuterStride<>(D));
          gqh.noalias() = ds * kh;
          gkh.noalias() = ds.transpose() * qh;
        }
        accumulate(pq, std::move(gq));
        accumulate(pk, std::move(gk));
        accumulate(pv, std::move(gv));
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of nothing");
  std::vector<Tensor> values;
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> counts;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows");
    values.push_back(p.value());
    nodes.push_back(p.node());
    counts.push_back(p.dim(0));
  }
  Tensor out = ditmem::concat_rows(values);
  const std::size_t w = out.dim(1);
  return make_result(std::move(out), nodes, [nodes, counts, w](const Tensor& g) {
    std::size_t row = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (nodes[i]->requires_grad) accumulate(nodes[i], g.rows(row, counts[i]));
      row += counts[i];
    }
    (void)w;
  });
}

Var slice_rows(const Var& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  Tensor out = x.value().rows(start, count);
  auto px = x.node();
  return make_result(std::move(out), {px}, [px, start, count](const Tensor& g) {
    Tensor gx(px->value.shape());
    const std::size_t w = gx.dim(1);
    std::copy(g.storage().begin(), g.storage().end(),
              gx.storage().begin() + static_cast<std::ptrdiff_t>(start * w));
    (void)count;
    accumulate(px, std::move(gx));
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  auto px = x.node();
  return make_result(std::move(out), {px},
                     [px](const Tensor& g) { accumulate(px, g.reshaped(px->value.shape())); });
}

Var gather(const Var& x, std::vector<std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) throw std::invalid_argument("gather: size mismatch");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x.value()[index.at(i)];
  auto px = x.node();
  return make_result(std::move(out), {px}, [px, index = std::move(index)](const Tensor& g) {
    Tensor gx(px->value.shape());
    for (std::size_t i = 0; i < index.size(); ++i) gx[index[i]] += g[i];
    accumulate(px, std::move(gx));
  });
}

Var conv3d(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 5, "conv3d");
  require_rank(w, 5, "conv3d");
  const std::size_t B = x.dim(0), ci = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t co = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  if (w.dim(1) != ci) {
    throw DataError("conv3d: input has " + std::to_string(ci) + " channels, kernel expects " +
                    std::to_string(w.dim(1)));
  }
  if (b.value().numel() != co) throw std::invalid_argument("conv3d: bias size mismatch");
  if (kd % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv3d: kernel sizes must be odd for same padding");
  }
  const long pd = static_cast<long>(kd / 2), ph = static_cast<long>(kh / 2),
             pw = static_cast<long>(kw / 2);
  const std::size_t S = D * H * W, K = ci * kd * kh * kw;

  // im2col: cols[b] is [K, S]. -1 marks zero padding.
  std::vector<long> col_index(K * S);
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t a = 0; a < kd; ++a)
      for (std::size_t e = 0; e < kh; ++e)
        for (std::size_t f = 0; f < kw; ++f) {
          const std::size_t krow = ((c * kd + a) * kh + e) * kw + f;
          for (std::size_t z = 0; z < D; ++z)
            for (std::size_t y = 0; y < H; ++y)
              for (std::size_t xx = 0; xx < W; ++xx) {
                const long sz = static_cast<long>(z) + static_cast<long>(a) - pd;
                const long sy = static_cast<long>(y) + static_cast<long>(e) - ph;
                const long sx = static_cast<long>(xx) + static_cast<long>(f) - pw;
                long src = -1;
                if (sz >= 0 && sz < static_cast<long>(D) && sy >= 0 && sy < static_cast<long>(H) &&
                    sx >= 0 && sx < static_cast<long>(W)) {
                  src = static_cast<long>(c * S) + (sz * static_cast<long>(H) + sy) * static_cast<long>(W) + sx;
                }
                col_index[krow * S + (z * H + y) * W + xx] = src;
              }
        }

  auto cols = std::make_shared<std::vector<RowMat>>(B);
  Tensor out({B, co, D, H, W});
  CMapMat wm(w.value().ptr(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(K));
  for (std::size_t bi = 0; bi < B; ++bi) {
    RowMat& cm = (*cols)[bi];
    cm.resize(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(S));
    const double* xb = x.value().ptr() + bi * ci * S;
    double* cp = cm.data();
    for (std::size_t i = 0; i < K * S; ++i) cp[i] = col_index[i] >= 0 ? xb[col_index[i]] : 0.0;
    MapMat ob(out.ptr() + bi * co * S, static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(S));
    ob.noalias() = wm * cm;
    for (std::size_t c = 0; c < co; ++c) ob.row(static_cast<Eigen::Index>(c)).array() += b.value()[c];
  }
  auto px = x.node(), pwn = w.node(), pb = b.node();
  return make_result(
      std::move(out), {px, pwn, pb},
      [px, pwn, pb, cols, col_index = std::move(col_index), B, ci, co, S, K](const Tensor& g) {
        const auto CO = static_cast<Eigen::Index>(co), SS = static_cast<Eigen::Index>(S),
                   KK = static_cast<Eigen::Index>(K);
        Tensor gw(pwn->value.shape()), gb(pb->value.shape()), gx(px->value.shape());
        MapMat gwm(gw.ptr(), CO, KK);
        CMapMat wm(pwn->value.ptr(), CO, KK);
        for (std::size_t bi = 0; bi < B; ++bi) {
          CMapMat gb_out(g.ptr() + bi * co * S, CO, SS);
          if (pwn->requires_grad) gwm.noalias() += gb_out * (*cols)[bi].transpose();
          if (pb->requires_grad) {
            for (std::size_t c = 0; c < co; ++c) gb[c] += gb_out.row(static_cast<Eigen::Index>(c)).sum();
          }
          if (px->requires_grad) {
            RowMat gcols = wm.transpose() * gb_out;
            double* gxb = gx.ptr() + bi * ci * S;
            const double* gc = gcols.data();
            for (std::size_t i = 0; i < K * S; ++i) {
              if (col_index[i] >= 0) gxb[col_index[i]] += gc[i];
            }
          }
        }
        accumulate(pwn, std::move(gw));
        accumulate(pb, std::move(gb));
        accumulate(px, std::move(gx));
      });
}

Var max_pool3d(const Var& x, std::size_t pd, std::size_t ph, std::size_t pw) {
  require_rank(x, 5, "max_pool3d");
  const std::size_t B = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  if (D < pd || H < ph || W < pw) {
    throw DataError("max_pool3d: input " + shape_to_string(x.shape()) +
                    " smaller than pool window");
  }
  const std::size_t od = D / pd, oh = H / ph, ow = W / pw;
  Tensor out({B, C, od, oh, ow});
  std::vector<std::size_t> arg(out.numel());
  const auto& xv = x.value();
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * D * H * W;
    for (std::size_t z = 0; z < od; ++z)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_i = base;
          for (std::size_t a = 0; a < pd; ++a)
            for (std::size_t e = 0; e < ph; ++e)
              for (std::size_t f = 0; f < pw; ++f) {
                const std::size_t i = base + ((z * pd + a) * H + (y * ph + e)) * W + (xx * pw + f);
                if (xv[i] > best) {
                  best = xv[i];
                  best_i = i;
                }
              }
          out[o] = best;
          arg[o] = best_i;
        }
  }
  auto px = x.node();
  return make_result(std::move(out), {px}, [px, arg = std::move(arg)](const Tensor& g) {
    Tensor gx(px->value.shape());
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    accumulate(px, std::move(gx));
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, bool training,
               std::span<const double> running_mean, std::span<const double> running_var,
               double eps, BatchStats* batch_stats) {
  require_rank(x, 5, "batch_norm");
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3) * x.dim(4);
  const double count = static_cast<double>(B * S);
  const auto& xv = x.value();
  std::vector<double> mean(C, 0.0), var(C, 0.0);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S; ++i) s += xv[(b * C + c) * S + i];
      mean[c] = s / count;
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < S; ++i) {
          const double t = xv[(b * C + c) * S + i] - mean[c];
          v += t * t;
        }
      var[c] = v / count;
    }
    if (batch_stats) *batch_stats = {mean, var};
  } else {
    if (running_mean.size() != C || running_var.size() != C) {
      throw std::invalid_argument("batch_norm: running statistics size mismatch");
    }
    mean.assign(running_mean.begin(), running_mean.end());
    var.assign(running_var.begin(), running_var.end());
  }
  std::vector<double> rstd(C);
  for (std::size_t c = 0; c < C; ++c) rstd[c] = 1.0 / std::sqrt(var[c] + eps);

  Tensor xhat(x.shape()), out(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < S; ++i) {
        const std::size_t j = (b * C + c) * S + i;
        xhat[j] = (xv[j] - mean[c]) * rstd[c];
        out[j] = gamma.value()[c] * xhat[j] + beta.value()[c];
      }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return make_result(
      std::move(out), {px, pg, pb},
      [px, pg, pb, xhat = std::move(xhat), rstd = std::move(rstd), training, B, C, S,
       count](const Tensor& g) {
        Tensor gg(pg->value.shape()), gbeta(pb->value.shape()), gx(px->value.shape());
        for (std::size_t c = 0; c < C; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t j = (b * C + c) * S + i;
              sg += g[j];
              sgx += g[j] * xhat[j];
            }
          gbeta[c] = sg;
          gg[c] = sgx;
          const double k = pg->value[c] * rstd[c];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t j = (b * C + c) * S + i;
              gx[j] = training ? k * (g[j] - sg / count - xhat[j] * sgx / count) : k * g[j];
            }
        }
        accumulate(pg, std::move(gg));
        accumulate(pb, std::move(gbeta));
        accumulate(px, std::move(gx));
      });
}

Var spectral_filter(const Var& x, const freq::FrequencyMask& mask, bool residual) {
  Tensor out = freq::apply_filter(x.value(), mask, residual);
  auto px = x.node();
  // The masked transform is a real symmetric operator, so its adjoint is itself.
  return make_result(std::move(out), {px}, [px, mask, residual](const Tensor& g) {
    Tensor gx = freq::apply_filter(g, mask, residual);
    accumulate(px, std::move(gx));
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  auto px = x.node();
  return make_result(Tensor({1}, {s}), {px}, [px](const Tensor& g) {
    accumulate(px, Tensor(px->value.shape(), g[0]));
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

Var mse(const Var& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("mse: shape mismatch " + shape_to_string(pred.shape()) + " vs " +
                                shape_to_string(target.shape()));
  }
  const double n = static_cast<double>(target.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < target.numel(); ++i) {
    const double d = pred.value()[i] - target[i];
    s += d * d;
  }
  auto pp = pred.node();
  return make_result(Tensor({1}, {s / n}), {pp}, [pp, target, n](const Tensor& g) {
    Tensor gp(pp->value.shape());
    for (std::size_t i = 0; i < gp.numel(); ++i) gp[i] = 2.0 * (pp->value[i] - target[i]) / n * g[0];
    accumulate(pp, std::move(gp));
  });
}

}  // namespace ag
}  // namespace ditmem

#include "mdenet/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "mdenet/errors.hpp"

namespace mdenet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using StridedMap = Eigen::Map<RowMat, 0, Strided>;
using CStridedMap = Eigen::Map<const RowMat, 0, Strided>;

Var make_op(Shape shape, std::vector<double> value, std::vector<Var> parents,
            std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p && p->requires_grad; });
  if (node->requires_grad) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(fn);
  }
  return node;
}

bool wants(const Node& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}

void require_rank(const Var& a, std::size_t rank, const char* op) {
  if (a->shape.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a->shape));
  }
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a->shape != b->shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
  }
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Var constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("constant: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return node;
}

Var zeros(Shape shape) {
  auto n = numel(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Var parameter(Shape shape, std::vector<double> values) {
  auto node = constant(std::move(shape), std::move(values));
  node->requires_grad = true;
  return node;
}

Var scalar(double v) { return constant({}, {v}); }

void backward(const Var& root) {
  if (root->size() != 1) throw ShapeError("backward: root must be a single value");
  // Iterative post-order DFS gives a topological order without recursion limits.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

void zero_grad(std::span<const Var> params) {
  for (const auto& p : params) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
  return make_op(a->shape, std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!wants(self, k)) continue;
      auto& g = self.parents[k]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var scale(const Var& a, double s) {
  std::vector<double> out(a->value);
  for (auto& v : out) v *= s;
  return make_op(a->shape, std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Var relu(const Var& a) {
  std::vector<double> out(a->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
  return make_op(a->shape, std::move(out), {a}, [](Node& self) {
    auto& x = self.parents[0]->value;
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a->value) s += v;
  return make_op({}, {s}, {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Var mean(const Var& a) {
  if (a->size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a->size()));
}

Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a->size()) {
    throw ShapeError("reshape: " + shape_str(a->shape) + " -> " + shape_str(shape));
  }
  return make_op(std::move(shape), a->value, {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto n = a->shape[0], k = a->shape[1], m = b->shape[1];
  if (b->shape[0] != k) {
    throw ShapeError("matmul: " + shape_str(a->shape) + " x " + shape_str(b->shape));
  }
  std::vector<double> out(n * m);
  MatMap(out.data(), n, m).noalias() =
      CMatMap(a->value.data(), n, k) * CMatMap(b->value.data(), k, m);
  return make_op({n, m}, std::move(out), {a, b}, [n, k, m](Node& self) {
    CMatMap g(self.grad.data(), n, m);
    if (wants(self, 0)) {
      MatMap(self.parents[0]->grad_buffer().data(), n, k).noalias() +=
          g * CMatMap(self.parents[1]->value.data(), k, m).transpose();
    }
    if (wants(self, 1)) {
      MatMap(self.parents[1]->grad_buffer().data(), k, m).noalias() +=
          CMatMap(self.parents[0]->value.data(), n, k).transpose() * g;
    }
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  require_rank(x, 2, "add_row_bias");
  const auto n = x->shape[0], m = x->shape[1];
  if (bias->size() != m) throw ShapeError("add_row_bias: bias length mismatch");
  std::vector<double> out(x->value);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias->value[j];
  return make_op(x->shape, std::move(out), {x, bias}, [n, m](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) g[j] += self.grad[i * m + j];
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  auto y = matmul(x, weight);
  return bias ? add_row_bias(y, bias) : y;
}

Var concat_cols(const Var& a, const Var& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  const auto n = a->shape[0], ca = a->shape[1], cb = b->shape[1];
  if (b->shape[0] != n) throw ShapeError("concat_cols: row count mismatch");
  std::vector<double> out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a->value.begin() + i * ca, ca, out.begin() + i * (ca + cb));
    std::copy_n(b->value.begin() + i * cb, cb, out.begin() + i * (ca + cb) + ca);
  }
  return make_op({n, ca + cb}, std::move(out), {a, b}, [n, ca, cb](Node& self) {
    const auto w = ca + cb;
    if (wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ca; ++j) g[i * ca + j] += self.grad[i * w + j];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < cb; ++j) g[i * cb + j] += self.grad[i * w + ca + j];
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  if (a->shape.empty() || begin > end || end > a->shape[0]) {
    throw ShapeError("slice_rows: bad range on " + shape_str(a->shape));
  }
  const auto row = a->size() / std::max<std::size_t>(a->shape[0], 1);
  Shape shape = a->shape;
  shape[0] = end - begin;
  std::vector<double> out(a->value.begin() + begin * row, a->value.begin() + end * row);
  return make_op(std::move(shape), std::move(out), {a}, [begin, row](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
  });
}

Var concat_rows(const Var& a, const Var& b) {
  if (a->shape.empty() || a->shape.size() != b->shape.size() ||
      !std::equal(a->shape.begin() + 1, a->shape.end(), b->shape.begin() + 1)) {
    throw ShapeError("concat_rows: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
  }
  Shape shape = a->shape;
  shape[0] += b->shape[0];
  std::vector<double> out(a->value);
  out.insert(out.end(), b->value.begin(), b->value.end());
  const auto split = a->size();
  return make_op(std::move(shape), std::move(out), {a, b}, [split](Node& self) {
    if (wants(self, 0)) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
    }
    if (wants(self, 1)) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const auto n = x->shape[0], c = x->shape[1];
  const long h = static_cast<long>(x->shape[2]), w = static_cast<long>(x->shape[3]);
  const auto o = weight->shape[0];
  const long k = static_cast<long>(weight->shape[2]);
  if (weight->shape[1] != c || weight->shape[3] != weight->shape[2]) {
    throw ShapeError("conv2d: weight " + shape_str(weight->shape) + " vs input " +
                     shape_str(x->shape));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const long ho = (h + 2 * padding - k) / stride + 1;
  const long wo = (w + 2 * padding - k) / stride + 1;
  if (h + 2 * padding < k || w + 2 * padding < k || ho <= 0 || wo <= 0) {
    throw ShapeError("conv2d: input " + shape_str(x->shape) + " too small for kernel " +
                     std::to_string(k));
  }
  const auto ckk = c * static_cast<std::size_t>(k * k);
  const auto p = static_cast<std::size_t>(ho * wo);

  std::vector<double> cols(n * ckk * p, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    double* col = cols.data() + s * ckk * p;
    const double* img = x->value.data() + s * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (long ki = 0; ki < k; ++ki)
        for (long kj = 0; kj < k; ++kj) {
          double* dst = col + ((ch * k + ki) * k + kj) * p;
          for (long oy = 0; oy < ho; ++oy) {
            const long iy = oy * stride - padding + ki;
            if (iy < 0 || iy >= h) continue;
            for (long ox = 0; ox < wo; ++ox) {
              const long ix = ox * stride - padding + kj;
              if (ix >= 0 && ix < w) dst[oy * wo + ox] = img[(ch * h + iy) * w + ix];
            }
          }
        }
  }

  std::vector<double> out(n * o * p);
  CMatMap wm(weight->value.data(), o, ckk);
  for (std::size_t s = 0; s < n; ++s) {
    MatMap om(out.data() + s * o * p, o, p);
    om.noalias() = wm * CMatMap(cols.data() + s * ckk * p, ckk, p);
    if (bias) om.colwise() += Eigen::Map<const Eigen::VectorXd>(bias->value.data(), o);
  }

  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  return make_op(
      {n, o, static_cast<std::size_t>(ho), static_cast<std::size_t>(wo)}, std::move(out),
      std::move(parents),
      [cols = std::move(cols), n, c, h, w, o, k, ho, wo, ckk, p, stride, padding](Node& self) {
        CMatMap wm(self.parents[1]->value.data(), o, ckk);
        std::vector<double> dcol(ckk * p);
        for (std::size_t s = 0; s < n; ++s) {
          CMatMap g(self.grad.data() + s * o * p, o, p);
          CMatMap col(cols.data() + s * ckk * p, ckk, p);
          if (wants(self, 1)) {
            MatMap(self.parents[1]->grad_buffer().data(), o, ckk).noalias() += g * col.transpose();
          }
          if (self.parents.size() > 2 && wants(self, 2)) {
            Eigen::Map<Eigen::VectorXd>(self.parents[2]->grad_buffer().data(), o) +=
                g.rowwise().sum();
          }
          if (wants(self, 0)) {
            MatMap(dcol.data(), ckk, p).noalias() = wm.transpose() * g;
            double* dimg = self.parents[0]->grad_buffer().data() + s * c * h * w;
            for (std::size_t ch = 0; ch < c; ++ch)
              for (long ki = 0; ki < k; ++ki)
                for (long kj = 0; kj < k; ++kj) {
                  const double* src = dcol.data() + ((ch * k + ki) * k + kj) * p;
                  for (long oy = 0; oy < ho; ++oy) {
                    const long iy = oy * stride - padding + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (long ox = 0; ox < wo; ++ox) {
                      const long ix = ox * stride - padding + kj;
                      if (ix >= 0 && ix < w) dimg[(ch * h + iy) * w + ix] += src[oy * wo + ox];
                    }
                  }
                }
          }
        }
      });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                 bool training, double momentum, double eps) {
  require_rank(x, 4, "batch_norm2d");
  const auto n = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
  if (gamma->size() != c || beta->size() != c || stats.running_mean.size() != c ||
      stats.running_var.size() != c) {
    throw ShapeError("batch_norm2d: channel count mismatch for " + shape_str(x->shape));
  }
  const auto m = n * hw;
  std::vector<double> mu(c), invstd(c);
  if (training) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += x->value[(b * c + ch) * hw + i];
      const double mean = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = x->value[(b * c + ch) * hw + i] - mean;
          v += d * d;
        }
      const double var = v / static_cast<double>(m);
      mu[ch] = mean;
      invstd[ch] = 1.0 / std::sqrt(var + eps);
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      stats.running_mean[ch] = (1.0 - momentum) * stats.running_mean[ch] + momentum * mean;
      stats.running_var[ch] = (1.0 - momentum) * stats.running_var[ch] + momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mu[ch] = stats.running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps);
    }
  }
  std::vector<double> xhat(x->size()), out(x->size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < hw; ++i) {
        const auto idx = (b * c + ch) * hw + i;
        xhat[idx] = (x->value[idx] - mu[ch]) * invstd[ch];
        out[idx] = gamma->value[ch] * xhat[idx] + beta->value[ch];
      }
  return make_op(
      x->shape, std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), invstd = std::move(invstd), n, c, hw, m, training](Node& self) {
        std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) {
              const auto idx = (b * c + ch) * hw + i;
              sum_g[ch] += self.grad[idx];
              sum_gx[ch] += self.grad[idx] * xhat[idx];
            }
        if (wants(self, 1)) {
          auto& g = self.parents[1]->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_gx[ch];
        }
        if (wants(self, 2)) {
          auto& g = self.parents[2]->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_g[ch];
        }
        if (!wants(self, 0)) return;
        const auto& gamma = self.parents[1]->value;
        auto& dx = self.parents[0]->grad_buffer();
        const double md = static_cast<double>(m);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < hw; ++i) {
              const auto idx = (b * c + ch) * hw + i;
              if (training) {
                dx[idx] += gamma[ch] * invstd[ch] / md *
                           (md * self.grad[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
              } else {
                dx[idx] += gamma[ch] * invstd[ch] * self.grad[idx];
              }
            }
      });
}

namespace {

// Row-wise softmax of scores restricted to columns where keep(j) holds; other
// columns get weight 0. Rows with no kept column become all zeros.
template <typename Keep>
void masked_softmax_rows(RowMat& scores, Keep keep) {
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
      if (keep(j)) mx = std::max(mx, scores(i, j));
    double total = 0.0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      const double e = keep(j) ? std::exp(scores(i, j) - mx) : 0.0;
      scores(i, j) = e;
      total += e;
    }
    if (total > 0.0) scores.row(i) /= total;
  }
}

// dScores = S .* (dS - rowsum(S .* dS)).
RowMat softmax_backward(const RowMat& s, const RowMat& ds) {
  RowMat out = s.cwiseProduct(ds);
  Eigen::VectorXd rs = out.rowwise().sum();
  out -= s.cwiseProduct(rs.replicate(1, s.cols()));
  return out;
}

}  // namespace

Var non_local(const Var& key, const Var& value) {
  require_rank(key, 4, "non_local key");
  require_rank(value, 4, "non_local value");
  const auto n = key->shape[0], ck = key->shape[1], cv = value->shape[1];
  const auto p = key->shape[2] * key->shape[3];
  if (value->shape[0] != n || value->shape[2] * value->shape[3] != p ||
      value->shape[2] != key->shape[2]) {
    throw ShapeError("non_local: key " + shape_str(key->shape) + " vs value " +
                     shape_str(value->shape));
  }
  std::vector<double> weights(n * p * p), out(n * cv * p);
  for (std::size_t s = 0; s < n; ++s) {
    CMatMap th(key->value.data() + s * ck * p, ck, p);
    RowMat a = th.transpose() * th;
    masked_softmax_rows(a, [](Eigen::Index) { return true; });
    MatMap(weights.data() + s * p * p, p, p) = a;
    MatMap(out.data() + s * cv * p, cv, p).noalias() =
        CMatMap(value->value.data() + s * cv * p, cv, p) * a.transpose();
  }
  return make_op(value->shape, std::move(out), {key, value},
                 [weights = std::move(weights), n, ck, cv, p](Node& self) {
                   for (std::size_t s = 0; s < n; ++s) {
                     CMatMap sm(weights.data() + s * p * p, p, p);
                     CMatMap g(self.grad.data() + s * cv * p, cv, p);
                     CMatMap val(self.parents[1]->value.data() + s * cv * p, cv, p);
                     if (wants(self, 1)) {
                       MatMap(self.parents[1]->grad_buffer().data() + s * cv * p, cv, p)
                           .noalias() += g * sm;
                     }
                     if (wants(self, 0)) {
                       RowMat ds = g.transpose() * val;
                       RowMat da = softmax_backward(sm, ds);
                       CMatMap th(self.parents[0]->value.data() + s * ck * p, ck, p);
                       MatMap(self.parents[0]->grad_buffer().data() + s * ck * p, ck, p)
                           .noalias() += th * (da + da.transpose());
                     }
                   }
                 });
}

Var embed_tokens(std::span<const int> ids, std::size_t batch, std::size_t length,
                 const Var& token_table, const Var& position_table) {
  require_rank(token_table, 2, "embed_tokens");
  require_rank(position_table, 2, "embed_tokens positions");
  const auto vocab = token_table->shape[0], d = token_table->shape[1];
  if (ids.size() != batch * length) throw ShapeError("embed_tokens: id count mismatch");
  if (position_table->shape[0] < length || position_table->shape[1] != d) {
    throw ShapeError("embed_tokens: position table too small for length " +
                     std::to_string(length));
  }
  std::vector<int> saved(ids.begin(), ids.end());
  std::vector<double> out(batch * length * d);
  for (std::size_t t = 0; t < saved.size(); ++t) {
    if (saved[t] < 0 || static_cast<std::size_t>(saved[t]) >= vocab) {
      throw ShapeError("embed_tokens: token id " + std::to_string(saved[t]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    const auto l = t % length;
    for (std::size_t j = 0; j < d; ++j)
      out[t * d + j] = token_table->value[saved[t] * d + j] + position_table->value[l * d + j];
  }
  return make_op({batch, length, d}, std::move(out), {token_table, position_table},
                 [saved = std::move(saved), length, d](Node& self) {
                   for (std::size_t t = 0; t < saved.size(); ++t) {
                     if (wants(self, 0)) {
                       auto& g = self.parents[0]->grad_buffer();
                       for (std::size_t j = 0; j < d; ++j) g[saved[t] * d + j] += self.grad[t * d + j];
                     }
                     if (wants(self, 1)) {
                       auto& g = self.parents[1]->grad_buffer();
                       const auto l = t % length;
                       for (std::size_t j = 0; j < d; ++j) g[l * d + j] += self.grad[t * d + j];
                     }
                   }
                 });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  if (x->shape.empty()) throw ShapeError("layer_norm: scalar input");
  const auto d = x->shape.back();
  const auto rows = x->size() / d;
  if (gamma->size() != d || beta->size() != d) throw ShapeError("layer_norm: scale/offset size");
  std::vector<double> xhat(x->size()), invstd(rows), out(x->size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x->value.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    invstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * invstd[r];
      out[r * d + j] = gamma->value[j] * xhat[r * d + j] + beta->value[j];
    }
  }
  return make_op(x->shape, std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), invstd = std::move(invstd), rows, d](Node& self) {
                   const auto& gamma = self.parents[1]->value;
                   const double dd = static_cast<double>(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double* g = self.grad.data() + r * d;
                     const double* xh = xhat.data() + r * d;
                     if (wants(self, 1)) {
                       auto& gg = self.parents[1]->grad_buffer();
                       for (std::size_t j = 0; j < d; ++j) gg[j] += g[j] * xh[j];
                     }
                     if (wants(self, 2)) {
                       auto& gb = self.parents[2]->grad_buffer();
                       for (std::size_t j = 0; j < d; ++j) gb[j] += g[j];
                     }
                     if (!wants(self, 0)) continue;
                     double s1 = 0.0, s2 = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dxh = g[j] * gamma[j];
                       s1 += dxh;
                       s2 += dxh * xh[j];
                     }
                     double* dx = self.parents[0]->grad_buffer().data() + r * d;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dxh = g[j] * gamma[j];
                       dx[j] += invstd[r] / dd * (dd * dxh - s1 - xh[j] * s2);
                     }
                   }
                 });
}

Var masked_attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> mask,
                     int heads) {
  require_rank(q, 3, "masked_attention");
  require_same(q, k, "masked_attention");
  require_same(q, v, "masked_attention");
  const auto n = q->shape[0], l = q->shape[1], d = q->shape[2];
  if (heads < 1 || d % static_cast<std::size_t>(heads) != 0) {
    throw ShapeError("masked_attention: model width " + std::to_string(d) +
                     " not divisible by heads " + std::to_string(heads));
  }
  if (mask.size() != n * l) throw ShapeError("masked_attention: mask size mismatch");
  const auto h = static_cast<std::size_t>(heads), dh = d / h;
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  std::vector<double> weights(n * h * l * l), out(n * l * d);
  for (std::size_t s = 0; s < n; ++s) {
    const std::uint8_t* km = keep.data() + s * l;
    for (std::size_t hd = 0; hd < h; ++hd) {
      const auto off = s * l * d + hd * dh;
      CStridedMap qh(q->value.data() + off, l, dh, Strided(d));
      CStridedMap kh(k->value.data() + off, l, dh, Strided(d));
      CStridedMap vh(v->value.data() + off, l, dh, Strided(d));
      RowMat sc = qh * kh.transpose();
      masked_softmax_rows(sc, [km](Eigen::Index j) { return km[j] != 0; });
      MatMap(weights.data() + (s * h + hd) * l * l, l, l) = sc;
      StridedMap(out.data() + off, l, dh, Strided(d)).noalias() = sc * vh;
    }
  }
  return make_op(q->shape, std::move(out), {q, k, v},
                 [weights = std::move(weights), n, l, d, h, dh](Node& self) {
                   for (std::size_t s = 0; s < n; ++s)
                     for (std::size_t hd = 0; hd < h; ++hd) {
                       const auto off = s * l * d + hd * dh;
                       CMatMap sm(weights.data() + (s * h + hd) * l * l, l, l);
                       CStridedMap g(self.grad.data() + off, l, dh, Strided(d));
                       CStridedMap qh(self.parents[0]->value.data() + off, l, dh, Strided(d));
                       CStridedMap kh(self.parents[1]->value.data() + off, l, dh, Strided(d));
                       CStridedMap vh(self.parents[2]->value.data() + off, l, dh, Strided(d));
                       if (wants(self, 2)) {
                         StridedMap(self.parents[2]->grad_buffer().data() + off, l, dh, Strided(d))
                             .noalias() += sm.transpose() * g;
                       }
                       if (!wants(self, 0) && !wants(self, 1)) continue;
                       RowMat ds = g * vh.transpose();
                       RowMat dsc = softmax_backward(sm, ds);
                       if (wants(self, 0)) {
                         StridedMap(self.parents[0]->grad_buffer().data() + off, l, dh, Strided(d))
                             .noalias() += dsc * kh;
                       }
                       if (wants(self, 1)) {
                         StridedMap(self.parents[1]->grad_buffer().data() + off, l, dh, Strided(d))
                             .noalias() += dsc.transpose() * qh;
                       }
                     }
                 });
}

Var masked_mean(const Var& x, std::span<const std::uint8_t> mask) {
  require_rank(x, 3, "masked_mean");
  const auto n = x->shape[0], l = x->shape[1], d = x->shape[2];
  if (mask.size() != n * l) throw ShapeError("masked_mean: mask size mismatch");
  std::vector<double> inv_count(n, 0.0);
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  std::vector<double> out(n * d, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    std::size_t cnt = 0;
    for (std::size_t t = 0; t < l; ++t) {
      if (!keep[s * l + t]) continue;
      ++cnt;
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += x->value[(s * l + t) * d + j];
    }
    if (cnt > 0) {
      inv_count[s] = 1.0 / static_cast<double>(cnt);
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] *= inv_count[s];
    }
  }
  return make_op({n, d}, std::move(out), {x},
                 [keep = std::move(keep), inv_count = std::move(inv_count), n, l, d](Node& self) {
                   auto& g = self.parents[0]->grad_buffer();
                   for (std::size_t s = 0; s < n; ++s)
                     for (std::size_t t = 0; t < l; ++t) {
                       if (!keep[s * l + t]) continue;
                       for (std::size_t j = 0; j < d; ++j)
                         g[(s * l + t) * d + j] += self.grad[s * d + j] * inv_count[s];
                     }
                 });
}

Var softmax_rows(const Var& logits) {
  require_rank(logits, 2, "softmax_rows");
  const auto n = logits->shape[0], k = logits->shape[1];
  RowMat s = CMatMap(logits->value.data(), n, k);
  masked_softmax_rows(s, [](Eigen::Index) { return true; });
  std::vector<double> out(s.data(), s.data() + s.size());
  return make_op(logits->shape, std::move(out), {logits}, [n, k](Node& self) {
    RowMat sm = CMatMap(self.value.data(), n, k);
    RowMat g = CMatMap(self.grad.data(), n, k);
    MatMap(self.parents[0]->grad_buffer().data(), n, k) += softmax_backward(sm, g);
  });
}

Var cross_entropy(const Var& probs, std::span<const int> labels, double eps) {
  require_rank(probs, 2, "cross_entropy");
  const auto n = probs->shape[0], k = probs->shape[1];
  if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  std::vector<int> saved(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (saved[i] < 0 || static_cast<std::size_t>(saved[i]) >= k) {
      throw ShapeError("cross_entropy: label " + std::to_string(saved[i]) + " out of range");
    }
    loss -= std::log(std::max(probs->value[i * k + saved[i]], eps));
  }
  loss /= static_cast<double>(n);
  return make_op({}, {loss}, {probs}, [saved = std::move(saved), n, k, eps](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const auto& pv = self.parents[0]->value;
    for (std::size_t i = 0; i < n; ++i) {
      const double q = pv[i * k + saved[i]];
      if (q > eps) g[i * k + saved[i]] -= self.grad[0] / (static_cast<double>(n) * q);
    }
  });
}

Var row_distance(const Var& a, const Var& b) {
  require_same(a, b, "row_distance");
  if (a->shape.empty()) throw ShapeError("row_distance: scalar input");
  const auto n = a->shape[0], d = a->size() / std::max<std::size_t>(n, 1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = a->value[i * d + j] - b->value[i * d + j];
      s += diff * diff;
    }
    out[i] = std::sqrt(s);
  }
  return make_op({n}, std::move(out), {a, b}, [n, d](Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      const double dist = self.value[i];
      if (dist <= 0.0) continue;  // subgradient 0 at coincident points
      const double f = self.grad[i] / dist;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = self.parents[0]->value[i * d + j] - self.parents[1]->value[i * d + j];
        if (wants(self, 0)) self.parents[0]->grad_buffer()[i * d + j] += f * diff;
        if (wants(self, 1)) self.parents[1]->grad_buffer()[i * d + j] -= f * diff;
      }
    }
  });
}

Var row_norm(const Var& a) {
  if (a->shape.empty()) throw ShapeError("row_norm: scalar input");
  const auto n = a->shape[0], d = a->size() / std::max<std::size_t>(n, 1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += a->value[i * d + j] * a->value[i * d + j];
    out[i] = std::sqrt(s);
  }
  return make_op({n}, std::move(out), {a}, [n, d](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      if (self.value[i] <= 0.0) continue;
      const double f = self.grad[i] / self.value[i];
      for (std::size_t j = 0; j < d; ++j) g[i * d + j] += f * self.parents[0]->value[i * d + j];
    }
  });
}

Var frobenius_norm(const Var& w) {
  double s = 0.0;
  for (double v : w->value) s += v * v;
  return make_op({}, {std::sqrt(s)}, {w}, [](Node& self) {
    if (self.value[0] <= 0.0) return;
    auto& g = self.parents[0]->grad_buffer();
    const double f = self.grad[0] / self.value[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * self.parents[0]->value[i];
  });
}

Var hinge_sum(const Var& norms, const Var& rho) {
  if (rho->size() != 1) throw ShapeError("hinge_sum: rho must be a single value");
  const double r = rho->value[0];
  double s = 0.0;
  for (double v : norms->value) s += std::max(v - r, 0.0);
  return make_op({}, {s}, {norms, rho}, [](Node& self) {
    const double r = self.parents[1]->value[0];
    const auto& nv = self.parents[0]->value;
    double outside = 0.0;
    for (std::size_t i = 0; i < nv.size(); ++i) {
      if (nv[i] > r) {
        outside += 1.0;
        if (wants(self, 0)) self.parents[0]->grad_buffer()[i] += self.grad[0];
      }
    }
    if (wants(self, 1)) self.parents[1]->grad_buffer()[0] -= outside * self.grad[0];
  });
}

}  // namespace mdenet

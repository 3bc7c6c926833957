#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every op records its parents and a backward closure; a
// call to backward() walks the graph in reverse topological order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mdenet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;

  std::size_t size() const { return value.size(); }
  // Lazily sized to match value; zero-filled on first use.
  std::vector<double>& grad_buffer();
};

Var constant(Shape shape, std::vector<double> values);
Var zeros(Shape shape);
Var parameter(Shape shape, std::vector<double> values);
Var scalar(double v);

// Seeds d(root)/d(root) = 1 and propagates. root must hold a single value.
void backward(const Var& root);
void zero_grad(std::span<const Var> params);

// Element-wise and reductions.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var reshape(const Var& a, Shape shape);

// Dense algebra on 2-d tensors.
Var matmul(const Var& a, const Var& b);
Var add_row_bias(const Var& x, const Var& bias);
Var linear(const Var& x, const Var& weight, const Var& bias);
Var concat_cols(const Var& a, const Var& b);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var concat_rows(const Var& a, const Var& b);

// Convolutional ops on [N, C, H, W] tensors.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

struct BatchNormStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
};
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
                 bool training, double momentum = 0.1, double eps = 1e-5);

// Non-local aggregation: out[:, i] = sum_j softmax_j(key[:, i] . key[:, j]) * value[:, j].
// key is [N, Ck, H, W], value is [N, Cv, H, W]; result is [N, Cv, H, W].
Var non_local(const Var& key, const Var& value);

// Sequence ops on [N, L, D] tensors.
Var embed_tokens(std::span<const int> ids, std::size_t batch, std::size_t length,
                 const Var& token_table, const Var& position_table);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// mask[n * L + l] != 0 marks a real token; masked keys get zero weight.
Var masked_attention(const Var& q, const Var& k, const Var& v, std::span<const std::uint8_t> mask,
                     int heads);
Var masked_mean(const Var& x, std::span<const std::uint8_t> mask);

// Heads and losses.
Var softmax_rows(const Var& logits);
Var cross_entropy(const Var& probs, std::span<const int> labels, double eps = 1e-12);
Var row_distance(const Var& a, const Var& b);
Var row_norm(const Var& a);
Var frobenius_norm(const Var& w);
// sum_i max(norms_i - rho, 0); rho is a single-value tensor.
Var hinge_sum(const Var& norms, const Var& rho);

}  // namespace mdenet

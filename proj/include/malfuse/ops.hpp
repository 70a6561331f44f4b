#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "malfuse/autodiff.hpp"
#include "malfuse/rng.hpp"

namespace malfuse {

enum class Activation { relu, sigmoid, tanh, softmax, linear };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

namespace ops {

// Rank-2 ops. Shapes are checked and a ShapeError names the op on mismatch.
Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var add_bias(Tape& t, Var x, Var bias);
Var scale(Tape& t, Var x, double factor);
Var activate(Tape& t, Var x, Activation act);
Var concat_cols(Tape& t, const std::vector<Var>& parts);
Var stack_rows(Tape& t, const std::vector<Var>& parts);
Var reshape(Tape& t, Var x, Shape shape);
Var select_row(Tape& t, Var x, std::size_t r);
// Divides each row by its sum; rows must have a positive sum.
Var normalize_rows(Tape& t, Var x);
Var sum(Tape& t, const std::vector<Var>& scalars);

// Losses return the sum over rows; callers divide by batch size.
Var softmax_cross_entropy(Tape& t, Var logits, std::span<const int> labels);
Var sigmoid_binary_cross_entropy(Tape& t, Var logits, const Tensor& targets);
// Per-row mean squared error, summed over rows.
Var mean_squared_error(Tape& t, Var prediction, const Tensor& target);

// x: {C,H,W}, kernels: {K,C,kh,kw}, bias: {K}. Stride 1, same padding.
Var conv2d(Tape& t, Var x, Var kernels, Var bias);
// x: {C,H,W} -> {C, ceil(H/P), ceil(W/P)}; partial windows at the edges.
Var max_pool2d(Tape& t, Var x, std::size_t pool);

// table: {V,e}; ids index rows.
Var embedding(Tape& t, Var table, std::span<const int> ids);

// Long short-term memory over rows of x ({T,in}). input_weights: {in,4u},
// recurrent_weights: {u,4u}, bias: {1,4u}; gate order input, forget, cell,
// output. Returns {T,u}, row t holding the state after consuming step t.
// When reverse is set the sequence is consumed from the last row.
Var lstm(Tape& t, Var x, Var input_weights, Var recurrent_weights, Var bias, bool reverse);

// Softmax over <hidden_i, context> scores, returning sum_i w_i * hidden_i
// as a {1,h} row. hidden: {T,h}, context: {1,h} or {h}.
Var attention_pool(Tape& t, Var hidden, Var context, std::vector<double>* weights_out = nullptr);

Var dropout(Tape& t, Var x, double rate, Rng& rng);

// Batch normalization over rows. In training mode batch statistics are
// used and the running estimates are updated with `momentum`.
Var batch_norm(Tape& t, Var x, Var gamma, Var beta, bool training, std::vector<double>& running_mean,
               std::vector<double>& running_var, double momentum = 0.1, double eps = 1e-5);

// One-vs-rest scores. probs: {N, M*F} (M blocks of F), weights: {M,F},
// bias: {1,F}. out[n,f] = sum_m weights[m,f] * probs[n, m*F+f] + bias[f].
Var ovr_scores(Tape& t, Var probs, Var weights, Var bias);

}  // namespace ops

// Row-wise numerically stable softmax.
Tensor softmax_rows(const Tensor& logits);
void softmax_inplace(std::span<double> v);

struct AttentionResult {
  std::vector<double> weights;
  std::vector<double> pooled;
};

// Pure form of ops::attention_pool on explicit vectors.
AttentionResult attention_pool(const std::vector<std::vector<double>>& hidden, std::span<const double> context);

}  // namespace malfuse

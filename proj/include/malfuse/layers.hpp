#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "malfuse/archive.hpp"
#include "malfuse/autodiff.hpp"
#include "malfuse/ops.hpp"
#include "malfuse/rng.hpp"

namespace malfuse {

enum class WeightMode { fixed, trainable };

std::string to_string(WeightMode m);
WeightMode weight_mode_from_string(const std::string& s);

// Tunable knobs shared by every trained model. Ranges follow the tuning
// table: weight decay in [0, 0.001], dropout in [0, 0.5].
struct Hyperparams {
  Activation activation = Activation::relu;
  double weight_decay = 0.0;
  double dropout = 0.0;
  bool batchnorm = false;
  WeightMode weight_mode = WeightMode::trainable;
  double learning_rate = 1e-3;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  std::size_t patience = 10;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::json to_json() const;
  // Keys absent from `j` keep the values of `base`; unknown keys throw.
  static Hyperparams from_json(const nlohmann::json& j, const Hyperparams& base);
  static Hyperparams from_json(const nlohmann::json& j);
};

// Forward-pass context. Dropout draws from `rng` only in training mode.
struct Mode {
  bool training = false;
  Rng* rng = nullptr;
};

// Uniform fan-in initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);
Tensor uniform_tensor(Shape shape, double limit, Rng& rng);

struct Dense {
  Parameter weight;  // {in, out}
  Parameter bias;    // {1, out}
  Activation activation = Activation::linear;

  Dense() = default;
  Dense(std::string name, std::size_t in, std::size_t out, Activation act, Rng& rng);

  std::size_t in_width() const { return weight.value.shape[0]; }
  std::size_t out_width() const { return weight.value.shape[1]; }
  Var forward(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& out) { out.push_back(&weight), out.push_back(&bias); }
};

struct Conv2d {
  Parameter kernels;  // {K, C, 3, 3}
  Parameter bias;     // {K}

  Conv2d() = default;
  Conv2d(std::string name, std::size_t in_channels, std::size_t kernel_count, std::size_t size, Rng& rng);

  Var forward(Tape& t, Var x) const { return ops::conv2d(t, x, t.parameter(kernels), t.parameter(bias)); }
  void collect(std::vector<Parameter*>& out) { out.push_back(&kernels), out.push_back(&bias); }
};

struct Lstm {
  Parameter input_weights;      // {in, 4u}
  Parameter recurrent_weights;  // {u, 4u}
  Parameter bias;               // {1, 4u}, forget gate initialized to 1

  Lstm() = default;
  Lstm(std::string name, std::size_t in, std::size_t hidden, Rng& rng);

  std::size_t hidden() const { return recurrent_weights.value.shape[0]; }
  Var forward(Tape& t, Var x, bool reverse = false) const;
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&input_weights), out.push_back(&recurrent_weights), out.push_back(&bias);
  }
};

// Forward and backward LSTMs with concatenated outputs ({T, 2u}).
struct BiLstm {
  Lstm forward_cell;
  Lstm backward_cell;

  BiLstm() = default;
  BiLstm(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng);

  Var forward(Tape& t, Var x) const;
  void collect(std::vector<Parameter*>& out) {
    forward_cell.collect(out);
    backward_cell.collect(out);
  }
};

struct Embedding {
  Parameter table;  // {V, e}

  Embedding() = default;
  Embedding(std::string name, std::size_t vocab, std::size_t dim, Rng& rng);

  Var forward(Tape& t, std::span<const int> ids) const { return ops::embedding(t, t.parameter(table), ids); }
  void collect(std::vector<Parameter*>& out) { out.push_back(&table); }
};

struct BatchNorm {
  Parameter gamma;
  Parameter beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  BatchNorm() = default;
  BatchNorm(std::string name, std::size_t width);

  Var forward(Tape& t, Var x, bool training);
  void collect(std::vector<Parameter*>& out) { out.push_back(&gamma), out.push_back(&beta); }
};

// Dense stack with optional batch normalization and dropout after every
// hidden layer, ending in an unnormalized logit layer.
class Mlp {
 public:
  Mlp() = default;
  Mlp(const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
      const Hyperparams& hp, Rng& rng);

  Var logits(Tape& t, Var x, const Mode& mode);
  // Output of the last hidden layer (the input itself if there is none).
  Var features(Tape& t, Var x, const Mode& mode);
  // Inference-mode logits; leaves batch-norm statistics untouched.
  Var evaluate(Tape& t, Var x) const;

  std::size_t in_width() const { return in_; }
  std::size_t out_width() const { return head_.out_width(); }
  std::vector<std::size_t> hidden_widths() const;
  void collect(std::vector<Parameter*>& out);
  std::vector<const Parameter*> parameters() const;
  const Hyperparams& hyperparams() const { return hp_; }

  std::vector<Dense>& hidden_layers() { return hidden_; }
  std::vector<BatchNorm>& norms() { return norms_; }
  const std::vector<BatchNorm>& norms() const { return norms_; }
  Dense& head() { return head_; }

 private:
  std::size_t in_ = 0;
  Hyperparams hp_;
  std::vector<Dense> hidden_;
  std::vector<BatchNorm> norms_;
  Dense head_;
};

// Parameters and batch-norm running statistics of an Mlp, by parameter name.
void archive_mlp(ModelArchive& a, const Mlp& net);
void restore_mlp(const ModelArchive& a, Mlp& net);

}  // namespace malfuse

#include "malfuse/layers.hpp"

#include <cmath>

namespace malfuse {

std::string to_string(WeightMode m) { return m == WeightMode::fixed ? "fixed" : "trainable"; }

WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "fixed") return WeightMode::fixed;
  if (s == "trainable") return WeightMode::trainable;
  throw ConfigError("unknown weight mode '" + s + "'");
}

void Hyperparams::validate() const {
  if (weight_decay < 0.0 || weight_decay > 0.001) throw ConfigError("weight decay must lie in [0, 0.001]");
  if (dropout < 0.0 || dropout > 0.5) throw ConfigError("dropout must lie in [0, 0.5]");
  if (learning_rate < 0.0 || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be finite and >= 0");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
}

Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  return uniform_tensor(std::move(shape), std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))), rng);
}

Dense::Dense(std::string name, std::size_t in, std::size_t out, Activation act, Rng& rng)
    : weight{name + ".w", fan_in_uniform({in, out}, in, rng)},
      bias{name + ".b", Tensor::matrix(1, out)},
      activation(act) {}

Var Dense::forward(Tape& t, Var x) const {
  Var z = ops::add_bias(t, ops::matmul(t, x, t.parameter(weight)), t.parameter(bias));
  return ops::activate(t, z, activation);
}

Conv2d::Conv2d(std::string name, std::size_t in_channels, std::size_t kernel_count, std::size_t size, Rng& rng)
    : kernels{name + ".k", fan_in_uniform({kernel_count, in_channels, size, size}, in_channels * size * size, rng)},
      bias{name + ".b", Tensor({kernel_count}, 0.0)} {}

Lstm::Lstm(std::string name, std::size_t in, std::size_t hidden, Rng& rng) {
  const double limit = 1.0 / std::sqrt(static_cast<double>(hidden));
  input_weights = {name + ".wx", uniform_tensor({in, 4 * hidden}, limit, rng)};
  recurrent_weights = {name + ".wh", uniform_tensor({hidden, 4 * hidden}, limit, rng)};
  bias = {name + ".b", Tensor::matrix(1, 4 * hidden)};
  for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.value.data[j] = 1.0;
}

Var Lstm::forward(Tape& t, Var x, bool reverse) const {
  return ops::lstm(t, x, t.parameter(input_weights), t.parameter(recurrent_weights), t.parameter(bias), reverse);
}

BiLstm::BiLstm(const std::string& name, std::size_t in, std::size_t hidden, Rng& rng)
    : forward_cell(name + ".fw", in, hidden, rng), backward_cell(name + ".bw", in, hidden, rng) {}

Var BiLstm::forward(Tape& t, Var x) const {
  return ops::concat_cols(t, {forward_cell.forward(t, x, false), backward_cell.forward(t, x, true)});
}

Embedding::Embedding(std::string name, std::size_t vocab, std::size_t dim, Rng& rng)
    : table{name + ".e", uniform_tensor({vocab, dim}, 0.5, rng)} {}

BatchNorm::BatchNorm(std::string name, std::size_t width)
    : gamma{name + ".gamma", Tensor::matrix(1, width, 1.0)},
      beta{name + ".beta", Tensor::matrix(1, width, 0.0)},
      running_mean(width, 0.0),
      running_var(width, 1.0) {}

Var BatchNorm::forward(Tape& t, Var x, bool training) {
  return ops::batch_norm(t, x, t.parameter(gamma), t.parameter(beta), training, running_mean, running_var);
}

Mlp::Mlp(const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
         const Hyperparams& hp, Rng& rng)
    : in_(in), hp_(hp) {
  std::size_t width = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::string lname = name + ".h" + std::to_string(i);
    // Batch norm sits between the affine map and the nonlinearity.
    hidden_.emplace_back(lname, width, hidden[i], hp.batchnorm ? Activation::linear : hp.activation, rng);
    if (hp.batchnorm) norms_.emplace_back(lname + ".bn", hidden[i]);
    width = hidden[i];
  }
  head_ = Dense(name + ".out", width, out, Activation::linear, rng);
}

std::vector<std::size_t> Mlp::hidden_widths() const {
  std::vector<std::size_t> w;
  for (const Dense& d : hidden_) w.push_back(d.out_width());
  return w;
}

Var Mlp::features(Tape& t, Var x, const Mode& mode) {
  if (t.value(x).cols() != in_) {
    throw ShapeError("mlp: expected input width " + std::to_string(in_) + ", got " + std::to_string(t.value(x).cols()));
  }
  Var h = x;
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    h = hidden_[i].forward(t, h);
    if (hp_.batchnorm) {
      h = norms_[i].forward(t, h, mode.training);
      h = ops::activate(t, h, hp_.activation);
    }
    if (mode.training && hp_.dropout > 0.0 && mode.rng) h = ops::dropout(t, h, hp_.dropout, *mode.rng);
  }
  return h;
}

Var Mlp::logits(Tape& t, Var x, const Mode& mode) { return head_.forward(t, features(t, x, mode)); }

Var Mlp::evaluate(Tape& t, Var x) const {
  if (t.value(x).cols() != in_) {
    throw ShapeError("mlp: expected input width " + std::to_string(in_) + ", got " + std::to_string(t.value(x).cols()));
  }
  Var h = x;
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    h = hidden_[i].forward(t, h);
    if (hp_.batchnorm) {
      std::vector<double> mean = norms_[i].running_mean, var = norms_[i].running_var;
      h = ops::batch_norm(t, h, t.parameter(norms_[i].gamma), t.parameter(norms_[i].beta), false, mean, var);
      h = ops::activate(t, h, hp_.activation);
    }
  }
  return head_.forward(t, h);
}

void Mlp::collect(std::vector<Parameter*>& out) {
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    hidden_[i].collect(out);
    if (hp_.batchnorm) norms_[i].collect(out);
  }
  head_.collect(out);
}

std::vector<const Parameter*> Mlp::parameters() const {
  std::vector<const Parameter*> out;
  for (std::size_t i = 0; i < hidden_.size(); ++i) {
    out.push_back(&hidden_[i].weight), out.push_back(&hidden_[i].bias);
    if (hp_.batchnorm) out.push_back(&norms_[i].gamma), out.push_back(&norms_[i].beta);
  }
  out.push_back(&head_.weight), out.push_back(&head_.bias);
  return out;
}

void archive_mlp(ModelArchive& a, const Mlp& net) {
  for (const Parameter* p : net.parameters()) a.add(*p);
  for (const BatchNorm& bn : net.norms()) {
    a.add(bn.gamma.name + ".mean", Tensor::row_vector(bn.running_mean));
    a.add(bn.gamma.name + ".var", Tensor::row_vector(bn.running_var));
  }
}

void restore_mlp(const ModelArchive& a, Mlp& net) {
  std::vector<Parameter*> params;
  net.collect(params);
  for (Parameter* p : params) a.load_into(*p);
  for (BatchNorm& bn : net.norms()) {
    bn.running_mean = a.get(bn.gamma.name + ".mean").data;
    bn.running_var = a.get(bn.gamma.name + ".var").data;
  }
}

nlohmann::json Hyperparams::to_json() const {
  return {{"activation", to_string(activation)},
          {"weight_decay", weight_decay},
          {"dropout", dropout},
          {"batchnorm", batchnorm},
          {"weight_mode", to_string(weight_mode)},
          {"learning_rate", learning_rate},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"patience", patience},
          {"clip_norm", clip_norm},
          {"seed", seed}};
}

Hyperparams Hyperparams::from_json(const nlohmann::json& j) { return from_json(j, Hyperparams{}); }

Hyperparams Hyperparams::from_json(const nlohmann::json& j, const Hyperparams& base) {
  Hyperparams h = base;
  for (const auto& [key, value] : j.items()) {
    if (key == "activation") h.activation = activation_from_string(value.get<std::string>());
    else if (key == "weight_decay") h.weight_decay = value.get<double>();
    else if (key == "dropout") h.dropout = value.get<double>();
    else if (key == "batchnorm") h.batchnorm = value.get<bool>();
    else if (key == "weight_mode") h.weight_mode = weight_mode_from_string(value.get<std::string>());
    else if (key == "learning_rate") h.learning_rate = value.get<double>();
    else if (key == "epochs") h.epochs = value.get<std::size_t>();
    else if (key == "batch_size") h.batch_size = value.get<std::size_t>();
    else if (key == "patience") h.patience = value.get<std::size_t>();
    else if (key == "clip_norm") h.clip_norm = value.get<double>();
    else if (key == "seed") h.seed = value.get<std::uint64_t>();
    else throw ConfigError("unknown hyperparameter '" + key + "'");
  }
  h.validate();
  return h;
}

}  // namespace malfuse

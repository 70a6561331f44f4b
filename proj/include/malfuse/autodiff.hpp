#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "malfuse/tensor.hpp"

namespace malfuse {

// A named trainable array. Layers own their parameters by value so copying
// a model copies its weights.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Handle to a node recorded on a Tape.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Reverse-mode autodiff tape. One tape records one forward pass; gradients
// of parameter leaves stay on the tape until collected, so independent
// tapes can run on separate threads.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value);
  Var parameter(const Parameter& p);

  // Records an op node. `backward` reads grad(self) and accumulates into
  // the gradients of its inputs.
  Var record(Tensor value, std::vector<Var> inputs, Backward backward);

  const Tensor& value(Var v) const;
  const Tensor& value(std::size_t id) const;
  // Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(Var v) { return grad(v.id); }
  Tensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.data.empty(); }
  const std::vector<Var>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  std::size_t size() const { return nodes_.size(); }

  // Backpropagates from a scalar node with the given seed gradient.
  void backward(Var loss, double seed = 1.0);

  // Gradient w.r.t. a parameter leaf, or nullptr if the parameter was not
  // used or did not receive gradient.
  const Tensor* parameter_grad(const Parameter& p) const;

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    std::vector<Var> inputs;
    Backward backward;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Accumulated gradients keyed by parameter, in a fixed parameter order.
class GradientBuffer {
 public:
  explicit GradientBuffer(std::vector<Parameter*> params);

  void add_from(const Tape& tape, double scale = 1.0);
  void zero();
  const std::vector<Parameter*>& params() const { return params_; }
  std::vector<Tensor>& grads() { return grads_; }
  const std::vector<Tensor>& grads() const { return grads_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> grads_;
};

}  // namespace malfuse

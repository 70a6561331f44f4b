#include "malfuse/autodiff.hpp"

namespace malfuse {

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::parameter(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
  Node n;
  n.external = &p.value;
  n.needs_grad = p.trainable;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  param_nodes_.emplace(&p, id);
  return Var{id};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (Var in : inputs) n.needs_grad = n.needs_grad || nodes_[in.id].needs_grad;
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return value(v.id); }

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) {
    const Tensor& v = n.external ? *n.external : n.value;
    n.grad = Tensor(v.shape, 0.0);
  }
  return n.grad;
}

void Tape::backward(Var loss, double seed) {
  if (value(loss).size() != 1) throw ShapeError("backward requires a scalar loss node");
  grad(loss).data[0] += seed;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.data.empty()) continue;
    n.backward(*this, id);
  }
}

const Tensor* Tape::parameter_grad(const Parameter& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad.data.empty() ? nullptr : &n.grad;
}

GradientBuffer::GradientBuffer(std::vector<Parameter*> params) : params_(std::move(params)) {
  grads_.reserve(params_.size());
  for (const Parameter* p : params_) grads_.emplace_back(p->value.shape, 0.0);
}

void GradientBuffer::add_from(const Tape& tape, double scale) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor* g = tape.parameter_grad(*params_[i]);
    if (!g) continue;
    auto& dst = grads_[i].data;
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * g->data[k];
  }
}

void GradientBuffer::zero() {
  for (Tensor& g : grads_) std::fill(g.data.begin(), g.data.end(), 0.0);
}

}  // namespace malfuse

#include "malfuse/trainer.hpp"

namespace malfuse {

Adam::Adam(std::vector<Parameter*> params, double learning_rate, double weight_decay, double beta1, double beta2,
           double eps)
    : params_(std::move(params)), lr_(learning_rate), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Parameter* p : params_) {
    m_.emplace_back(p->value.shape, 0.0);
    v_.emplace_back(p->value.shape, 0.0);
  }
}

void Adam::step(const std::vector<Tensor>& grads) {
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& w = params_[i]->value.data;
    const auto& g = grads[i].data;
    auto& m = m_[i].data;
    auto& v = v_[i].data;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] + wd_ * w[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      w[k] -= lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

double clip_gradients(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.data) v *= s;
  }
  return norm;
}

}  // namespace malfuse

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "malfuse/autodiff.hpp"
#include "malfuse/ops.hpp"
#include "malfuse/rng.hpp"

namespace malfuse::testing {

// Reduces any node to a scalar by a fixed random projection so the check
// exercises the full Jacobian rather than a sum.
inline Var project(Tape& t, Var out, std::uint64_t seed = 99) {
  const Tensor& v = t.value(out);
  Rng rng(seed);
  Tensor r = Tensor::matrix(v.size(), 1);
  for (double& x : r.data) x = rng.uniform(-1.0, 1.0);
  Var flat = ops::reshape(t, out, {1, v.size()});
  return ops::matmul(t, flat, t.constant(std::move(r)));
}

// Maximum relative error between reverse-mode gradients and central finite
// differences over every element of every leaf.
inline double max_gradient_error(const std::vector<Parameter*>& leaves, const std::function<Var(Tape&)>& loss_fn,
                                 double eps = 1e-5) {
  Tape tape;
  Var loss = loss_fn(tape);
  tape.backward(loss);
  std::vector<Tensor> analytic;
  for (Parameter* p : leaves) {
    const Tensor* g = tape.parameter_grad(*p);
    analytic.push_back(g ? *g : Tensor(p->value.shape, 0.0));
  }
  auto eval = [&] {
    Tape t;
    return t.value(loss_fn(t)).data[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto& w = leaves[i]->value.data;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double saved = w[k];
      w[k] = saved + eps;
      const double up = eval();
      w[k] = saved - eps;
      const double down = eval();
      w[k] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i].data[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace malfuse::testing

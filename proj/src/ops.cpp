#include "malfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace malfuse {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::softmax: return "softmax";
    case Activation::linear: return "linear";
  }
  return "linear";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  if (s == "softmax") return Activation::softmax;
  if (s == "linear") return Activation::linear;
  throw ConfigError("unknown activation '" + s + "'");
}

void softmax_inplace(std::span<double> v) {
  if (v.empty()) return;
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : v) x /= total;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = logits;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

AttentionResult attention_pool(const std::vector<std::vector<double>>& hidden, std::span<const double> context) {
  if (hidden.empty()) throw ShapeError("attention_pool: empty hidden sequence");
  AttentionResult r;
  r.weights.resize(hidden.size());
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (hidden[i].size() != context.size()) throw ShapeError("attention_pool: hidden/context dimension mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < context.size(); ++k) s += hidden[i][k] * context[k];
    r.weights[i] = s;
  }
  softmax_inplace(r.weights);
  r.pooled.assign(context.size(), 0.0);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    for (std::size_t k = 0; k < context.size(); ++k) r.pooled[k] += r.weights[i] * hidden[i][k];
  }
  return r;
}

namespace ops {
namespace {

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape) + " vs " + shape_string(b.shape));
}

void require_matrix(const char* op, const Tensor& x) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape));
}

// c[n,m] += a[n,k] * b[k,m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[n,k] += a[n,m] * b[k,m]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * m;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * m;
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// c[k,m] += a[n,k]^T * b[n,m]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += av * bi[j];
    }
  }
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  require_matrix("matmul", A);
  require_matrix("matmul", B);
  if (A.shape[1] != B.shape[0]) mismatch("matmul", A, B);
  const std::size_t n = A.shape[0], k = A.shape[1], m = B.shape[1];
  Tensor C = Tensor::matrix(n, m);
  gemm_nn(A.data.data(), B.data.data(), C.data.data(), n, k, m);
  return t.record(std::move(C), {a, b}, [a, b, n, k, m](Tape& tp, std::size_t self) {
    const Tensor& dC = tp.grad(self);
    if (tp.needs_grad(a)) gemm_nt(dC.data.data(), tp.value(b).data.data(), tp.grad(a).data.data(), n, m, k);
    if (tp.needs_grad(b)) gemm_tn(tp.value(a).data.data(), dC.data.data(), tp.grad(b).data.data(), n, k, m);
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.size() != B.size()) mismatch("add", A, B);
  Tensor C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
  return t.record(std::move(C), {a, b}, [a, b](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    for (Var v : {a, b}) {
      if (!tp.needs_grad(v)) continue;
      auto& g = tp.grad(v).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d.data[i];
    }
  });
}

Var add_bias(Tape& t, Var x, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& B = t.value(bias);
  const std::size_t n = X.rows(), m = X.cols();
  if (B.size() != m) mismatch("add_bias", X, B);
  Tensor Y = X;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) Y.data[r * m + c] += B.data[c];
  return t.record(std::move(Y), {x, bias}, [x, bias, n, m](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    if (tp.needs_grad(x)) {
      auto& g = tp.grad(x).data;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += d.data[i];
    }
    if (tp.needs_grad(bias)) {
      auto& g = tp.grad(bias).data;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) g[c] += d.data[r * m + c];
    }
  });
}

Var scale(Tape& t, Var x, double factor) {
  Tensor Y = t.value(x);
  for (double& v : Y.data) v *= factor;
  return t.record(std::move(Y), {x}, [x, factor](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    auto& g = tp.grad(x).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * d.data[i];
  });
}

Var activate(Tape& t, Var x, Activation act) {
  if (act == Activation::linear) return x;
  Tensor Y = t.value(x);
  switch (act) {
    case Activation::relu:
      for (double& v : Y.data) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::sigmoid:
      for (double& v : Y.data) v = sigmoid(v);
      break;
    case Activation::tanh:
      for (double& v : Y.data) v = std::tanh(v);
      break;
    case Activation::softmax:
      for (std::size_t r = 0; r < Y.rows(); ++r) softmax_inplace(Y.row(r));
      break;
    case Activation::linear:
      break;
  }
  return t.record(std::move(Y), {x}, [x, act](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    const Tensor& y = tp.value(self);
    auto& g = tp.grad(x).data;
    switch (act) {
      case Activation::relu:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += y.data[i] > 0.0 ? d.data[i] : 0.0;
        break;
      case Activation::sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d.data[i] * y.data[i] * (1.0 - y.data[i]);
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += d.data[i] * (1.0 - y.data[i] * y.data[i]);
        break;
      case Activation::softmax: {
        const std::size_t m = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < m; ++c) dot += d.data[r * m + c] * y.data[r * m + c];
          for (std::size_t c = 0; c < m; ++c) g[r * m + c] += y.data[r * m + c] * (d.data[r * m + c] - dot);
        }
        break;
      }
      case Activation::linear:
        break;
    }
  });
}

Var concat_cols(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = t.value(parts[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    if (v.rows() != n) mismatch("concat_cols", t.value(parts[0]), v);
    widths.push_back(v.cols());
    total += v.cols();
  }
  Tensor Y = Tensor::matrix(n, total);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = t.value(parts[i]);
    for (std::size_t r = 0; r < n; ++r)
      std::memcpy(&Y.data[r * total + offset], &v.data[r * widths[i]], widths[i] * sizeof(double));
    offset += widths[i];
  }
  return t.record(std::move(Y), parts, [parts, widths, n, total](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (tp.needs_grad(parts[i])) {
        auto& g = tp.grad(parts[i]).data;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < widths[i]; ++c) g[r * widths[i] + c] += d.data[r * total + off + c];
      }
      off += widths[i];
    }
  });
}

Var stack_rows(Tape& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("stack_rows: no inputs");
  const std::size_t m = t.value(parts[0]).cols();
  std::size_t rows = 0;
  for (Var p : parts) {
    if (t.value(p).cols() != m) mismatch("stack_rows", t.value(parts[0]), t.value(p));
    rows += t.value(p).rows();
  }
  Tensor Y = Tensor::matrix(rows, m);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& v = t.value(p);
    std::memcpy(&Y.data[off], v.data.data(), v.size() * sizeof(double));
    off += v.size();
  }
  return t.record(std::move(Y), parts, [parts](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    std::size_t o = 0;
    for (Var p : parts) {
      const std::size_t sz = tp.value(p).size();
      if (tp.needs_grad(p)) {
        auto& g = tp.grad(p).data;
        for (std::size_t i = 0; i < sz; ++i) g[i] += d.data[o + i];
      }
      o += sz;
    }
  });
}

Var reshape(Tape& t, Var x, Shape shape) {
  Tensor Y = t.value(x);
  if (Tensor::count(shape) != Y.size()) throw ShapeError("reshape: cannot view " + shape_string(Y.shape) + " as " + shape_string(shape));
  Y.shape = std::move(shape);
  return t.record(std::move(Y), {x}, [x](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    auto& g = tp.grad(x).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d.data[i];
  });
}

Var select_row(Tape& t, Var x, std::size_t r) {
  const Tensor& X = t.value(x);
  require_matrix("select_row", X);
  if (r >= X.rows()) throw ShapeError("select_row: row " + std::to_string(r) + " out of range for " + shape_string(X.shape));
  const std::size_t c = X.cols();
  Tensor Y = Tensor::matrix(1, c);
  std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(r * c), c, Y.data.begin());
  return t.record(std::move(Y), {x}, [x, r, c](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    auto& g = tp.grad(x).data;
    for (std::size_t j = 0; j < c; ++j) g[r * c + j] += d.data[j];
  });
}

Var normalize_rows(Tape& t, Var x) {
  const Tensor& X = t.value(x);
  require_matrix("normalize_rows", X);
  const std::size_t n = X.rows(), c = X.cols();
  Tensor Y = X;
  std::vector<double> sums(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (double v : X.row(r)) sums[r] += v;
    if (!(sums[r] > 0.0)) throw Error("normalize_rows: row " + std::to_string(r) + " has a non-positive sum");
    for (double& v : Y.row(r)) v /= sums[r];
  }
  return t.record(std::move(Y), {x}, [x, n, c, sums](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    const Tensor& y = tp.value(self);
    auto& g = tp.grad(x).data;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += d.data[r * c + j] * y.data[r * c + j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += (d.data[r * c + j] - dot) / sums[r];
    }
  });
}

Var sum(Tape& t, const std::vector<Var>& scalars) {
  double s = 0.0;
  for (Var v : scalars) {
    if (t.value(v).size() != 1) throw ShapeError("sum: expected scalar inputs");
    s += t.value(v).data[0];
  }
  return t.record(Tensor({1}, s), scalars, [scalars](Tape& tp, std::size_t self) {
    const double d = tp.grad(self).data[0];
    for (Var v : scalars)
      if (tp.needs_grad(v)) tp.grad(v).data[0] += d;
  });
}

Var softmax_cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const Tensor& Z = t.value(logits);
  require_matrix("softmax_cross_entropy", Z);
  const std::size_t n = Z.rows(), m = Z.cols();
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count does not match rows");
  Tensor P = softmax_rows(Z);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= m) throw ShapeError("softmax_cross_entropy: label out of range");
    const double* z = &Z.data[r * m];
    const double mx = *std::max_element(z, z + m);
    double lse = 0.0;
    for (std::size_t c = 0; c < m; ++c) lse += std::exp(z[c] - mx);
    loss += mx + std::log(lse) - z[y];
  }
  std::vector<int> ys(labels.begin(), labels.end());
  return t.record(Tensor({1}, loss), {logits}, [logits, P = std::move(P), ys = std::move(ys), m](Tape& tp, std::size_t self) {
    const double d = tp.grad(self).data[0];
    auto& g = tp.grad(logits).data;
    for (std::size_t r = 0; r < ys.size(); ++r) {
      for (std::size_t c = 0; c < m; ++c) g[r * m + c] += d * P.data[r * m + c];
      g[r * m + static_cast<std::size_t>(ys[r])] -= d;
    }
  });
}

Var sigmoid_binary_cross_entropy(Tape& t, Var logits, const Tensor& targets) {
  const Tensor& Z = t.value(logits);
  if (Z.size() != targets.size()) mismatch("sigmoid_binary_cross_entropy", Z, targets);
  double loss = 0.0;
  for (std::size_t i = 0; i < Z.size(); ++i) {
    const double z = Z.data[i];
    loss += std::max(z, 0.0) - z * targets.data[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return t.record(Tensor({1}, loss), {logits}, [logits, targets](Tape& tp, std::size_t self) {
    const double d = tp.grad(self).data[0];
    const Tensor& Zv = tp.value(logits);
    auto& g = tp.grad(logits).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * (sigmoid(Zv.data[i]) - targets.data[i]);
  });
}

Var mean_squared_error(Tape& t, Var prediction, const Tensor& target) {
  const Tensor& P = t.value(prediction);
  if (P.size() != target.size()) mismatch("mean_squared_error", P, target);
  const double per_row = static_cast<double>(P.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    const double e = P.data[i] - target.data[i];
    loss += e * e;
  }
  loss /= per_row;
  return t.record(Tensor({1}, loss), {prediction}, [prediction, target, per_row](Tape& tp, std::size_t self) {
    const double d = tp.grad(self).data[0];
    const Tensor& Pv = tp.value(prediction);
    auto& g = tp.grad(prediction).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += d * 2.0 * (Pv.data[i] - target.data[i]) / per_row;
  });
}

Var conv2d(Tape& t, Var x, Var kernels, Var bias) {
  const Tensor& X = t.value(x);
  const Tensor& Kt = t.value(kernels);
  const Tensor& B = t.value(bias);
  if (X.rank() != 3 || Kt.rank() != 4 || Kt.shape[1] != X.shape[0] || B.size() != Kt.shape[0] ||
      Kt.shape[2] % 2 == 0 || Kt.shape[3] % 2 == 0) {
    mismatch("conv2d", X, Kt);
  }
  const std::size_t C = X.shape[0], H = X.shape[1], W = X.shape[2];
  const std::size_t K = Kt.shape[0], kh = Kt.shape[2], kw = Kt.shape[3];
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  Tensor Y({K, H, W});
  for (std::size_t k = 0; k < K; ++k) {
    double* yk = &Y.data[k * H * W];
    std::fill(yk, yk + H * W, B.data[k]);
    for (std::size_t c = 0; c < C; ++c) {
      const double* xc = &X.data[c * H * W];
      for (std::size_t a = 0; a < kh; ++a) {
        for (std::size_t b = 0; b < kw; ++b) {
          const double w = Kt.data[((k * C + c) * kh + a) * kw + b];
          if (w == 0.0) continue;
          const long di = static_cast<long>(a) - ph, dj = static_cast<long>(b) - pw;
          const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
          const std::size_t i1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
          const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
          const std::size_t j1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
          for (std::size_t i = i0; i < i1; ++i) {
            const double* xr = xc + (static_cast<long>(i) + di) * static_cast<long>(W) + dj;
            double* yr = yk + i * W;
            for (std::size_t j = j0; j < j1; ++j) yr[j] += w * xr[j];
          }
        }
      }
    }
  }
  return t.record(std::move(Y), {x, kernels, bias}, [=](Tape& tp, std::size_t self) {
    const Tensor& dY = tp.grad(self);
    const Tensor& Xv = tp.value(x);
    const Tensor& Kv = tp.value(kernels);
    const bool gx = tp.needs_grad(x), gk = tp.needs_grad(kernels), gb = tp.needs_grad(bias);
    double* dX = gx ? tp.grad(x).data.data() : nullptr;
    double* dK = gk ? tp.grad(kernels).data.data() : nullptr;
    double* dB = gb ? tp.grad(bias).data.data() : nullptr;
    for (std::size_t k = 0; k < K; ++k) {
      const double* dyk = &dY.data[k * H * W];
      if (dB) {
        double s = 0.0;
        for (std::size_t i = 0; i < H * W; ++i) s += dyk[i];
        dB[k] += s;
      }
      for (std::size_t c = 0; c < C; ++c) {
        const double* xc = &Xv.data[c * H * W];
        for (std::size_t a = 0; a < kh; ++a) {
          for (std::size_t b = 0; b < kw; ++b) {
            const std::size_t widx = ((k * C + c) * kh + a) * kw + b;
            const double w = Kv.data[widx];
            const long di = static_cast<long>(a) - ph, dj = static_cast<long>(b) - pw;
            const std::size_t i0 = di < 0 ? static_cast<std::size_t>(-di) : 0;
            const std::size_t i1 = di > 0 ? H - static_cast<std::size_t>(di) : H;
            const std::size_t j0 = dj < 0 ? static_cast<std::size_t>(-dj) : 0;
            const std::size_t j1 = dj > 0 ? W - static_cast<std::size_t>(dj) : W;
            double acc = 0.0;
            for (std::size_t i = i0; i < i1; ++i) {
              const std::size_t xoff = static_cast<std::size_t>((static_cast<long>(i) + di) * static_cast<long>(W) + dj);
              const double* dyr = dyk + i * W;
              if (dK) {
                const double* xr = xc + xoff;
                for (std::size_t j = j0; j < j1; ++j) acc += dyr[j] * xr[j];
              }
              if (dX && w != 0.0) {
                double* dxr = dX + c * H * W + xoff;
                for (std::size_t j = j0; j < j1; ++j) dxr[j] += w * dyr[j];
              }
            }
            if (dK) dK[widx] += acc;
          }
        }
      }
    }
  });
}

Var max_pool2d(Tape& t, Var x, std::size_t pool) {
  const Tensor& X = t.value(x);
  if (X.rank() != 3 || pool == 0) throw ShapeError("max_pool2d: expected {C,H,W} input and pool >= 1");
  const std::size_t C = X.shape[0], H = X.shape[1], W = X.shape[2];
  const std::size_t oh = (H + pool - 1) / pool, ow = (W + pool - 1) / pool;
  Tensor Y({C, oh, ow});
  std::vector<std::size_t> arg(Y.size());
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t a = i * pool; a < std::min(H, (i + 1) * pool); ++a) {
          for (std::size_t b = j * pool; b < std::min(W, (j + 1) * pool); ++b) {
            const std::size_t idx = (c * H + a) * W + b;
            if (X.data[idx] > best) {
              best = X.data[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t o = (c * oh + i) * ow + j;
        Y.data[o] = best;
        arg[o] = best_idx;
      }
    }
  }
  return t.record(std::move(Y), {x}, [x, arg = std::move(arg)](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    auto& g = tp.grad(x).data;
    for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += d.data[o];
  });
}

Var embedding(Tape& t, Var table, std::span<const int> ids) {
  const Tensor& E = t.value(table);
  require_matrix("embedding", E);
  const std::size_t e = E.cols();
  Tensor Y = Tensor::matrix(ids.size(), e);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= E.rows()) throw ShapeError("embedding: id out of range");
    std::memcpy(&Y.data[r * e], &E.data[static_cast<std::size_t>(ids[r]) * e], e * sizeof(double));
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return t.record(std::move(Y), {table}, [table, idv = std::move(idv), e](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    auto& g = tp.grad(table).data;
    for (std::size_t r = 0; r < idv.size(); ++r) {
      double* gr = &g[static_cast<std::size_t>(idv[r]) * e];
      for (std::size_t c = 0; c < e; ++c) gr[c] += d.data[r * e + c];
    }
  });
}

Var lstm(Tape& t, Var x, Var input_weights, Var recurrent_weights, Var bias, bool reverse) {
  const Tensor& X = t.value(x);
  const Tensor& Wx = t.value(input_weights);
  const Tensor& Wh = t.value(recurrent_weights);
  const Tensor& B = t.value(bias);
  require_matrix("lstm", X);
  const std::size_t T = X.rows(), in = X.cols();
  if (Wx.rank() != 2 || Wx.shape[0] != in || Wx.shape[1] % 4 != 0) mismatch("lstm", X, Wx);
  const std::size_t u = Wx.shape[1] / 4, G = 4 * u;
  if (Wh.rank() != 2 || Wh.shape[0] != u || Wh.shape[1] != G || B.size() != G) mismatch("lstm", Wx, Wh);

  // gates holds activated i, f, g, o per processed step (in time index order).
  Tensor gates = Tensor::matrix(T, G);
  gemm_nn(X.data.data(), Wx.data.data(), gates.data.data(), T, in, G);
  Tensor cells = Tensor::matrix(T, u);
  Tensor H = Tensor::matrix(T, u);
  std::vector<double> h_prev(u, 0.0), c_prev(u, 0.0);
  for (std::size_t s = 0; s < T; ++s) {
    const std::size_t ti = reverse ? T - 1 - s : s;
    double* z = &gates.data[ti * G];
    for (std::size_t j = 0; j < G; ++j) z[j] += B.data[j];
    for (std::size_t p = 0; p < u; ++p) {
      const double hv = h_prev[p];
      if (hv == 0.0) continue;
      const double* w = &Wh.data[p * G];
      for (std::size_t j = 0; j < G; ++j) z[j] += hv * w[j];
    }
    double* c = &cells.data[ti * u];
    double* h = &H.data[ti * u];
    for (std::size_t j = 0; j < u; ++j) {
      const double ig = sigmoid(z[j]);
      const double fg = sigmoid(z[u + j]);
      const double gg = std::tanh(z[2 * u + j]);
      const double og = sigmoid(z[3 * u + j]);
      z[j] = ig;
      z[u + j] = fg;
      z[2 * u + j] = gg;
      z[3 * u + j] = og;
      c[j] = fg * c_prev[j] + ig * gg;
      h[j] = og * std::tanh(c[j]);
    }
    std::copy(c, c + u, c_prev.begin());
    std::copy(h, h + u, h_prev.begin());
  }

  return t.record(std::move(H), {x, input_weights, recurrent_weights, bias},
                  [=, gates = std::move(gates), cells = std::move(cells)](Tape& tp, std::size_t self) {
                    const Tensor& dH = tp.grad(self);
                    const Tensor& Hv = tp.value(self);
                    const Tensor& Whv = tp.value(recurrent_weights);
                    Tensor dZ = Tensor::matrix(T, G);
                    std::vector<double> dh_next(u, 0.0), dc_next(u, 0.0);
                    const bool gwh = tp.needs_grad(recurrent_weights);
                    double* dWh = gwh ? tp.grad(recurrent_weights).data.data() : nullptr;
                    for (std::size_t s = T; s-- > 0;) {
                      const std::size_t ti = reverse ? T - 1 - s : s;
                      const bool has_prev = s > 0;
                      const std::size_t tp_prev = reverse ? ti + 1 : ti - 1;
                      const double* z = &gates.data[ti * G];
                      const double* c = &cells.data[ti * u];
                      const double* cp = has_prev ? &cells.data[tp_prev * u] : nullptr;
                      double* dz = &dZ.data[ti * G];
                      for (std::size_t j = 0; j < u; ++j) {
                        const double ig = z[j], fg = z[u + j], gg = z[2 * u + j], og = z[3 * u + j];
                        const double dh = dH.data[ti * u + j] + dh_next[j];
                        const double tc = std::tanh(c[j]);
                        const double dc = dh * og * (1.0 - tc * tc) + dc_next[j];
                        const double cprev = cp ? cp[j] : 0.0;
                        dz[j] = dc * gg * ig * (1.0 - ig);
                        dz[u + j] = dc * cprev * fg * (1.0 - fg);
                        dz[2 * u + j] = dc * ig * (1.0 - gg * gg);
                        dz[3 * u + j] = dh * tc * og * (1.0 - og);
                        dc_next[j] = dc * fg;
                      }
                      std::fill(dh_next.begin(), dh_next.end(), 0.0);
                      if (has_prev) {
                        const double* hp = &Hv.data[tp_prev * u];
                        for (std::size_t p = 0; p < u; ++p) {
                          const double* w = &Whv.data[p * G];
                          double acc = 0.0;
                          for (std::size_t j = 0; j < G; ++j) acc += w[j] * dz[j];
                          dh_next[p] = acc;
                          if (dWh && hp[p] != 0.0) {
                            double* gw = dWh + p * G;
                            for (std::size_t j = 0; j < G; ++j) gw[j] += hp[p] * dz[j];
                          }
                        }
                      }
                    }
                    if (tp.needs_grad(bias)) {
                      auto& gb = tp.grad(bias).data;
                      for (std::size_t r = 0; r < T; ++r)
                        for (std::size_t j = 0; j < G; ++j) gb[j] += dZ.data[r * G + j];
                    }
                    if (tp.needs_grad(input_weights))
                      gemm_tn(tp.value(x).data.data(), dZ.data.data(), tp.grad(input_weights).data.data(), T, in, G);
                    if (tp.needs_grad(x))
                      gemm_nt(dZ.data.data(), tp.value(input_weights).data.data(), tp.grad(x).data.data(), T, G, in);
                  });
}

Var attention_pool(Tape& t, Var hidden, Var context, std::vector<double>* weights_out) {
  const Tensor& Hm = t.value(hidden);
  const Tensor& Cv = t.value(context);
  require_matrix("attention_pool", Hm);
  const std::size_t T = Hm.rows(), h = Hm.cols();
  if (T == 0) throw ShapeError("attention_pool: empty hidden sequence");
  if (Cv.size() != h) mismatch("attention_pool", Hm, Cv);
  std::vector<double> w(T);
  for (std::size_t i = 0; i < T; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < h; ++k) s += Hm.data[i * h + k] * Cv.data[k];
    w[i] = s;
  }
  softmax_inplace(w);
  Tensor Y = Tensor::matrix(1, h);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t k = 0; k < h; ++k) Y.data[k] += w[i] * Hm.data[i * h + k];
  if (weights_out) *weights_out = w;
  return t.record(std::move(Y), {hidden, context}, [hidden, context, w = std::move(w), T, h](Tape& tp, std::size_t self) {
    const Tensor& dY = tp.grad(self);
    const Tensor& Hv = tp.value(hidden);
    const Tensor& Y = tp.value(self);
    // d pooled / d score_i = w_i * (h_i - pooled)
    std::vector<double> dscore(T);
    for (std::size_t i = 0; i < T; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < h; ++k) s += dY.data[k] * (Hv.data[i * h + k] - Y.data[k]);
      dscore[i] = w[i] * s;
    }
    if (tp.needs_grad(hidden)) {
      const Tensor& Cv2 = tp.value(context);
      auto& g = tp.grad(hidden).data;
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t k = 0; k < h; ++k) g[i * h + k] += w[i] * dY.data[k] + dscore[i] * Cv2.data[k];
    }
    if (tp.needs_grad(context)) {
      auto& g = tp.grad(context).data;
      for (std::size_t i = 0; i < T; ++i)
        for (std::size_t k = 0; k < h; ++k) g[k] += dscore[i] * Hv.data[i * h + k];
    }
  });
}

Var dropout(Tape& t, Var x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  const double keep = 1.0 - rate;
  Tensor Y = t.value(x);
  std::vector<double> mask(Y.size());
  for (std::size_t i = 0; i < Y.size(); ++i) {
    mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    Y.data[i] *= mask[i];
  }
  return t.record(std::move(Y), {x}, [x, mask = std::move(mask)](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    auto& g = tp.grad(x).data;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += mask[i] * d.data[i];
  });
}

Var batch_norm(Tape& t, Var x, Var gamma, Var beta, bool training, std::vector<double>& running_mean,
               std::vector<double>& running_var, double momentum, double eps) {
  const Tensor& X = t.value(x);
  require_matrix("batch_norm", X);
  const std::size_t n = X.rows(), m = X.cols();
  const Tensor& Gm = t.value(gamma);
  const Tensor& Bt = t.value(beta);
  if (Gm.size() != m || Bt.size() != m || running_mean.size() != m || running_var.size() != m)
    mismatch("batch_norm", X, Gm);
  std::vector<double> mean(m, 0.0), var(m, 0.0);
  if (training && n > 1) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) mean[c] += X.data[r * m + c];
    for (double& v : mean) v /= static_cast<double>(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) {
        const double d = X.data[r * m + c] - mean[c];
        var[c] += d * d;
      }
    for (double& v : var) v /= static_cast<double>(n);
    for (std::size_t c = 0; c < m; ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
    }
  } else {
    mean = running_mean;
    var = running_var;
    training = false;
  }
  std::vector<double> inv_std(m);
  for (std::size_t c = 0; c < m; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor xhat = Tensor::matrix(n, m);
  Tensor Y = Tensor::matrix(n, m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) {
      const double xh = (X.data[r * m + c] - mean[c]) * inv_std[c];
      xhat.data[r * m + c] = xh;
      Y.data[r * m + c] = Gm.data[c] * xh + Bt.data[c];
    }
  return t.record(std::move(Y), {x, gamma, beta},
                  [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                    const Tensor& d = tp.grad(self);
                    const Tensor& Gv = tp.value(gamma);
                    if (tp.needs_grad(gamma) || tp.needs_grad(beta)) {
                      std::vector<double> dg(m, 0.0), db(m, 0.0);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < m; ++c) {
                          dg[c] += d.data[r * m + c] * xhat.data[r * m + c];
                          db[c] += d.data[r * m + c];
                        }
                      if (tp.needs_grad(gamma))
                        for (std::size_t c = 0; c < m; ++c) tp.grad(gamma).data[c] += dg[c];
                      if (tp.needs_grad(beta))
                        for (std::size_t c = 0; c < m; ++c) tp.grad(beta).data[c] += db[c];
                    }
                    if (!tp.needs_grad(x)) return;
                    auto& gx = tp.grad(x).data;
                    if (!training) {
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < m; ++c) gx[r * m + c] += d.data[r * m + c] * Gv.data[c] * inv_std[c];
                      return;
                    }
                    const double nn = static_cast<double>(n);
                    for (std::size_t c = 0; c < m; ++c) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t r = 0; r < n; ++r) {
                        const double dxh = d.data[r * m + c] * Gv.data[c];
                        s1 += dxh;
                        s2 += dxh * xhat.data[r * m + c];
                      }
                      for (std::size_t r = 0; r < n; ++r) {
                        const double dxh = d.data[r * m + c] * Gv.data[c];
                        gx[r * m + c] += inv_std[c] / nn * (nn * dxh - s1 - xhat.data[r * m + c] * s2);
                      }
                    }
                  });
}

Var ovr_scores(Tape& t, Var probs, Var weights, Var bias) {
  const Tensor& P = t.value(probs);
  const Tensor& Wt = t.value(weights);
  const Tensor& B = t.value(bias);
  require_matrix("ovr_scores", P);
  require_matrix("ovr_scores", Wt);
  const std::size_t M = Wt.shape[0], F = Wt.shape[1], n = P.rows();
  if (P.cols() != M * F || B.size() != F) mismatch("ovr_scores", P, Wt);
  Tensor Y = Tensor::matrix(n, F);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t f = 0; f < F; ++f) {
      double s = B.data[f];
      for (std::size_t k = 0; k < M; ++k) s += Wt.data[k * F + f] * P.data[r * M * F + k * F + f];
      Y.data[r * F + f] = s;
    }
  return t.record(std::move(Y), {probs, weights, bias}, [=](Tape& tp, std::size_t self) {
    const Tensor& d = tp.grad(self);
    const Tensor& Pv = tp.value(probs);
    const Tensor& Wv = tp.value(weights);
    const bool gp = tp.needs_grad(probs), gw = tp.needs_grad(weights), gb = tp.needs_grad(bias);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t f = 0; f < F; ++f) {
        const double dv = d.data[r * F + f];
        if (gb) tp.grad(bias).data[f] += dv;
        for (std::size_t k = 0; k < M; ++k) {
          if (gw) tp.grad(weights).data[k * F + f] += dv * Pv.data[r * M * F + k * F + f];
          if (gp) tp.grad(probs).data[r * M * F + k * F + f] += dv * Wv.data[k * F + f];
        }
      }
  });
}

}  // namespace ops
}  // namespace malfuse

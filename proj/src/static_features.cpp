#include "malfuse/static_features.hpp"

#include <cmath>
#include <numbers>

namespace malfuse {
namespace {

// Orthonormal DCT-II basis: C[k][n] = s_k cos(pi (n + 1/2) k / N).
Tensor dct_basis(std::size_t n) {
  Tensor c = Tensor::matrix(n, n);
  const double N = static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
    for (std::size_t i = 0; i < n; ++i)
      c(k, i) = s * std::cos(std::numbers::pi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) / N);
  }
  return c;
}

// a * b, or a^T * b / a * b^T when flagged.
Tensor multiply(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  const std::size_t n = a.rows();
  Tensor out = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const double av = transpose_a ? a(k, i) : a(i, k);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += av * (transpose_b ? b(j, k) : b(k, j));
    }
  return out;
}

void require_square(const char* op, const Tensor& m) {
  if (m.rank() != 2 || m.shape[0] != m.shape[1]) throw ShapeError(std::string(op) + ": expected a square matrix, got " + shape_string(m.shape));
}

Tensor graph_input(const CallGraph& cg) {
  Tensor x({1, cg.size, cg.size});
  for (std::size_t i = 0; i < cg.adjacency.size(); ++i) x.data[i] = cg.adjacency[i];
  return x;
}

struct CafcTask {
  CafcModel& model;
  const std::vector<CallGraph>& graphs;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p;
    model.collect(p);
    return p;
  }

  BatchResult batch(Tape& t, std::span<const std::size_t> idx, const Mode&) {
    std::vector<const CallGraph*> batch;
    const std::size_t S = model.canonical_size();
    Tensor target = Tensor::matrix(idx.size(), S * S);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const CallGraph& cg = graphs[idx[r]];
      batch.push_back(&cg);
      for (std::size_t i = 0; i < S * S; ++i) target.data[r * S * S + i] = cg.adjacency[i];
    }
    Var out = model.reconstruct(t, model.encode(t, batch));
    return {ops::mean_squared_error(t, out, target), 0};
  }
};

}  // namespace

FeatureVector pe_import_onehot(const PeImports& imports, const Vocabulary& vocab) {
  FeatureVector v{FeatureName::pe_onehot, std::vector<double>(vocab.size(), 0.0)};
  for (const std::string& name : imports.imports) v.values[vocab.index(name)] = 1.0;
  return v;
}

Tensor dct2(const Tensor& m) {
  require_square("dct2", m);
  const Tensor c = dct_basis(m.rows());
  return multiply(multiply(c, m, false, false), c, false, true);
}

Tensor idct2(const Tensor& coeffs) {
  require_square("idct2", coeffs);
  const Tensor c = dct_basis(coeffs.rows());
  return multiply(multiply(c, coeffs, true, false), c, false, false);
}

std::vector<std::pair<std::size_t, std::size_t>> zigzag_order(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> order;
  order.reserve(n * n);
  for (std::size_t s = 0; n > 0 && s + 1 < 2 * n; ++s) {
    const std::size_t lo = s < n ? 0 : s - n + 1;
    const std::size_t hi = std::min(s, n - 1);
    // Odd anti-diagonals run down-left (row ascending), even ones up-right.
    if (s % 2 == 1) {
      for (std::size_t r = lo; r <= hi; ++r) order.emplace_back(r, s - r);
    } else {
      for (std::size_t r = hi + 1; r-- > lo;) order.emplace_back(r, s - r);
    }
  }
  return order;
}

std::vector<double> zigzag_scan(const Tensor& m, std::size_t length) {
  require_square("zigzag_scan", m);
  if (length < 1) throw ConfigError("zigzag_scan: length must be >= 1");
  std::vector<double> out(length, 0.0);
  const auto order = zigzag_order(m.rows());
  for (std::size_t i = 0; i < std::min(length, order.size()); ++i) out[i] = m(order[i].first, order[i].second);
  return out;
}

Tensor zigzag_unscan(const std::vector<double>& values, std::size_t n) {
  Tensor m = Tensor::matrix(n, n);
  const auto order = zigzag_order(n);
  for (std::size_t i = 0; i < std::min(values.size(), order.size()); ++i) m(order[i].first, order[i].second) = values[i];
  return m;
}

FeatureVector extract_lowfreq(const CallGraph& cg, std::size_t length) {
  Tensor a = Tensor::matrix(cg.size, cg.size);
  for (std::size_t i = 0; i < cg.adjacency.size(); ++i) a.data[i] = cg.adjacency[i];
  return {FeatureName::cg_lowfreq, zigzag_scan(dct2(a), length)};
}

CafcModel::CafcModel(std::size_t canonical_size, std::size_t kernels, std::size_t embed_dim, Rng& rng)
    : size_(canonical_size),
      conv_("cafc.conv", 1, kernels, 3, rng),
      encoder_("cafc.enc", kernels * canonical_size * canonical_size, embed_dim, Activation::tanh, rng),
      decoder_("cafc.dec", embed_dim, canonical_size * canonical_size, Activation::sigmoid, rng) {
  if (canonical_size == 0 || kernels == 0 || embed_dim == 0) throw ConfigError("cafc: sizes must be positive");
}

Var CafcModel::encode(Tape& t, const std::vector<const CallGraph*>& graphs) const {
  std::vector<Var> rows;
  rows.reserve(graphs.size());
  const std::size_t width = kernels() * size_ * size_;
  for (const CallGraph* cg : graphs) {
    if (cg->size != size_) {
      throw ShapeError("cafc: graph of canonical size " + std::to_string(cg->size) + ", model expects " + std::to_string(size_));
    }
    Var h = ops::activate(t, conv_.forward(t, t.constant(graph_input(*cg))), Activation::relu);
    rows.push_back(ops::reshape(t, h, {1, width}));
  }
  return encoder_.forward(t, ops::stack_rows(t, rows));
}

Var CafcModel::reconstruct(Tape& t, Var codes) const { return decoder_.forward(t, codes); }

std::vector<double> CafcModel::embed(const CallGraph& cg) const {
  Tape t;
  return t.value(encode(t, {&cg})).data;
}

double CafcModel::reconstruction_error(const CallGraph& cg) const {
  Tape t;
  Tensor target = Tensor::matrix(1, size_ * size_);
  for (std::size_t i = 0; i < target.size(); ++i) target.data[i] = cg.adjacency[i];
  return t.value(ops::mean_squared_error(t, reconstruct(t, encode(t, {&cg})), target)).data[0];
}

void CafcModel::collect(std::vector<Parameter*>& out) {
  conv_.collect(out);
  encoder_.collect(out);
  decoder_.collect(out);
}

ModelArchive CafcModel::to_archive() const {
  ModelArchive a;
  a.kind = "cafc";
  a.meta = {{"canonical_size", size_}, {"kernels", kernels()}, {"embed_dim", embed_dim()}};
  for (const Parameter* p : {&conv_.kernels, &conv_.bias, &encoder_.weight, &encoder_.bias, &decoder_.weight, &decoder_.bias})
    a.add(*p);
  return a;
}

CafcModel CafcModel::from_archive(const ModelArchive& a) {
  if (a.kind != "cafc") throw Error("expected a cafc archive, got '" + a.kind + "'");
  Rng rng(0);
  CafcModel m(a.meta.at("canonical_size").get<std::size_t>(), a.meta.at("kernels").get<std::size_t>(),
              a.meta.at("embed_dim").get<std::size_t>(), rng);
  std::vector<Parameter*> params;
  m.collect(params);
  for (Parameter* p : params) a.load_into(*p);
  return m;
}

CafcTraining train_cafc(const std::vector<CallGraph>& graphs, const CafcConfig& config) {
  if (graphs.empty()) throw Error("train_cafc: empty training set");
  Rng rng(derive_seed(config.hp.seed, {0xcafc}));
  CafcTraining out{CafcModel(graphs.front().size, config.kernels, config.embed_dim, rng), {}, 0.0};
  CafcTask task{out.model, graphs};
  std::vector<std::size_t> idx(graphs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  out.initial_loss = evaluate_task(task, idx, config.hp.batch_size).loss;
  out.history = train(task, idx, {}, config.hp);
  return out;
}

FeatureVector cg_embed(const CafcModel& model, const CallGraph& cg) {
  return {FeatureName::cg_embedding, model.embed(cg)};
}

}  // namespace malfuse

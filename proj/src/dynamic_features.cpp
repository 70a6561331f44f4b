#include "malfuse/dynamic_features.hpp"

#include <algorithm>

namespace malfuse {
namespace {

struct CoocTask {
  CoocCnnModel& model;
  const std::vector<CoocMatrix>& matrices;
  std::span<const int> labels;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p;
    model.collect(p);
    return p;
  }

  BatchResult batch(Tape& t, std::span<const std::size_t> idx, const Mode&) {
    std::vector<const CoocMatrix*> batch;
    std::vector<int> ys;
    for (std::size_t i : idx) batch.push_back(&matrices[i]), ys.push_back(labels[i]);
    Var z = model.logits(t, batch);
    BatchResult r{ops::softmax_cross_entropy(t, z, ys), 0};
    const Tensor& zv = t.value(z);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (static_cast<int>(argmax(zv.row(i))) == ys[i]) ++r.correct;
    return r;
  }
};

}  // namespace

FeatureVector api_call_frequency(const TraceFile& trace, const Vocabulary& vocab) {
  if (trace.statements.empty()) throw EmptyTraceError("api_call_frequency: empty trace");
  FeatureVector v{FeatureName::api_freq, std::vector<double>(vocab.size(), 0.0)};
  for (const ApiStatement& s : trace.statements) v.values[vocab.index(s.api)] += 1.0;
  const double n = static_cast<double>(trace.statements.size());
  for (double& x : v.values) x /= n;
  return v;
}

double CoocMatrix::at(std::size_t i, std::size_t j) const {
  const auto it = counts.find({i, j});
  return it == counts.end() ? 0.0 : it->second;
}

double CoocMatrix::total() const {
  double s = 0.0;
  for (const auto& [k, c] : counts) s += c;
  return s;
}

Tensor CoocMatrix::row_normalized() const {
  const std::size_t V = vocab_size;
  Tensor m({1, V, V});
  std::vector<double> row_max(V, 0.0);
  for (const auto& [k, c] : counts) row_max[k.first] = std::max(row_max[k.first], c);
  for (const auto& [k, c] : counts) m.data[k.first * V + k.second] = c / row_max[k.first];
  return m;
}

CoocMatrix cooccurrence_matrix(const TraceFile& trace, const Vocabulary& vocab, std::size_t window) {
  if (window < 1) throw ConfigError("co-occurrence window must be >= 1");
  if (trace.statements.empty()) throw EmptyTraceError("cooccurrence_matrix: empty trace");
  CoocMatrix m;
  m.vocab_size = vocab.size();
  m.window = window;
  std::vector<std::size_t> ids;
  for (const ApiStatement& s : trace.statements) ids.push_back(vocab.index(s.api));
  for (std::size_t s = 0; s < ids.size(); ++s)
    for (std::size_t t = s + 1; t < ids.size() && t <= s + window; ++t) m.counts[{ids[s], ids[t]}] += 1.0;
  return m;
}

CoocCnnModel::CoocCnnModel(std::size_t vocab_size, std::size_t families, const CoocCnnConfig& config, Rng& rng)
    : vocab_(vocab_size), pool_(config.pool) {
  if (config.pool == 0 || config.kernels == 0 || config.feature_width == 0 || vocab_size == 0 || families == 0) {
    throw ConfigError("cooc cnn: sizes must be positive");
  }
  const std::size_t side = pooled_side();
  conv_ = Conv2d("cooc.conv", 1, config.kernels, 3, rng);
  dense_ = Dense("cooc.dense", config.kernels * side * side, config.feature_width, Activation::relu, rng);
  head_ = Dense("cooc.out", config.feature_width, families, Activation::linear, rng);
}

Var CoocCnnModel::features(Tape& t, const std::vector<const CoocMatrix*>& batch) const {
  std::vector<Var> rows;
  const std::size_t width = conv_.kernels.value.shape[0] * pooled_side() * pooled_side();
  for (const CoocMatrix* m : batch) {
    if (m->vocab_size != vocab_) {
      throw ShapeError("cooc cnn: matrix over " + std::to_string(m->vocab_size) + " tokens, model expects " +
                       std::to_string(vocab_));
    }
    Var pooled = ops::max_pool2d(t, t.constant(m->row_normalized()), pool_);
    Var h = ops::activate(t, conv_.forward(t, pooled), Activation::relu);
    rows.push_back(ops::reshape(t, h, {1, width}));
  }
  return dense_.forward(t, ops::stack_rows(t, rows));
}

std::vector<double> CoocCnnModel::feature_vector(const CoocMatrix& m) const {
  Tape t;
  return t.value(features(t, {&m})).data;
}

void CoocCnnModel::collect(std::vector<Parameter*>& out) {
  conv_.collect(out);
  dense_.collect(out);
  head_.collect(out);
}

ModelArchive CoocCnnModel::to_archive() const {
  ModelArchive a;
  a.kind = "cooc_cnn";
  a.meta = {{"vocab_size", vocab_},
            {"pool", pool_},
            {"kernels", conv_.kernels.value.shape[0]},
            {"feature_width", feature_width()},
            {"families", families()}};
  for (const Parameter* p : {&conv_.kernels, &conv_.bias, &dense_.weight, &dense_.bias, &head_.weight, &head_.bias}) a.add(*p);
  return a;
}

CoocCnnModel CoocCnnModel::from_archive(const ModelArchive& a) {
  if (a.kind != "cooc_cnn") throw Error("expected a cooc_cnn archive, got '" + a.kind + "'");
  CoocCnnConfig c;
  c.pool = a.meta.at("pool").get<std::size_t>();
  c.kernels = a.meta.at("kernels").get<std::size_t>();
  c.feature_width = a.meta.at("feature_width").get<std::size_t>();
  Rng rng(0);
  CoocCnnModel m(a.meta.at("vocab_size").get<std::size_t>(), a.meta.at("families").get<std::size_t>(), c, rng);
  std::vector<Parameter*> params;
  m.collect(params);
  for (Parameter* p : params) a.load_into(*p);
  return m;
}

CoocCnnTraining train_cooc_cnn(const std::vector<CoocMatrix>& matrices, std::span<const int> labels, std::size_t families,
                               std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                               const CoocCnnConfig& config) {
  if (train_idx.empty()) throw Error("train_cooc_cnn: empty training set");
  Rng rng(derive_seed(config.hp.seed, {0xc00c}));
  CoocCnnTraining out{CoocCnnModel(matrices.at(train_idx[0]).vocab_size, families, config, rng), {}, 0.0};
  CoocTask task{out.model, matrices, labels};
  out.history = train(task, train_idx, val_idx, config.hp);
  out.train_accuracy = evaluate_task(task, train_idx, config.hp.batch_size).accuracy;
  return out;
}

FeatureVector cooc_features(const CoocCnnModel& model, const CoocMatrix& m) {
  return {FeatureName::cooc_feat, model.feature_vector(m)};
}

}  // namespace malfuse

#include <algorithm>
#include <cmath>

#include "malfuse/dynamic_features.hpp"

namespace malfuse {
namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

std::vector<double> init_doc_vector(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  const double limit = 0.5 / static_cast<double>(dim);
  for (double& x : v) x = rng.uniform(-limit, limit);
  return v;
}

}  // namespace

nlohmann::json PvConfig::to_json() const {
  return {{"dim", dim},         {"window", window},       {"negative", negative},         {"epochs", epochs},
          {"alpha", alpha},     {"min_alpha", min_alpha}, {"infer_epochs", infer_epochs}, {"seed", seed},
          {"infer_seed", infer_seed}};
}

PvConfig PvConfig::from_json(const nlohmann::json& j) {
  PvConfig c;
  c.dim = j.value("dim", c.dim);
  c.window = j.value("window", c.window);
  c.negative = j.value("negative", c.negative);
  c.epochs = j.value("epochs", c.epochs);
  c.alpha = j.value("alpha", c.alpha);
  c.min_alpha = j.value("min_alpha", c.min_alpha);
  c.infer_epochs = j.value("infer_epochs", c.infer_epochs);
  c.seed = j.value("seed", c.seed);
  c.infer_seed = j.value("infer_seed", c.infer_seed);
  return c;
}

std::vector<std::string> api_names(const TraceFile& trace) {
  std::vector<std::string> out;
  out.reserve(trace.statements.size());
  for (const ApiStatement& s : trace.statements) out.push_back(s.api);
  return out;
}

void PvModel::build_noise_table(const std::vector<double>& counts) {
  counts_ = counts;
  noise_cdf_.resize(counts.size());
  double total = 0.0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    total += std::pow(counts[i], 0.75);
    noise_cdf_[i] = total;
  }
  for (double& c : noise_cdf_) c /= total;
}

std::size_t PvModel::sample_noise(Rng& rng) const {
  const double u = rng.uniform();
  const auto it = std::upper_bound(noise_cdf_.begin(), noise_cdf_.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - noise_cdf_.begin()), noise_cdf_.size() - 1);
}

double PvModel::dm_step(std::vector<double>& doc_vec, const std::vector<std::size_t>& doc, std::size_t t, double lr,
                        Rng& rng, Tensor* words, Tensor* outputs) const {
  const std::size_t D = config_.dim;
  const Tensor& W = words ? *words : words_;
  const Tensor& O = outputs ? *outputs : outputs_;
  const std::size_t lo = t >= config_.window ? t - config_.window : 0;
  const std::size_t hi = std::min(doc.size() - 1, t + config_.window);

  std::vector<double> hidden(doc_vec);
  std::size_t members = 1;
  for (std::size_t c = lo; c <= hi; ++c) {
    if (c == t) continue;
    const double* w = W.data.data() + doc[c] * D;
    for (std::size_t i = 0; i < D; ++i) hidden[i] += w[i];
    ++members;
  }
  for (double& h : hidden) h /= static_cast<double>(members);

  std::vector<double> grad(D, 0.0);
  double loss = 0.0;
  const std::size_t target = doc[t];
  for (std::size_t k = 0; k <= config_.negative; ++k) {
    std::size_t word = target;
    double label = 1.0;
    if (k > 0) {
      word = sample_noise(rng);
      if (word == target) continue;
      label = 0.0;
    }
    const double* o = O.data.data() + word * D;
    const double f = dot(o, hidden.data(), D);
    loss -= label > 0.0 ? log_sigmoid(f) : log_sigmoid(-f);
    const double g = (label - 1.0 / (1.0 + std::exp(-f))) * lr;
    for (std::size_t i = 0; i < D; ++i) grad[i] += g * o[i];
    if (outputs) {
      double* om = outputs->data.data() + word * D;
      for (std::size_t i = 0; i < D; ++i) om[i] += g * hidden[i];
    }
  }
  for (std::size_t i = 0; i < D; ++i) doc_vec[i] += grad[i];
  if (words) {
    for (std::size_t c = lo; c <= hi; ++c) {
      if (c == t) continue;
      double* w = words->data.data() + doc[c] * D;
      for (std::size_t i = 0; i < D; ++i) w[i] += grad[i];
    }
  }
  return loss;
}

std::vector<std::size_t> PvModel::encode(const TraceFile& trace) const {
  std::vector<std::size_t> doc;
  doc.reserve(trace.statements.size());
  for (const ApiStatement& s : trace.statements) doc.push_back(vocab_.index(s.api));
  return doc;
}

std::vector<double> PvModel::infer(const std::vector<std::size_t>& doc) const {
  if (doc.empty()) throw EmptyTraceError("pv: cannot embed an empty document");
  Rng rng(config_.infer_seed);
  std::vector<double> v = init_doc_vector(config_.dim, rng);
  const double steps = static_cast<double>(config_.infer_epochs * doc.size());
  std::size_t done = 0;
  for (std::size_t e = 0; e < config_.infer_epochs; ++e) {
    for (std::size_t t = 0; t < doc.size(); ++t, ++done) {
      const double lr = config_.alpha - (config_.alpha - config_.min_alpha) * static_cast<double>(done) / steps;
      dm_step(v, doc, t, lr, rng, nullptr, nullptr);
    }
  }
  return v;
}

PvModel train_pv(const std::vector<std::vector<std::string>>& docs, const PvConfig& config) {
  if (config.dim == 0) throw ConfigError("pv: dim must be positive");
  std::map<std::string, std::size_t> counts;
  std::size_t total_tokens = 0;
  for (const auto& d : docs) {
    for (const auto& w : d) ++counts[w];
    total_tokens += d.size();
  }
  if (counts.empty()) throw Error("pv: empty training corpus");

  PvModel m;
  m.config_ = config;
  m.vocab_ = build_vocabulary(counts, counts.size());
  const std::size_t V = m.vocab_.size(), D = config.dim;
  std::vector<double> freq(V, 0.0);
  for (const auto& [w, c] : counts) freq[m.vocab_.index(w)] = static_cast<double>(c);
  m.build_noise_table(freq);

  Rng rng(derive_seed(config.seed, {0x9f}));
  m.words_ = uniform_tensor({V, D}, 0.5 / static_cast<double>(D), rng);
  m.outputs_ = Tensor::matrix(V, D);

  std::vector<std::vector<std::size_t>> encoded;
  std::vector<std::vector<double>> doc_vecs;
  for (const auto& d : docs) {
    std::vector<std::size_t> ids;
    for (const auto& w : d) ids.push_back(m.vocab_.index(w));
    encoded.push_back(std::move(ids));
    doc_vecs.push_back(init_doc_vector(D, rng));
  }
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const double steps = static_cast<double>(config.epochs * total_tokens);
  std::size_t done = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    rng.shuffle(order);
    double loss = 0.0;
    for (std::size_t d : order) {
      for (std::size_t t = 0; t < encoded[d].size(); ++t, ++done) {
        const double lr = config.alpha - (config.alpha - config.min_alpha) * static_cast<double>(done) / steps;
        loss += m.dm_step(doc_vecs[d], encoded[d], t, lr, rng, &m.words_, &m.outputs_);
      }
    }
    loss /= static_cast<double>(std::max<std::size_t>(total_tokens, 1));
    if (!std::isfinite(loss)) throw TrainingError("pv: non-finite loss at epoch " + std::to_string(e));
    m.epoch_loss_.push_back(loss);
  }
  return m;
}

ModelArchive PvModel::to_archive() const {
  ModelArchive a;
  a.kind = "pv";
  a.meta = {{"config", config_.to_json()}, {"vocab", vocab_.to_json()}, {"counts", counts_}, {"epoch_loss", epoch_loss_}};
  a.add("pv.words", words_);
  a.add("pv.outputs", outputs_);
  return a;
}

PvModel PvModel::from_archive(const ModelArchive& a) {
  if (a.kind != "pv") throw Error("expected a pv archive, got '" + a.kind + "'");
  PvModel m;
  m.config_ = PvConfig::from_json(a.meta.at("config"));
  m.vocab_ = Vocabulary::from_json(a.meta.at("vocab"));
  m.build_noise_table(a.meta.at("counts").get<std::vector<double>>());
  m.epoch_loss_ = a.meta.at("epoch_loss").get<std::vector<double>>();
  m.words_ = a.get("pv.words");
  m.outputs_ = a.get("pv.outputs");
  return m;
}

FeatureVector pv_embed(const PvModel& model, const TraceFile& trace) {
  return {FeatureName::pv_trace, model.infer(model.encode(trace))};
}

}  // namespace malfuse

#include "malfuse/components.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace malfuse {

Standardizer Standardizer::fit(const Tensor& rows, std::span<const std::size_t> idx) {
  if (idx.empty()) throw Error("standardizer: no rows to fit");
  const std::size_t width = rows.cols();
  Standardizer s{std::vector<double>(width, 0.0), std::vector<double>(width, 0.0)};
  for (std::size_t i : idx)
    for (std::size_t c = 0; c < width; ++c) s.mean[c] += rows(i, c);
  for (double& m : s.mean) m /= static_cast<double>(idx.size());
  for (std::size_t i : idx)
    for (std::size_t c = 0; c < width; ++c) s.scale[c] += (rows(i, c) - s.mean[c]) * (rows(i, c) - s.mean[c]);
  for (double& v : s.scale) {
    v = std::sqrt(v / static_cast<double>(idx.size()));
    if (v < 1e-12) v = 1.0;
  }
  return s;
}

void Standardizer::apply_inplace(std::span<double> row) const {
  if (row.size() != width()) {
    throw ShapeError("standardizer: expected width " + std::to_string(width()) + ", got " + std::to_string(row.size()));
  }
  for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mean[c]) / scale[c];
}

Tensor Standardizer::apply(const Tensor& rows) const {
  Tensor out = rows;
  for (std::size_t r = 0; r < out.rows(); ++r) apply_inplace(out.row(r));
  return out;
}

nlohmann::json ComponentConfig::to_json() const { return {{"hidden", hidden}, {"hp", hp.to_json()}}; }

ComponentConfig ComponentConfig::from_json(const nlohmann::json& j) {
  ComponentConfig c;
  c.hidden = j.value("hidden", c.hidden);
  if (j.contains("hp")) c.hp = Hyperparams::from_json(j.at("hp"), c.hp);
  return c;
}

ComponentModel::ComponentModel(FeatureName feature, Standardizer standardizer, std::size_t families,
                               const ComponentConfig& config, Rng& rng)
    : feature_(feature), standardizer_(std::move(standardizer)), config_(config) {
  if (standardizer_.width() == 0 || families == 0) throw ConfigError("component: sizes must be positive");
  net_ = Mlp("comp." + to_string(feature), standardizer_.width(), config.hidden, families, config.hp, rng);
}

Var ComponentModel::logits(Tape& t, const Tensor& raw_rows, const Mode& mode) {
  return net_.logits(t, t.constant(standardizer_.apply(raw_rows)), mode);
}

Tensor ComponentModel::predict_rows(const Tensor& raw_rows) const {
  Tape t;
  return softmax_rows(t.value(net_.evaluate(t, t.constant(standardizer_.apply(raw_rows)))));
}

ModelArchive ComponentModel::to_archive() const {
  ModelArchive a;
  a.kind = "component";
  a.meta = {{"feature", to_string(feature_)},
            {"families", families()},
            {"config", config_.to_json()},
            {"validation_accuracy", validation_accuracy_}};
  a.add("standardizer.mean", Tensor::row_vector(standardizer_.mean));
  a.add("standardizer.scale", Tensor::row_vector(standardizer_.scale));
  archive_mlp(a, net_);
  return a;
}

ComponentModel ComponentModel::from_archive(const ModelArchive& a) {
  if (a.kind != "component") throw Error("expected a component archive, got '" + a.kind + "'");
  Standardizer s{a.get("standardizer.mean").data, a.get("standardizer.scale").data};
  Rng rng(0);
  ComponentModel m(feature_from_string(a.meta.at("feature").get<std::string>()), std::move(s),
                   a.meta.at("families").get<std::size_t>(), ComponentConfig::from_json(a.meta.at("config")), rng);
  restore_mlp(a, m.net_);
  m.validation_accuracy_ = a.meta.at("validation_accuracy").get<double>();
  return m;
}

ComponentModel train_component(const FeatureTable& table, std::span<const int> labels, std::size_t families,
                               std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                               const ComponentConfig& config) {
  if (table.size() != labels.size()) throw ShapeError("train_component: one label per feature row required");
  Rng rng(derive_seed(config.hp.seed, {0xc0, static_cast<std::uint64_t>(table.name)}));
  ComponentModel m(table.name, Standardizer::fit(table.values, train_idx), families, config, rng);
  const Tensor inputs = m.standardizer_.apply(table.values);
  MlpClassifierTask task{m.net_, inputs, labels};
  m.history_ = train(task, train_idx, val_idx, config.hp);
  // Without a validation split the training accuracy stands in.
  m.validation_accuracy_ = evaluate_task(task, val_idx.empty() ? train_idx : val_idx, config.hp.batch_size).accuracy;
  return m;
}

std::vector<double> predict(const ComponentModel& model, const FeatureVector& feature) {
  if (feature.name != model.feature()) {
    throw ShapeError("component for " + to_string(model.feature()) + " given a " + to_string(feature.name) +
                     " feature");
  }
  return model.predict_rows(Tensor::row_vector(feature.values)).data;
}

double ComponentManifest::accuracy(FeatureName f) const {
  const auto it = validation_accuracy.find(f);
  if (it == validation_accuracy.end()) throw ConfigError("component manifest has no entry for " + to_string(f));
  return it->second;
}

std::vector<FeatureName> ComponentManifest::ascending(std::span<const FeatureName> features) const {
  std::vector<FeatureName> out(features.begin(), features.end());
  for (FeatureName f : out) accuracy(f);
  std::stable_sort(out.begin(), out.end(), [](FeatureName a, FeatureName b) { return a < b; });
  std::stable_sort(out.begin(), out.end(),
                   [this](FeatureName a, FeatureName b) { return accuracy(a) < accuracy(b); });
  return out;
}

nlohmann::json ComponentManifest::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [f, acc] : validation_accuracy) j[to_string(f)] = acc;
  return {{"validation_accuracy", j}};
}

ComponentManifest ComponentManifest::from_json(const nlohmann::json& j) {
  ComponentManifest m;
  for (const auto& [name, acc] : j.at("validation_accuracy").items())
    m.validation_accuracy[feature_from_string(name)] = acc.get<double>();
  return m;
}

void ComponentManifest::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json().dump(2) << "\n";
}

ComponentManifest ComponentManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  return from_json(nlohmann::json::parse(in));
}

ComponentManifest make_manifest(const std::map<FeatureName, ComponentModel>& components) {
  ComponentManifest m;
  for (const auto& [f, c] : components) m.validation_accuracy[f] = c.validation_accuracy();
  return m;
}

void save_components(const std::filesystem::path& dir, const std::map<FeatureName, ComponentModel>& components) {
  std::filesystem::create_directories(dir);
  for (const auto& [f, c] : components) c.to_archive().save(dir / (to_string(f) + ".mdl"));
  make_manifest(components).save(dir / "manifest.json");
}

std::map<FeatureName, ComponentModel> load_components(const std::filesystem::path& dir) {
  const ComponentManifest manifest = ComponentManifest::load(dir / "manifest.json");
  std::map<FeatureName, ComponentModel> out;
  for (const auto& [f, acc] : manifest.validation_accuracy)
    out.emplace(f, ComponentModel::from_archive(ModelArchive::load(dir / (to_string(f) + ".mdl"))));
  return out;
}

LinearBaseline::LinearBaseline(Standardizer standardizer, std::size_t families, Rng& rng)
    : standardizer_(std::move(standardizer)) {
  const std::size_t width = standardizer_.width();
  weights_ = {"ovr.w", fan_in_uniform({width, families}, width, rng)};
  bias_ = {"ovr.b", Tensor::matrix(1, families)};
}

Var LinearBaseline::logits(Tape& t, const Tensor& raw_rows) const {
  Var x = t.constant(standardizer_.apply(raw_rows));
  return ops::add_bias(t, ops::matmul(t, x, t.parameter(weights_)), t.parameter(bias_));
}

Tensor LinearBaseline::scores(const Tensor& raw_rows) const {
  Tape t;
  return t.value(ops::activate(t, logits(t, raw_rows), Activation::sigmoid));
}

namespace {

struct OvrTask {
  LinearBaseline& model;
  const Tensor& features;
  std::span<const int> labels;

  std::vector<Parameter*> parameters() { return model.parameters(); }

  BatchResult batch(Tape& t, std::span<const std::size_t> idx, const Mode&) {
    const std::size_t F = model.families();
    Tensor targets = Tensor::matrix(idx.size(), F);
    for (std::size_t i = 0; i < idx.size(); ++i) targets(i, static_cast<std::size_t>(labels[idx[i]])) = 1.0;
    Var z = model.logits(t, gather_rows(features, idx));
    BatchResult r{ops::sigmoid_binary_cross_entropy(t, z, targets), 0};
    const Tensor& zv = t.value(z);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (static_cast<int>(argmax(zv.row(i))) == labels[idx[i]]) ++r.correct;
    return r;
  }
};

}  // namespace

LinearBaseline train_linear_baseline(const Tensor& features, std::span<const int> labels, std::size_t families,
                                     std::span<const std::size_t> train_idx, const LinearBaselineConfig& config) {
  if (features.rows() != labels.size()) throw ShapeError("train_linear_baseline: one label per row required");
  if (families == 0) throw ConfigError("train_linear_baseline: families must be positive");
  Rng rng(derive_seed(config.hp.seed, {0x0f5}));
  LinearBaseline model(Standardizer::fit(features, train_idx), families, rng);
  OvrTask task{model, features, labels};
  train(task, train_idx, {}, config.hp);
  return model;
}

}  // namespace malfuse

#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "malfuse/archive.hpp"
#include "malfuse/features.hpp"
#include "malfuse/layers.hpp"
#include "malfuse/trainer.hpp"

namespace malfuse {

// Per-column z-scoring fitted on training rows. Constant columns get scale 1.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Tensor& rows, std::span<const std::size_t> idx);
  std::size_t width() const { return mean.size(); }
  Tensor apply(const Tensor& rows) const;
  void apply_inplace(std::span<double> row) const;
};

struct ComponentConfig {
  std::vector<std::size_t> hidden{256, 128};
  Hyperparams hp = default_hyperparams();

  static Hyperparams default_hyperparams() {
    Hyperparams h;
    h.epochs = 60;
    h.learning_rate = 1e-3;
    h.batch_size = 32;
    h.patience = 8;
    h.dropout = 0.2;
    return h;
  }
  nlohmann::json to_json() const;
  static ComponentConfig from_json(const nlohmann::json& j);
};

// Standardizer -> dense stack -> F-way softmax, one per feature family.
class ComponentModel {
 public:
  ComponentModel() = default;
  ComponentModel(FeatureName feature, Standardizer standardizer, std::size_t families, const ComponentConfig& config,
                 Rng& rng);

  FeatureName feature() const { return feature_; }
  std::size_t input_width() const { return standardizer_.width(); }
  std::size_t families() const { return net_.out_width(); }
  std::vector<std::size_t> hidden_widths() const { return net_.hidden_widths(); }
  const Standardizer& standardizer() const { return standardizer_; }
  double validation_accuracy() const { return validation_accuracy_; }
  const TrainHistory& history() const { return history_; }

  Var logits(Tape& t, const Tensor& raw_rows, const Mode& mode);
  // Probability rows {N, F} for raw (unstandardized) feature rows {N, len}.
  Tensor predict_rows(const Tensor& raw_rows) const;

  void collect(std::vector<Parameter*>& out) { net_.collect(out); }
  ModelArchive to_archive() const;
  static ComponentModel from_archive(const ModelArchive& a);

  friend ComponentModel train_component(const FeatureTable& table, std::span<const int> labels, std::size_t families,
                                        std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                                        const ComponentConfig& config);

 private:
  FeatureName feature_ = FeatureName::pe_onehot;
  Standardizer standardizer_;
  Mlp net_;
  ComponentConfig config_;
  double validation_accuracy_ = 0.0;
  TrainHistory history_;
};

ComponentModel train_component(const FeatureTable& table, std::span<const int> labels, std::size_t families,
                               std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                               const ComponentConfig& config);
// Throws ShapeError when the feature name or length does not match the model.
std::vector<double> predict(const ComponentModel& model, const FeatureVector& feature);

// feature -> validation accuracy of its component, the only input to the
// ascending-accuracy orderings used by fusion presets.
struct ComponentManifest {
  std::map<FeatureName, double> validation_accuracy;

  bool contains(FeatureName f) const { return validation_accuracy.count(f) != 0; }
  double accuracy(FeatureName f) const;
  // The requested features sorted by ascending accuracy, ties by enum order.
  std::vector<FeatureName> ascending(std::span<const FeatureName> features) const;

  nlohmann::json to_json() const;
  static ComponentManifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ComponentManifest load(const std::filesystem::path& path);
};

ComponentManifest make_manifest(const std::map<FeatureName, ComponentModel>& components);

// Saves each component as <dir>/<feature>.mdl plus <dir>/manifest.json.
void save_components(const std::filesystem::path& dir, const std::map<FeatureName, ComponentModel>& components);
std::map<FeatureName, ComponentModel> load_components(const std::filesystem::path& dir);

// --- One-vs-rest linear baseline --------------------------------------------

// F independent logistic units over standardized features.
class LinearBaseline {
 public:
  LinearBaseline() = default;
  LinearBaseline(Standardizer standardizer, std::size_t families, Rng& rng);

  std::size_t families() const { return weights_.value.shape[1]; }
  // Binary scores in (0,1), {N, F}; prediction is the row argmax.
  Tensor scores(const Tensor& raw_rows) const;
  Var logits(Tape& t, const Tensor& raw_rows) const;
  std::vector<Parameter*> parameters() { return {&weights_, &bias_}; }

 private:
  Standardizer standardizer_;
  Parameter weights_;  // {len, F}
  Parameter bias_;     // {1, F}
};

struct LinearBaselineConfig {
  Hyperparams hp = default_hyperparams();
  static Hyperparams default_hyperparams() {
    Hyperparams h;
    h.epochs = 100;
    h.learning_rate = 1e-2;
    h.patience = 100;
    return h;
  }
};

LinearBaseline train_linear_baseline(const Tensor& features, std::span<const int> labels, std::size_t families,
                                     std::span<const std::size_t> train_idx,
                                     const LinearBaselineConfig& config = {});

}  // namespace malfuse

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "malfuse/components.hpp"
#include "malfuse/corpus.hpp"
#include "malfuse/extraction.hpp"
#include "malfuse/fusion.hpp"

namespace malfuse {

// --- Metrics --------------------------------------------------------------------

// Fraction of rows whose label is among the k largest entries; ties rank
// the lower family index first.
double topk_accuracy(const Tensor& probs, std::span<const int> labels, std::size_t k);

struct FoldScore {
  double accuracy = 0.0;
  double top3_accuracy = 0.0;
};

struct EvalReport {
  std::string protocol = "holdout";
  std::vector<std::string> family_names;
  double accuracy = 0.0;
  double top3_accuracy = 0.0;
  std::vector<double> precision;  // 0 for a family never predicted
  std::vector<double> recall;     // 0 for a family never present
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<FoldScore> folds;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // population standard deviation over folds
  double mean_top3 = 0.0;
  double std_top3 = 0.0;

  std::size_t families() const { return family_names.size(); }
  // Summary, per-family and fold sections in one CSV document.
  std::string to_csv() const;
  std::string to_text() const;
};

EvalReport make_report(const Tensor& probs, std::span<const int> labels, const std::vector<std::string>& family_names);
// Pools the confusion matrices of the folds and summarizes fold scores.
EvalReport merge_folds(const std::vector<EvalReport>& folds, const std::string& protocol);

// --- Full pipeline ----------------------------------------------------------------

struct PipelineConfig {
  ExtractionConfig extraction;
  ComponentConfig component;
  FusionConfig fusion;
  Preset preset = Preset::ef1;
  FeatureSet features = FeatureSet::integrated;
  PresetOptions preset_options;
  // Share of each training fold held out for early stopping.
  double validation_fraction = 0.1;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
};

struct PipelineRun {
  FeatureExtractors extractors;
  std::map<FeatureName, FeatureTable> tables;  // every sample of the corpus
  std::map<FeatureName, ComponentModel> components;
  FusionModel model;
  Tensor test_probs;  // rows follow the test indices
  EvalReport report;
};

// Fits extractors, components and the fusion model on train/validation
// samples, then scores the test samples.
PipelineRun run_pipeline(const Corpus& corpus, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, std::span<const std::size_t> test_idx,
                         const PipelineConfig& config);

// Fusion probabilities {rows.size(), F} for the given rows of full-corpus tables.
Tensor predict_rows(const FusionModel& model, const std::map<FeatureName, FeatureTable>& tables,
                    std::span<const std::size_t> rows);

std::map<FeatureName, ComponentModel> train_components(const std::map<FeatureName, FeatureTable>& tables,
                                                       std::span<const int> labels, std::size_t families,
                                                       std::span<const std::size_t> train_idx,
                                                       std::span<const std::size_t> val_idx,
                                                       const ComponentConfig& config);

// Stratified split of `pool` into (train, validation) by label.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(const std::vector<int>& labels,
                                                                               std::span<const std::size_t> pool,
                                                                               double fraction, std::uint64_t seed);

// k-fold cross validation; every model is rebuilt from the training folds.
// Up to `jobs` folds train concurrently; results do not depend on `jobs`.
EvalReport cross_validate(const PipelineConfig& config, const Corpus& corpus, std::size_t k = 10,
                          std::uint64_t seed = 42, std::size_t jobs = 1);

// True when extractors and components fitted on a corpus stripped of every
// sample outside train/validation are byte-identical to those fitted on the
// full corpus.
bool leakage_free(const Corpus& corpus, std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                  const PipelineConfig& config);

// --- Tuning sweeps ------------------------------------------------------------------

enum class SweepParameter { cafc_kernels, zigzag_len, pv_dim, cooc_pool, stmt_seqlen };

inline constexpr std::array<SweepParameter, 5> kAllSweeps = {SweepParameter::cafc_kernels, SweepParameter::zigzag_len,
                                                             SweepParameter::pv_dim, SweepParameter::cooc_pool,
                                                             SweepParameter::stmt_seqlen};

std::string to_string(SweepParameter p);
SweepParameter sweep_parameter_from_string(const std::string& s);
FeatureName swept_feature(SweepParameter p);
// The published tuning grids.
std::vector<std::size_t> published_grid(SweepParameter p);

struct SweepRow {
  std::size_t value = 0;
  std::size_t feature_length = 0;
  double accuracy = 0.0;
};

struct SweepTable {
  SweepParameter parameter = SweepParameter::cafc_kernels;
  std::vector<SweepRow> rows;

  std::string to_csv() const;
  std::string to_text() const;
};

// Per value: refit the swept feature's extractor, train a single softmax
// layer on it and record validation accuracy.
SweepTable sweep(SweepParameter parameter, const std::vector<std::size_t>& values, const Corpus& corpus,
                 std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                 const ExtractionConfig& base, const Hyperparams& probe);
Hyperparams default_probe_hyperparams();

// --- Encoder comparison -----------------------------------------------------------

struct EncoderComparisonRow {
  std::size_t length = 0;
  double call_accuracy = 0.0;
  double statement_accuracy = 0.0;
};

struct EncoderComparison {
  std::vector<EncoderComparisonRow> rows;
  std::string to_csv() const;
  std::string to_text() const;
};

// Trains both sequence encoders per length on the same split and seeds.
EncoderComparison compare_encoders(const Corpus& corpus, const std::vector<std::size_t>& lengths,
                                   std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                                   const StatementEncoderConfig& statements, const CallSequenceConfig& calls);

// --- Case reports -----------------------------------------------------------------

enum class CaseCategory {
  both_fail_integrated_succeeds,
  static_succeeds,
  dynamic_succeeds,
  all_fail,
  all_succeed,
  integrated_fails
};

std::string to_string(CaseCategory c);
CaseCategory classify_case(int label, std::size_t static_pred, std::size_t dynamic_pred, std::size_t integrated_pred);

struct CaseReport {
  std::string sample_id;
  int label = 0;
  std::vector<double> static_probs;
  std::vector<double> dynamic_probs;
  std::vector<double> integrated_probs;
  std::size_t static_pred = 0;
  std::size_t dynamic_pred = 0;
  std::size_t integrated_pred = 0;
  CaseCategory category = CaseCategory::all_fail;

  // One row per family: family, static, dynamic, integrated probability.
  std::string to_csv(const std::vector<std::string>& family_names) const;
};

CaseReport case_report(const std::string& sample_id, int label, std::span<const double> static_probs,
                       std::span<const double> dynamic_probs, std::span<const double> integrated_probs);

// One line per case: sample, label, the three predictions and the category.
std::string case_summary_csv(const std::vector<CaseReport>& cases, const std::vector<std::string>& family_names);

}  // namespace malfuse

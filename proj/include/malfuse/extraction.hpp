#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "malfuse/corpus.hpp"
#include "malfuse/dynamic_features.hpp"
#include "malfuse/features.hpp"
#include "malfuse/static_features.hpp"

namespace malfuse {

// Settings for every fitted feature extractor. `seed` is folded into the
// seed of each trained extractor.
struct ExtractionConfig {
  std::size_t import_vocab = 251;  // named imports; one-hot length is this + 1
  std::size_t api_vocab = 286;     // named API calls; frequency length is this + 1
  CafcConfig cafc;
  std::size_t lowfreq_length = kDefaultLowfreqLength;
  PvConfig pv;
  std::size_t cooc_window = kDefaultCoocWindow;
  CoocCnnConfig cooc;
  StatementEncoderConfig statements;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys throw ConfigError.
  static ExtractionConfig from_json(const nlohmann::json& j);
};

// Vocabularies and trained models that map a Sample to feature vectors.
// Everything here is fitted on training (and validation, for early
// stopping) samples only.
class FeatureExtractors {
 public:
  const ExtractionConfig& config() const { return config_; }
  const std::vector<FeatureName>& features() const { return features_; }
  const Vocabulary& imports() const { return imports_; }
  const Vocabulary& apis() const { return apis_; }

  FeatureVector extract(FeatureName f, const Sample& s) const;
  std::map<FeatureName, FeatureTable> extract_all(const Corpus& corpus) const;

  // Byte image of every fitted artifact; equal images mean equal extractors.
  std::string fingerprint() const;

  void save(const std::filesystem::path& dir) const;
  static FeatureExtractors load(const std::filesystem::path& dir);

  friend FeatureExtractors fit_extractors(const Corpus& corpus, std::span<const std::size_t> train_idx,
                                          std::span<const std::size_t> val_idx, const ExtractionConfig& config,
                                          std::span<const FeatureName> features);

 private:
  ExtractionConfig config_;
  std::vector<FeatureName> features_;
  Vocabulary imports_;
  Vocabulary apis_;
  std::optional<CafcModel> cafc_;
  std::optional<PvModel> pv_;
  std::optional<CoocCnnModel> cooc_;
  std::optional<StatementEncoderModel> statements_;
};

FeatureExtractors fit_extractors(const Corpus& corpus, std::span<const std::size_t> train_idx,
                                 std::span<const std::size_t> val_idx, const ExtractionConfig& config,
                                 std::span<const FeatureName> features = kAllFeatures);

}  // namespace malfuse

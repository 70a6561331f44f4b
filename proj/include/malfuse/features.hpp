#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "malfuse/tensor.hpp"

namespace malfuse {

enum class FeatureName { pe_onehot, cg_embedding, cg_lowfreq, api_freq, pv_trace, cooc_feat, stmt_embed };

inline constexpr std::array<FeatureName, 7> kAllFeatures = {
    FeatureName::pe_onehot, FeatureName::cg_embedding, FeatureName::cg_lowfreq, FeatureName::api_freq,
    FeatureName::pv_trace,  FeatureName::cooc_feat,    FeatureName::stmt_embed};

std::string to_string(FeatureName f);
FeatureName feature_from_string(const std::string& s);
bool is_static(FeatureName f);

struct FeatureVector {
  FeatureName name = FeatureName::pe_onehot;
  std::vector<double> values;
};

// One feature family for many samples: row i of `values` belongs to sample_ids[i].
struct FeatureTable {
  FeatureName name = FeatureName::pe_onehot;
  std::vector<std::string> sample_ids;
  Tensor values;  // {N, length}

  std::size_t length() const { return values.rank() == 2 ? values.shape[1] : 0; }
  std::size_t size() const { return sample_ids.size(); }
  // Appends a row, checking the name and length against earlier rows.
  void append(const std::string& sample_id, const FeatureVector& v);
  FeatureTable subset(const std::vector<std::size_t>& rows) const;
};

// Columnar text format: a header line "<feature_name>,<length>", then one
// line per sample "<sample_id>,v0,...,v{length-1}" with values printed at
// full double precision.
void write_feature_table(std::ostream& out, const FeatureTable& table);
FeatureTable read_feature_table(std::istream& in);
void save_feature_table(const std::filesystem::path& path, const FeatureTable& table);
FeatureTable load_feature_table(const std::filesystem::path& path);

}  // namespace malfuse

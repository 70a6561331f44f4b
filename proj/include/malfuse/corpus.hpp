#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "malfuse/tensor.hpp"

namespace malfuse {

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class EmptyTraceError : public Error {
 public:
  using Error::Error;
};

inline constexpr std::size_t kDefaultParamCap = 15;
inline constexpr std::size_t kDefaultCanonicalSize = 64;

struct ApiStatement {
  std::string api;
  std::vector<std::string> params;
  bool operator==(const ApiStatement&) const = default;
};

struct TraceFile {
  std::string sample_id;
  std::vector<ApiStatement> statements;
  bool operator==(const TraceFile&) const = default;
};

// Canonical binary adjacency of a call graph: nodes reordered by descending
// out-degree (ties by original id), truncated or zero-padded to size x size.
struct CallGraph {
  std::size_t node_count = 0;
  std::size_t size = 0;
  std::vector<std::uint8_t> adjacency;  // row-major size x size

  std::uint8_t at(std::size_t i, std::size_t j) const { return adjacency[i * size + j]; }
  Tensor to_tensor() const;
  bool operator==(const CallGraph&) const = default;
};

struct PeImports {
  std::string sample_id;
  std::set<std::string> imports;
  bool operator==(const PeImports&) const = default;
};

struct FamilyLabel {
  int value = 0;
  auto operator<=>(const FamilyLabel&) const = default;
};

// Token -> index map with a reserved UNKNOWN slot at index size()-1.
class Vocabulary {
 public:
  static constexpr std::string_view kUnknown = "<UNKNOWN>";

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> named);

  std::size_t size() const { return names_.size() + 1; }
  std::size_t unknown_index() const { return names_.size(); }
  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const { return lookup_.find(std::string(name)) != lookup_.end(); }
  const std::string& name(std::size_t i) const;
  const std::vector<std::string>& named() const { return names_; }

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  bool operator==(const Vocabulary& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t, std::less<>> lookup_;
};

// The max_named most frequent names (ties lexicographic) get indices
// 0..n-1 and UNKNOWN takes index n, where n = min(max_named, distinct).
Vocabulary build_vocabulary(const std::map<std::string, std::size_t>& counts, std::size_t max_named);
Vocabulary build_vocabulary(const std::vector<std::string>& names, std::size_t max_named);

struct Sample {
  std::string sample_id;
  FamilyLabel family;
  TraceFile trace;
  CallGraph callgraph;
  PeImports imports;
};

struct Corpus {
  std::vector<Sample> samples;
  std::vector<std::string> family_names;

  std::size_t family_count() const { return family_names.size(); }
  std::size_t size() const { return samples.size(); }
  std::vector<int> labels() const;
  // Samples at the given indices, in that order.
  Corpus subset(const std::vector<std::size_t>& indices) const;
};

// --- Parameter token normalization ---------------------------------------
//
// Tokens are lowercased. Path-like tokens (containing '\' or '/') become
// "path:<.ext>" using the extension of the last path component ("path:" if
// none). Numeric literals (decimal, optionally signed or fractional, or 0x
// hex) become "num:<bucket>" where the bucket keeps the leading digit of the
// integer magnitude and encodes the power of ten: 7 -> "7", 42 -> "40",
// 250 -> "200", 4096 -> "4k", 45000 -> "40k", 3000000 -> "3m".
// Negative numbers keep a leading '-'.
std::string normalize_param_token(std::string_view raw);

// --- File formats -----------------------------------------------------------

// One JSON object per line: {"sample_id": str, "api": str, "params": [str]}.
// Blank lines are skipped. Parameters beyond param_cap are dropped.
TraceFile parse_trace(std::istream& in, std::size_t param_cap = kDefaultParamCap);
TraceFile parse_trace_text(std::string_view text, std::size_t param_cap = kDefaultParamCap);
std::string serialize_trace(const TraceFile& trace);

// Header "n <node_count>" (optional; defaults to max id + 1), then "u v"
// edge lines over node ids 0..n-1. Lines starting with '#' are comments.
CallGraph parse_callgraph(std::istream& in, std::size_t canonical_size = kDefaultCanonicalSize);
CallGraph parse_callgraph_text(std::string_view text, std::size_t canonical_size = kDefaultCanonicalSize);
CallGraph canonicalize_callgraph(std::size_t node_count, const std::vector<std::pair<std::size_t, std::size_t>>& edges,
                                 std::size_t canonical_size);
// Writes the canonical graph; "n" is min(node_count, size).
std::string serialize_callgraph(const CallGraph& cg);

// One API name per line.
PeImports parse_imports(std::istream& in, std::string sample_id);
std::string serialize_imports(const PeImports& imports);

// --- Synthetic corpus -------------------------------------------------------

enum class SignalChannel { static_only, dynamic_only, both, params_only };
std::string to_string(SignalChannel c);
SignalChannel signal_channel_from_string(const std::string& s);

enum class FamilySizes { uniform, long_tail };

struct CorpusSpec {
  std::size_t family_count = 8;
  std::size_t samples_per_family = 60;
  // long_tail draws family sizes from the published family-size histogram
  // (0-50: 49 families, 51-100: 19, ... 301-350: 1), scaled by size_scale.
  FamilySizes family_sizes = FamilySizes::uniform;
  double size_scale = 1.0;
  SignalChannel signal = SignalChannel::both;
  // Interpolates every family profile toward the cross-family mean.
  double overlap_noise = 0.4;
  // Per sample and per analysis channel (static / dynamic), the probability
  // that the channel's profile is an even mixture of the sample's family and
  // one other "decoy" family. Decoys are drawn independently per channel.
  double decoy_rate = 0.5;
  std::size_t import_vocab = 300;
  std::size_t api_vocab = 320;
  std::size_t trace_length_min = 150;
  std::size_t trace_length_max = 300;
  std::size_t params_max = 3;
  std::size_t callgraph_nodes_min = 16;
  std::size_t callgraph_nodes_max = 64;
  std::size_t canonical_size = kDefaultCanonicalSize;
  std::uint64_t seed = 42;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

Corpus generate_corpus(const CorpusSpec& spec);

// --- Splits -----------------------------------------------------------------

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
  std::vector<std::vector<std::size_t>> folds;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static DatasetSplit from_json(const nlohmann::json& j);
};

struct HoldoutFractions {
  double train = 0.81;
  double validation = 0.09;
  double test = 0.10;
};

// Stratified k folds: each family is shuffled and dealt round-robin across
// folds, continuing where the previous family stopped. Families smaller than
// k are still dealt round-robin and produce a warning.
std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels, std::size_t k, std::uint64_t seed,
                                                       std::vector<std::string>* warnings = nullptr);

// Stratified holdout. Sizes: test = floor(f_test*N), validation =
// round(f_val*N), train = the rest (4519 -> 3661/407/451 at 0.81/0.09/0.10).
DatasetSplit holdout_split(const std::vector<int>& labels, HoldoutFractions fractions, std::uint64_t seed);

// Both of the above over the same labels.
DatasetSplit make_splits(const std::vector<int>& labels, std::size_t k, HoldoutFractions fractions, std::uint64_t seed);

// Training indices for fold i of a k-fold split (all other folds, sorted).
std::vector<std::size_t> fold_complement(const std::vector<std::vector<std::size_t>>& folds, std::size_t i);

// --- Corpus on disk ---------------------------------------------------------
//
// <dir>/manifest.csv with columns sample_id,family,trace_path,cg_path,imports_path
// (paths relative to <dir>), and the referenced artifact files.
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir, std::size_t canonical_size = kDefaultCanonicalSize,
                   std::size_t param_cap = kDefaultParamCap);

}  // namespace malfuse

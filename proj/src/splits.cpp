#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "malfuse/corpus.hpp"
#include "malfuse/rng.hpp"

namespace malfuse {
namespace {

// Sample indices per family, each list shuffled under its own seed.
std::map<int, std::vector<std::size_t>> shuffled_members(const std::vector<int>& labels, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  for (auto& [family, idx] : members) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(family)}));
    rng.shuffle(idx);
  }
  return members;
}

void check_fractions(const HoldoutFractions& f) {
  if (f.train < 0.0 || f.validation < 0.0 || f.test < 0.0) throw ConfigError("split fractions must be non-negative");
  if (std::abs(f.train + f.validation + f.test - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

}  // namespace

std::vector<std::vector<std::size_t>> stratified_folds(const std::vector<int>& labels, std::size_t k, std::uint64_t seed,
                                                       std::vector<std::string>* warnings) {
  if (k < 2) throw ConfigError("k-fold split needs k >= 2");
  if (labels.size() < k) throw ConfigError("k-fold split needs at least k samples");
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t next = 0;
  for (const auto& [family, idx] : shuffled_members(labels, derive_seed(seed, {0xf01d}))) {
    if (idx.size() < k && warnings != nullptr) {
      warnings->push_back("family " + std::to_string(family) + " has " + std::to_string(idx.size()) +
                          " samples, fewer than k=" + std::to_string(k) + "; placed round-robin");
    }
    for (std::size_t i : idx) {
      folds[next].push_back(i);
      next = (next + 1) % k;
    }
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

DatasetSplit holdout_split(const std::vector<int>& labels, HoldoutFractions fractions, std::uint64_t seed) {
  check_fractions(fractions);
  const std::size_t n = labels.size();
  const auto n_test = static_cast<std::size_t>(std::floor(fractions.test * static_cast<double>(n) + 1e-9));
  const auto n_val = std::min(n - n_test, static_cast<std::size_t>(std::llround(fractions.validation * static_cast<double>(n))));

  // Each family member gets an evenly spaced key in (0,1); taking prefixes of
  // the key order keeps every part close to the family proportions.
  std::vector<std::tuple<double, int, std::size_t>> keyed;
  keyed.reserve(n);
  for (const auto& [family, idx] : shuffled_members(labels, derive_seed(seed, {0x401d}))) {
    for (std::size_t j = 0; j < idx.size(); ++j) {
      keyed.emplace_back((static_cast<double>(j) + 0.5) / static_cast<double>(idx.size()), family, idx[j]);
    }
  }
  std::sort(keyed.begin(), keyed.end());
  DatasetSplit s;
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = std::get<2>(keyed[r]);
    if (r < n_test) s.test.push_back(i);
    else if (r < n_test + n_val) s.validation.push_back(i);
    else s.train.push_back(i);
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

DatasetSplit make_splits(const std::vector<int>& labels, std::size_t k, HoldoutFractions fractions, std::uint64_t seed) {
  DatasetSplit s = holdout_split(labels, fractions, seed);
  s.folds = stratified_folds(labels, k, seed, &s.warnings);
  return s;
}

std::vector<std::size_t> fold_complement(const std::vector<std::vector<std::size_t>>& folds, std::size_t i) {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < folds.size(); ++f)
    if (f != i) out.insert(out.end(), folds[f].begin(), folds[f].end());
  std::sort(out.begin(), out.end());
  return out;
}

nlohmann::json DatasetSplit::to_json() const {
  return {{"train", train}, {"validation", validation}, {"test", test}, {"folds", folds}, {"warnings", warnings}};
}

DatasetSplit DatasetSplit::from_json(const nlohmann::json& j) {
  DatasetSplit s;
  s.train = j.at("train").get<std::vector<std::size_t>>();
  s.validation = j.at("validation").get<std::vector<std::size_t>>();
  s.test = j.at("test").get<std::vector<std::size_t>>();
  s.folds = j.value("folds", std::vector<std::vector<std::size_t>>{});
  s.warnings = j.value("warnings", std::vector<std::string>{});
  return s;
}

}  // namespace malfuse

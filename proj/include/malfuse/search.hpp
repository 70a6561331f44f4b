#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "malfuse/layers.hpp"
#include "malfuse/rng.hpp"

namespace malfuse {

// Ranges of the hyperparameter tuning table.
struct SearchSpace {
  std::vector<Activation> activations{Activation::relu, Activation::sigmoid, Activation::tanh, Activation::softmax,
                                      Activation::linear};
  double weight_decay_max = 0.001;
  double dropout_max = 0.5;
  bool tune_batchnorm = true;
  bool tune_weight_mode = true;
};

inline Hyperparams sample_hyperparams(const SearchSpace& space, const Hyperparams& base, Rng& rng) {
  Hyperparams hp = base;
  if (!space.activations.empty()) hp.activation = space.activations[rng.index(space.activations.size())];
  hp.weight_decay = rng.uniform(0.0, space.weight_decay_max);
  hp.dropout = rng.uniform(0.0, space.dropout_max);
  if (space.tune_batchnorm) hp.batchnorm = rng.bernoulli(0.5);
  if (space.tune_weight_mode) hp.weight_mode = rng.bernoulli(0.5) ? WeightMode::trainable : WeightMode::fixed;
  return hp;
}

struct SearchResult {
  Hyperparams best;
  double best_score = 0.0;
  std::vector<std::pair<Hyperparams, double>> trials;
};

// Uniform random search. Trial i draws from its own stream derived from
// (seed, i), so a longer search always contains every shorter one with the
// same seed. Ties keep the earliest trial.
template <class Objective>
SearchResult random_search(const SearchSpace& space, const Hyperparams& base, std::size_t trials, std::uint64_t seed,
                           Objective&& objective) {
  if (trials == 0) throw ConfigError("random_search needs at least one trial");
  SearchResult result;
  for (std::size_t i = 0; i < trials; ++i) {
    Rng rng(derive_seed(seed, {0x5ea7c4, i}));
    Hyperparams hp = sample_hyperparams(space, base, rng);
    const double score = objective(hp);
    result.trials.emplace_back(hp, score);
    if (i == 0 || score > result.best_score) {
      result.best = hp;
      result.best_score = score;
    }
  }
  return result;
}

}  // namespace malfuse

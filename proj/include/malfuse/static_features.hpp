#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "malfuse/archive.hpp"
#include "malfuse/corpus.hpp"
#include "malfuse/features.hpp"
#include "malfuse/layers.hpp"
#include "malfuse/trainer.hpp"

namespace malfuse {

inline constexpr std::size_t kDefaultLowfreqLength = 350;

// values[i] = 1 iff some import maps to index i; unseen names hit UNKNOWN.
FeatureVector pe_import_onehot(const PeImports& imports, const Vocabulary& vocab);

// Orthonormal type-II DCT of a square matrix and its inverse.
Tensor dct2(const Tensor& m);
Tensor idct2(const Tensor& coeffs);

// JPEG zigzag visiting order of an n x n matrix as (row, col) pairs.
std::vector<std::pair<std::size_t, std::size_t>> zigzag_order(std::size_t n);
// First L entries in zigzag order, zero-padded past n*n.
std::vector<double> zigzag_scan(const Tensor& m, std::size_t length);
// Inverse of a full scan: places values back at their zigzag positions.
Tensor zigzag_unscan(const std::vector<double>& values, std::size_t n);

FeatureVector extract_lowfreq(const CallGraph& cg, std::size_t length = kDefaultLowfreqLength);

struct CafcConfig {
  std::size_t kernels = 4;
  std::size_t embed_dim = 64;
  Hyperparams hp = default_hyperparams();

  static Hyperparams default_hyperparams() {
    Hyperparams h;
    h.epochs = 20;
    h.batch_size = 16;
    h.learning_rate = 1e-3;
    h.patience = 5;
    return h;
  }
};

// Convolutional autoencoder over canonical adjacency matrices:
// conv(K, 3x3, relu) -> flatten -> dense(d, tanh) -> dense(S*S, sigmoid).
// The d-wide bottleneck is the call-graph embedding.
class CafcModel {
 public:
  CafcModel() = default;
  CafcModel(std::size_t canonical_size, std::size_t kernels, std::size_t embed_dim, Rng& rng);

  std::size_t canonical_size() const { return size_; }
  std::size_t embed_dim() const { return encoder_.out_width(); }
  std::size_t kernels() const { return conv_.kernels.value.shape[0]; }

  // Encoder output for a batch of {1,S,S} inputs, stacked as {B,d}.
  Var encode(Tape& t, const std::vector<const CallGraph*>& graphs) const;
  Var reconstruct(Tape& t, Var codes) const;
  std::vector<double> embed(const CallGraph& cg) const;
  double reconstruction_error(const CallGraph& cg) const;

  void collect(std::vector<Parameter*>& out);
  ModelArchive to_archive() const;
  static CafcModel from_archive(const ModelArchive& a);

 private:
  std::size_t size_ = 0;
  Conv2d conv_;
  Dense encoder_;
  Dense decoder_;
};

struct CafcTraining {
  CafcModel model;
  TrainHistory history;
  double initial_loss = 0.0;
};

// Unsupervised training to minimize mean squared reconstruction error.
CafcTraining train_cafc(const std::vector<CallGraph>& graphs, const CafcConfig& config);

FeatureVector cg_embed(const CafcModel& model, const CallGraph& cg);

}  // namespace malfuse

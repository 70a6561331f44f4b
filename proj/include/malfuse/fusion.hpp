#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "malfuse/components.hpp"
#include "malfuse/features.hpp"
#include "malfuse/layers.hpp"

namespace malfuse {

enum class FeatureSet { integrated, static_only, dynamic_only };

std::string to_string(FeatureSet s);
// Accepts "integrated", "static", "dynamic" (and the *_only spellings).
FeatureSet feature_set_from_string(const std::string& s);
std::vector<FeatureName> features_of(FeatureSet s);

// --- Topology -------------------------------------------------------------------

enum class NodeKind { input, component, concat, dense, softmax, pretrained, ovr };

std::string to_string(NodeKind k);

// One DSL line: "<id> <kind> [args] [<- dep ...]".
//   input <feature>              raw feature row (standardized)
//   component <feature>          frozen component probability row (width F)
//   concat <- a b ...
//   dense <width> <- a           affine + activation (+ dropout in training)
//   softmax <- a                 F-way head
//   pretrained <width> <fixed|trainable> <- a
//                                dense + F-way head trained before its
//                                dependents; "fixed" freezes it afterwards
//   ovr <fixed|trainable> <- p1 ... pM
//                                per-family unit over element f of each
//                                F-wide dependency
struct FusionNode {
  std::string id;
  NodeKind kind = NodeKind::input;
  FeatureName feature = FeatureName::pe_onehot;
  std::size_t width = 0;
  WeightMode mode = WeightMode::fixed;
  std::vector<std::string> deps;

  bool is_head() const { return kind == NodeKind::softmax || kind == NodeKind::pretrained || kind == NodeKind::ovr; }
  bool operator==(const FusionNode&) const = default;
};

class FusionTopology {
 public:
  std::string name = "custom";
  std::vector<FusionNode> nodes;

  // Checks ids, arities, acyclicity and the single probability-emitting
  // root, then sorts `nodes` topologically (stable for valid input).
  void validate();
  const FusionNode& node(const std::string& id) const;
  const FusionNode& root() const;
  // Feature families reachable from the root, through input or component nodes.
  std::set<FeatureName> features() const;
  // Output width of every node. Throws ShapeError on a width mismatch or a
  // feature missing from `feature_widths`.
  std::map<std::string, std::size_t> widths(const std::map<FeatureName, std::size_t>& feature_widths,
                                            std::size_t families) const;
  // Ids of every node `id` depends on, transitively, including itself.
  std::set<std::string> ancestors(const std::string& id) const;

  std::string to_dsl() const;
  static FusionTopology parse(std::string_view text);

  bool operator==(const FusionTopology&) const = default;
};

enum class Preset { ef1, ef2, lf1, lf2, if1, if2, ens_fixed, ens_train };

inline constexpr std::array<Preset, 8> kAllPresets = {Preset::ef1, Preset::ef2, Preset::lf1,       Preset::lf2,
                                                      Preset::if1, Preset::if2, Preset::ens_fixed, Preset::ens_train};

std::string to_string(Preset p);
// Case-insensitive; '-' and '_' are interchangeable ("ens-fixed", "ENS_FIXED").
Preset preset_from_string(const std::string& s);

struct PresetOptions {
  std::size_t dense_width = 128;
  WeightMode stage_mode = WeightMode::fixed;  // pretrained stages: freeze or fine-tune
};

FusionTopology make_preset(Preset preset, const ComponentManifest& manifest, FeatureSet set,
                           const PresetOptions& options = {});
// The ascending-accuracy cascade order used by the EF2/LF1/IF2 presets.
std::vector<FeatureName> cascade_order(const ComponentManifest& manifest, FeatureSet set);

// --- Model ----------------------------------------------------------------------

struct FusionConfig {
  Hyperparams hp = default_hyperparams();

  static Hyperparams default_hyperparams() {
    Hyperparams h;
    h.epochs = 60;
    h.learning_rate = 1e-3;
    h.patience = 8;
    h.dropout = 0.2;
    return h;
  }
};

// Row-aligned inputs for a batch of samples. Component probabilities are
// computed from `features` when absent.
struct FusionInputs {
  std::map<FeatureName, Tensor> features;         // raw rows {N, len}
  std::map<FeatureName, Tensor> component_probs;  // {N, F}

  std::size_t rows() const;
};

struct StageReport {
  std::string node;
  std::size_t trainable_parameters = 0;
  TrainHistory history;
};

class FusionModel {
 public:
  FusionModel() = default;
  // Validates the topology against the components' widths and initializes
  // every node. Components must cover every feature the topology reads.
  FusionModel(FusionTopology topology, std::size_t families, std::map<FeatureName, ComponentModel> components,
              const FusionConfig& config);

  const FusionTopology& topology() const { return topology_; }
  std::size_t families() const { return families_; }
  const std::map<FeatureName, ComponentModel>& components() const { return components_; }
  const std::vector<StageReport>& stages() const { return stages_; }
  std::size_t width(const std::string& id) const { return widths_.at(id); }
  std::vector<const Parameter*> node_parameters(const std::string& id) const;
  std::size_t trainable_parameter_count() const;

  // Probability rows {N, F} emitted by the root.
  Tensor predict_rows(const FusionInputs& inputs) const;

  ModelArchive to_archive() const;
  static FusionModel from_archive(const ModelArchive& a);

  friend FusionModel train_fusion(const FusionTopology& topology, const std::map<FeatureName, FeatureTable>& tables,
                                  const std::map<FeatureName, ComponentModel>& components, std::span<const int> labels,
                                  std::size_t families, std::span<const std::size_t> train_idx,
                                  std::span<const std::size_t> val_idx, const FusionConfig& config);

  struct NodeState {
    Dense hidden;  // dense, pretrained
    Dense head;    // softmax, pretrained
    Parameter ovr_weights;
    Parameter ovr_bias;
    bool trained = false;
  };

  // Prepared inputs: standardized features and component probabilities.
  struct Data {
    std::map<FeatureName, Tensor> features;
    std::map<FeatureName, Tensor> probs;
  };
  Data prepare(const FusionInputs& inputs) const;
  // Records the ancestors of `target` on the tape for the given rows.
  // `logits` receives the pre-normalization output of every head visited.
  Var forward(Tape& t, const Data& data, std::span<const std::size_t> rows, const std::string& target,
              const Mode& mode, std::map<std::string, Var>* logits = nullptr) const;

 private:
  std::vector<Parameter*> parameters_of(const std::string& id);

  FusionTopology topology_;
  std::size_t families_ = 0;
  std::map<FeatureName, ComponentModel> components_;
  FusionConfig config_;
  std::map<std::string, std::size_t> widths_;
  std::map<std::string, NodeState> state_;
  std::vector<StageReport> stages_;
};

// Pretrained stages are trained one at a time in topological order, each to
// convergence before any dependent; remaining trainable nodes are then
// trained together. Components are never modified.
FusionModel train_fusion(const FusionTopology& topology, const std::map<FeatureName, FeatureTable>& tables,
                         const std::map<FeatureName, ComponentModel>& components, std::span<const int> labels,
                         std::size_t families, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, const FusionConfig& config = {});

// Single-sample prediction. Throws Error naming the first missing feature.
std::vector<double> predict_fusion(const FusionModel& model, const std::map<FeatureName, FeatureVector>& features);

}  // namespace malfuse

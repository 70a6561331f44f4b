#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "malfuse/archive.hpp"
#include "malfuse/corpus.hpp"
#include "malfuse/features.hpp"
#include "malfuse/layers.hpp"
#include "malfuse/trainer.hpp"

namespace malfuse {

// --- API call frequency -----------------------------------------------------

FeatureVector api_call_frequency(const TraceFile& trace, const Vocabulary& vocab);

// --- Paragraph vectors (distributed memory, negative sampling) -------------

struct PvConfig {
  std::size_t dim = 400;
  std::size_t window = 3;  // context words on each side
  std::size_t negative = 5;
  std::size_t epochs = 10;
  double alpha = 0.025;  // decays linearly to min_alpha
  double min_alpha = 1e-4;
  std::size_t infer_epochs = 10;
  std::uint64_t seed = 1;
  std::uint64_t infer_seed = 7;

  nlohmann::json to_json() const;
  static PvConfig from_json(const nlohmann::json& j);
};

class PvModel {
 public:
  PvModel() = default;

  std::size_t dim() const { return config_.dim; }
  const Vocabulary& vocab() const { return vocab_; }
  const PvConfig& config() const { return config_; }
  const Tensor& word_vectors() const { return words_; }
  const std::vector<double>& epoch_loss() const { return epoch_loss_; }

  // Fresh document vector fitted with frozen word and output vectors.
  std::vector<double> infer(const std::vector<std::size_t>& doc) const;
  std::vector<std::size_t> encode(const TraceFile& trace) const;

  ModelArchive to_archive() const;
  static PvModel from_archive(const ModelArchive& a);

  friend PvModel train_pv(const std::vector<std::vector<std::string>>& docs, const PvConfig& config);

 private:
  void build_noise_table(const std::vector<double>& counts);
  std::size_t sample_noise(Rng& rng) const;
  // One distributed-memory step predicting doc[t]. Word and output vectors
  // are read from the model and updated through the pointers when given
  // (training). Returns the negative-sampling loss.
  double dm_step(std::vector<double>& doc_vec, const std::vector<std::size_t>& doc, std::size_t t, double lr, Rng& rng,
                 Tensor* words, Tensor* outputs) const;

  PvConfig config_;
  Vocabulary vocab_;
  std::vector<double> counts_;
  std::vector<double> noise_cdf_;
  Tensor words_;    // {V, D} context vectors
  Tensor outputs_;  // {V, D} prediction vectors
  std::vector<double> epoch_loss_;
};

// Documents are API-name sequences.
std::vector<std::string> api_names(const TraceFile& trace);
PvModel train_pv(const std::vector<std::vector<std::string>>& docs, const PvConfig& config);
FeatureVector pv_embed(const PvModel& model, const TraceFile& trace);

// --- Co-occurrence matrix and CNN ---------------------------------------------

// Sparse V x V counts of ordered pairs (s, t) with s < t <= s + w.
struct CoocMatrix {
  std::size_t vocab_size = 0;
  std::size_t window = 0;
  std::map<std::pair<std::size_t, std::size_t>, double> counts;

  double at(std::size_t i, std::size_t j) const;
  double total() const;
  // Dense {1,V,V} with each row divided by its maximum.
  Tensor row_normalized() const;
};

inline constexpr std::size_t kDefaultCoocWindow = 2;
CoocMatrix cooccurrence_matrix(const TraceFile& trace, const Vocabulary& vocab, std::size_t window = kDefaultCoocWindow);

struct CoocCnnConfig {
  std::size_t pool = 8;
  std::size_t kernels = 4;
  std::size_t feature_width = 64;
  Hyperparams hp = default_hyperparams();

  static Hyperparams default_hyperparams() {
    Hyperparams h;
    h.epochs = 40;
    h.learning_rate = 2e-3;
    return h;
  }
};

// max-pool(P) -> conv(K, 3x3, relu) -> flatten -> dense(f, relu) -> dense(F).
class CoocCnnModel {
 public:
  CoocCnnModel() = default;
  CoocCnnModel(std::size_t vocab_size, std::size_t families, const CoocCnnConfig& config, Rng& rng);

  std::size_t pooled_side() const { return (vocab_ + pool_ - 1) / pool_; }
  std::size_t feature_width() const { return dense_.out_width(); }
  std::size_t families() const { return head_.out_width(); }

  Var features(Tape& t, const std::vector<const CoocMatrix*>& batch) const;
  Var logits(Tape& t, const std::vector<const CoocMatrix*>& batch) const { return head_.forward(t, features(t, batch)); }
  std::vector<double> feature_vector(const CoocMatrix& m) const;

  void collect(std::vector<Parameter*>& out);
  ModelArchive to_archive() const;
  static CoocCnnModel from_archive(const ModelArchive& a);

 private:
  std::size_t vocab_ = 0;
  std::size_t pool_ = 1;
  Conv2d conv_;
  Dense dense_;
  Dense head_;
};

struct CoocCnnTraining {
  CoocCnnModel model;
  TrainHistory history;
  double train_accuracy = 0.0;
};

CoocCnnTraining train_cooc_cnn(const std::vector<CoocMatrix>& matrices, std::span<const int> labels, std::size_t families,
                               std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                               const CoocCnnConfig& config);
FeatureVector cooc_features(const CoocCnnModel& model, const CoocMatrix& m);

// --- Hierarchical statement-sequence encoder -----------------------------------

inline constexpr std::size_t kDefaultMaxStatements = 200;
inline constexpr std::size_t kStatementTokenCap = 16;

struct StatementEncoderConfig {
  std::size_t embed_dim = 16;
  std::size_t hidden = 16;  // per direction
  std::size_t max_statements = kDefaultMaxStatements;
  std::size_t max_tokens = kStatementTokenCap;
  std::size_t token_vocab = 4000;  // named token cap
  Hyperparams hp = default_hyperparams();

  static Hyperparams default_hyperparams() {
    Hyperparams h;
    h.epochs = 25;
    h.learning_rate = 5e-3;
    h.batch_size = 16;
    h.patience = 6;
    return h;
  }
};

// Token ids per statement: API name first, then parameters.
using EncodedTrace = std::vector<std::vector<int>>;

struct AttentionTrace {
  std::vector<std::vector<double>> token_weights;  // one group per statement
  std::vector<double> statement_weights;
};

class StatementEncoderModel {
 public:
  StatementEncoderModel() = default;
  StatementEncoderModel(Vocabulary tokens, std::size_t families, const StatementEncoderConfig& config, Rng& rng);

  const Vocabulary& tokens() const { return tokens_; }
  std::size_t output_width() const { return 2 * statement_rnn_.forward_cell.hidden(); }
  std::size_t families() const { return head_.out_width(); }
  std::size_t max_statements() const { return max_statements_; }

  EncodedTrace encode(const TraceFile& trace) const;
  // Trace embedding {1, 2u}; attention weights are reported when requested.
  Var embed(Tape& t, const EncodedTrace& trace, AttentionTrace* attention = nullptr) const;
  Var logits(Tape& t, const std::vector<const EncodedTrace*>& batch) const;
  std::vector<double> embedding(const TraceFile& trace, AttentionTrace* attention = nullptr) const;

  void collect(std::vector<Parameter*>& out);
  ModelArchive to_archive() const;
  static StatementEncoderModel from_archive(const ModelArchive& a);

 private:
  Vocabulary tokens_;
  std::size_t max_statements_ = kDefaultMaxStatements;
  std::size_t max_tokens_ = kStatementTokenCap;
  Embedding embedding_;
  BiLstm token_rnn_;
  Parameter token_context_;  // u_ap, {1, 2u}
  BiLstm statement_rnn_;
  Parameter statement_context_;  // u_as, {1, 2u}
  Dense head_;
};

struct StatementEncoderTraining {
  StatementEncoderModel model;
  TrainHistory history;
  double initial_loss = 0.0;
};

// The token vocabulary is built from the training traces only.
StatementEncoderTraining train_statement_encoder(const std::vector<TraceFile>& traces, std::span<const int> labels,
                                                 std::size_t families, std::span<const std::size_t> train_idx,
                                                 std::span<const std::size_t> val_idx,
                                                 const StatementEncoderConfig& config);
FeatureVector statement_embed(const StatementEncoderModel& model, const TraceFile& trace);

// --- Call-sequence baseline ----------------------------------------------------

struct CallSequenceConfig {
  std::size_t max_calls = 200;  // m
  std::size_t embed_dim = 16;
  std::size_t hidden = 32;
  std::size_t name_vocab = 1000;
  Hyperparams hp = StatementEncoderConfig::default_hyperparams();
};

// Embedding -> LSTM over the first m API names -> final state -> dense(F).
class CallSequenceModel {
 public:
  CallSequenceModel() = default;
  CallSequenceModel(Vocabulary names, std::size_t families, const CallSequenceConfig& config, Rng& rng);

  const Vocabulary& names() const { return names_; }
  std::size_t max_calls() const { return max_calls_; }
  std::vector<int> encode(const TraceFile& trace) const;
  Var state(Tape& t, const std::vector<int>& ids) const;
  Var logits(Tape& t, const std::vector<const std::vector<int>*>& batch) const;

  void collect(std::vector<Parameter*>& out);
  ModelArchive to_archive() const;
  static CallSequenceModel from_archive(const ModelArchive& a);

 private:
  Vocabulary names_;
  std::size_t max_calls_ = 200;
  Embedding embedding_;
  Lstm rnn_;
  Dense head_;
};

struct CallSequenceTraining {
  CallSequenceModel model;
  TrainHistory history;
  double initial_loss = 0.0;
};

CallSequenceTraining train_call_sequence_encoder(const std::vector<TraceFile>& traces, std::span<const int> labels,
                                                 std::size_t families, std::span<const std::size_t> train_idx,
                                                 std::span<const std::size_t> val_idx, const CallSequenceConfig& config);

// Accuracy of a trained sequence classifier on the given samples.
double sequence_accuracy(const StatementEncoderModel& model, const std::vector<TraceFile>& traces,
                         std::span<const int> labels, std::span<const std::size_t> idx);
double sequence_accuracy(const CallSequenceModel& model, const std::vector<TraceFile>& traces,
                         std::span<const int> labels, std::span<const std::size_t> idx);

}  // namespace malfuse

#include <algorithm>

#include "malfuse/dynamic_features.hpp"

namespace malfuse {
namespace {

template <class Model, class Encoded>
struct SequenceTask {
  Model& model;
  const std::vector<Encoded>& inputs;
  std::span<const int> labels;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p;
    model.collect(p);
    return p;
  }

  BatchResult batch(Tape& t, std::span<const std::size_t> idx, const Mode&) {
    std::vector<const Encoded*> batch;
    std::vector<int> ys;
    for (std::size_t i : idx) batch.push_back(&inputs[i]), ys.push_back(labels[i]);
    Var z = model.logits(t, batch);
    BatchResult r{ops::softmax_cross_entropy(t, z, ys), 0};
    const Tensor& zv = t.value(z);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (static_cast<int>(argmax(zv.row(i))) == ys[i]) ++r.correct;
    return r;
  }
};

template <class Encoded, class Model>
double batched_accuracy(const Model& model, const std::vector<TraceFile>& traces, std::span<const int> labels,
                        std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  constexpr std::size_t kBatch = 32;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < idx.size(); start += kBatch) {
    std::vector<Encoded> encoded;
    for (std::size_t k = start; k < std::min(idx.size(), start + kBatch); ++k) encoded.push_back(model.encode(traces[idx[k]]));
    std::vector<const Encoded*> batch;
    for (const Encoded& e : encoded) batch.push_back(&e);
    Tape t;
    const Tensor& z = t.value(model.logits(t, batch));
    for (std::size_t r = 0; r < batch.size(); ++r)
      if (static_cast<int>(argmax(z.row(r))) == labels[idx[start + r]]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(idx.size());
}

}  // namespace

// --- Statement-sequence encoder ---------------------------------------------

StatementEncoderModel::StatementEncoderModel(Vocabulary tokens, std::size_t families, const StatementEncoderConfig& config,
                                             Rng& rng)
    : tokens_(std::move(tokens)), max_statements_(config.max_statements), max_tokens_(config.max_tokens) {
  if (config.embed_dim == 0 || config.hidden == 0 || config.max_statements == 0 || config.max_tokens == 0 || families == 0) {
    throw ConfigError("statement encoder: sizes must be positive");
  }
  const std::size_t u = config.hidden;
  embedding_ = Embedding("han.emb", tokens_.size(), config.embed_dim, rng);
  token_rnn_ = BiLstm("han.tok", config.embed_dim, u, rng);
  token_context_ = {"han.u_ap", uniform_tensor({1, 2 * u}, 0.5, rng)};
  statement_rnn_ = BiLstm("han.stmt", 2 * u, u, rng);
  statement_context_ = {"han.u_as", uniform_tensor({1, 2 * u}, 0.5, rng)};
  head_ = Dense("han.out", 2 * u, families, Activation::linear, rng);
}

EncodedTrace StatementEncoderModel::encode(const TraceFile& trace) const {
  if (trace.statements.empty()) throw EmptyTraceError("statement encoder: empty trace");
  EncodedTrace out;
  const std::size_t n = std::min(trace.statements.size(), max_statements_);
  out.reserve(n);
  for (std::size_t l = 0; l < n; ++l) {
    const ApiStatement& s = trace.statements[l];
    std::vector<int> ids{static_cast<int>(tokens_.index(s.api))};
    for (std::size_t r = 0; r < s.params.size() && ids.size() < max_tokens_; ++r)
      ids.push_back(static_cast<int>(tokens_.index(s.params[r])));
    out.push_back(std::move(ids));
  }
  return out;
}

Var StatementEncoderModel::embed(Tape& t, const EncodedTrace& trace, AttentionTrace* attention) const {
  if (trace.empty()) throw EmptyTraceError("statement encoder: empty trace");
  Var u_ap = t.parameter(token_context_);
  std::vector<Var> statements;
  statements.reserve(trace.size());
  for (const auto& ids : trace) {
    Var h = token_rnn_.forward(t, embedding_.forward(t, ids));
    std::vector<double> w;
    statements.push_back(ops::attention_pool(t, h, u_ap, attention ? &w : nullptr));
    if (attention) attention->token_weights.push_back(std::move(w));
  }
  Var h = statement_rnn_.forward(t, ops::stack_rows(t, statements));
  return ops::attention_pool(t, h, t.parameter(statement_context_), attention ? &attention->statement_weights : nullptr);
}

Var StatementEncoderModel::logits(Tape& t, const std::vector<const EncodedTrace*>& batch) const {
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (const EncodedTrace* e : batch) rows.push_back(embed(t, *e));
  return head_.forward(t, ops::stack_rows(t, rows));
}

std::vector<double> StatementEncoderModel::embedding(const TraceFile& trace, AttentionTrace* attention) const {
  Tape t;
  return t.value(embed(t, encode(trace), attention)).data;
}

void StatementEncoderModel::collect(std::vector<Parameter*>& out) {
  embedding_.collect(out);
  token_rnn_.collect(out);
  out.push_back(&token_context_);
  statement_rnn_.collect(out);
  out.push_back(&statement_context_);
  head_.collect(out);
}

ModelArchive StatementEncoderModel::to_archive() const {
  ModelArchive a;
  a.kind = "statement_encoder";
  a.meta = {{"tokens", tokens_.to_json()},
            {"families", families()},
            {"embed_dim", embedding_.table.value.shape[1]},
            {"hidden", statement_rnn_.forward_cell.hidden()},
            {"max_statements", max_statements_},
            {"max_tokens", max_tokens_}};
  for (const Lstm* cell : {&token_rnn_.forward_cell, &token_rnn_.backward_cell, &statement_rnn_.forward_cell,
                           &statement_rnn_.backward_cell})
    for (const Parameter* p : {&cell->input_weights, &cell->recurrent_weights, &cell->bias}) a.add(*p);
  for (const Parameter* p : {&embedding_.table, &token_context_, &statement_context_, &head_.weight, &head_.bias}) a.add(*p);
  return a;
}

StatementEncoderModel StatementEncoderModel::from_archive(const ModelArchive& a) {
  if (a.kind != "statement_encoder") throw Error("expected a statement_encoder archive, got '" + a.kind + "'");
  StatementEncoderConfig c;
  c.embed_dim = a.meta.at("embed_dim").get<std::size_t>();
  c.hidden = a.meta.at("hidden").get<std::size_t>();
  c.max_statements = a.meta.at("max_statements").get<std::size_t>();
  c.max_tokens = a.meta.at("max_tokens").get<std::size_t>();
  Rng rng(0);
  StatementEncoderModel m(Vocabulary::from_json(a.meta.at("tokens")), a.meta.at("families").get<std::size_t>(), c, rng);
  std::vector<Parameter*> params;
  m.collect(params);
  for (Parameter* p : params) a.load_into(*p);
  return m;
}

StatementEncoderTraining train_statement_encoder(const std::vector<TraceFile>& traces, std::span<const int> labels,
                                                 std::size_t families, std::span<const std::size_t> train_idx,
                                                 std::span<const std::size_t> val_idx,
                                                 const StatementEncoderConfig& config) {
  if (train_idx.empty()) throw Error("train_statement_encoder: empty training set");
  std::map<std::string, std::size_t> counts;
  for (std::size_t i : train_idx) {
    const auto& st = traces[i].statements;
    for (std::size_t l = 0; l < std::min(st.size(), config.max_statements); ++l) {
      ++counts[st[l].api];
      for (std::size_t r = 0; r < st[l].params.size() && r + 1 < config.max_tokens; ++r) ++counts[st[l].params[r]];
    }
  }
  Rng rng(derive_seed(config.hp.seed, {0x4a9}));
  StatementEncoderTraining out{
      StatementEncoderModel(build_vocabulary(counts, config.token_vocab), families, config, rng), {}, 0.0};
  std::vector<EncodedTrace> encoded(traces.size());
  for (auto idx : {train_idx, val_idx})
    for (std::size_t i : idx) encoded[i] = out.model.encode(traces[i]);
  SequenceTask<StatementEncoderModel, EncodedTrace> task{out.model, encoded, labels};
  out.initial_loss = evaluate_task(task, train_idx, config.hp.batch_size).loss;
  out.history = train(task, train_idx, val_idx, config.hp);
  return out;
}

FeatureVector statement_embed(const StatementEncoderModel& model, const TraceFile& trace) {
  return {FeatureName::stmt_embed, model.embedding(trace)};
}

// --- Call-sequence baseline --------------------------------------------------

CallSequenceModel::CallSequenceModel(Vocabulary names, std::size_t families, const CallSequenceConfig& config, Rng& rng)
    : names_(std::move(names)), max_calls_(config.max_calls) {
  if (config.max_calls == 0 || config.embed_dim == 0 || config.hidden == 0 || families == 0) {
    throw ConfigError("call-sequence encoder: sizes must be positive");
  }
  embedding_ = Embedding("cse.emb", names_.size(), config.embed_dim, rng);
  rnn_ = Lstm("cse.lstm", config.embed_dim, config.hidden, rng);
  head_ = Dense("cse.out", config.hidden, families, Activation::linear, rng);
}

std::vector<int> CallSequenceModel::encode(const TraceFile& trace) const {
  if (trace.statements.empty()) throw EmptyTraceError("call-sequence encoder: empty trace");
  std::vector<int> ids;
  for (std::size_t l = 0; l < std::min(trace.statements.size(), max_calls_); ++l)
    ids.push_back(static_cast<int>(names_.index(trace.statements[l].api)));
  return ids;
}

Var CallSequenceModel::state(Tape& t, const std::vector<int>& ids) const {
  Var h = rnn_.forward(t, embedding_.forward(t, ids));
  return ops::select_row(t, h, ids.size() - 1);
}

Var CallSequenceModel::logits(Tape& t, const std::vector<const std::vector<int>*>& batch) const {
  std::vector<Var> rows;
  for (const auto* ids : batch) rows.push_back(state(t, *ids));
  return head_.forward(t, ops::stack_rows(t, rows));
}

void CallSequenceModel::collect(std::vector<Parameter*>& out) {
  embedding_.collect(out);
  rnn_.collect(out);
  head_.collect(out);
}

ModelArchive CallSequenceModel::to_archive() const {
  ModelArchive a;
  a.kind = "call_sequence";
  a.meta = {{"names", names_.to_json()},
            {"families", head_.out_width()},
            {"embed_dim", embedding_.table.value.shape[1]},
            {"hidden", rnn_.hidden()},
            {"max_calls", max_calls_}};
  for (const Parameter* p : {&embedding_.table, &rnn_.input_weights, &rnn_.recurrent_weights, &rnn_.bias, &head_.weight,
                             &head_.bias})
    a.add(*p);
  return a;
}

CallSequenceModel CallSequenceModel::from_archive(const ModelArchive& a) {
  if (a.kind != "call_sequence") throw Error("expected a call_sequence archive, got '" + a.kind + "'");
  CallSequenceConfig c;
  c.embed_dim = a.meta.at("embed_dim").get<std::size_t>();
  c.hidden = a.meta.at("hidden").get<std::size_t>();
  c.max_calls = a.meta.at("max_calls").get<std::size_t>();
  Rng rng(0);
  CallSequenceModel m(Vocabulary::from_json(a.meta.at("names")), a.meta.at("families").get<std::size_t>(), c, rng);
  std::vector<Parameter*> params;
  m.collect(params);
  for (Parameter* p : params) a.load_into(*p);
  return m;
}

CallSequenceTraining train_call_sequence_encoder(const std::vector<TraceFile>& traces, std::span<const int> labels,
                                                 std::size_t families, std::span<const std::size_t> train_idx,
                                                 std::span<const std::size_t> val_idx, const CallSequenceConfig& config) {
  if (train_idx.empty()) throw Error("train_call_sequence_encoder: empty training set");
  std::map<std::string, std::size_t> counts;
  for (std::size_t i : train_idx) {
    const auto& st = traces[i].statements;
    for (std::size_t l = 0; l < std::min(st.size(), config.max_calls); ++l) ++counts[st[l].api];
  }
  Rng rng(derive_seed(config.hp.seed, {0xc5e}));
  CallSequenceTraining out{CallSequenceModel(build_vocabulary(counts, config.name_vocab), families, config, rng), {}, 0.0};
  std::vector<std::vector<int>> encoded(traces.size());
  for (auto idx : {train_idx, val_idx})
    for (std::size_t i : idx) encoded[i] = out.model.encode(traces[i]);
  SequenceTask<CallSequenceModel, std::vector<int>> task{out.model, encoded, labels};
  out.initial_loss = evaluate_task(task, train_idx, config.hp.batch_size).loss;
  out.history = train(task, train_idx, val_idx, config.hp);
  return out;
}

double sequence_accuracy(const StatementEncoderModel& model, const std::vector<TraceFile>& traces,
                         std::span<const int> labels, std::span<const std::size_t> idx) {
  return batched_accuracy<EncodedTrace>(model, traces, labels, idx);
}

double sequence_accuracy(const CallSequenceModel& model, const std::vector<TraceFile>& traces, std::span<const int> labels,
                         std::span<const std::size_t> idx) {
  return batched_accuracy<std::vector<int>>(model, traces, labels, idx);
}

}  // namespace malfuse

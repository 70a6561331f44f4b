#include "malfuse/evaluate.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

namespace malfuse {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.2f%%", 100.0 * v);
  return buf;
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size()));
}

void fill_rates(EvalReport& r) {
  const std::size_t F = r.families();
  r.precision.assign(F, 0.0);
  r.recall.assign(F, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    std::size_t predicted = 0, present = 0;
    for (std::size_t g = 0; g < F; ++g) predicted += r.confusion[g][f], present += r.confusion[f][g];
    if (predicted) r.precision[f] = static_cast<double>(r.confusion[f][f]) / static_cast<double>(predicted);
    if (present) r.recall[f] = static_cast<double>(r.confusion[f][f]) / static_cast<double>(present);
  }
}

std::size_t total(const EvalReport& r) {
  std::size_t n = 0;
  for (const auto& row : r.confusion) n = std::accumulate(row.begin(), row.end(), n);
  return n;
}

std::vector<std::size_t> sorted_union(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  std::sort(out.begin(), out.end());
  return out;
}

// Positions of `idx` within the sorted `pool`.
std::vector<std::size_t> positions(const std::vector<std::size_t>& pool, std::span<const std::size_t> idx) {
  std::vector<std::size_t> out;
  for (std::size_t i : idx) out.push_back(static_cast<std::size_t>(std::lower_bound(pool.begin(), pool.end(), i) - pool.begin()));
  return out;
}

}  // namespace

double topk_accuracy(const Tensor& probs, std::span<const int> labels, std::size_t k) {
  if (k < 1) throw ConfigError("top-k accuracy needs k >= 1");
  if (probs.rows() != labels.size()) {
    throw ShapeError("top-k accuracy: " + std::to_string(probs.rows()) + " predictions for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = probs.row(r);
    const std::size_t y = static_cast<std::size_t>(labels[r]);
    if (y >= row.size()) throw ShapeError("top-k accuracy: label out of range");
    std::size_t rank = 0;
    for (std::size_t f = 0; f < row.size(); ++f)
      if (row[f] > row[y] || (row[f] == row[y] && f < y)) ++rank;
    hits += rank < k;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

EvalReport make_report(const Tensor& probs, std::span<const int> labels, const std::vector<std::string>& family_names) {
  EvalReport r;
  r.family_names = family_names;
  const std::size_t F = family_names.size();
  if (probs.rows() != labels.size()) throw ShapeError("make_report: one prediction per label required");
  if (!labels.empty() && probs.cols() != F) throw ShapeError("make_report: prediction width differs from family count");
  r.confusion.assign(F, std::vector<std::size_t>(F, 0));
  for (std::size_t i = 0; i < labels.size(); ++i)
    ++r.confusion[static_cast<std::size_t>(labels[i])][argmax(probs.row(i))];
  r.accuracy = topk_accuracy(probs, labels, 1);
  r.top3_accuracy = topk_accuracy(probs, labels, 3);
  fill_rates(r);
  r.folds = {{r.accuracy, r.top3_accuracy}};
  r.mean_accuracy = r.accuracy;
  r.mean_top3 = r.top3_accuracy;
  return r;
}

EvalReport merge_folds(const std::vector<EvalReport>& folds, const std::string& protocol) {
  if (folds.empty()) throw Error("merge_folds: no folds");
  EvalReport r;
  r.protocol = protocol;
  r.family_names = folds[0].family_names;
  const std::size_t F = r.families();
  r.confusion.assign(F, std::vector<std::size_t>(F, 0));
  std::vector<double> acc, top3;
  double top3_hits = 0.0;
  for (const EvalReport& f : folds) {
    for (std::size_t a = 0; a < F; ++a)
      for (std::size_t b = 0; b < F; ++b) r.confusion[a][b] += f.confusion[a][b];
    acc.push_back(f.accuracy);
    top3.push_back(f.top3_accuracy);
    top3_hits += f.top3_accuracy * static_cast<double>(total(f));
    r.folds.push_back({f.accuracy, f.top3_accuracy});
  }
  const std::size_t n = total(r);
  std::size_t correct = 0;
  for (std::size_t f = 0; f < F; ++f) correct += r.confusion[f][f];
  r.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  r.top3_accuracy = n ? std::max(r.accuracy, std::min(1.0, top3_hits / static_cast<double>(n))) : 0.0;
  fill_rates(r);
  mean_std(acc, r.mean_accuracy, r.std_accuracy);
  mean_std(top3, r.mean_top3, r.std_top3);
  return r;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "section,name,metric,value\n";
  out << "summary,," << "protocol," << protocol << "\n";
  out << "summary,,samples," << total(*this) << "\n";
  out << "summary,,accuracy," << fmt(accuracy) << "\n";
  out << "summary,,top3_accuracy," << fmt(top3_accuracy) << "\n";
  out << "summary,,mean_accuracy," << fmt(mean_accuracy) << "\n";
  out << "summary,,std_accuracy," << fmt(std_accuracy) << "\n";
  out << "summary,,mean_top3," << fmt(mean_top3) << "\n";
  out << "summary,,std_top3," << fmt(std_top3) << "\n";
  for (std::size_t i = 0; i < folds.size(); ++i) {
    out << "fold," << i << ",accuracy," << fmt(folds[i].accuracy) << "\n";
    out << "fold," << i << ",top3_accuracy," << fmt(folds[i].top3_accuracy) << "\n";
  }
  for (std::size_t f = 0; f < families(); ++f) {
    out << "family," << family_names[f] << ",precision," << fmt(precision[f]) << "\n";
    out << "family," << family_names[f] << ",recall," << fmt(recall[f]) << "\n";
  }
  for (std::size_t a = 0; a < families(); ++a)
    for (std::size_t b = 0; b < families(); ++b)
      out << "confusion," << family_names[a] << "," << family_names[b] << "," << confusion[a][b] << "\n";
  return out.str();
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << "protocol      " << protocol << " (" << total(*this) << " samples)\n";
  out << "accuracy      " << pct(accuracy) << "\n";
  out << "top-3         " << pct(top3_accuracy) << "\n";
  if (folds.size() > 1) {
    out << "fold mean     " << pct(mean_accuracy) << " +/- " << pct(std_accuracy) << "\n";
    out << "fold top-3    " << pct(mean_top3) << " +/- " << pct(std_top3) << "\n";
  }
  out << "\nfamily        precision   recall\n";
  for (std::size_t f = 0; f < families(); ++f) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%-12s  %s    %s\n", family_names[f].c_str(), pct(precision[f]).c_str(),
                  pct(recall[f]).c_str());
    out << buf;
  }
  return out.str();
}

// --- Pipeline ---------------------------------------------------------------------

nlohmann::json PipelineConfig::to_json() const {
  return {{"extraction", extraction.to_json()},
          {"component", component.to_json()},
          {"fusion", {{"hp", fusion.hp.to_json()}}},
          {"preset", to_string(preset)},
          {"features", to_string(features)},
          {"dense_width", preset_options.dense_width},
          {"stage_mode", to_string(preset_options.stage_mode)},
          {"validation_fraction", validation_fraction}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  PipelineConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "extraction") c.extraction = ExtractionConfig::from_json(value);
    else if (key == "component") c.component = ComponentConfig::from_json(value);
    else if (key == "fusion") c.fusion.hp = Hyperparams::from_json(value.value("hp", nlohmann::json::object()), c.fusion.hp);
    else if (key == "preset") c.preset = preset_from_string(value.get<std::string>());
    else if (key == "features") c.features = feature_set_from_string(value.get<std::string>());
    else if (key == "dense_width") c.preset_options.dense_width = value.get<std::size_t>();
    else if (key == "stage_mode") c.preset_options.stage_mode = weight_mode_from_string(value.get<std::string>());
    else if (key == "validation_fraction") c.validation_fraction = value.get<double>();
    else throw ConfigError("pipeline config: unknown key '" + key + "'");
  }
  if (c.validation_fraction <= 0.0 || c.validation_fraction >= 1.0) {
    throw ConfigError("validation fraction must lie in (0, 1)");
  }
  return c;
}

Tensor predict_rows(const FusionModel& model, const std::map<FeatureName, FeatureTable>& tables,
                    std::span<const std::size_t> rows) {
  if (rows.empty()) return Tensor::matrix(0, model.families());
  const std::vector<std::size_t> r(rows.begin(), rows.end());
  FusionInputs inputs;
  for (FeatureName f : model.topology().features()) {
    const auto it = tables.find(f);
    if (it == tables.end()) throw Error("no feature table for " + to_string(f));
    inputs.features[f] = gather_rows(it->second.values, r);
  }
  return model.predict_rows(inputs);
}

std::map<FeatureName, ComponentModel> train_components(const std::map<FeatureName, FeatureTable>& tables,
                                                       std::span<const int> labels, std::size_t families,
                                                       std::span<const std::size_t> train_idx,
                                                       std::span<const std::size_t> val_idx,
                                                       const ComponentConfig& config) {
  std::map<FeatureName, ComponentModel> out;
  for (const auto& [f, table] : tables) out.emplace(f, train_component(table, labels, families, train_idx, val_idx, config));
  return out;
}

PipelineRun run_pipeline(const Corpus& corpus, std::span<const std::size_t> train_idx,
                         std::span<const std::size_t> val_idx, std::span<const std::size_t> test_idx,
                         const PipelineConfig& config) {
  const std::vector<FeatureName> features = features_of(config.features);
  const std::vector<int> labels = corpus.labels();
  const std::size_t F = corpus.family_count();
  PipelineRun run;
  run.extractors = fit_extractors(corpus, train_idx, val_idx, config.extraction, features);
  run.tables = run.extractors.extract_all(corpus);
  run.components = train_components(run.tables, labels, F, train_idx, val_idx, config.component);
  const FusionTopology topology =
      make_preset(config.preset, make_manifest(run.components), config.features, config.preset_options);
  run.model = train_fusion(topology, run.tables, run.components, labels, F, train_idx, val_idx, config.fusion);

  std::vector<int> test_labels;
  for (std::size_t i : test_idx) test_labels.push_back(labels[i]);
  run.test_probs = predict_rows(run.model, run.tables, test_idx);
  run.report = make_report(run.test_probs, test_labels, corpus.family_names);
  return run;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_validation(const std::vector<int>& labels,
                                                                               std::span<const std::size_t> pool,
                                                                               double fraction, std::uint64_t seed) {
  std::vector<int> pool_labels;
  for (std::size_t i : pool) pool_labels.push_back(labels.at(i));
  const DatasetSplit s = holdout_split(pool_labels, {1.0 - fraction, fraction, 0.0}, seed);
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
  for (std::size_t i : s.train) out.first.push_back(pool[i]);
  for (std::size_t i : s.validation) out.second.push_back(pool[i]);
  std::sort(out.first.begin(), out.first.end());
  std::sort(out.second.begin(), out.second.end());
  return out;
}

EvalReport cross_validate(const PipelineConfig& config, const Corpus& corpus, std::size_t k, std::uint64_t seed,
                          std::size_t jobs) {
  if (k < 2) throw ConfigError("cross validation needs k >= 2");
  const std::vector<int> labels = corpus.labels();
  const auto folds = stratified_folds(labels, k, seed);
  std::vector<EvalReport> reports(k);
  std::vector<std::exception_ptr> errors(k);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < k; i = next++) {
      try {
        const std::vector<std::size_t> rest = fold_complement(folds, i);
        const auto [train, val] =
            split_validation(labels, rest, config.validation_fraction, derive_seed(seed, {0xcf, i}));
        reports[i] = run_pipeline(corpus, train, val, folds[i], config).report;
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(std::max<std::size_t>(jobs, 1), k); ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return merge_folds(reports, std::to_string(k) + "-fold");
}

bool leakage_free(const Corpus& corpus, std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                  const PipelineConfig& config) {
  const std::vector<FeatureName> features = features_of(config.features);
  const std::size_t F = corpus.family_count();
  auto fit = [&](const Corpus& c, std::span<const std::size_t> tr, std::span<const std::size_t> va) {
    const FeatureExtractors x = fit_extractors(c, tr, va, config.extraction, features);
    std::string image = x.fingerprint();
    for (const auto& [f, m] : train_components(x.extract_all(c), c.labels(), F, tr, va, config.component))
      image += m.to_archive().to_bytes();
    return image;
  };
  const std::vector<std::size_t> pool = sorted_union(train_idx, val_idx);
  const Corpus stripped = corpus.subset(pool);
  return fit(corpus, train_idx, val_idx) == fit(stripped, positions(pool, train_idx), positions(pool, val_idx));
}

// --- Sweeps -------------------------------------------------------------------------

std::string to_string(SweepParameter p) {
  switch (p) {
    case SweepParameter::cafc_kernels: return "cafc_kernels";
    case SweepParameter::zigzag_len: return "zigzag_len";
    case SweepParameter::pv_dim: return "pv_dim";
    case SweepParameter::cooc_pool: return "cooc_pool";
    case SweepParameter::stmt_seqlen: return "stmt_seqlen";
  }
  return "cafc_kernels";
}

SweepParameter sweep_parameter_from_string(const std::string& s) {
  std::string norm = s;
  std::replace(norm.begin(), norm.end(), '-', '_');
  for (SweepParameter p : kAllSweeps)
    if (to_string(p) == norm) return p;
  throw ConfigError("unknown sweep parameter '" + s + "'");
}

FeatureName swept_feature(SweepParameter p) {
  switch (p) {
    case SweepParameter::cafc_kernels: return FeatureName::cg_embedding;
    case SweepParameter::zigzag_len: return FeatureName::cg_lowfreq;
    case SweepParameter::pv_dim: return FeatureName::pv_trace;
    case SweepParameter::cooc_pool: return FeatureName::cooc_feat;
    case SweepParameter::stmt_seqlen: return FeatureName::stmt_embed;
  }
  return FeatureName::cg_embedding;
}

std::vector<std::size_t> published_grid(SweepParameter p) {
  switch (p) {
    case SweepParameter::cafc_kernels: return {3, 4, 5, 6, 7};
    case SweepParameter::zigzag_len: return {150, 200, 250, 300, 350, 400};
    case SweepParameter::pv_dim: return {100, 200, 300, 400, 500};
    case SweepParameter::cooc_pool: return {4, 8, 16, 32};
    case SweepParameter::stmt_seqlen: return {100, 200, 300, 400};
  }
  return {};
}

Hyperparams default_probe_hyperparams() {
  Hyperparams h;
  h.epochs = 100;
  h.learning_rate = 5e-3;
  h.patience = 10;
  return h;
}

SweepTable sweep(SweepParameter parameter, const std::vector<std::size_t>& values, const Corpus& corpus,
                 std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                 const ExtractionConfig& base, const Hyperparams& probe) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const FeatureName feature = swept_feature(parameter);
  const std::vector<FeatureName> only{feature};
  const std::vector<int> labels = corpus.labels();
  ComponentConfig probe_config;
  probe_config.hidden = {};
  probe_config.hp = probe;
  SweepTable table{parameter, {}};
  for (std::size_t v : values) {
    if (v == 0) throw ConfigError("sweep values must be positive");
    ExtractionConfig c = base;
    switch (parameter) {
      case SweepParameter::cafc_kernels: c.cafc.kernels = v; break;
      case SweepParameter::zigzag_len: c.lowfreq_length = v; break;
      case SweepParameter::pv_dim: c.pv.dim = v; break;
      case SweepParameter::cooc_pool: c.cooc.pool = v; break;
      case SweepParameter::stmt_seqlen: c.statements.max_statements = v; break;
    }
    const FeatureExtractors x = fit_extractors(corpus, train_idx, val_idx, c, only);
    const auto tables = x.extract_all(corpus);
    const FeatureTable& t = tables.at(feature);
    const ComponentModel m = train_component(t, labels, corpus.family_count(), train_idx, val_idx, probe_config);
    table.rows.push_back({v, t.length(), m.validation_accuracy()});
  }
  return table;
}

std::string SweepTable::to_csv() const {
  std::ostringstream out;
  out << to_string(parameter) << ",feature_length,accuracy\n";
  for (const SweepRow& r : rows) out << r.value << "," << r.feature_length << "," << fmt(r.accuracy) << "\n";
  return out.str();
}

std::string SweepTable::to_text() const {
  std::ostringstream out;
  char buf[96];
  std::snprintf(buf, sizeof buf, "%-14s %8s  %s\n", to_string(parameter).c_str(), "length", "accuracy");
  out << buf;
  for (const SweepRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%-14zu %8zu  %s\n", r.value, r.feature_length, pct(r.accuracy).c_str());
    out << buf;
  }
  return out.str();
}

// --- Encoder comparison ---------------------------------------------------------------

EncoderComparison compare_encoders(const Corpus& corpus, const std::vector<std::size_t>& lengths,
                                   std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                                   const StatementEncoderConfig& statements, const CallSequenceConfig& calls) {
  if (lengths.empty()) throw ConfigError("compare_encoders needs at least one length");
  if (val_idx.empty()) throw ConfigError("compare_encoders needs a validation split");
  std::vector<TraceFile> traces;
  for (const Sample& s : corpus.samples) traces.push_back(s.trace);
  const std::vector<int> labels = corpus.labels();
  const std::size_t F = corpus.family_count();
  EncoderComparison out;
  for (std::size_t len : lengths) {
    StatementEncoderConfig sc = statements;
    sc.max_statements = len;
    CallSequenceConfig cc = calls;
    cc.max_calls = len;
    const auto stmt = train_statement_encoder(traces, labels, F, train_idx, val_idx, sc);
    const auto call = train_call_sequence_encoder(traces, labels, F, train_idx, val_idx, cc);
    out.rows.push_back({len, sequence_accuracy(call.model, traces, labels, val_idx),
                        sequence_accuracy(stmt.model, traces, labels, val_idx)});
  }
  return out;
}

std::string EncoderComparison::to_csv() const {
  std::ostringstream out;
  out << "length,call_accuracy,statement_accuracy\n";
  for (const auto& r : rows) out << r.length << "," << fmt(r.call_accuracy) << "," << fmt(r.statement_accuracy) << "\n";
  return out.str();
}

std::string EncoderComparison::to_text() const {
  std::ostringstream out;
  out << "length   call seq   statement seq\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-8zu %s   %s\n", r.length, pct(r.call_accuracy).c_str(),
                  pct(r.statement_accuracy).c_str());
    out << buf;
  }
  return out.str();
}

// --- Case reports -------------------------------------------------------------------

std::string to_string(CaseCategory c) {
  switch (c) {
    case CaseCategory::both_fail_integrated_succeeds: return "both-fail-integrated-succeeds";
    case CaseCategory::static_succeeds: return "static-succeeds";
    case CaseCategory::dynamic_succeeds: return "dynamic-succeeds";
    case CaseCategory::all_fail: return "all-fail";
    case CaseCategory::all_succeed: return "all-succeed";
    case CaseCategory::integrated_fails: return "integrated-fails";
  }
  return "all-fail";
}

CaseCategory classify_case(int label, std::size_t static_pred, std::size_t dynamic_pred, std::size_t integrated_pred) {
  const auto y = static_cast<std::size_t>(label);
  const bool s = static_pred == y, d = dynamic_pred == y, i = integrated_pred == y;
  if (!i) return s || d ? CaseCategory::integrated_fails : CaseCategory::all_fail;
  if (s && d) return CaseCategory::all_succeed;
  if (s) return CaseCategory::static_succeeds;
  if (d) return CaseCategory::dynamic_succeeds;
  return CaseCategory::both_fail_integrated_succeeds;
}

CaseReport case_report(const std::string& sample_id, int label, std::span<const double> static_probs,
                       std::span<const double> dynamic_probs, std::span<const double> integrated_probs) {
  if (static_probs.size() != dynamic_probs.size() || static_probs.size() != integrated_probs.size()) {
    throw ShapeError("case_report: probability vectors differ in length");
  }
  if (label < 0 || static_cast<std::size_t>(label) >= static_probs.size()) throw ShapeError("case_report: label out of range");
  CaseReport r;
  r.sample_id = sample_id;
  r.label = label;
  r.static_probs.assign(static_probs.begin(), static_probs.end());
  r.dynamic_probs.assign(dynamic_probs.begin(), dynamic_probs.end());
  r.integrated_probs.assign(integrated_probs.begin(), integrated_probs.end());
  r.static_pred = argmax(static_probs);
  r.dynamic_pred = argmax(dynamic_probs);
  r.integrated_pred = argmax(integrated_probs);
  r.category = classify_case(label, r.static_pred, r.dynamic_pred, r.integrated_pred);
  return r;
}

std::string CaseReport::to_csv(const std::vector<std::string>& family_names) const {
  std::ostringstream out;
  out << "family,static,dynamic,integrated\n";
  for (std::size_t f = 0; f < static_probs.size(); ++f) {
    out << (f < family_names.size() ? family_names[f] : std::to_string(f)) << "," << fmt(static_probs[f]) << ","
        << fmt(dynamic_probs[f]) << "," << fmt(integrated_probs[f]) << "\n";
  }
  return out.str();
}

std::string case_summary_csv(const std::vector<CaseReport>& cases, const std::vector<std::string>& family_names) {
  auto name = [&](std::size_t f) { return f < family_names.size() ? family_names[f] : std::to_string(f); };
  std::ostringstream out;
  out << "sample_id,family,static_pred,dynamic_pred,integrated_pred,category\n";
  for (const CaseReport& c : cases) {
    out << c.sample_id << "," << name(static_cast<std::size_t>(c.label)) << "," << name(c.static_pred) << ","
        << name(c.dynamic_pred) << "," << name(c.integrated_pred) << "," << to_string(c.category) << "\n";
  }
  return out.str();
}

}  // namespace malfuse

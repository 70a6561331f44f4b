#include "malfuse/extraction.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace malfuse {
namespace {

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void read_hp(const nlohmann::json& j, Hyperparams& hp) {
  if (j.contains("hp")) hp = Hyperparams::from_json(j.at("hp"), hp);
}

std::vector<std::size_t> sorted_union(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  std::sort(out.begin(), out.end());
  return out;
}

bool wants(std::span<const FeatureName> features, FeatureName f) {
  return std::find(features.begin(), features.end(), f) != features.end();
}

}  // namespace

nlohmann::json ExtractionConfig::to_json() const {
  return {{"import_vocab", import_vocab},
          {"api_vocab", api_vocab},
          {"cafc", {{"kernels", cafc.kernels}, {"embed_dim", cafc.embed_dim}, {"hp", cafc.hp.to_json()}}},
          {"lowfreq_length", lowfreq_length},
          {"pv", pv.to_json()},
          {"cooc_window", cooc_window},
          {"cooc",
           {{"pool", cooc.pool},
            {"kernels", cooc.kernels},
            {"feature_width", cooc.feature_width},
            {"hp", cooc.hp.to_json()}}},
          {"statements",
           {{"embed_dim", statements.embed_dim},
            {"hidden", statements.hidden},
            {"max_statements", statements.max_statements},
            {"max_tokens", statements.max_tokens},
            {"token_vocab", statements.token_vocab},
            {"hp", statements.hp.to_json()}}},
          {"seed", seed}};
}

ExtractionConfig ExtractionConfig::from_json(const nlohmann::json& j) {
  check_keys(j,
             {"import_vocab", "api_vocab", "cafc", "lowfreq_length", "pv", "cooc_window", "cooc", "statements", "seed"},
             "extraction config");
  ExtractionConfig c;
  read(j, "import_vocab", c.import_vocab);
  read(j, "api_vocab", c.api_vocab);
  read(j, "lowfreq_length", c.lowfreq_length);
  read(j, "cooc_window", c.cooc_window);
  read(j, "seed", c.seed);
  if (j.contains("cafc")) {
    const auto& s = j.at("cafc");
    check_keys(s, {"kernels", "embed_dim", "hp"}, "cafc config");
    read(s, "kernels", c.cafc.kernels);
    read(s, "embed_dim", c.cafc.embed_dim);
    read_hp(s, c.cafc.hp);
  }
  if (j.contains("pv")) {
    check_keys(j.at("pv"),
               {"dim", "window", "negative", "epochs", "alpha", "min_alpha", "infer_epochs", "seed", "infer_seed"},
               "pv config");
    nlohmann::json merged = c.pv.to_json();
    merged.update(j.at("pv"));
    c.pv = PvConfig::from_json(merged);
  }
  if (j.contains("cooc")) {
    const auto& s = j.at("cooc");
    check_keys(s, {"pool", "kernels", "feature_width", "hp"}, "cooc config");
    read(s, "pool", c.cooc.pool);
    read(s, "kernels", c.cooc.kernels);
    read(s, "feature_width", c.cooc.feature_width);
    read_hp(s, c.cooc.hp);
  }
  if (j.contains("statements")) {
    const auto& s = j.at("statements");
    check_keys(s, {"embed_dim", "hidden", "max_statements", "max_tokens", "token_vocab", "hp"}, "statement config");
    read(s, "embed_dim", c.statements.embed_dim);
    read(s, "hidden", c.statements.hidden);
    read(s, "max_statements", c.statements.max_statements);
    read(s, "max_tokens", c.statements.max_tokens);
    read(s, "token_vocab", c.statements.token_vocab);
    read_hp(s, c.statements.hp);
  }
  if (c.import_vocab == 0 || c.api_vocab == 0 || c.lowfreq_length == 0 || c.cooc_window == 0) {
    throw ConfigError("extraction config: vocabulary caps, low-frequency length and window must be positive");
  }
  return c;
}

FeatureExtractors fit_extractors(const Corpus& corpus, std::span<const std::size_t> train_idx,
                                 std::span<const std::size_t> val_idx, const ExtractionConfig& config,
                                 std::span<const FeatureName> features) {
  if (train_idx.empty()) throw Error("fit_extractors: empty training set");
  FeatureExtractors x;
  x.config_ = config;
  x.features_.assign(features.begin(), features.end());
  const std::vector<int> labels = corpus.labels();
  const std::size_t F = corpus.family_count();

  std::map<std::string, std::size_t> import_counts, api_counts;
  for (std::size_t i : train_idx) {
    for (const std::string& imp : corpus.samples[i].imports.imports) ++import_counts[imp];
    for (const ApiStatement& s : corpus.samples[i].trace.statements) ++api_counts[s.api];
  }
  if (wants(features, FeatureName::pe_onehot)) x.imports_ = build_vocabulary(import_counts, config.import_vocab);
  if (wants(features, FeatureName::api_freq) || wants(features, FeatureName::cooc_feat)) {
    x.apis_ = build_vocabulary(api_counts, config.api_vocab);
  }

  if (wants(features, FeatureName::cg_embedding)) {
    std::vector<CallGraph> graphs;
    for (std::size_t i : train_idx) graphs.push_back(corpus.samples[i].callgraph);
    CafcConfig c = config.cafc;
    c.hp.seed = derive_seed(config.seed, {0xcafc, c.hp.seed});
    x.cafc_ = train_cafc(graphs, c).model;
  }
  if (wants(features, FeatureName::pv_trace)) {
    std::vector<std::vector<std::string>> docs;
    for (std::size_t i : train_idx) docs.push_back(api_names(corpus.samples[i].trace));
    PvConfig c = config.pv;
    c.seed = derive_seed(config.seed, {0x9b, c.seed});
    x.pv_ = train_pv(docs, c);
  }
  if (wants(features, FeatureName::cooc_feat)) {
    // Only rows the trainer touches need matrices; the rest stay empty.
    std::vector<CoocMatrix> matrices(corpus.size());
    for (std::size_t i : sorted_union(train_idx, val_idx))
      matrices[i] = cooccurrence_matrix(corpus.samples[i].trace, x.apis_, config.cooc_window);
    CoocCnnConfig c = config.cooc;
    c.hp.seed = derive_seed(config.seed, {0xc00c, c.hp.seed});
    x.cooc_ = train_cooc_cnn(matrices, labels, F, train_idx, val_idx, c).model;
  }
  if (wants(features, FeatureName::stmt_embed)) {
    std::vector<TraceFile> traces;
    traces.reserve(corpus.size());
    for (const Sample& s : corpus.samples) traces.push_back(s.trace);
    StatementEncoderConfig c = config.statements;
    c.hp.seed = derive_seed(config.seed, {0x57e, c.hp.seed});
    x.statements_ = train_statement_encoder(traces, labels, F, train_idx, val_idx, c).model;
  }
  return x;
}

FeatureVector FeatureExtractors::extract(FeatureName f, const Sample& s) const {
  auto missing = [&]() { return Error("extractors were not fitted for " + to_string(f)); };
  switch (f) {
    case FeatureName::pe_onehot: return pe_import_onehot(s.imports, imports_);
    case FeatureName::cg_embedding:
      if (!cafc_) throw missing();
      return cg_embed(*cafc_, s.callgraph);
    case FeatureName::cg_lowfreq: return extract_lowfreq(s.callgraph, config_.lowfreq_length);
    case FeatureName::api_freq: return api_call_frequency(s.trace, apis_);
    case FeatureName::pv_trace:
      if (!pv_) throw missing();
      return pv_embed(*pv_, s.trace);
    case FeatureName::cooc_feat:
      if (!cooc_) throw missing();
      return cooc_features(*cooc_, cooccurrence_matrix(s.trace, apis_, config_.cooc_window));
    case FeatureName::stmt_embed:
      if (!statements_) throw missing();
      return statement_embed(*statements_, s.trace);
  }
  throw missing();
}

std::map<FeatureName, FeatureTable> FeatureExtractors::extract_all(const Corpus& corpus) const {
  std::map<FeatureName, FeatureTable> out;
  for (FeatureName f : features_) {
    FeatureTable t;
    t.name = f;
    for (const Sample& s : corpus.samples) t.append(s.sample_id, extract(f, s));
    out.emplace(f, std::move(t));
  }
  return out;
}

std::string FeatureExtractors::fingerprint() const {
  std::string out = config_.to_json().dump() + imports_.to_json().dump() + apis_.to_json().dump();
  if (cafc_) out += cafc_->to_archive().to_bytes();
  if (pv_) out += pv_->to_archive().to_bytes();
  if (cooc_) out += cooc_->to_archive().to_bytes();
  if (statements_) out += statements_->to_archive().to_bytes();
  return out;
}

void FeatureExtractors::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json features = nlohmann::json::array();
  for (FeatureName f : features_) features.push_back(to_string(f));
  const nlohmann::json meta = {{"config", config_.to_json()},
                               {"features", features},
                               {"imports", imports_.to_json()},
                               {"apis", apis_.to_json()}};
  std::ofstream out(dir / "extractors.json");
  if (!out) throw Error("cannot write " + (dir / "extractors.json").string());
  out << meta.dump(2) << "\n";
  if (cafc_) cafc_->to_archive().save(dir / "cafc.mdl");
  if (pv_) pv_->to_archive().save(dir / "pv.mdl");
  if (cooc_) cooc_->to_archive().save(dir / "cooc_cnn.mdl");
  if (statements_) statements_->to_archive().save(dir / "statement_encoder.mdl");
}

FeatureExtractors FeatureExtractors::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "extractors.json");
  if (!in) throw Error("cannot read " + (dir / "extractors.json").string());
  const nlohmann::json meta = nlohmann::json::parse(in);
  FeatureExtractors x;
  x.config_ = ExtractionConfig::from_json(meta.at("config"));
  for (const auto& f : meta.at("features")) x.features_.push_back(feature_from_string(f.get<std::string>()));
  x.imports_ = Vocabulary::from_json(meta.at("imports"));
  x.apis_ = Vocabulary::from_json(meta.at("apis"));
  auto load = [&](const char* file) { return ModelArchive::load(dir / file); };
  if (std::filesystem::exists(dir / "cafc.mdl")) x.cafc_ = CafcModel::from_archive(load("cafc.mdl"));
  if (std::filesystem::exists(dir / "pv.mdl")) x.pv_ = PvModel::from_archive(load("pv.mdl"));
  if (std::filesystem::exists(dir / "cooc_cnn.mdl")) x.cooc_ = CoocCnnModel::from_archive(load("cooc_cnn.mdl"));
  if (std::filesystem::exists(dir / "statement_encoder.mdl")) {
    x.statements_ = StatementEncoderModel::from_archive(load("statement_encoder.mdl"));
  }
  return x;
}

}  // namespace malfuse

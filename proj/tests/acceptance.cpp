// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset. Exit status is 1 when any selected criterion fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "malfuse/evaluate.hpp"
#include "malfuse/layers.hpp"
#include "malfuse/ops.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace malfuse;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string pct(double v) { return fmt("%.2f%%", 100.0 * v); }

// Every report built during the run; criterion 7 checks them all.
std::vector<EvalReport> g_reports;

Tensor random_probs(std::size_t n, std::size_t F, Rng& rng) {
  Tensor t = Tensor::matrix(n, F);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double& x : t.row(r)) s += (x = rng.uniform());
    for (double& x : t.row(r)) x /= s;
  }
  return t;
}

double accuracy_of(const Tensor& probs, const std::vector<int>& labels) { return topk_accuracy(probs, labels, 1); }

std::vector<int> labels_at(const Corpus& c, std::span<const std::size_t> idx) {
  std::vector<int> out;
  for (std::size_t i : idx) out.push_back(c.samples[i].family.value);
  return out;
}

// --- 1. Gradient checks ------------------------------------------------------------

Parameter random_param(const std::string& name, Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return {name, std::move(t)};
}

Outcome criterion1() {
  using testing::max_gradient_error;
  using testing::project;
  std::map<std::string, double> errors;

  {
    Rng rng(2);
    Parameter x = random_param("x", {3, 4}, 1);
    for (double& v : x.value.data) v += v > 0 ? 0.05 : -0.05;
    Dense d("d", 4, 5, Activation::tanh, rng);
    errors["dense"] = max_gradient_error({&x, &d.weight, &d.bias},
                                         [&](Tape& t) { return project(t, d.forward(t, t.parameter(x))); });
  }
  {
    Parameter x = random_param("x", {2, 5, 6}, 3);
    Parameter k = random_param("k", {3, 2, 3, 3}, 4);
    Parameter b = random_param("b", {3}, 5);
    errors["conv2d"] = max_gradient_error({&x, &k, &b}, [&](Tape& t) {
      return project(t, ops::conv2d(t, t.parameter(x), t.parameter(k), t.parameter(b)));
    });
  }
  {
    Parameter x = random_param("x", {2, 7, 5}, 6);
    errors["maxpool"] =
        max_gradient_error({&x}, [&](Tape& t) { return project(t, ops::max_pool2d(t, t.parameter(x), 3)); });
  }
  {
    Rng rng(9);
    Parameter x = random_param("x", {5, 3}, 10);
    BiLstm cell("bi", 3, 3, rng);
    std::vector<Parameter*> leaves{&x};
    cell.collect(leaves);
    errors["recurrent"] =
        max_gradient_error(leaves, [&](Tape& t) { return project(t, cell.forward(t, t.parameter(x))); });
  }
  {
    Parameter table = random_param("e", {6, 4}, 11);
    const std::vector<int> ids{0, 3, 3, 5, 1};
    errors["embedding"] = max_gradient_error(
        {&table}, [&](Tape& t) { return project(t, ops::embedding(t, t.parameter(table), ids)); });
  }
  {
    Parameter h = random_param("h", {7, 4}, 12);
    Parameter ctx = random_param("c", {1, 4}, 13);
    errors["attention"] = max_gradient_error({&h, &ctx}, [&](Tape& t) {
      return project(t, ops::attention_pool(t, t.parameter(h), t.parameter(ctx)));
    });
  }
  {
    Parameter z = random_param("z", {4, 5}, 14, -3.0, 3.0);
    const std::vector<int> labels{0, 4, 2, 2};
    errors["softmax_ce"] = max_gradient_error(
        {&z}, [&](Tape& t) { return ops::softmax_cross_entropy(t, t.parameter(z), labels); });
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : errors)
    if (e >= worst) worst = e, worst_name = name;
  return {worst < 1e-4, std::to_string(errors.size()) + " layer families, worst relative error " + fmt("%.2e", worst) +
                            " (" + worst_name + ")"};
}

// --- 2. DCT and zigzag -------------------------------------------------------------

Outcome criterion2() {
  Rng rng(2024);
  double oracle_err = 0.0, roundtrip_err = 0.0;
  for (std::size_t n : {8u, 64u}) {
    for (int trial = 0; trial < 100; ++trial) {
      Tensor m = Tensor::matrix(n, n);
      for (double& v : m.data) v = rng.uniform(-1.0, 1.0);
      const Tensor c = dct2(m);
      const Tensor ref = testing::dct2_bruteforce(m);
      const Tensor back = idct2(c);
      for (std::size_t i = 0; i < m.size(); ++i) {
        oracle_err = std::max(oracle_err, std::abs(c.data[i] - ref.data[i]));
        roundtrip_err = std::max(roundtrip_err, std::abs(back.data[i] - m.data[i]));
      }
    }
  }
  const bool zigzag_ok = zigzag_order(4) == testing::zigzag_4x4();
  return {oracle_err < 1e-9 && roundtrip_err < 1e-9 && zigzag_ok,
          "200 matrices: oracle error " + fmt("%.2e", oracle_err) + ", round trip " + fmt("%.2e", roundtrip_err) +
              ", 4x4 zigzag " + (zigzag_ok ? "matches" : "differs")};
}

// --- 3. Shape contracts ------------------------------------------------------------

Outcome criterion3() {
  CorpusSpec spec;  // 8 x 60, enough distinct imports and APIs to fill both vocabularies
  const Corpus corpus = generate_corpus(spec);
  const DatasetSplit split = holdout_split(corpus.labels(), {}, 1);
  ExtractionConfig cfg;  // published lengths; training is cut short since only shapes matter
  cfg.cafc.hp.epochs = 1;
  cfg.pv.epochs = 1;
  cfg.pv.infer_epochs = 1;
  cfg.cooc.hp.epochs = 1;
  cfg.statements.hp.epochs = 1;
  cfg.statements.max_statements = 40;
  const FeatureExtractors x = fit_extractors(corpus, split.train, split.validation, cfg);
  std::map<FeatureName, std::size_t> expected = {{FeatureName::pe_onehot, cfg.import_vocab + 1},
                                                 {FeatureName::cg_embedding, cfg.cafc.embed_dim},
                                                 {FeatureName::cg_lowfreq, cfg.lowfreq_length},
                                                 {FeatureName::api_freq, cfg.api_vocab + 1},
                                                 {FeatureName::pv_trace, cfg.pv.dim},
                                                 {FeatureName::cooc_feat, cfg.cooc.feature_width},
                                                 {FeatureName::stmt_embed, 2 * cfg.statements.hidden}};
  bool ok = expected[FeatureName::pe_onehot] == 252 && expected[FeatureName::cg_lowfreq] == 350 &&
            expected[FeatureName::api_freq] == 287 && expected[FeatureName::pv_trace] == 400;
  std::string lengths;
  std::map<FeatureName, std::size_t> widths;
  for (FeatureName f : kAllFeatures) {
    const std::size_t len = x.extract(f, corpus.samples[0]).values.size();
    widths[f] = len;
    ok = ok && len == expected[f];
    lengths += (lengths.empty() ? "" : " ") + std::to_string(len);
  }

  // LF2 over seven untrained 80-family components; widths are asserted when the model is built.
  const std::size_t F = 80;
  std::map<FeatureName, ComponentModel> components;
  ComponentManifest manifest;
  Rng rng(3);
  ComponentConfig cc;
  cc.hidden = {8};
  for (FeatureName f : kAllFeatures) {
    Standardizer s;
    s.mean.assign(widths[f], 0.0);
    s.scale.assign(widths[f], 1.0);
    components.emplace(f, ComponentModel(f, s, F, cc, rng));
    manifest.validation_accuracy[f] = 0.5;
  }
  const FusionModel lf2(make_preset(Preset::lf2, manifest, FeatureSet::integrated), F, components, {});
  const std::size_t concat = lf2.width("concat");
  ok = ok && concat == 7 * F && concat == 560;
  return {ok, "lengths " + lengths + "; LF2 concat width " + std::to_string(concat) + " at F=80"};
}

// --- 4. Integrated beats either view ------------------------------------------------

Outcome criterion4() {
  CorpusSpec spec;
  spec.family_count = 8;
  spec.samples_per_family = 60;
  spec.signal = SignalChannel::both;
  spec.overlap_noise = 0.4;
  spec.seed = 42;
  const Corpus corpus = generate_corpus(spec);
  const std::vector<int> labels = corpus.labels();
  const DatasetSplit split = holdout_split(labels, {0.6, 0.2, 0.2}, 42);
  const std::vector<int> held_out = labels_at(corpus, split.test);

  // Every feature's extractor and component is fitted independently, so one
  // fit serves all three feature sets.
  const PipelineConfig config;
  const FeatureExtractors x = fit_extractors(corpus, split.train, split.validation, config.extraction);
  const auto tables = x.extract_all(corpus);
  const auto components =
      train_components(tables, labels, corpus.family_count(), split.train, split.validation, config.component);
  const ComponentManifest manifest = make_manifest(components);

  double best_component = 0.0;
  std::string best_name;
  for (const auto& [f, m] : components) {
    const double a = accuracy_of(m.predict_rows(gather_rows(tables.at(f).values, split.test)), held_out);
    if (a > best_component) best_component = a, best_name = to_string(f);
  }
  std::map<FeatureSet, double> acc;
  for (FeatureSet set : {FeatureSet::static_only, FeatureSet::dynamic_only, FeatureSet::integrated}) {
    const FusionModel m = train_fusion(make_preset(Preset::ef1, manifest, set, config.preset_options), tables,
                                       components, labels, corpus.family_count(), split.train, split.validation,
                                       config.fusion);
    const Tensor probs = predict_rows(m, tables, split.test);
    g_reports.push_back(make_report(probs, held_out, corpus.family_names));
    acc[set] = accuracy_of(probs, held_out);
  }
  const double i = acc[FeatureSet::integrated], s = acc[FeatureSet::static_only], d = acc[FeatureSet::dynamic_only];
  const bool ok = i - s >= 0.05 && i - d >= 0.05 && i > best_component;
  return {ok, "held-out accuracy integrated " + pct(i) + ", static " + pct(s) + ", dynamic " + pct(d) +
                  ", best component " + pct(best_component) + " (" + best_name + ")"};
}

// --- 5. Statement encoder beats call encoder ---------------------------------------

Outcome criterion5() {
  CorpusSpec spec;
  spec.family_count = 8;
  spec.samples_per_family = 60;
  spec.signal = SignalChannel::params_only;
  spec.seed = 5;
  const Corpus corpus = generate_corpus(spec);
  const DatasetSplit split = holdout_split(corpus.labels(), {0.75, 0.25, 0.0}, 5);
  const EncoderComparison e =
      compare_encoders(corpus, {100, 200}, split.train, split.validation, StatementEncoderConfig{}, CallSequenceConfig{});
  bool ok = e.rows.size() == 2;
  std::string detail;
  for (const auto& r : e.rows) {
    ok = ok && r.statement_accuracy - r.call_accuracy >= 0.20;
    detail += (detail.empty() ? "" : "; ") + std::string("length ") + std::to_string(r.length) + ": statement " +
              pct(r.statement_accuracy) + " vs call " + pct(r.call_accuracy);
  }
  return {ok, detail};
}

// --- 6. Ensemble semantics ---------------------------------------------------------

Outcome criterion6() {
  const std::size_t F = 10, n = 1000;
  ComponentManifest manifest;
  for (FeatureName f : kAllFeatures) manifest.validation_accuracy[f] = 0.5;
  const FusionModel ens(make_preset(Preset::ens_fixed, manifest, FeatureSet::integrated), F, {}, {});
  Rng rng(606);
  FusionInputs in;
  for (FeatureName f : kAllFeatures) in.component_probs[f] = random_probs(n, F, rng);
  const Tensor out = ens.predict_rows(in);
  std::size_t matches = 0;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<std::vector<double>> rows;
    for (FeatureName f : kAllFeatures) {
      const auto row = in.component_probs[f].row(r);
      rows.emplace_back(row.begin(), row.end());
    }
    matches += argmax(out.row(r)) == testing::averaged_argmax(rows);
  }
  return {matches == n && ens.trainable_parameter_count() == 0,
          std::to_string(matches) + "/" + std::to_string(n) + " predictions equal the averaging oracle"};
}

// --- 7. Metric properties ------------------------------------------------------------

Outcome criterion7() {
  Rng rng(707);
  const std::size_t F = 10, n = 1000;
  const Tensor p = random_probs(n, F, rng);
  std::vector<int> y;
  for (std::size_t i = 0; i < n; ++i) y.push_back(static_cast<int>(rng.index(F)));
  const double top3 = topk_accuracy(p, y, 3);
  std::size_t oracle_hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = p.row(i);
    oracle_hits += testing::in_top_k({row.begin(), row.end()}, static_cast<std::size_t>(y[i]), 3);
  }
  const bool oracle_ok = static_cast<double>(oracle_hits) / static_cast<double>(n) == top3;

  std::vector<EvalReport> reports = g_reports;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t f = 2 + rng.index(20);
    const Tensor q = random_probs(25, f, rng);
    std::vector<int> labels;
    for (int i = 0; i < 25; ++i) labels.push_back(static_cast<int>(rng.index(f)));
    reports.push_back(make_report(q, labels, std::vector<std::string>(f, "f")));
  }
  reports.push_back(merge_folds({reports[reports.size() - 1], reports[reports.size() - 2]}, "2-fold"));
  std::size_t violations = 0;
  for (const EvalReport& r : reports)
    violations += !(0.0 <= r.accuracy && r.accuracy <= r.top3_accuracy && r.top3_accuracy <= 1.0);
  const bool ok = violations == 0 && std::abs(top3 - 0.30) <= 0.05 && oracle_ok;
  return {ok, "top-3 >= top-1 on " + std::to_string(reports.size() - violations) + "/" + std::to_string(reports.size()) +
                  " reports; uniform F=10 top-3 " + fmt("%.3f", top3) + (oracle_ok ? " (oracle agrees)" : " (oracle differs)")};
}

// --- 8. Protocol properties --------------------------------------------------------

PipelineConfig small_pipeline() {
  PipelineConfig c;
  c.extraction.import_vocab = 60;
  c.extraction.api_vocab = 60;
  c.extraction.lowfreq_length = 64;
  c.extraction.cafc.embed_dim = 16;
  c.extraction.cafc.hp.epochs = 3;
  c.extraction.pv.dim = 24;
  c.extraction.pv.epochs = 3;
  c.extraction.cooc.feature_width = 16;
  c.extraction.cooc.hp.epochs = 3;
  c.extraction.statements.max_statements = 40;
  c.extraction.statements.hp.epochs = 3;
  c.component.hidden = {32};
  c.component.hp.epochs = 15;
  c.fusion.hp.epochs = 15;
  c.preset_options.dense_width = 32;
  return c;
}

CorpusSpec small_corpus(std::uint64_t seed) {
  CorpusSpec s;
  s.family_count = 5;
  s.samples_per_family = 20;
  s.trace_length_min = 60;
  s.trace_length_max = 100;
  s.callgraph_nodes_max = 32;
  s.canonical_size = 32;
  s.seed = seed;
  return s;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome criterion8() {
  // Ten-fold splits of the 8 x 60 corpus labels.
  CorpusSpec big;
  const std::vector<int> labels = generate_corpus(big).labels();
  const auto folds = stratified_folds(labels, 10, 42);
  std::vector<std::size_t> seen;
  bool stratified = folds.size() == 10;
  std::map<int, std::size_t> family_size;
  for (int y : labels) ++family_size[y];
  for (const auto& fold : folds) {
    seen.insert(seen.end(), fold.begin(), fold.end());
    std::map<int, std::size_t> count;
    for (std::size_t i : fold) ++count[labels[i]];
    for (const auto& [y, n] : family_size) {
      const double share = static_cast<double>(n) / 10.0;
      stratified = stratified && std::abs(static_cast<double>(count[y]) - share) < 1.0;
    }
  }
  std::sort(seen.begin(), seen.end());
  bool partition = seen.size() == labels.size();
  for (std::size_t i = 0; partition && i < seen.size(); ++i) partition = seen[i] == i;

  // Byte-identical reruns through the library and through the command line.
  const Corpus corpus = generate_corpus(small_corpus(8));
  const DatasetSplit split = holdout_split(corpus.labels(), {0.6, 0.2, 0.2}, 8);
  const PipelineConfig config = small_pipeline();
  const PipelineRun a = run_pipeline(corpus, split.train, split.validation, split.test, config);
  const PipelineRun b = run_pipeline(corpus, split.train, split.validation, split.test, config);
  g_reports.push_back(a.report);
  const bool rerun = a.report.to_csv() == b.report.to_csv();

  const fs::path root = fs::temp_directory_path() / "malfuse_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  std::ofstream(root / "pipeline.json") << config.to_json().dump();
  std::ofstream(root / "spec.json") << small_corpus(8).to_json().dump();
  bool cli_rerun = cli::run({"gen", "--spec", (root / "spec.json").string(), "--out", (root / "corpus").string(), "--quiet"}) == 0;
  for (const char* out : {"run1", "run2"}) {
    cli_rerun = cli_rerun && cli::run({"train-fusion", "--preset", "if1", "--features", "integrated", "--corpus",
                                       (root / "corpus").string(), "--config", (root / "pipeline.json").string(),
                                       "--out", (root / out).string(), "--quiet"}) == 0;
  }
  cli_rerun = cli_rerun && slurp(root / "run1" / "report.csv") == slurp(root / "run2" / "report.csv") &&
              !slurp(root / "run1" / "report.csv").empty();
  fs::remove_all(root);

  const bool no_leak = leakage_free(corpus, split.train, split.validation, config);
  const bool ok = partition && stratified && rerun && cli_rerun && no_leak;
  auto yn = [](bool v) { return v ? "yes" : "no"; };
  return {ok, std::string("folds partition ") + yn(partition) + ", stratified " + yn(stratified) +
                  ", identical rerun CSVs " + yn(rerun) + ", identical CLI rerun CSVs " + yn(cli_rerun) +
                  ", leakage check " + (no_leak ? "passed" : "failed")};
}

// --- 9. Sweep grids and cascade ordering ---------------------------------------------

// Features in the order the cascade consumes them.
std::vector<FeatureName> consumed_order(const FusionTopology& t) {
  std::vector<FeatureName> out;
  for (const FusionNode& n : t.nodes)
    if (n.kind == NodeKind::input || n.kind == NodeKind::component) out.push_back(n.feature);
  return out;
}

Outcome criterion9() {
  CorpusSpec spec = small_corpus(9);
  spec.trace_length_min = 100;
  spec.trace_length_max = 160;
  spec.canonical_size = 64;
  spec.callgraph_nodes_max = 64;
  const Corpus corpus = generate_corpus(spec);
  const DatasetSplit split = holdout_split(corpus.labels(), {0.7, 0.3, 0.0}, 9);
  ExtractionConfig base = small_pipeline().extraction;
  base.lowfreq_length = 350;
  base.statements.hp.epochs = 2;
  base.pv.epochs = 2;
  Hyperparams probe = default_probe_hyperparams();
  probe.epochs = 30;

  bool grids_ok = true;
  std::string rows;
  for (SweepParameter p : kAllSweeps) {
    const std::vector<std::size_t> grid = published_grid(p);
    const SweepTable t = sweep(p, grid, corpus, split.train, split.validation, base, probe);
    std::vector<std::size_t> values;
    for (const SweepRow& r : t.rows) values.push_back(r.value);
    grids_ok = grids_ok && values == grid;
    if (p == SweepParameter::zigzag_len || p == SweepParameter::pv_dim)
      for (const SweepRow& r : t.rows) grids_ok = grids_ok && r.feature_length == r.value;
    const std::string csv = t.to_csv();
    grids_ok = grids_ok && static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == grid.size() + 1;
    rows += (rows.empty() ? "" : ",") + std::to_string(t.rows.size());
  }

  // Ordering recomputed from freshly trained components.
  const PipelineConfig config = small_pipeline();
  const FeatureExtractors x = fit_extractors(corpus, split.train, split.validation, config.extraction);
  const auto components = train_components(x.extract_all(corpus), corpus.labels(), corpus.family_count(), split.train,
                                           split.validation, config.component);
  const ComponentManifest manifest = make_manifest(components);
  const std::vector<FeatureName> order = manifest.ascending(features_of(FeatureSet::integrated));
  bool order_ok = order.size() == kAllFeatures.size();
  for (std::size_t k = 1; k < order.size(); ++k)
    order_ok = order_ok && manifest.accuracy(order[k - 1]) <= manifest.accuracy(order[k]);
  for (Preset p : {Preset::ef2, Preset::lf1, Preset::if2})
    order_ok = order_ok && consumed_order(make_preset(p, manifest, FeatureSet::integrated)) == order;
  std::string names;
  for (FeatureName f : order) names += (names.empty() ? "" : " < ") + to_string(f);
  return {grids_ok && order_ok, "sweep rows " + rows + (grids_ok ? " match" : " differ from") +
                                    " the published grids; cascade order " + names +
                                    (order_ok ? " used by EF2/LF1/IF2" : " NOT used by every cascade")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"numerical core", criterion1}, {"DCT and zigzag", criterion2},      {"shape contracts", criterion3},
      {"ordering claim", criterion4}, {"encoder claim", criterion5},       {"ensemble semantics", criterion6},
      {"metric properties", criterion7}, {"protocol properties", criterion8}, {"sweep harness", criterion9}};
  // Runtime budgets in seconds.
  const std::vector<double> budget = {60, 60, 600, 600, 600, 60, 60, 600, 900};
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  bool all_pass = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > budget[i]) {
      o.pass = false;
      o.detail += "; over the " + fmt("%.0f", budget[i]) + " s budget";
    }
    all_pass = all_pass && o.pass;
    std::printf("%s criterion %zu (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}

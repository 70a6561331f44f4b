#include "cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "malfuse/evaluate.hpp"

namespace malfuse::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Problems with flags or config files found before any work starts.
struct UsageError : Error {
  using Error::Error;
};

struct Options {
  std::string corpus;
  std::string out;
  std::string config_file;
  std::string spec_file;
  std::string extract_dir;
  std::string components_dir;
  std::string preset = "ef1";
  std::string features = "integrated";
  std::string protocol = "holdout";
  std::string param = "all";
  std::vector<std::size_t> values;
  std::vector<std::size_t> lengths{100, 200};
  std::uint64_t seed = 42;
  std::size_t folds = 10;
  std::size_t jobs = 1;
  bool quiet = false;

  std::size_t families = 8;
  std::size_t samples_per_family = 60;
  std::string signal = "both";
  std::string family_sizes = "uniform";
  double overlap_noise = 0.4;
  double decoy_rate = 0.5;
};

class Logger {
 public:
  explicit Logger(bool quiet) : quiet_(quiet) {}
  template <class... Args>
  void operator()(const Args&... args) const {
    if (quiet_) return;
    std::cerr << "[malfuse] ";
    (std::cerr << ... << args);
    std::cerr << '\n';
  }

 private:
  bool quiet_;
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

// Everything a subcommand needs, resolved and validated before it runs.
struct Run {
  std::string subcommand;
  Options opt;
  PipelineConfig pipeline;
  CorpusSpec spec;
  std::vector<SweepParameter> sweeps;
  bool seed_given = false;

  json to_json() const {
    json paths = {{"out", opt.out}};
    if (!opt.corpus.empty()) paths["corpus"] = opt.corpus;
    if (!opt.extract_dir.empty()) paths["extract"] = opt.extract_dir;
    if (!opt.components_dir.empty()) paths["components"] = opt.components_dir;
    json j = {{"subcommand", subcommand}, {"paths", paths}, {"seed", opt.seed}};
    if (subcommand == "gen") {
      j["corpus_spec"] = spec.to_json();
      j["folds"] = opt.folds;
      return j;
    }
    j["pipeline"] = pipeline.to_json();
    if (subcommand == "eval") {
      j["protocol"] = opt.protocol;
      j["folds"] = opt.folds;
      j["jobs"] = opt.jobs;
    }
    if (subcommand == "sweep") {
      json grids = json::object();
      for (SweepParameter p : sweeps) grids[to_string(p)] = opt.values.empty() ? published_grid(p) : opt.values;
      j["sweep_grids"] = grids;
    }
    if (subcommand == "compare-encoders") j["lengths"] = opt.lengths;
    return j;
  }
};

void resolve(Run& run, const CLI::App& sub) {
  Options& o = run.opt;
  run.seed_given = sub.count("--seed") > 0;
  if (run.subcommand == "gen") {
    if (!o.spec_file.empty()) {
      try {
        run.spec = CorpusSpec::from_json(read_json(o.spec_file));
      } catch (const ConfigError& e) {
        throw UsageError(e.what());
      }
    }
    CorpusSpec& s = run.spec;
    if (sub.count("--families")) s.family_count = o.families;
    if (sub.count("--samples-per-family")) s.samples_per_family = o.samples_per_family;
    if (sub.count("--signal")) s.signal = signal_channel_from_string(o.signal);
    if (sub.count("--family-sizes")) s.family_sizes = o.family_sizes == "long_tail" ? FamilySizes::long_tail : FamilySizes::uniform;
    if (sub.count("--overlap-noise")) s.overlap_noise = o.overlap_noise;
    if (sub.count("--decoy-rate")) s.decoy_rate = o.decoy_rate;
    if (run.seed_given) s.seed = o.seed;
    o.seed = s.seed;
    s.validate();
    return;
  }
  if (!o.config_file.empty()) run.pipeline = PipelineConfig::from_json(read_json(o.config_file));
  PipelineConfig& c = run.pipeline;
  if (sub.count("--preset")) c.preset = preset_from_string(o.preset);
  if (sub.count("--features")) c.features = feature_set_from_string(o.features);
  if (run.seed_given) {
    c.extraction.seed = o.seed;
    c.component.hp.seed = o.seed;
    c.fusion.hp.seed = o.seed;
  }
  if (run.subcommand == "sweep") {
    if (o.param == "all") run.sweeps.assign(kAllSweeps.begin(), kAllSweeps.end());
    else run.sweeps = {sweep_parameter_from_string(o.param)};
    for (std::size_t v : o.values)
      if (v == 0) throw UsageError("sweep values must be positive");
  }
  if (run.subcommand == "compare-encoders" && o.lengths.empty()) throw UsageError("--lengths needs at least one value");
  if (run.subcommand == "eval" && o.protocol == "cv" && o.folds < 2) throw UsageError("--folds must be at least 2");
}

// --- Inputs ------------------------------------------------------------------------

struct Inputs {
  Corpus corpus;
  DatasetSplit split;
};

Inputs load_inputs(const Run& run, const Logger& log) {
  const fs::path dir = run.opt.corpus;
  std::size_t canonical = kDefaultCanonicalSize;
  if (fs::exists(dir / "corpus_spec.json")) canonical = CorpusSpec::from_json(read_json(dir / "corpus_spec.json")).canonical_size;
  Inputs in{load_corpus(dir, canonical), {}};
  if (fs::exists(dir / "split.json")) {
    in.split = DatasetSplit::from_json(read_json(dir / "split.json"));
  } else {
    in.split = make_splits(in.corpus.labels(), run.opt.folds, {}, run.opt.seed);
    log("no split.json in corpus; drew a stratified split with seed ", run.opt.seed);
  }
  log("corpus: ", in.corpus.size(), " samples, ", in.corpus.family_count(), " families; split ", in.split.train.size(),
      "/", in.split.validation.size(), "/", in.split.test.size());
  for (const std::string& w : in.split.warnings) log("split warning: ", w);
  return in;
}

std::map<FeatureName, FeatureTable> tables_for(const Run& run, const Inputs& in, const Logger& log) {
  const std::vector<FeatureName> features = features_of(run.pipeline.features);
  std::map<FeatureName, FeatureTable> tables;
  if (!run.opt.extract_dir.empty()) {
    for (FeatureName f : features)
      tables[f] = load_feature_table(fs::path(run.opt.extract_dir) / "tables" / (to_string(f) + ".csv"));
    for (const auto& [f, t] : tables)
      if (t.sample_ids.size() != in.corpus.size()) throw Error("feature table " + to_string(f) + " does not match the corpus");
    log("loaded ", tables.size(), " feature tables from ", run.opt.extract_dir);
    return tables;
  }
  log("fitting extractors for ", features.size(), " features");
  const FeatureExtractors x =
      fit_extractors(in.corpus, in.split.train, in.split.validation, run.pipeline.extraction, features);
  return x.extract_all(in.corpus);
}

std::map<FeatureName, ComponentModel> components_for(const Run& run, const Inputs& in,
                                                     const std::map<FeatureName, FeatureTable>& tables,
                                                     const Logger& log) {
  if (!run.opt.components_dir.empty()) {
    auto all = load_components(run.opt.components_dir);
    std::map<FeatureName, ComponentModel> out;
    for (FeatureName f : features_of(run.pipeline.features)) {
      auto it = all.find(f);
      if (it == all.end()) throw Error("no component for " + to_string(f) + " in " + run.opt.components_dir);
      out.emplace(f, std::move(it->second));
    }
    log("loaded ", out.size(), " components from ", run.opt.components_dir);
    return out;
  }
  auto out = train_components(tables, in.corpus.labels(), in.corpus.family_count(), in.split.train,
                              in.split.validation, run.pipeline.component);
  for (const auto& [f, m] : out) log("component ", to_string(f), ": validation accuracy ", m.validation_accuracy());
  return out;
}

void write_report(const fs::path& out, const EvalReport& report) {
  write_text(out / "report.csv", report.to_csv());
  write_text(out / "report.txt", report.to_text());
}

// --- Subcommands -------------------------------------------------------------------

void cmd_gen(const Run& run, const Logger& log) {
  const fs::path out = run.opt.out;
  const Corpus corpus = generate_corpus(run.spec);
  write_corpus(corpus, out);
  write_text(out / "corpus_spec.json", run.spec.to_json().dump(2) + "\n");
  const DatasetSplit split = make_splits(corpus.labels(), run.opt.folds, {}, run.spec.seed);
  write_text(out / "split.json", split.to_json().dump(2) + "\n");
  for (const std::string& w : split.warnings) log("split warning: ", w);
  log("wrote ", corpus.size(), " samples in ", corpus.family_count(), " families to ", out.string());
}

void cmd_extract(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  const fs::path out = run.opt.out;
  const FeatureExtractors x = fit_extractors(in.corpus, in.split.train, in.split.validation, run.pipeline.extraction,
                                             features_of(run.pipeline.features));
  x.save(out / "extractors");
  fs::create_directories(out / "tables");
  for (const auto& [f, t] : x.extract_all(in.corpus)) {
    save_feature_table(out / "tables" / (to_string(f) + ".csv"), t);
    log(to_string(f), ": length ", t.length());
  }
}

void cmd_train_components(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  const auto tables = tables_for(run, in, log);
  const auto components = components_for(run, in, tables, log);
  save_components(fs::path(run.opt.out) / "components", components);
  const ComponentManifest manifest = make_manifest(components);
  std::string order;
  for (FeatureName f : manifest.ascending(features_of(run.pipeline.features))) order += to_string(f) + "\n";
  write_text(fs::path(run.opt.out) / "order.txt", order);
}

void cmd_train_fusion(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  const fs::path out = run.opt.out;
  const auto tables = tables_for(run, in, log);
  const auto components = components_for(run, in, tables, log);
  const FusionTopology topology = make_preset(run.pipeline.preset, make_manifest(components), run.pipeline.features,
                                              run.pipeline.preset_options);
  log("training ", to_string(run.pipeline.preset), " over ", topology.features().size(), " features");
  const std::vector<int> labels = in.corpus.labels();
  const FusionModel model = train_fusion(topology, tables, components, labels, in.corpus.family_count(),
                                         in.split.train, in.split.validation, run.pipeline.fusion);
  for (const StageReport& s : model.stages())
    log("stage ", s.node, ": ", s.trainable_parameters, " trainable parameters, best epoch ", s.history.best_epoch);
  model.to_archive().save(out / "fusion.mdl");
  write_text(out / "topology.txt", topology.to_dsl());
  const Tensor probs = predict_rows(model, tables, in.split.test);
  std::vector<int> test_labels;
  for (std::size_t i : in.split.test) test_labels.push_back(labels[i]);
  const EvalReport report = make_report(probs, test_labels, in.corpus.family_names);
  write_report(out, report);
  log("test accuracy ", report.accuracy, ", top-3 ", report.top3_accuracy);
}

void cmd_eval(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  EvalReport report;
  if (run.opt.protocol == "cv") {
    log(run.opt.folds, "-fold cross validation with ", run.opt.jobs, " job(s)");
    report = cross_validate(run.pipeline, in.corpus, run.opt.folds, run.opt.seed, run.opt.jobs);
  } else {
    report = run_pipeline(in.corpus, in.split.train, in.split.validation, in.split.test, run.pipeline).report;
  }
  write_report(run.opt.out, report);
  log(report.protocol, " accuracy ", report.accuracy, ", top-3 ", report.top3_accuracy);
}

void cmd_sweep(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  for (SweepParameter p : run.sweeps) {
    const std::vector<std::size_t> values = run.opt.values.empty() ? published_grid(p) : run.opt.values;
    log("sweeping ", to_string(p), " over ", values.size(), " values");
    const SweepTable t = sweep(p, values, in.corpus, in.split.train, in.split.validation, run.pipeline.extraction,
                               default_probe_hyperparams());
    write_text(fs::path(run.opt.out) / ("sweep_" + to_string(p) + ".csv"), t.to_csv());
    write_text(fs::path(run.opt.out) / ("sweep_" + to_string(p) + ".txt"), t.to_text());
  }
}

void cmd_compare_encoders(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  CallSequenceConfig calls;
  if (run.seed_given) calls.hp.seed = run.opt.seed;
  const EncoderComparison e = compare_encoders(in.corpus, run.opt.lengths, in.split.train, in.split.validation,
                                               run.pipeline.extraction.statements, calls);
  write_text(fs::path(run.opt.out) / "encoders.csv", e.to_csv());
  write_text(fs::path(run.opt.out) / "encoders.txt", e.to_text());
  for (const auto& r : e.rows) log("length ", r.length, ": call ", r.call_accuracy, ", statement ", r.statement_accuracy);
}

void cmd_explain(const Run& run, const Logger& log) {
  const Inputs in = load_inputs(run, log);
  const fs::path out = run.opt.out;
  std::map<FeatureSet, Tensor> probs;
  for (FeatureSet set : {FeatureSet::static_only, FeatureSet::dynamic_only, FeatureSet::integrated}) {
    PipelineConfig c = run.pipeline;
    c.features = set;
    log("training ", to_string(c.preset), " on ", to_string(set), " features");
    probs[set] = run_pipeline(in.corpus, in.split.train, in.split.validation, in.split.test, c).test_probs;
  }
  std::vector<CaseReport> cases;
  std::map<CaseCategory, std::size_t> counts;
  for (std::size_t r = 0; r < in.split.test.size(); ++r) {
    const Sample& s = in.corpus.samples[in.split.test[r]];
    cases.push_back(case_report(s.sample_id, s.family.value, probs[FeatureSet::static_only].row(r),
                                probs[FeatureSet::dynamic_only].row(r), probs[FeatureSet::integrated].row(r)));
    ++counts[cases.back().category];
    write_text(out / "cases" / (s.sample_id + ".csv"), cases.back().to_csv(in.corpus.family_names));
  }
  write_text(out / "cases.csv", case_summary_csv(cases, in.corpus.family_names));
  std::string summary = "category,count\n";
  for (const auto& [c, n] : counts) summary += to_string(c) + "," + std::to_string(n) + "\n";
  write_text(out / "categories.csv", summary);
  for (const auto& [c, n] : counts) log(to_string(c), ": ", n);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Malware family classification from fused static and dynamic features"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::string> presets{"ef1", "ef2", "lf1", "lf2", "if1", "if2", "ens-fixed", "ens-train"};
  const std::vector<std::string> feature_sets{"integrated", "static", "dynamic"};

  auto common = [&](CLI::App* s, bool needs_corpus) {
    s->add_option("--out", o.out, "Output directory")->required();
    s->add_option("--seed", o.seed, "Seed for every random choice");
    s->add_flag("--quiet", o.quiet, "Suppress progress logs");
    if (!needs_corpus) return;
    s->add_option("--corpus", o.corpus, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    s->add_option("--config", o.config_file, "Pipeline configuration JSON")->check(CLI::ExistingFile);
    s->add_option("--preset", o.preset, "Fusion preset")->check(CLI::IsMember(presets, CLI::ignore_case));
    s->add_option("--features", o.features, "Feature set")->check(CLI::IsMember(feature_sets));
    s->add_option("--folds", o.folds, "Folds when a split must be drawn")->check(CLI::PositiveNumber);
  };

  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
  common(gen, false);
  gen->add_option("--spec", o.spec_file, "Corpus spec JSON; flags override its fields")->check(CLI::ExistingFile);
  gen->add_option("--families", o.families)->check(CLI::PositiveNumber);
  gen->add_option("--samples-per-family", o.samples_per_family)->check(CLI::PositiveNumber);
  gen->add_option("--signal", o.signal)->check(CLI::IsMember({"static_only", "dynamic_only", "both", "params_only"}));
  gen->add_option("--family-sizes", o.family_sizes)->check(CLI::IsMember({"uniform", "long_tail"}));
  gen->add_option("--overlap-noise", o.overlap_noise)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--decoy-rate", o.decoy_rate)->check(CLI::Range(0.0, 1.0));
  gen->add_option("--folds", o.folds, "Folds written to split.json")->check(CLI::Range(2, 1000));

  CLI::App* extract = app.add_subcommand("extract", "Fit feature extractors and write feature tables");
  common(extract, true);

  CLI::App* components = app.add_subcommand("train-components", "Train one classifier per feature");
  common(components, true);
  components->add_option("--extract", o.extract_dir, "Output of extract")->check(CLI::ExistingDirectory);

  CLI::App* fusion = app.add_subcommand("train-fusion", "Train a fusion model and score the test split");
  common(fusion, true);
  fusion->add_option("--extract", o.extract_dir, "Output of extract")->check(CLI::ExistingDirectory);
  fusion->add_option("--components", o.components_dir, "components/ directory of train-components")
      ->check(CLI::ExistingDirectory);

  CLI::App* eval = app.add_subcommand("eval", "Run the full pipeline under holdout or cross validation");
  common(eval, true);
  eval->add_option("--protocol", o.protocol)->check(CLI::IsMember({"holdout", "cv"}));
  eval->add_option("--jobs", o.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);

  CLI::App* sweep_cmd = app.add_subcommand("sweep", "Feature-length sweeps with a softmax probe");
  common(sweep_cmd, true);
  sweep_cmd->add_option("--param", o.param, "Swept parameter or 'all'");
  sweep_cmd->add_option("--values", o.values, "Grid; defaults to the published grid")->delimiter(',');

  CLI::App* encoders = app.add_subcommand("compare-encoders", "Call-sequence vs statement-sequence encoder");
  common(encoders, true);
  encoders->add_option("--lengths", o.lengths, "Sequence lengths")->delimiter(',');

  CLI::App* explain = app.add_subcommand("explain", "Per-sample static/dynamic/integrated case reports");
  common(explain, true);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  Run run{sub->get_name(), o, {}, {}, {}, false};
  const Logger log(o.quiet);
  try {
    resolve(run, *sub);
  } catch (const Error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  }

  const std::map<std::string, void (*)(const Run&, const Logger&)> commands = {
      {"gen", cmd_gen},
      {"extract", cmd_extract},
      {"train-components", cmd_train_components},
      {"train-fusion", cmd_train_fusion},
      {"eval", cmd_eval},
      {"sweep", cmd_sweep},
      {"compare-encoders", cmd_compare_encoders},
      {"explain", cmd_explain}};
  try {
    write_text(fs::path(o.out) / "run_config.json", run.to_json().dump(2) + "\n");
    commands.at(run.subcommand)(run, log);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace malfuse::cli

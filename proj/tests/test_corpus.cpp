#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "malfuse/corpus.hpp"
#include "malfuse/rng.hpp"

using namespace malfuse;

namespace {

CorpusSpec small_spec() {
  CorpusSpec s;
  s.family_count = 4;
  s.samples_per_family = 12;
  s.trace_length_min = 30;
  s.trace_length_max = 60;
  s.seed = 7;
  return s;
}

// Nearest-centroid accuracy on the second half of each family, using import
// indicators and API-name counts.
double centroid_accuracy(const Corpus& c, std::size_t import_vocab, std::size_t api_vocab) {
  const std::size_t dim = import_vocab + api_vocab;
  auto featurize = [&](const Sample& s) {
    std::vector<double> v(dim, 0.0);
    for (const auto& name : s.imports.imports) v[std::stoul(name.substr(4))] = 1.0;
    for (const auto& st : s.trace.statements)
      v[import_vocab + std::stoul(st.api.substr(4))] += 1.0 / static_cast<double>(s.trace.statements.size());
    return v;
  };
  const std::size_t F = c.family_count();
  std::vector<std::vector<double>> centroid(F, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> seen(F, 0), count(F, 0);
  for (const Sample& s : c.samples) ++count[s.family.value];
  std::vector<std::pair<int, std::vector<double>>> held_out;
  for (const Sample& s : c.samples) {
    auto v = featurize(s);
    const auto f = static_cast<std::size_t>(s.family.value);
    if (seen[f]++ < count[f] / 2) {
      for (std::size_t i = 0; i < dim; ++i) centroid[f][i] += v[i];
    } else {
      held_out.emplace_back(s.family.value, std::move(v));
    }
  }
  std::size_t hits = 0;
  for (const auto& [label, v] : held_out) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t f = 0; f < F; ++f) {
      double d = 0.0;
      const double n = static_cast<double>(count[f] / 2);
      for (std::size_t i = 0; i < dim; ++i) d += (v[i] - centroid[f][i] / n) * (v[i] - centroid[f][i] / n);
      if (d < best_d) best_d = d, best = f;
    }
    hits += static_cast<int>(best) == label;
  }
  return static_cast<double>(hits) / static_cast<double>(held_out.size());
}

}  // namespace

TEST(TraceParse, TwoLinesInOrder) {
  const auto t = parse_trace_text(
      "{\"sample_id\":\"s1\",\"api\":\"CreateFileW\",\"params\":[\"x\"]}\n"
      "{\"sample_id\":\"s1\",\"api\":\"ReadFile\",\"params\":[]}\n");
  EXPECT_EQ(t.sample_id, "s1");
  ASSERT_EQ(t.statements.size(), 2u);
  EXPECT_EQ(t.statements[0].api, "CreateFileW");
  EXPECT_EQ(t.statements[1].api, "ReadFile");
}

TEST(TraceParse, MissingApiNamesLine) {
  try {
    parse_trace_text("{\"sample_id\":\"s\",\"api\":\"A\",\"params\":[]}\n{\"sample_id\":\"s\",\"params\":[]}\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(TraceParse, MalformedAndEmpty) {
  EXPECT_THROW(parse_trace_text("{not json\n"), ParseError);
  EXPECT_THROW(parse_trace_text(""), EmptyTraceError);
  EXPECT_THROW(parse_trace_text("\n  \n"), EmptyTraceError);
  EXPECT_THROW(parse_trace_text("{\"sample_id\":\"a\",\"api\":\"X\"}\n{\"sample_id\":\"b\",\"api\":\"X\"}\n"), ParseError);
}

TEST(TraceParse, NormalizesParams) {
  const auto t = parse_trace_text(R"({"sample_id":"s","api":"LoadLibrary","params":["C:\\a\\b.dll","4096"]})");
  EXPECT_EQ(t.statements[0].params, (std::vector<std::string>{"path:.dll", "num:4k"}));
}

TEST(TraceParse, ParamCap) {
  std::string params;
  for (int i = 0; i < 20; ++i) params += std::string(i ? "," : "") + "\"p\"";
  const auto t = parse_trace_text("{\"sample_id\":\"s\",\"api\":\"A\",\"params\":[" + params + "]}");
  EXPECT_EQ(t.statements[0].params.size(), kDefaultParamCap);
}

TEST(Normalize, Rules) {
  EXPECT_EQ(normalize_param_token("GENERIC_READ"), "generic_read");
  EXPECT_EQ(normalize_param_token("/usr/lib/libc.so"), "path:.so");
  EXPECT_EQ(normalize_param_token("C:\\Windows\\System32"), "path:");
  EXPECT_EQ(normalize_param_token("7"), "num:7");
  EXPECT_EQ(normalize_param_token("42"), "num:40");
  EXPECT_EQ(normalize_param_token("250"), "num:200");
  EXPECT_EQ(normalize_param_token("45000"), "num:40k");
  EXPECT_EQ(normalize_param_token("3000000"), "num:3m");
  EXPECT_EQ(normalize_param_token("1000000000"), "num:1g");
  EXPECT_EQ(normalize_param_token("0x1000"), "num:4k");
  EXPECT_EQ(normalize_param_token("-12"), "num:-10");
  EXPECT_EQ(normalize_param_token("3.75"), "num:3");
  EXPECT_EQ(normalize_param_token("0"), "num:0");
}

TEST(Normalize, Idempotent) {
  for (const char* raw : {"C:\\x\\y.EXE", "4096", "0xFFFF", "-7", "Mutex", "/a/b", "12.5", "0", "99999999999999999999"}) {
    const std::string once = normalize_param_token(raw);
    EXPECT_EQ(normalize_param_token(once), once) << raw;
  }
}

TEST(CallGraphParse, EmptyIsZero) {
  const auto cg = parse_callgraph_text("", 4);
  EXPECT_EQ(cg.node_count, 0u);
  EXPECT_EQ(cg.size, 4u);
  EXPECT_EQ(cg.adjacency, std::vector<std::uint8_t>(16, 0));
}

TEST(CallGraphParse, ReordersByOutDegree) {
  // Node 2 has the higher id but larger out-degree, so it moves first.
  const auto cg = parse_callgraph_text("n 3\n0 1\n2 0\n2 1\n", 4);
  EXPECT_EQ(cg.at(0, 1), 1);  // old 2 -> old 0
  EXPECT_EQ(cg.at(0, 2), 1);  // old 2 -> old 1
  EXPECT_EQ(cg.at(1, 2), 1);  // old 0 -> old 1
  int total = 0;
  for (auto v : cg.adjacency) total += v;
  EXPECT_EQ(total, 3);
}

TEST(CallGraphParse, SpecExample) {
  const auto cg = parse_callgraph_text("0 1\n0 2\n1 2\n", 4);
  EXPECT_EQ(cg.node_count, 3u);
  EXPECT_EQ(cg.at(0, 1), 1);
  EXPECT_EQ(cg.at(0, 2), 1);
  EXPECT_EQ(cg.at(1, 2), 1);
  for (std::size_t i = 3; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(cg.at(i, j) + cg.at(j, i), 0);
}

TEST(CallGraphParse, Truncates) {
  // Node v has out-degree v (edges to lower ids), so nodes 36..99 are kept.
  std::string text = "n 100\n";
  for (int v = 1; v < 100; ++v)
    for (int u = 0; u < v; ++u) text += std::to_string(v) + " " + std::to_string(u) + "\n";
  const auto cg = parse_callgraph_text(text, 64);
  EXPECT_EQ(cg.node_count, 100u);
  EXPECT_EQ(cg.adjacency.size(), 64u * 64u);
  // Canonical node r is original node 99-r; it calls every kept node with a lower original id.
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(cg.at(r, c), c > r ? 1 : 0) << r << "," << c;
}

TEST(CallGraphParse, Errors) {
  EXPECT_THROW(parse_callgraph_text("0 -1\n"), ParseError);
  EXPECT_THROW(parse_callgraph_text("0 1.5\n"), ParseError);
  EXPECT_THROW(parse_callgraph_text("a b\n"), ParseError);
  EXPECT_THROW(parse_callgraph_text("n 2\n0 2\n"), ParseError);
  EXPECT_THROW(parse_callgraph_text("0 1 2\n"), ParseError);
}

TEST(CallGraphParse, BinaryAndZeroBeyondNodes) {
  const auto cg = parse_callgraph_text("# comment\nn 3\n0 1\n0 1\n1 1\n", 8);
  for (auto v : cg.adjacency) EXPECT_LE(v, 1);
  for (std::size_t i = 3; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(cg.at(i, j) + cg.at(j, i), 0);
}

TEST(Vocabulary, Examples) {
  const auto v = build_vocabulary(std::map<std::string, std::size_t>{{"A", 3}, {"B", 1}}, 2);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_EQ(v.index("A"), 0u);
  EXPECT_EQ(v.index("B"), 1u);
  EXPECT_EQ(v.index("zzz"), 2u);
  EXPECT_EQ(v.name(2), Vocabulary::kUnknown);

  const auto tie = build_vocabulary(std::map<std::string, std::size_t>{{"B", 1}, {"A", 1}}, 1);
  EXPECT_EQ(tie.index("A"), 0u);
  EXPECT_EQ(tie.index("B"), tie.unknown_index());

  std::vector<std::string> names;
  for (int i = 0; i < 251; ++i) names.push_back("api" + std::to_string(i));
  EXPECT_EQ(build_vocabulary(names, 251).size(), 252u);

  EXPECT_THROW(build_vocabulary(std::vector<std::string>{}, 3), Error);
  EXPECT_THROW(build_vocabulary(names, 0), ConfigError);
}

TEST(Vocabulary, UnseenMapsToUnknownAndJsonRoundTrip) {
  const auto v = build_vocabulary(std::vector<std::string>{"x", "y", "y", "z"}, 10);
  EXPECT_EQ(v.size(), 4u);
  EXPECT_EQ(v.index("y"), 0u);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(v.index("unseen" + std::to_string(rng.next())), v.unknown_index());
  EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
}

TEST(Generator, Deterministic) {
  const auto spec = small_spec();
  const Corpus a = generate_corpus(spec), b = generate_corpus(spec);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(serialize_trace(a.samples[i].trace), serialize_trace(b.samples[i].trace));
    EXPECT_EQ(serialize_callgraph(a.samples[i].callgraph), serialize_callgraph(b.samples[i].callgraph));
    EXPECT_EQ(serialize_imports(a.samples[i].imports), serialize_imports(b.samples[i].imports));
  }
  auto other = spec;
  other.seed = 8;
  EXPECT_NE(serialize_trace(generate_corpus(other).samples[0].trace), serialize_trace(a.samples[0].trace));
}

TEST(Generator, Invariants) {
  const Corpus c = generate_corpus(small_spec());
  EXPECT_EQ(c.size(), 48u);
  EXPECT_EQ(c.family_count(), 4u);
  std::set<std::string> ids;
  for (const Sample& s : c.samples) {
    EXPECT_TRUE(ids.insert(s.sample_id).second);
    EXPECT_GE(s.family.value, 0);
    EXPECT_LT(s.family.value, 4);
    EXPECT_FALSE(s.trace.statements.empty());
    EXPECT_FALSE(s.imports.imports.empty());
    EXPECT_EQ(s.callgraph.size, kDefaultCanonicalSize);
    EXPECT_LE(s.callgraph.node_count, kDefaultCanonicalSize);
    for (const auto& st : s.trace.statements) EXPECT_LE(st.params.size(), 3u);
  }
}

TEST(Generator, StaticOnlyHasSharedDynamicProfile) {
  // With identical chains, per-family API-name frequencies agree up to sampling noise
  // while import frequencies do not.
  auto spec = small_spec();
  spec.signal = SignalChannel::static_only;
  spec.overlap_noise = 0.0;
  spec.decoy_rate = 0.0;
  spec.samples_per_family = 40;
  const Corpus c = generate_corpus(spec);
  const double acc = centroid_accuracy(c, spec.import_vocab, 0 + spec.api_vocab);
  EXPECT_GT(acc, 0.9);

  // Same corpus, API channel only: near chance.
  Corpus dyn_only = c;
  for (Sample& s : dyn_only.samples) s.imports.imports = {"imp_000"};
  EXPECT_LT(centroid_accuracy(dyn_only, spec.import_vocab, spec.api_vocab), 0.45);
}

TEST(Generator, ParamsOnlyKeepsNamesShared) {
  auto spec = small_spec();
  spec.signal = SignalChannel::params_only;
  spec.decoy_rate = 0.0;
  spec.samples_per_family = 40;
  const Corpus c = generate_corpus(spec);
  EXPECT_LT(centroid_accuracy(c, spec.import_vocab, spec.api_vocab), 0.45);
}

TEST(Generator, FullOverlapIsChance) {
  auto spec = small_spec();
  spec.family_count = 5;
  spec.samples_per_family = 160;
  spec.overlap_noise = 1.0;
  const Corpus c = generate_corpus(spec);
  const double acc = centroid_accuracy(c, spec.import_vocab, spec.api_vocab);
  EXPECT_NEAR(acc, 1.0 / 5.0, 0.05);

  spec.overlap_noise = 0.0;
  spec.decoy_rate = 0.0;
  spec.samples_per_family = 20;
  EXPECT_GT(centroid_accuracy(generate_corpus(spec), spec.import_vocab, spec.api_vocab), 0.95);
}

TEST(Generator, LongTailSizes) {
  CorpusSpec spec;
  spec.family_count = 80;
  spec.family_sizes = FamilySizes::long_tail;
  spec.size_scale = 0.05;
  spec.trace_length_min = 5;
  spec.trace_length_max = 10;
  spec.callgraph_nodes_max = 20;
  const Corpus c = generate_corpus(spec);
  std::map<int, std::size_t> counts;
  for (const Sample& s : c.samples) ++counts[s.family.value];
  EXPECT_EQ(counts.size(), 80u);
  std::size_t biggest = 0;
  for (auto [f, n] : counts) {
    biggest = std::max(biggest, n);
    EXPECT_GE(n, 2u);
  }
  EXPECT_GE(biggest, 12u);  // the largest bin starts at 301 samples
}

TEST(Generator, SpecValidationAndJson) {
  auto spec = small_spec();
  spec.signal = SignalChannel::params_only;
  const auto back = CorpusSpec::from_json(spec.to_json());
  EXPECT_EQ(back.to_json(), spec.to_json());
  spec.overlap_noise = 1.5;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = small_spec();
  spec.family_count = 0;
  EXPECT_THROW(generate_corpus(spec), ConfigError);
  EXPECT_THROW(CorpusSpec::from_json({{"bogus", 1}}), ConfigError);
}

TEST(RoundTrip, TraceAndCallGraphProperty) {
  auto spec = small_spec();
  spec.samples_per_family = 5;
  const Corpus c = generate_corpus(spec);
  for (const Sample& s : c.samples) {
    EXPECT_EQ(parse_trace_text(serialize_trace(s.trace)), s.trace);
    EXPECT_EQ(parse_callgraph_text(serialize_callgraph(s.callgraph), s.callgraph.size), s.callgraph);
  }
  // Random graphs with n <= S.
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(16);
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (int e = 0; e < 30; ++e) edges.emplace_back(rng.index(n), rng.index(n));
    const auto cg = canonicalize_callgraph(n, edges, 16);
    EXPECT_EQ(parse_callgraph_text(serialize_callgraph(cg), 16), cg);
  }
}

TEST(RoundTrip, CorpusOnDisk) {
  auto spec = small_spec();
  spec.samples_per_family = 3;
  const Corpus c = generate_corpus(spec);
  const auto dir = std::filesystem::temp_directory_path() / "malfuse_corpus_roundtrip";
  std::filesystem::remove_all(dir);
  write_corpus(c, dir);
  const Corpus back = load_corpus(dir);
  ASSERT_EQ(back.size(), c.size());
  EXPECT_EQ(back.family_names, c.family_names);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(back.samples[i].sample_id, c.samples[i].sample_id);
    EXPECT_EQ(back.samples[i].family, c.samples[i].family);
    EXPECT_EQ(back.samples[i].trace, c.samples[i].trace);
    EXPECT_EQ(back.samples[i].callgraph, c.samples[i].callgraph);
    EXPECT_EQ(back.samples[i].imports.imports, c.samples[i].imports.imports);
  }
  std::filesystem::remove_all(dir);
}

TEST(Splits, TenFoldsOfTen) {
  std::vector<int> labels(100);
  for (int i = 0; i < 100; ++i) labels[i] = i % 4;
  const auto folds = stratified_folds(labels, 10, 1);
  ASSERT_EQ(folds.size(), 10u);
  std::set<std::size_t> all;
  for (const auto& f : folds) {
    EXPECT_EQ(f.size(), 10u);
    for (std::size_t i : f) EXPECT_TRUE(all.insert(i).second);
  }
  EXPECT_EQ(all.size(), 100u);
}

TEST(Splits, FullScaleHoldoutSizes) {
  std::vector<int> labels(4519);
  Rng rng(5);
  for (int& l : labels) l = static_cast<int>(rng.index(80));
  const auto s = holdout_split(labels, {0.81, 0.09, 0.10}, 3);
  EXPECT_EQ(s.train.size(), 3661u);
  EXPECT_EQ(s.validation.size(), 407u);
  EXPECT_EQ(s.test.size(), 451u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 4519u);
}

TEST(Splits, StratificationProperty) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t k = 2 + rng.index(9);
    const std::size_t F = 2 + rng.index(8);
    std::vector<int> labels;
    for (std::size_t f = 0; f < F; ++f) {
      const std::size_t n = 1 + rng.index(40);
      for (std::size_t i = 0; i < n; ++i) labels.push_back(static_cast<int>(f));
    }
    rng.shuffle(labels);
    if (labels.size() < k) continue;
    std::vector<std::string> warnings;
    const auto folds = stratified_folds(labels, k, rng.next(), &warnings);
    std::map<int, std::size_t> global;
    for (int l : labels) ++global[l];
    std::size_t small = 0;
    for (auto [f, n] : global) small += n < k;
    EXPECT_EQ(warnings.size(), small);
    std::vector<int> seen(labels.size(), 0);
    for (const auto& fold : folds) {
      std::map<int, std::size_t> local;
      for (std::size_t i : fold) ++local[labels[i]], ++seen[i];
      for (auto [f, n] : global) {
        if (n < k) continue;
        const double expected = static_cast<double>(n) / static_cast<double>(k);
        EXPECT_LE(std::abs(static_cast<double>(local[f]) - expected), 1.0);
      }
    }
    for (int v : seen) EXPECT_EQ(v, 1);
  }
}

TEST(Splits, DeterministicAndValidated) {
  std::vector<int> labels(60);
  for (int i = 0; i < 60; ++i) labels[i] = i % 3;
  const auto a = make_splits(labels, 5, {}, 9), b = make_splits(labels, 5, {}, 9);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(DatasetSplit::from_json(a.to_json()).to_json(), a.to_json());
  EXPECT_THROW(make_splits(labels, 1, {}, 9), ConfigError);
  EXPECT_THROW(make_splits(labels, 5, {0.5, 0.5, 0.5}, 9), ConfigError);
  const auto comp = fold_complement(a.folds, 0);
  EXPECT_EQ(comp.size() + a.folds[0].size(), 60u);
}

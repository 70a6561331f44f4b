#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "malfuse/components.hpp"
#include "malfuse/corpus.hpp"
#include "malfuse/dynamic_features.hpp"
#include "malfuse/static_features.hpp"

using namespace malfuse;

namespace {

// Gaussian blobs around family-specific centres in `width` dimensions.
FeatureTable blobs(FeatureName name, std::size_t families, std::size_t per_family, std::size_t width, double spread,
                   std::uint64_t seed, std::vector<int>& labels) {
  Rng rng(seed);
  std::vector<std::vector<double>> centres(families, std::vector<double>(width));
  for (auto& c : centres)
    for (double& x : c) x = rng.normal() * 2.0;
  FeatureTable t;
  t.name = name;
  labels.clear();
  for (std::size_t i = 0; i < families * per_family; ++i) {
    const std::size_t f = i % families;
    FeatureVector v{name, centres[f]};
    for (double& x : v.values) x += rng.normal() * spread;
    t.append("s" + std::to_string(i), v);
    labels.push_back(static_cast<int>(f));
  }
  return t;
}

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> r(hi - lo);
  std::iota(r.begin(), r.end(), lo);
  return r;
}

ComponentConfig quick_config() {
  ComponentConfig c;
  c.hp.epochs = 30;
  return c;
}

void expect_distribution(std::span<const double> p) {
  double s = 0.0;
  for (double x : p) {
    EXPECT_GE(x, 0.0);
    s += x;
  }
  EXPECT_NEAR(s, 1.0, 1e-9);
}

}  // namespace

TEST(Standardizer, FitsTrainingRowsOnly) {
  const Tensor rows({4, 2}, std::vector<double>{1, 5, 3, 5, 100, 7, -50, 9});
  const std::vector<std::size_t> idx{0, 1};
  const Standardizer s = Standardizer::fit(rows, idx);
  EXPECT_EQ(s.mean, (std::vector<double>{2, 5}));
  EXPECT_EQ(s.scale, (std::vector<double>{1, 1}));
  const Tensor z = s.apply(rows);
  EXPECT_EQ(z(0, 0), -1.0);
  EXPECT_EQ(z(1, 0), 1.0);
  EXPECT_EQ(z(2, 1), 2.0);
  std::vector<double> wrong{1.0};
  EXPECT_THROW(s.apply_inplace(wrong), ShapeError);
}

TEST(Component, LearnsSeparableFeatureAndPredictsDistributions) {
  std::vector<int> labels;
  const FeatureTable t = blobs(FeatureName::api_freq, 4, 40, 12, 0.5, 3, labels);
  const auto train_idx = range(0, 120), val_idx = range(120, 160);
  const ComponentModel m = train_component(t, labels, 4, train_idx, val_idx, quick_config());
  EXPECT_EQ(m.feature(), FeatureName::api_freq);
  EXPECT_EQ(m.input_width(), 12u);
  EXPECT_EQ(m.hidden_widths(), (std::vector<std::size_t>{256, 128}));
  EXPECT_GT(m.validation_accuracy(), 0.9);

  const Tensor probs = m.predict_rows(t.values);
  ASSERT_EQ(probs.shape, (Shape{160, 4}));
  for (std::size_t r = 0; r < probs.rows(); ++r) expect_distribution(probs.row(r));
  const FeatureVector v{FeatureName::api_freq, std::vector<double>(t.values.row(5).begin(), t.values.row(5).end())};
  const auto p = predict(m, v);
  EXPECT_EQ(p, predict(m, v));
  EXPECT_EQ(p, std::vector<double>(probs.row(5).begin(), probs.row(5).end()));
  EXPECT_THROW(predict(m, FeatureVector{FeatureName::pv_trace, v.values}), ShapeError);
  EXPECT_THROW(predict(m, FeatureVector{FeatureName::api_freq, {1.0, 2.0}}), ShapeError);

  const ComponentModel back = ComponentModel::from_archive(ModelArchive::from_bytes(m.to_archive().to_bytes()));
  EXPECT_EQ(back.predict_rows(t.values), probs);
  EXPECT_EQ(back.validation_accuracy(), m.validation_accuracy());

  const ComponentModel again = train_component(t, labels, 4, train_idx, val_idx, quick_config());
  EXPECT_EQ(again.predict_rows(t.values), probs);
}

TEST(Component, RandomLabelsStayNearChance) {
  std::vector<int> labels;
  const FeatureTable t = blobs(FeatureName::pv_trace, 1, 400, 10, 1.0, 4, labels);
  Rng rng(11);
  for (int& y : labels) y = static_cast<int>(rng.index(4));
  const ComponentModel m = train_component(t, labels, 4, range(0, 300), range(300, 400), quick_config());
  EXPECT_NEAR(m.validation_accuracy(), 0.25, 0.10);
}

TEST(Component, MemorizesSingleSample) {
  FeatureTable t;
  t.name = FeatureName::cg_lowfreq;
  t.append("only", {FeatureName::cg_lowfreq, {0.3, -1.2, 4.0}});
  const std::vector<int> labels{2};
  const std::vector<std::size_t> idx{0};
  const ComponentModel m = train_component(t, labels, 5, idx, {}, quick_config());
  EXPECT_EQ(argmax(m.predict_rows(t.values).row(0)), 2u);
}

TEST(Component, StaticSignalFavoursImportFeature) {
  CorpusSpec spec;
  spec.family_count = 6;
  spec.samples_per_family = 40;
  spec.signal = SignalChannel::static_only;
  spec.decoy_rate = 0.0;
  spec.trace_length_min = 40;
  spec.trace_length_max = 80;
  spec.seed = 17;
  const Corpus corpus = generate_corpus(spec);
  const auto labels = corpus.labels();
  const auto split = holdout_split(labels, {0.7, 0.3, 0.0}, 17);
  std::map<std::string, std::size_t> import_counts, api_counts;
  for (std::size_t i : split.train) {
    for (const auto& imp : corpus.samples[i].imports.imports) ++import_counts[imp];
    for (const auto& s : corpus.samples[i].trace.statements) ++api_counts[s.api];
  }
  const Vocabulary imports = build_vocabulary(import_counts, 251), apis = build_vocabulary(api_counts, 286);
  FeatureTable pe, freq;
  pe.name = FeatureName::pe_onehot;
  freq.name = FeatureName::api_freq;
  for (const Sample& s : corpus.samples) {
    pe.append(s.sample_id, pe_import_onehot(s.imports, imports));
    freq.append(s.sample_id, api_call_frequency(s.trace, apis));
  }
  const auto pe_model = train_component(pe, labels, 6, split.train, split.validation, quick_config());
  const auto freq_model = train_component(freq, labels, 6, split.train, split.validation, quick_config());
  EXPECT_GT(pe_model.validation_accuracy(), freq_model.validation_accuracy());
}

TEST(ComponentManifest, AscendingOrderAndRoundTrip) {
  ComponentManifest m;
  // Published per-feature accuracies.
  m.validation_accuracy = {{FeatureName::cg_lowfreq, 0.3126}, {FeatureName::cg_embedding, 0.3142},
                           {FeatureName::cooc_feat, 0.5943},  {FeatureName::pe_onehot, 0.6375},
                           {FeatureName::stmt_embed, 0.6792}, {FeatureName::api_freq, 0.7218},
                           {FeatureName::pv_trace, 0.7601}};
  EXPECT_EQ(m.ascending(kAllFeatures),
            (std::vector<FeatureName>{FeatureName::cg_lowfreq, FeatureName::cg_embedding, FeatureName::cooc_feat,
                                      FeatureName::pe_onehot, FeatureName::stmt_embed, FeatureName::api_freq,
                                      FeatureName::pv_trace}));
  const std::vector<FeatureName> dynamic{FeatureName::pv_trace, FeatureName::stmt_embed, FeatureName::api_freq,
                                         FeatureName::cooc_feat};
  EXPECT_EQ(m.ascending(dynamic), (std::vector<FeatureName>{FeatureName::cooc_feat, FeatureName::stmt_embed,
                                                            FeatureName::api_freq, FeatureName::pv_trace}));
  const ComponentManifest back = ComponentManifest::from_json(m.to_json());
  EXPECT_EQ(back.validation_accuracy, m.validation_accuracy);

  ComponentManifest ties;
  ties.validation_accuracy = {{FeatureName::pv_trace, 0.5}, {FeatureName::pe_onehot, 0.5}};
  const std::vector<FeatureName> both{FeatureName::pv_trace, FeatureName::pe_onehot};
  EXPECT_EQ(ties.ascending(both), (std::vector<FeatureName>{FeatureName::pe_onehot, FeatureName::pv_trace}));
  const std::vector<FeatureName> missing{FeatureName::api_freq};
  EXPECT_THROW(ties.ascending(missing), ConfigError);
}

TEST(LinearBaseline, SeparatesToyAndScoresPerFamily) {
  Tensor x = Tensor::matrix(40, 2);
  std::vector<int> labels;
  Rng rng(2);
  for (std::size_t i = 0; i < 40; ++i) {
    const int y = static_cast<int>(i % 2);
    x(i, 0) = (y ? 2.0 : -2.0) + rng.uniform(-1, 1);
    x(i, 1) = rng.uniform(-1, 1);
    labels.push_back(y);
  }
  const auto idx = range(0, 40);
  const LinearBaseline model = train_linear_baseline(x, labels, 2, idx);
  const Tensor s = model.scores(x);
  ASSERT_EQ(s.shape, (Shape{40, 2}));
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(static_cast<int>(argmax(s.row(i))), labels[i]);
    for (double v : s.row(i)) EXPECT_TRUE(v > 0.0 && v < 1.0);
  }
}

TEST(LinearBaseline, BeatsChanceOnBlobs) {
  std::vector<int> labels;
  const FeatureTable t = blobs(FeatureName::api_freq, 5, 40, 8, 1.5, 9, labels);
  const LinearBaseline model = train_linear_baseline(t.values, labels, 5, range(0, 150));
  const Tensor s = model.scores(t.values);
  std::size_t hits = 0;
  for (std::size_t i = 150; i < 200; ++i) hits += static_cast<int>(argmax(s.row(i))) == labels[i];
  EXPECT_GT(hits / 50.0, 0.2 + 0.2);
}

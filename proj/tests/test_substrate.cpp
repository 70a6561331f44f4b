#include <gtest/gtest.h>

#include <cmath>

#include "malfuse/archive.hpp"
#include "malfuse/layers.hpp"
#include "malfuse/ops.hpp"
#include "malfuse/search.hpp"
#include "malfuse/trainer.hpp"
#include "support/gradcheck.hpp"

namespace malfuse {
namespace {

using testing::max_gradient_error;
using testing::project;

constexpr double kGradTol = 1e-4;

Parameter random_param(const std::string& name, Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return {name, std::move(t)};
}

// Values bounded away from zero so relu kinks and pooling ties stay out of
// the finite-difference stencil.
Parameter kink_free_param(const std::string& name, Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.05, 1.0);
  return {name, std::move(t)};
}

TEST(GradientCheck, DenseEveryActivation) {
  for (Activation act : {Activation::relu, Activation::sigmoid, Activation::tanh, Activation::softmax,
                         Activation::linear}) {
    Parameter x = kink_free_param("x", {3, 4}, 1);
    Rng rng(2);
    Dense d("d", 4, 5, act, rng);
    if (act == Activation::relu) {
      // Keep pre-activations away from zero.
      for (double& b : d.bias.value.data) b = 3.0;
    }
    const double err = max_gradient_error({&x, &d.weight, &d.bias}, [&](Tape& t) {
      return project(t, d.forward(t, t.parameter(x)));
    });
    EXPECT_LT(err, kGradTol) << to_string(act);
  }
}

TEST(GradientCheck, Conv2d) {
  Parameter x = random_param("x", {2, 5, 6}, 3);
  Parameter k = random_param("k", {3, 2, 3, 3}, 4);
  Parameter b = random_param("b", {3}, 5);
  const double err = max_gradient_error({&x, &k, &b}, [&](Tape& t) {
    return project(t, ops::conv2d(t, t.parameter(x), t.parameter(k), t.parameter(b)));
  });
  EXPECT_LT(err, kGradTol);
}

TEST(GradientCheck, MaxPoolWithPartialWindows) {
  Parameter x = random_param("x", {2, 7, 5}, 6);
  const double err = max_gradient_error({&x}, [&](Tape& t) { return project(t, ops::max_pool2d(t, t.parameter(x), 3)); });
  EXPECT_LT(err, kGradTol);
}

TEST(GradientCheck, UnidirectionalLstm) {
  Rng rng(7);
  Parameter x = random_param("x", {6, 3}, 8);
  Lstm cell("l", 3, 4, rng);
  for (bool reverse : {false, true}) {
    const double err = max_gradient_error({&x, &cell.input_weights, &cell.recurrent_weights, &cell.bias},
                                          [&](Tape& t) { return project(t, cell.forward(t, t.parameter(x), reverse)); });
    EXPECT_LT(err, kGradTol) << "reverse=" << reverse;
  }
}

TEST(GradientCheck, BidirectionalLstm) {
  Rng rng(9);
  Parameter x = random_param("x", {5, 3}, 10);
  BiLstm cell("bi", 3, 3, rng);
  std::vector<Parameter*> leaves{&x};
  cell.collect(leaves);
  const double err = max_gradient_error(leaves, [&](Tape& t) { return project(t, cell.forward(t, t.parameter(x))); });
  EXPECT_LT(err, kGradTol);
}

TEST(GradientCheck, EmbeddingWithRepeatedIds) {
  Parameter table = random_param("e", {6, 4}, 11);
  const std::vector<int> ids{0, 3, 3, 5, 1};
  const double err = max_gradient_error({&table}, [&](Tape& t) {
    return project(t, ops::embedding(t, t.parameter(table), ids));
  });
  EXPECT_LT(err, kGradTol);
}

TEST(GradientCheck, AttentionPooling) {
  Parameter h = random_param("h", {7, 4}, 12);
  Parameter ctx = random_param("c", {1, 4}, 13);
  const double err = max_gradient_error({&h, &ctx}, [&](Tape& t) {
    return project(t, ops::attention_pool(t, t.parameter(h), t.parameter(ctx)));
  });
  EXPECT_LT(err, kGradTol);
}

TEST(GradientCheck, SoftmaxCrossEntropy) {
  Parameter z = random_param("z", {4, 5}, 14, -3.0, 3.0);
  const std::vector<int> labels{0, 4, 2, 2};
  const double err = max_gradient_error({&z}, [&](Tape& t) {
    return ops::softmax_cross_entropy(t, t.parameter(z), labels);
  });
  EXPECT_LT(err, kGradTol);
}

TEST(GradientCheck, AuxiliaryOps) {
  Parameter x = random_param("x", {4, 3}, 15);
  Parameter gamma = random_param("g", {1, 3}, 16, 0.5, 1.5);
  Parameter beta = random_param("b", {1, 3}, 17);
  std::vector<double> rm(3, 0.0), rv(3, 1.0);
  EXPECT_LT(max_gradient_error({&x, &gamma, &beta},
                               [&](Tape& t) {
                                 return project(t, ops::batch_norm(t, t.parameter(x), t.parameter(gamma),
                                                                   t.parameter(beta), true, rm, rv));
                               }),
            kGradTol);

  Parameter probs = random_param("p", {2, 6}, 18, 0.0, 1.0);
  Parameter w = random_param("w", {3, 2}, 19);
  Parameter b = random_param("ob", {1, 2}, 20);
  EXPECT_LT(max_gradient_error({&probs, &w, &b},
                               [&](Tape& t) {
                                 return project(t, ops::ovr_scores(t, t.parameter(probs), t.parameter(w), t.parameter(b)));
                               }),
            kGradTol);

  Tensor targets({2, 2}, std::vector<double>{1, 0, 0, 1});
  Parameter logits = random_param("l", {2, 2}, 21, -2.0, 2.0);
  EXPECT_LT(max_gradient_error({&logits},
                               [&](Tape& t) { return ops::sigmoid_binary_cross_entropy(t, t.parameter(logits), targets); }),
            kGradTol);
  EXPECT_LT(max_gradient_error({&logits},
                               [&](Tape& t) { return ops::mean_squared_error(t, t.parameter(logits), targets); }),
            kGradTol);
  EXPECT_LT(max_gradient_error({&x}, [&](Tape& t) { return project(t, ops::select_row(t, t.parameter(x), 2)); }),
            kGradTol);
  Parameter positive = random_param("positive", {3, 4}, 24);
  for (double& v : positive.value.data) v = std::abs(v) + 0.1;
  EXPECT_LT(max_gradient_error({&positive},
                               [&](Tape& t) { return project(t, ops::normalize_rows(t, t.parameter(positive))); }),
            kGradTol);

  Parameter a = random_param("a", {1, 3}, 22);
  Parameter c = random_param("c", {2, 3}, 23);
  EXPECT_LT(max_gradient_error({&a, &c},
                               [&](Tape& t) {
                                 Var s = ops::stack_rows(t, {t.parameter(a), t.parameter(c)});
                                 return project(t, ops::concat_cols(t, {s, ops::scale(t, s, 2.0)}));
                               }),
            kGradTol);
}

TEST(Forward, IdentityDenseReturnsInput) {
  Rng rng(1);
  Dense d("id", 3, 3, Activation::linear, rng);
  d.weight.value = Tensor({3, 3}, std::vector<double>{1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape t;
  Tensor in({2, 3}, std::vector<double>{1.5, -2, 3, 0, 4, -1});
  EXPECT_EQ(t.value(d.forward(t, t.constant(in))), in);
}

TEST(Forward, SoftmaxRowsSumToOne) {
  Rng rng(2);
  Tensor z = Tensor::matrix(20, 7);
  for (double& v : z.data) v = rng.uniform(-50, 50);
  const Tensor p = softmax_rows(z);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0;
    for (double v : p.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Forward, Conv2dMatchesSlidingDotProducts) {
  Tensor x({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) x.data[i] = static_cast<double>(i + 1);
  Tensor k({1, 1, 3, 3}, std::vector<double>{1, 0, -1, 2, 0, -2, 1, 0, -1});
  Tape t;
  const Tensor& y = t.value(ops::conv2d(t, t.constant(x), t.constant(k), t.constant(Tensor({1}, 0.5))));
  // Brute force: zero padding, out[i][j] = sum_ab k[a][b] * x[i+a-1][j+b-1].
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double expect = 0.5;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          const int r = i + a - 1, c = j + b - 1;
          if (r < 0 || r >= 4 || c < 0 || c >= 4) continue;
          expect += k.data[a * 3 + b] * x.data[r * 4 + c];
        }
      EXPECT_DOUBLE_EQ(y.data[i * 4 + j], expect) << i << "," << j;
    }
}

TEST(Forward, ShapeMismatchIsReported) {
  Tape t;
  EXPECT_THROW(ops::matmul(t, t.constant(Tensor::matrix(2, 3)), t.constant(Tensor::matrix(4, 2))), ShapeError);
  Rng rng(1);
  Mlp net("m", 5, {4}, 2, Hyperparams{}, rng);
  EXPECT_THROW(net.logits(t, t.constant(Tensor::matrix(1, 3)), Mode{}), ShapeError);
}

TEST(Forward, MaxPoolShapeIsCeilDivision) {
  Tape t;
  const Tensor& y = t.value(ops::max_pool2d(t, t.constant(Tensor({1, 61, 61})), 8));
  EXPECT_EQ(y.shape, (Shape{1, 8, 8}));
}

TEST(Forward, AttentionHandComputedWeights) {
  // hidden (1,0) and (0,1) with context (1,0) give scores (1, 0).
  const AttentionResult r = attention_pool({{1.0, 0.0}, {0.0, 1.0}}, std::vector<double>{1.0, 0.0});
  const double e = std::exp(1.0);
  EXPECT_NEAR(r.weights[0], e / (e + 1), 1e-12);
  EXPECT_NEAR(r.weights[1], 1 / (e + 1), 1e-12);
  EXPECT_NEAR(r.weights[0], 0.7311, 1e-4);

  const AttentionResult same = attention_pool({{0.3, 0.2}, {0.3, 0.2}}, std::vector<double>{1.0, -1.0});
  EXPECT_DOUBLE_EQ(same.weights[0], 0.5);
  EXPECT_DOUBLE_EQ(same.weights[1], 0.5);
  EXPECT_THROW(attention_pool({{1.0}}, std::vector<double>{1.0, 2.0}), ShapeError);
}

TEST(Forward, AttentionWeightsFormConvexCombination) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t T = 1 + rng.index(10), h = 1 + rng.index(6);
    std::vector<std::vector<double>> hidden(T, std::vector<double>(h));
    for (auto& row : hidden)
      for (double& v : row) v = rng.uniform(-3, 3);
    std::vector<double> ctx(h);
    for (double& v : ctx) v = rng.uniform(-3, 3);
    const AttentionResult r = attention_pool(hidden, ctx);
    double s = 0;
    for (double w : r.weights) {
      EXPECT_GT(w, 0.0);
      EXPECT_LE(w, 1.0);
      s += w;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    for (std::size_t k = 0; k < h; ++k) {
      double lo = 1e300, hi = -1e300;
      for (const auto& row : hidden) lo = std::min(lo, row[k]), hi = std::max(hi, row[k]);
      EXPECT_GE(r.pooled[k], lo - 1e-12);
      EXPECT_LE(r.pooled[k], hi + 1e-12);
    }
  }
}

TEST(Forward, EvaluationModeIsDeterministic) {
  Hyperparams hp;
  hp.dropout = 0.5;
  hp.batchnorm = true;
  Rng rng(3);
  Mlp net("m", 4, {8}, 3, hp, rng);
  Tensor x = Tensor::matrix(5, 4, 0.7);
  Tape a, b;
  EXPECT_EQ(a.value(net.logits(a, a.constant(x), Mode{})), b.value(net.logits(b, b.constant(x), Mode{})));
}

// Two Gaussian blobs on either side of the origin.
struct Toy {
  Tensor x = Tensor::matrix(40, 2);
  std::vector<int> y;
  std::vector<std::size_t> train, val;
  Toy() {
    Rng rng(17);
    for (std::size_t i = 0; i < 40; ++i) {
      const int c = static_cast<int>(i % 2);
      y.push_back(c);
      x(i, 0) = (c ? 2.0 : -2.0) + 0.5 * rng.normal();
      x(i, 1) = 0.5 * rng.normal();
      (i < 30 ? train : val).push_back(i);
    }
  }
};

TEST(Training, ZeroLearningRateLeavesWeightsUnchanged) {
  Toy toy;
  Hyperparams hp;
  hp.learning_rate = 0.0;
  hp.weight_decay = 0.001;
  hp.epochs = 3;
  Rng rng(1);
  Mlp net("m", 2, {4}, 2, hp, rng);
  const Mlp before = net;
  MlpClassifierTask task{net, toy.x, toy.y};
  train(task, toy.train, toy.val, hp);
  std::vector<Parameter*> a, b;
  net.collect(a);
  const_cast<Mlp&>(before).collect(b);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i]->value, b[i]->value);
}

TEST(Training, SeparableToyLossStrictlyDecreases) {
  Toy toy;
  Hyperparams hp;
  hp.learning_rate = 0.01;
  hp.epochs = 10;
  hp.batch_size = 64;
  hp.patience = 100;
  Rng rng(2);
  Mlp net("m", 2, {8}, 2, hp, rng);
  MlpClassifierTask task{net, toy.x, toy.y};
  const TrainHistory h = train(task, toy.train, {}, hp);
  ASSERT_EQ(h.train_loss.size(), 10u);
  for (std::size_t i = 1; i < h.train_loss.size(); ++i) EXPECT_LT(h.train_loss[i], h.train_loss[i - 1]);
}

TEST(Training, EveryTrainableParameterReceivesGradient) {
  Hyperparams hp;
  hp.batchnorm = true;
  Rng rng(4);
  Mlp net("m", 3, {5, 4}, 2, hp, rng);
  Tensor x = Tensor::matrix(6, 3);
  for (double& v : x.data) v = rng.uniform(-1, 1);
  const std::vector<int> y{0, 1, 0, 1, 1, 0};
  Tape t;
  Var loss = ops::softmax_cross_entropy(t, net.logits(t, t.constant(x), Mode{true, &rng}), y);
  t.backward(loss);
  std::vector<Parameter*> params;
  net.collect(params);
  for (Parameter* p : params) EXPECT_NE(t.parameter_grad(*p), nullptr) << p->name;
}

TEST(Training, FrozenParametersAreNotUpdated) {
  Toy toy;
  Hyperparams hp;
  hp.epochs = 3;
  Rng rng(3);
  Mlp net("m", 2, {4}, 2, hp, rng);
  net.head().weight.trainable = false;
  const Tensor frozen = net.head().weight.value;
  MlpClassifierTask task{net, toy.x, toy.y};
  train(task, toy.train, toy.val, hp);
  EXPECT_EQ(net.head().weight.value, frozen);
}

TEST(Training, SameSeedReproducesAndBestWeightsAreRestored) {
  Toy toy;
  Hyperparams hp;
  hp.epochs = 25;
  hp.learning_rate = 0.05;
  hp.dropout = 0.2;
  hp.batch_size = 8;
  hp.patience = 5;
  auto run = [&] {
    Rng rng(5);
    Mlp net("m", 2, {16}, 2, hp, rng);
    MlpClassifierTask task{net, toy.x, toy.y};
    TrainHistory h = train(task, toy.train, toy.val, hp);
    const double restored = evaluate_task(task, toy.val, 64).loss;
    return std::make_pair(h, restored);
  };
  const auto [h1, restored1] = run();
  const auto [h2, restored2] = run();
  EXPECT_EQ(h1.train_loss, h2.train_loss);
  EXPECT_EQ(h1.val_loss, h2.val_loss);
  EXPECT_EQ(restored1, restored2);
  EXPECT_LE(h1.train_loss.size(), hp.epochs);
  EXPECT_LE(restored1, h1.val_loss.back() + 1e-12);
  EXPECT_NEAR(restored1, h1.best_val_loss, 1e-12);
}

TEST(Training, NonFiniteLossRaises) {
  Toy toy;
  Tensor bad = toy.x;
  bad(0, 0) = std::nan("");
  Hyperparams hp;
  hp.epochs = 1;
  hp.batch_size = 64;
  hp.activation = Activation::tanh;
  Rng rng(1);
  Mlp net("m", 2, {4}, 2, hp, rng);
  MlpClassifierTask task{net, bad, toy.y};
  EXPECT_THROW(train(task, toy.train, {}, hp), TrainingError);
}

TEST(RandomSearch, SingleTrialAndRanges) {
  Hyperparams base;
  int calls = 0;
  const SearchResult one = random_search(SearchSpace{}, base, 1, 7, [&](const Hyperparams&) {
    ++calls;
    return 0.25;
  });
  EXPECT_EQ(calls, 1);
  EXPECT_EQ(one.trials.size(), 1u);
  EXPECT_EQ(one.best.dropout, one.trials[0].first.dropout);

  const SearchResult many = random_search(SearchSpace{}, base, 200, 8, [](const Hyperparams& hp) { return hp.dropout; });
  for (const auto& [hp, score] : many.trials) {
    EXPECT_GE(hp.dropout, 0.0);
    EXPECT_LE(hp.dropout, 0.5);
    EXPECT_GE(hp.weight_decay, 0.0);
    EXPECT_LE(hp.weight_decay, 0.001);
    EXPECT_NO_THROW(hp.validate());
  }
}

TEST(RandomSearch, LongerSearchNeverWorse) {
  Toy toy;
  Hyperparams base;
  base.epochs = 5;
  auto objective = [&](const Hyperparams& hp) {
    Rng rng(hp.seed);
    Mlp net("m", 2, {8}, 2, hp, rng);
    MlpClassifierTask task{net, toy.x, toy.y};
    train(task, toy.train, toy.val, hp);
    return evaluate_task(task, toy.val, 64).accuracy;
  };
  const SearchResult one = random_search(SearchSpace{}, base, 1, 3, objective);
  const SearchResult twenty = random_search(SearchSpace{}, base, 20, 3, objective);
  EXPECT_EQ(one.trials[0].second, twenty.trials[0].second);
  EXPECT_GE(twenty.best_score, one.best_score);
}

TEST(Archive, RoundTripsNamedArrays) {
  ModelArchive a;
  a.kind = "test";
  a.meta["width"] = 3;
  a.add("w", Tensor({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6.5}));
  a.add("b", Tensor({3}, std::vector<double>{-1, 0, 1e-300}));
  const ModelArchive b = ModelArchive::from_bytes(a.to_bytes());
  EXPECT_EQ(b.kind, "test");
  EXPECT_EQ(b.meta["width"], 3);
  EXPECT_EQ(b.get("w"), a.get("w"));
  EXPECT_EQ(b.get("b"), a.get("b"));
  EXPECT_THROW(ModelArchive::from_bytes("garbage"), Error);
  Parameter wrong{"w", Tensor({3, 2})};
  EXPECT_THROW(b.load_into(wrong), ShapeError);
}

}  // namespace
}  // namespace malfuse

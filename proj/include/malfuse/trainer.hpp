#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "malfuse/autodiff.hpp"
#include "malfuse/layers.hpp"
#include "malfuse/rng.hpp"

namespace malfuse {

// Adaptive-moment gradient descent with coupled L2 weight decay.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double learning_rate, double weight_decay = 0.0, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);

  void step(const std::vector<Tensor>& grads);
  std::size_t steps() const { return step_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  std::size_t step_ = 0;
};

// Scales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_gradients(std::vector<Tensor>& grads, double max_norm);

struct BatchResult {
  Var loss;                 // scalar, summed over the batch
  std::size_t correct = 0;  // argmax hits, for classification tasks
};

// A task binds a model to its data: it exposes the model's parameters and
// records the summed loss of a batch of example indices on a tape.
template <class Task>
concept TrainingTask = requires(Task& task, Tape& t, std::span<const std::size_t> idx, const Mode& m) {
  { task.parameters() } -> std::convertible_to<std::vector<Parameter*>>;
  { task.batch(t, idx, m) } -> std::same_as<BatchResult>;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;
  std::size_t best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

template <TrainingTask Task>
EvalResult evaluate_task(Task& task, std::span<const std::size_t> idx, std::size_t batch_size) {
  EvalResult r;
  if (idx.empty()) return r;
  double loss = 0.0;
  std::size_t correct = 0;
  Mode mode{false, nullptr};
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    Tape tape;
    BatchResult b = task.batch(tape, idx.subspan(start, end - start), mode);
    loss += tape.value(b.loss).data[0];
    correct += b.correct;
  }
  r.loss = loss / static_cast<double>(idx.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  return r;
}

// Mini-batch training with early stopping on validation loss. The weights
// of the best validation epoch are restored before returning. Without a
// validation set the training loss drives the selection.
template <TrainingTask Task>
TrainHistory train(Task& task, std::span<const std::size_t> train_idx, std::span<const std::size_t> val_idx,
                   const Hyperparams& hp) {
  hp.validate();
  TrainHistory history;
  std::vector<Parameter*> trainable;
  for (Parameter* p : task.parameters())
    if (p->trainable) trainable.push_back(p);
  if (trainable.empty() || train_idx.empty()) return history;

  Adam adam(trainable, hp.learning_rate, hp.weight_decay);
  GradientBuffer grads(trainable);
  std::vector<Tensor> best;
  best.reserve(trainable.size());
  for (Parameter* p : trainable) best.push_back(p->value);

  std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(hp.seed, {0x5eed, epoch}));
    Rng dropout_rng(derive_seed(hp.seed, {0xd409, epoch}));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      Tape tape;
      Mode mode{true, &dropout_rng};
      BatchResult r = task.batch(tape, batch, mode);
      const double loss = tape.value(r.loss).data[0];
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += loss;
      tape.backward(r.loss, 1.0 / static_cast<double>(batch.size()));
      grads.zero();
      grads.add_from(tape);
      if (hp.clip_norm > 0.0) clip_gradients(grads.grads(), hp.clip_norm);
      adam.step(grads.grads());
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));

    double selection = history.train_loss.back();
    if (!val_idx.empty()) {
      EvalResult v = evaluate_task(task, val_idx, hp.batch_size);
      if (!std::isfinite(v.loss)) throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
      history.val_loss.push_back(v.loss);
      history.val_accuracy.push_back(v.accuracy);
      selection = v.loss;
    }
    if (selection < history.best_val_loss) {
      history.best_val_loss = selection;
      history.best_epoch = epoch;
      for (std::size_t i = 0; i < trainable.size(); ++i) best[i] = trainable[i]->value;
      since_best = 0;
    } else if (++since_best >= hp.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i]->value = best[i];
  return history;
}

// Index of the largest value; ties resolve to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Supervised classification of the rows of a feature matrix.
struct MlpClassifierTask {
  Mlp& net;
  const Tensor& inputs;
  std::span<const int> labels;

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> p;
    net.collect(p);
    return p;
  }

  BatchResult batch(Tape& t, std::span<const std::size_t> idx, const Mode& mode) {
    Var logits = net.logits(t, t.constant(gather_rows(inputs, idx)), mode);
    std::vector<int> ys;
    ys.reserve(idx.size());
    for (std::size_t i : idx) ys.push_back(labels[i]);
    BatchResult r{ops::softmax_cross_entropy(t, logits, ys), 0};
    const Tensor& z = t.value(logits);
    for (std::size_t i = 0; i < idx.size(); ++i)
      if (static_cast<int>(argmax(z.row(i))) == ys[i]) ++r.correct;
    return r;
  }
};

}  // namespace malfuse

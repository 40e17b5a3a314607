#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cpnet/model.hpp"
#include "cpnet/toy_data.hpp"

namespace cpnet {

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 32;
  // 1e-3 leaves the zero-initialized CP gamma too small to matter within 60
  // epochs; at 1e-2 the CP path takes over after a handful of epochs.
  float learning_rate = 1e-2f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_epsilon = 1e-8f;
  std::uint64_t seed = 0;
  /// Stop once an epoch's running train accuracy reaches this value.
  double early_stop_train_accuracy = 1.0;

  void validate() const;
};

class Adam {
 public:
  Adam(std::vector<Parameter*> params, float lr, float beta1, float beta2, float eps);
  /// Applies one update from the accumulated gradients.
  void step();
  void zero_grad();

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  float lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double val_loss = 0;
  double val_accuracy = 0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;  // index into history
  const EpochMetrics& best() const { return history.at(best_epoch); }
};

/// Mini-batch Adam on softmax cross-entropy. Train accuracy is the running
/// accuracy of the epoch's train-mode forward passes; validation runs in eval
/// mode. On return the model holds the parameters of the best validation
/// epoch (earliest on ties). Throws NumericError when the loss diverges.
TrainResult train(ToyModel& model, const ToyDataset& data, const TrainConfig& config,
                  const std::function<void(const EpochMetrics&)>& on_epoch = {});

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
};

/// Eval-mode pass over `samples` in fixed batches.
Evaluation evaluate(ToyModel& model, std::span<const ToySample> samples, std::size_t batch_size = 50);

/// Fraction of rows whose arg-max logit (first on ties) equals the label.
double top1_accuracy(const Tensor& logits, std::span<const int> labels);

std::vector<int> labels_of(std::span<const ToySample> samples);

/// CSV with header epoch,split,loss,accuracy and two rows per epoch.
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history);

}  // namespace cpnet

#include "cpnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include "cpnet/errors.hpp"

namespace cpnet {

void TrainConfig::validate() const {
  require(epochs >= 1, "epochs must be at least 1");
  require(batch_size >= 2, "batch_size must be at least 2 (batch normalization needs a population)");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0f, "learning rate must be finite and non-negative");
  require(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f, "Adam betas must lie in [0, 1)");
  require(adam_epsilon > 0.0f, "Adam epsilon must be positive");
}

Adam::Adam(std::vector<Parameter*> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step() {
  ++t_;
  const float c1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
  const float c2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto w = params_[i]->value.data();
    auto g = params_[i]->grad.data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0f - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0f - beta2_) * g[j] * g[j];
      const float mhat = m[j] / c1;
      const float vhat = v[j] / c2;
      w[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::vector<int> labels_of(std::span<const ToySample> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(static_cast<int>(s.label));
  return out;
}

double top1_accuracy(const Tensor& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(), "top1_accuracy: logits/labels mismatch");
  require(!labels.empty(), "top1_accuracy: empty split");
  const std::size_t K = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const float* row = logits.ptr() + n * K;
    const auto pred = std::max_element(row, row + K) - row;
    correct += pred == labels[n];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  return static_cast<std::size_t>(std::lround(top1_accuracy(logits, labels) * static_cast<double>(labels.size())));
}

}  // namespace

Evaluation evaluate(ToyModel& model, std::span<const ToySample> samples, std::size_t batch_size) {
  require(!samples.empty(), "evaluate: empty split");
  require(batch_size >= 1, "evaluate: batch size must be positive");
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < samples.size(); lo += batch_size) {
    const auto chunk = samples.subspan(lo, std::min(batch_size, samples.size() - lo));
    const auto labels = labels_of(chunk);
    Tape tape;
    Var logits = model.forward(tape, make_batch(chunk), Mode::Eval, false);
    auto ce = softmax_cross_entropy(logits, labels);
    loss_sum += static_cast<double>(ce.loss.value()[0]) * static_cast<double>(chunk.size());
    correct += count_correct(logits.value(), labels);
  }
  const double n = static_cast<double>(samples.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

TrainResult train(ToyModel& model, const ToyDataset& data, const TrainConfig& config,
                  const std::function<void(const EpochMetrics&)>& on_epoch) {
  config.validate();
  require(!data.train.empty(), "train: empty training split");
  require(!data.val.empty(), "train: empty validation split");

  std::mt19937_64 rng(config.seed);
  Adam opt(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_epsilon);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::vector<NamedTensor> best_state;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
      std::size_t hi = std::min(order.size(), lo + config.batch_size);
      if (hi - lo < 2) continue;  // a lone trailing sample cannot be batch-normalized
      const std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(static_cast<int>(data.train[i].label));

      Tape tape;
      Var logits = model.forward(tape, make_batch(data.train, idx), Mode::Train, true);
      auto ce = softmax_cross_entropy(logits, labels);
      const float loss = ce.loss.value()[0];
      if (!std::isfinite(loss))
        throw NumericError("training diverged: loss is " + std::to_string(loss) + " at epoch " + std::to_string(epoch));
      opt.zero_grad();
      tape.backward(ce.loss);
      opt.step();
      loss_sum += static_cast<double>(loss) * static_cast<double>(idx.size());
      correct += count_correct(logits.value(), labels);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());
    const auto val = evaluate(model, data.val);
    m.val_loss = val.loss;
    m.val_accuracy = val.accuracy;
    if (!std::isfinite(m.val_loss)) throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch));

    result.history.push_back(m);
    if (result.history.size() == 1 || m.val_accuracy > result.best().val_accuracy) {
      result.best_epoch = result.history.size() - 1;
      best_state = model.state();
    }
    if (on_epoch) on_epoch(m);
    if (m.train_accuracy >= config.early_stop_train_accuracy) break;
  }
  model.load_state(best_state);
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open metrics file for writing: " + path);
  out << "epoch,split,loss,accuracy\n" << std::setprecision(9);
  for (const auto& m : history) {
    out << m.epoch << ",train," << m.train_loss << ',' << m.train_accuracy << '\n';
    out << m.epoch << ",val," << m.val_loss << ',' << m.val_accuracy << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace cpnet

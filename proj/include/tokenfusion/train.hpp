#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "tokenfusion/data.hpp"
#include "tokenfusion/errors.hpp"
#include "tokenfusion/layers.hpp"
#include "tokenfusion/model.hpp"
#include "tokenfusion/ops.hpp"
#include "tokenfusion/rng.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

enum class OptimAlgorithm { SgdMomentum, Adam };

inline std::string to_string(OptimAlgorithm a) {
  return a == OptimAlgorithm::SgdMomentum ? "sgd_momentum" : "adam";
}

inline OptimAlgorithm optim_algorithm_from_string(const std::string& s) {
  if (s == "sgd_momentum") return OptimAlgorithm::SgdMomentum;
  if (s == "adam") return OptimAlgorithm::Adam;
  throw ConfigError("unknown optimizer algorithm: " + s);
}

struct OptimConfig {
  OptimAlgorithm algorithm = OptimAlgorithm::Adam;
  double learning_rate = 3e-4;
  double weight_decay = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int64_t batch_size = 32;
  int64_t epochs = 1;

  void validate() const {
    require(learning_rate > 0.0, "optim: learning rate must be positive");
    require(batch_size >= 1, "optim: batch size must be positive");
    require(epochs >= 0, "optim: negative epoch count");
    require(weight_decay >= 0.0, "optim: negative weight decay");
  }
};

struct EpochMetrics {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double train_acc1 = 0.0;
  double val_acc1 = 0.0;
  double val_acc5 = 0.0;
  double wall_ms = 0.0;
};

/// Mean negative log-likelihood of the true classes, fused with a
/// log-sum-exp stabilized softmax. Backward is (softmax - onehot) / B.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int64_t>& labels) {
  require(logits.rank() == 2, "cross_entropy: logits must be (B,K), got " +
                                  shape_str(logits.shape()));
  const int64_t B = logits.extent(0), K = logits.extent(1);
  require(static_cast<int64_t>(labels.size()) == B,
          "cross_entropy: label count does not match batch");
  for (int64_t b = 0; b < B; ++b)
    require(labels[static_cast<size_t>(b)] >= 0 && labels[static_cast<size_t>(b)] < K,
            "cross_entropy: label out of range");

  Tensor<T> out = Tensor<T>::scalar(T(0));
  const T* xd = logits.data().data();
  double total = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const T* row = xd + b * K;
    T mx = row[0];
    for (int64_t i = 1; i < K; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int64_t i = 0; i < K; ++i) sum += std::exp(static_cast<double>(row[i] - mx));
    const double lse = static_cast<double>(mx) + std::log(sum);
    total += lse - static_cast<double>(row[labels[static_cast<size_t>(b)]]);
  }
  out.data()[0] = static_cast<T>(total / static_cast<double>(B));

  Tensor<T> xc = logits, oc = out;
  std::vector<int64_t> lab = labels;
  detail::finish_op<T>("cross_entropy", {logits}, out, [xc, oc, lab, B, K]() mutable {
    if (!xc.requires_grad()) return;
    const T g = oc.grad()[0];
    xc.ensure_grad();
    auto gx = xc.grad();
    const T* xd2 = xc.data().data();
    for (int64_t b = 0; b < B; ++b) {
      const T* row = xd2 + b * K;
      T mx = row[0];
      for (int64_t i = 1; i < K; ++i) mx = std::max(mx, row[i]);
      double sum = 0.0;
      for (int64_t i = 0; i < K; ++i) sum += std::exp(static_cast<double>(row[i] - mx));
      for (int64_t i = 0; i < K; ++i) {
        const double p = std::exp(static_cast<double>(row[i] - mx)) / sum;
        const double onehot = (i == lab[static_cast<size_t>(b)]) ? 1.0 : 0.0;
        gx[b * K + i] += static_cast<T>(static_cast<double>(g) * (p - onehot) /
                                        static_cast<double>(B));
      }
    }
  });
  return out;
}

/// Fraction of rows whose true label ranks in the top k logits. Ties resolve
/// toward the lower class index, so results are deterministic.
template <typename T>
double evaluate_topk(const Tensor<T>& logits, const std::vector<int64_t>& labels, int64_t k) {
  require(logits.rank() == 2, "evaluate_topk: logits must be (B,K)");
  const int64_t B = logits.extent(0), K = logits.extent(1);
  require(static_cast<int64_t>(labels.size()) == B,
          "evaluate_topk: label count does not match batch");
  require(k >= 1, "evaluate_topk: k must be >= 1");
  const int64_t kk = std::min(k, K);
  const T* xd = logits.data().data();
  int64_t hits = 0;
  for (int64_t b = 0; b < B; ++b) {
    const T* row = xd + b * K;
    const int64_t lab = labels[static_cast<size_t>(b)];
    const T ref = row[lab];
    // Rank of the label under "higher logit first, lower index breaks ties".
    int64_t ahead = 0;
    for (int64_t i = 0; i < K; ++i) {
      if (row[i] > ref || (row[i] == ref && i < lab)) ++ahead;
    }
    if (ahead < kk) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(B);
}

/// Per-tensor optimizer state plus the update rules. SGD: v <- mu v + g,
/// p <- p - lr (v + wd p). Adam: bias-corrected moments with decoupled decay.
template <typename T>
class Optimizer {
 public:
  // No config validation here: a zero learning rate is a legitimate no-op
  // update at this level. Run-level validation happens in run_training.
  Optimizer(const OptimConfig& cfg, const ParamRegistry<T>& reg) : cfg_(cfg) {
    for (const auto& [name, t] : reg.entries()) {
      params_.push_back(t);
      slot1_.emplace_back(static_cast<size_t>(t.numel()), T(0));
      slot2_.emplace_back(static_cast<size_t>(t.numel()), T(0));
    }
  }

  void step() {
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.requires_grad()) continue;
      auto pd = p.data();
      const bool has_grad = p.has_grad();
      for (int64_t j = 0; j < p.numel(); ++j) {
        const double g = has_grad ? static_cast<double>(p.grad()[j]) : 0.0;
        const double w = static_cast<double>(pd[j]);
        double upd = 0.0;
        if (cfg_.algorithm == OptimAlgorithm::SgdMomentum) {
          double v = static_cast<double>(slot1_[i][static_cast<size_t>(j)]);
          v = cfg_.momentum * v + g;
          slot1_[i][static_cast<size_t>(j)] = static_cast<T>(v);
          upd = cfg_.learning_rate * (v + cfg_.weight_decay * w);
        } else {
          double m = static_cast<double>(slot1_[i][static_cast<size_t>(j)]);
          double v = static_cast<double>(slot2_[i][static_cast<size_t>(j)]);
          m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
          v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
          slot1_[i][static_cast<size_t>(j)] = static_cast<T>(m);
          slot2_[i][static_cast<size_t>(j)] = static_cast<T>(v);
          const double mhat = m / (1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
          const double vhat = v / (1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
          upd = cfg_.learning_rate *
                (mhat / (std::sqrt(vhat) + cfg_.adam_eps) + cfg_.weight_decay * w);
        }
        pd[j] = static_cast<T>(w - upd);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  OptimConfig cfg_;
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> slot1_;  // momentum / first moment
  std::vector<std::vector<T>> slot2_;  // unused for sgd / second moment
  int64_t t_ = 0;
};

struct SplitMetrics {
  double loss = 0.0;
  double acc1 = 0.0;
  double acc5 = 0.0;
};

/// Runs loss and top-k evaluation over a whole split in fixed-size batches.
template <typename T>
SplitMetrics evaluate_split(FusionModel<T>& model, const std::vector<Sample>& split,
                            int64_t batch_size, int64_t image_size) {
  require(!split.empty(), "evaluate_split: empty split");
  SplitMetrics out;
  int64_t seen = 0;
  for (size_t start = 0; start < split.size(); start += static_cast<size_t>(batch_size)) {
    const size_t stop = std::min(split.size(), start + static_cast<size_t>(batch_size));
    std::vector<int64_t> idx(stop - start);
    std::iota(idx.begin(), idx.end(), static_cast<int64_t>(start));
    Tensor<T> batch = preprocess_batch<T>(split, idx, image_size);
    std::vector<int64_t> labels;
    labels.reserve(idx.size());
    for (int64_t i : idx) labels.push_back(split[static_cast<size_t>(i)].label);
    Tensor<T> logits = model.forward(batch);
    const int64_t n = static_cast<int64_t>(idx.size());
    out.loss += static_cast<double>(cross_entropy(logits, labels).item()) * static_cast<double>(n);
    out.acc1 += evaluate_topk(logits, labels, 1) * static_cast<double>(n);
    out.acc5 += evaluate_topk(logits, labels, 5) * static_cast<double>(n);
    seen += n;
  }
  out.loss /= static_cast<double>(seen);
  out.acc1 /= static_cast<double>(seen);
  out.acc5 /= static_cast<double>(seen);
  return out;
}

/// One seeded pass over the data per epoch: shuffle, augment, forward,
/// cross-entropy, backward, optimizer step; then an un-augmented evaluation
/// of the validation split. The callback sees each epoch's metrics as they
/// are produced (the CLI streams them to disk).
template <typename T>
std::vector<EpochMetrics> run_training(
    FusionModel<T>& model, const Dataset& data, const OptimConfig& optim_cfg,
    const AugmentConfig& augment_cfg, uint64_t seed,
    const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  optim_cfg.validate();
  augment_cfg.validate();
  if (data.train.empty()) throw DatasetError("run_training: empty training split");
  if (data.val.empty()) throw DatasetError("run_training: empty validation split");

  const int64_t S = model.config().image_h;
  require(model.config().image_w == S, "run_training: square inputs expected");

  Optimizer<T> opt(optim_cfg, model.params());
  Rng rng(seed);
  std::vector<EpochMetrics> history;

  std::vector<int64_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int64_t epoch = 0; epoch < optim_cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Seeded Fisher-Yates; the rng stream continues across epochs.
    for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
      const int64_t j = rng.uniform_int(i + 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }

    double loss_sum = 0.0;
    double acc1_sum = 0.0;
    int64_t batches = 0, seen = 0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(optim_cfg.batch_size)) {
      const size_t stop =
          std::min(order.size(), start + static_cast<size_t>(optim_cfg.batch_size));
      std::vector<Sample> staged;
      std::vector<int64_t> labels;
      staged.reserve(stop - start);
      for (size_t i = start; i < stop; ++i) {
        const Sample& raw = data.train[static_cast<size_t>(order[i])];
        staged.push_back(augment(raw, augment_cfg, rng));
        labels.push_back(raw.label);
      }
      std::vector<int64_t> idx(staged.size());
      std::iota(idx.begin(), idx.end(), 0);
      Tensor<T> batch = preprocess_batch<T>(staged, idx, S);

      model.params().zero_grads();
      Tensor<T> loss;
      {
        TapeScope<T> scope;
        Tensor<T> logits = model.forward(batch);
        loss = cross_entropy(logits, labels);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) throw NumericalError("run_training: non-finite loss");
        acc1_sum += evaluate_topk(logits, labels, 1) * static_cast<double>(labels.size());
        backward(loss, scope.tape);
      }
      opt.step();
      loss_sum += static_cast<double>(loss.item());
      seen += static_cast<int64_t>(labels.size());
      ++batches;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / static_cast<double>(batches);
    m.train_acc1 = acc1_sum / static_cast<double>(seen);
    const SplitMetrics val = evaluate_split(model, data.val, optim_cfg.batch_size, S);
    m.val_acc1 = val.acc1;
    m.val_acc5 = val.acc5;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

}  // namespace tokenfusion

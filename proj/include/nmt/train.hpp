#pragma once

#include <functional>
#include <string>
#include <vector>

#include "nmt/model.hpp"

namespace nmt {

// Bias-corrected moment-adaptive optimizer. Each parameter's step uses
// lr * Parameter::lr_scale.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(const ParameterStore& params) : Adam(params, Options{}) {}
  Adam(const ParameterStore& params, Options options);

  void step(ParameterStore& params, double lr);

  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

 private:
  Options options_;
  std::vector<Tensor> m_, v_;
  std::uint64_t t_ = 0;
};

// Learning rate for a 1-indexed epoch: base_lr scaled by lr_decay_factor once
// for every decay epoch already completed.
double learning_rate(const TrainConfig& config, std::size_t epoch);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct ClassAccuracy {
  int class_id = 0;
  std::size_t pairs = 0;
  double accuracy = 0.0;  // mean per-pair accuracy in [0, 1]
};

struct EvalReport {
  std::vector<ClassAccuracy> classes;  // sorted by class id
  double mean_accuracy = 0.0;          // unweighted mean over classes
  std::size_t pairs = 0;
  std::size_t non_injective = 0;

  std::string to_text() const;
  std::string to_json() const;
};

EvalReport evaluate(const MatchingModel& model, const std::vector<PairRecord>& pairs,
                    std::size_t threads = 0);

// Runs fn(i) for i in [0, n) over `threads` workers (0: hardware concurrency).
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// Mean loss and mean gradient over a batch; per-pair gradients are reduced in
// batch order so the result does not depend on the thread count.
double batch_gradient(const MatchingModel& model, const std::vector<const PairRecord*>& batch,
                      std::size_t threads, GradientBuffer& out);

class TrainingAborted : public Error {
 public:
  using Error::Error;
};

class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochMetrics&, const Trainer&)>;

  Trainer(MatchingModel& model, const TrainConfig& config);

  // One optimizer step on `batch`; returns the mean loss.
  double step(const std::vector<const PairRecord*>& batch, double lr);

  // Full schedule. Throws TrainingAborted on a non-finite loss after restoring
  // the parameters from the start of the failing epoch.
  std::vector<EpochMetrics> run(const std::vector<PairRecord>& train,
                                const std::vector<PairRecord>& val,
                                const EpochCallback& on_epoch = {});

  const MatchingModel& model() const { return model_; }
  Adam& optimizer() { return adam_; }
  const Adam& optimizer() const { return adam_; }
  const std::vector<EpochMetrics>& history() const { return history_; }
  std::size_t epoch() const { return history_.size(); }

 private:
  MatchingModel& model_;
  TrainConfig config_;
  Adam adam_;
  GradientBuffer grads_;
  std::vector<EpochMetrics> history_;
};

}  // namespace nmt

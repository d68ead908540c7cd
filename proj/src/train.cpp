#include "nmt/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace nmt {

Adam::Adam(const ParameterStore& params, Options options) : options_(options) {
  for (const auto& p : params) {
    m_.emplace_back(p.value.shape(), 0.0);
    v_.emplace_back(p.value.shape(), 0.0);
  }
}

void Adam::step(ParameterStore& params, double lr) {
  if (m_.size() != params.size()) throw ContractError("optimizer state does not match parameters");
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  std::size_t idx = 0;
  for (auto& p : params) {
    Tensor& m = m_[idx];
    Tensor& v = v_[idx];
    ++idx;
    if (!p.trainable) continue;
    const double step_lr = lr * p.lr_scale;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
      const double mhat = m[i] / bc1, vhat = v[i] / bc2;
      p.value[i] -= step_lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

double learning_rate(const TrainConfig& config, std::size_t epoch) {
  double lr = config.base_lr;
  for (std::size_t d : config.lr_decay_epochs) {
    if (epoch > d) lr *= config.lr_decay_factor;
  }
  return lr;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double batch_gradient(const MatchingModel& model, const std::vector<const PairRecord*>& batch,
                      std::size_t threads, GradientBuffer& out) {
  if (batch.empty()) throw ContractError("empty batch");
  std::vector<GradientBuffer> per_pair(batch.size(), GradientBuffer(model.params()));
  std::vector<double> losses(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    losses[i] = model.loss(*batch[i], &per_pair[i]).total;
  });
  out = GradientBuffer(model.params());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    out.add(per_pair[i]);
    total += losses[i];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.scale(inv);
  return total * inv;
}

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "class" << std::right << std::setw(8) << "pairs"
     << std::setw(12) << "accuracy" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& c : classes) {
    os << std::left << std::setw(8) << c.class_id << std::right << std::setw(8) << c.pairs
       << std::setw(11) << 100.0 * c.accuracy << "%\n";
  }
  os << std::left << std::setw(8) << "mean" << std::right << std::setw(8) << pairs << std::setw(11)
     << 100.0 * mean_accuracy << "%\n";
  os << "non-injective decodes: " << non_injective << '\n';
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["classes"] = nlohmann::json::array();
  for (const auto& c : classes) {
    j["classes"].push_back({{"class_id", c.class_id}, {"pairs", c.pairs}, {"accuracy", c.accuracy}});
  }
  j["mean_accuracy"] = mean_accuracy;
  j["pairs"] = pairs;
  j["non_injective"] = non_injective;
  return j.dump();
}

EvalReport evaluate(const MatchingModel& model, const std::vector<PairRecord>& pairs,
                    std::size_t threads) {
  if (pairs.empty()) throw ContractError("evaluate: empty dataset");
  std::vector<double> acc(pairs.size());
  std::vector<char> injective(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t i) {
    const Prediction p = model.predict(pairs[i]);
    acc[i] = accuracy(p.matching.assignment, pairs[i].truth);
    injective[i] = p.matching.injective;
  });
  std::map<int, std::pair<std::size_t, double>> per_class;
  EvalReport r;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto& slot = per_class[pairs[i].class_id];
    ++slot.first;
    slot.second += acc[i];
    r.non_injective += !injective[i];
  }
  double sum = 0.0;
  for (const auto& [cls, s] : per_class) {
    const double a = s.second / static_cast<double>(s.first);
    r.classes.push_back({cls, s.first, a});
    sum += a;
  }
  r.mean_accuracy = sum / static_cast<double>(r.classes.size());
  r.pairs = pairs.size();
  return r;
}

Trainer::Trainer(MatchingModel& model, const TrainConfig& config)
    : model_(model), config_(config), adam_(model.params()), grads_(model.params()) {}

double Trainer::step(const std::vector<const PairRecord*>& batch, double lr) {
  const double loss = batch_gradient(model_, batch, config_.threads, grads_);
  if (!std::isfinite(loss)) return loss;
  auto& params = model_.params();
  params.zero_grad();
  params.accumulate(grads_);
  adam_.step(params, lr);
  return loss;
}

std::vector<EpochMetrics> Trainer::run(const std::vector<PairRecord>& train,
                                       const std::vector<PairRecord>& val,
                                       const EpochCallback& on_epoch) {
  if (train.empty()) throw ContractError("training set is empty");
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = history_.size() + 1; epoch <= config_.epochs; ++epoch) {
    const double lr = learning_rate(config_, epoch);
    std::mt19937_64 rng(config_.seed * 1000003ull + epoch);
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<Parameter> last_good(model_.params().begin(), model_.params().end());
    const Adam adam_backup = adam_;
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
      std::vector<const PairRecord*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + config_.batch_size); ++k) {
        batch.push_back(&train[order[k]]);
      }
      const double loss = step(batch, lr);
      if (!std::isfinite(loss)) {
        std::size_t i = 0;
        for (auto& p : model_.params()) p = last_good[i++];
        adam_ = adam_backup;
        throw TrainingAborted("non-finite loss in epoch " + std::to_string(epoch) + " at step " +
                              std::to_string(steps + 1));
      }
      loss_sum += loss;
      ++steps;
    }
    EpochMetrics m{epoch, lr, loss_sum / static_cast<double>(steps),
                   val.empty() ? 0.0 : evaluate(model_, val, config_.threads).mean_accuracy};
    history_.push_back(m);
    if (on_epoch) on_epoch(m, *this);
  }
  return history_;
}

}  // namespace nmt

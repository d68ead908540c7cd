#include "nmt/params.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace nmt {

GradientBuffer::GradientBuffer(const ParameterStore& store) {
  grads_.reserve(store.size());
  for (const auto& p : store) grads_.emplace_back(p.value.shape(), 0.0);
}

void GradientBuffer::zero() {
  for (auto& g : grads_) g.fill(0.0);
}

void GradientBuffer::add(const GradientBuffer& other) {
  if (other.grads_.size() != grads_.size()) throw ContractError("gradient buffer size mismatch");
  for (std::size_t i = 0; i < grads_.size(); ++i) add_inplace(grads_[i], other.grads_[i]);
}

void GradientBuffer::scale(double s) {
  for (auto& g : grads_) {
    for (auto& v : g.values()) v *= s;
  }
}

ParamId ParameterStore::add(std::string name, Tensor value, double lr_scale, bool trainable) {
  if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
  const std::size_t idx = entries_.size();
  index_.emplace(name, idx);
  Tensor grad(value.shape(), 0.0);
  entries_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), trainable,
                               lr_scale});
  return ParamId{idx};
}

std::optional<ParamId> ParameterStore::find(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return ParamId{it->second};
}

ParamId ParameterStore::id(std::string_view name) const {
  auto found = find(name);
  if (!found) throw ContractError("unknown parameter: " + std::string(name));
  return *found;
}

std::size_t ParameterStore::scalar_count() const {
  return std::accumulate(entries_.begin(), entries_.end(), std::size_t{0},
                         [](std::size_t s, const Parameter& p) { return s + p.value.size(); });
}

void ParameterStore::zero_grad() {
  for (auto& p : entries_) p.grad.fill(0.0);
}

void ParameterStore::accumulate(const GradientBuffer& grads) {
  if (grads.size() != entries_.size()) throw ContractError("gradient buffer size mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) add_inplace(entries_[i].grad, grads[ParamId{i}]);
}

void ParameterStore::round_to_f32() {
  for (auto& p : entries_) {
    for (auto& v : p.value.values()) v = static_cast<double>(static_cast<float>(v));
  }
}

bool GradCheckReport::passed() const {
  return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.passed; });
}

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& p : params) w = std::max(w, p.max_rel_error);
  return w;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(const ScalarFn& forward, ParameterStore& params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  for (auto& p : params) {
    if (!p.trainable) continue;
    ParamCheck check;
    check.name = p.name;
    std::vector<std::size_t> coords(p.value.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    bool aborted = false;
    for (std::size_t c : coords) {
      const double saved = p.value[c];
      p.value[c] = saved + options.eps;
      const double fp = forward(params);
      p.value[c] = saved - options.eps;
      const double fm = forward(params);
      p.value[c] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        check.failure = "non-finite forward value while perturbing " + p.name + "[" +
                        std::to_string(c) + "]";
        aborted = true;
        break;
      }
      const double numeric = (fp - fm) / (2.0 * options.eps);
      check.max_rel_error = std::max(check.max_rel_error, relative_error(p.grad[c], numeric, options.floor));
      ++check.coords_checked;
    }
    check.passed = !aborted && check.max_rel_error <= options.tol;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace nmt

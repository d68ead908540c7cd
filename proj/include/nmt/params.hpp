#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nmt/tensor.hpp"

namespace nmt {

// Stable handle into a ParameterStore. Entries are never removed.
struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  // Multiplier applied to the optimizer learning rate (backbone parameters use < 1).
  double lr_scale = 1.0;
};

class ParameterStore;

// Gradient storage aligned with a ParameterStore, used for per-pair
// accumulation off the shared store.
class GradientBuffer {
 public:
  GradientBuffer() = default;
  explicit GradientBuffer(const ParameterStore& store);

  Tensor& operator[](ParamId id) { return grads_[id.index]; }
  const Tensor& operator[](ParamId id) const { return grads_[id.index]; }
  std::size_t size() const { return grads_.size(); }

  void zero();
  void add(const GradientBuffer& other);
  void scale(double s);

 private:
  std::vector<Tensor> grads_;
};

class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value, double lr_scale = 1.0, bool trainable = true);

  std::optional<ParamId> find(std::string_view name) const;
  ParamId id(std::string_view name) const;

  Parameter& entry(ParamId id) { return entries_.at(id.index); }
  const Parameter& entry(ParamId id) const { return entries_.at(id.index); }
  Tensor& value(ParamId id) { return entries_[id.index].value; }
  const Tensor& value(ParamId id) const { return entries_[id.index].value; }
  Tensor& grad(ParamId id) { return entries_[id.index].grad; }
  const Tensor& grad(ParamId id) const { return entries_[id.index].grad; }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const;

  // Insertion order.
  std::vector<Parameter>::iterator begin() { return entries_.begin(); }
  std::vector<Parameter>::iterator end() { return entries_.end(); }
  std::vector<Parameter>::const_iterator begin() const { return entries_.begin(); }
  std::vector<Parameter>::const_iterator end() const { return entries_.end(); }

  void zero_grad();
  void accumulate(const GradientBuffer& grads);
  // Round every value to the nearest float, matching what a checkpoint stores.
  void round_to_f32();

 private:
  std::vector<Parameter> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  std::size_t max_coords = 32;
  double floor = 1e-8;  // denominator floor of the relative error
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
  std::string failure;  // non-empty when the check aborted
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  bool passed() const;
  double worst() const;
};

// |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-8);

using ScalarFn = std::function<double(const ParameterStore&)>;

// Compares the gradients already stored in `params` against central
// differences of `forward`. Values are restored before returning.
GradCheckReport grad_check(const ScalarFn& forward, ParameterStore& params,
                           const GradCheckOptions& options = {});

}  // namespace nmt

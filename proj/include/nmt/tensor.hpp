#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nmt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (bad shape, out-of-domain input).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Inconsistent or unknown configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed input file.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Dense row-major array of doubles. Rank-2 tensors double as matrices.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::size_t n, double fill = 0.0) { return Tensor({n}, fill); }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// C = A * B
Tensor matmul(const Tensor& a, const Tensor& b);
// C = A * B^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// C = A^T * B
Tensor matmul_tn(const Tensor& a, const Tensor& b);
// C += A^T * B
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c);

void add_inplace(Tensor& dst, const Tensor& src);
// dst += alpha * src
void axpy(double alpha, std::span<const double> src, std::span<double> dst);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> v);

// Stack the rows of `a` followed by the rows of `b`.
Tensor vstack(const Tensor& a, const Tensor& b);
// Rows [begin, end) as a new matrix.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

inline constexpr double kNormGuard = 1e-12;

// v / max(||v||, eps_guard)
std::vector<double> l2_normalize(std::span<const double> v, double eps_guard = kNormGuard);

// Row-wise L2 normalization with enough saved state to run the backward pass.
struct RowNormalized {
  Tensor out;
  std::vector<double> norms;  // pre-normalization row norms
  double eps_guard = kNormGuard;
};

RowNormalized normalize_rows(const Tensor& x, double eps_guard = kNormGuard);
// Gradient w.r.t. the input rows given the gradient w.r.t. `fwd.out`.
Tensor normalize_rows_backward(const RowNormalized& fwd, const Tensor& dout);

}  // namespace nmt

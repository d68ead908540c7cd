#include "nmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace nmt {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ContractError(std::string(what) + ": expected a matrix, got shape " +
                        shape_string(t.shape()));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ContractError("tensor dimensions must be positive");
  }
  data_.assign(shape_product(shape_), fill);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ContractError("tensor dimensions must be positive");
  }
  if (shape_product(shape_) != data_.size()) {
    throw ContractError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ContractError("ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols");
  return shape_[1];
}

std::span<double> Tensor::row(std::size_t r) {
  return {data_.data() + r * shape_[1], shape_[1]};
}

std::span<const double> Tensor::row(std::size_t r) const {
  return {data_.data() + r * shape_[1], shape_[1]};
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) {
    throw ContractError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                        shape_string(b.shape()));
  }
  Tensor c = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = c.data() + i * m;
    const double* ai = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      if (aip == 0.0) continue;
      const double* bp = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k) {
    throw ContractError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) +
                        " x " + shape_string(b.shape()) + "^T");
  }
  Tensor c = Tensor::matrix(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) c(i, j) = dot(a.row(i), b.row(j));
  }
  return c;
}

void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& c) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != n || c.rank() != 2 || c.rows() != k || c.cols() != m) {
    throw ContractError("matmul_tn: shape mismatch " + shape_string(a.shape()) + "^T x " +
                        shape_string(b.shape()));
  }
  for (std::size_t r = 0; r < n; ++r) {
    const double* ar = a.data() + r * k;
    const double* br = b.data() + r * m;
    for (std::size_t i = 0; i < k; ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      double* ci = c.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += ari * br[j];
    }
  }
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  Tensor c = Tensor::matrix(a.cols(), b.cols());
  matmul_tn_acc(a, b, c);
  return c;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) {
    throw ContractError("add: shape mismatch " + shape_string(dst.shape()) + " vs " +
                        shape_string(src.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void axpy(double alpha, std::span<const double> src, std::span<double> dst) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

Tensor vstack(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ContractError("vstack: column count differs");
  std::vector<double> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor({a.rows() + b.rows(), a.cols()}, std::move(data));
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.rows()) throw ContractError("slice_rows: bad range");
  const std::size_t c = a.cols();
  std::vector<double> data(a.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           a.values().begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor({end - begin, c}, std::move(data));
}

std::vector<double> l2_normalize(std::span<const double> v, double eps_guard) {
  const double n = std::max(norm2(v), eps_guard);
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

RowNormalized normalize_rows(const Tensor& x, double eps_guard) {
  RowNormalized r{x, std::vector<double>(x.rows()), eps_guard};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = r.out.row(i);
    r.norms[i] = norm2(row);
    const double n = std::max(r.norms[i], eps_guard);
    for (auto& v : row) v /= n;
  }
  return r;
}

Tensor normalize_rows_backward(const RowNormalized& fwd, const Tensor& dout) {
  Tensor dx = dout;
  for (std::size_t i = 0; i < dx.rows(); ++i) {
    auto g = dx.row(i);
    if (fwd.norms[i] < fwd.eps_guard) {
      // Guarded branch is a plain scaling.
      for (auto& v : g) v /= fwd.eps_guard;
      continue;
    }
    auto y = fwd.out.row(i);
    const double proj = dot(y, g);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = (g[j] - y[j] * proj) / fwd.norms[i];
  }
  return dx;
}

}  // namespace nmt

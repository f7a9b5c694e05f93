#include "motionpred/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <Eigen/Core>

#include "motionpred/error.hpp"

namespace motionpred {

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  const auto& scope = current_scope();
  throw ShapeError(std::string(op) + (scope.empty() ? "" : " in " + scope) + ": " + detail);
}

const std::vector<double>& in_data(const detail::Node& self, std::size_t i) {
  return self.inputs[i]->value.data;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

// C[m,n] += A[m,k] B[k,n]
void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  MMap(c, m, n).noalias() += CMap(a, m, k) * CMap(b, k, n);
}

// C[m,k] += G[m,n] B[k,n]^T
void mm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
           std::size_t k) {
  MMap(c, m, k).noalias() += CMap(g, m, n) * CMap(b, k, n).transpose();
}

// C[k,n] += A[m,k]^T G[m,n]
void mm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
           std::size_t n) {
  MMap(c, k, n).noalias() += CMap(a, m, k).transpose() * CMap(g, m, n);
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd f, Deriv df) {
  NdValue out(a.shape());
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
  return make_op(op, std::move(out), {a},
                 [df](const detail::Node& self, std::span<const double> g,
                      std::span<std::vector<double>* const> gin) {
                   const auto& xv = in_data(self, 0);
                   const auto& yv = self.value.data;
                   auto& ga = *gin[0];
                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
                 });
}

void check_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.cols() != b.cols()) {
    shape_fail(op, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    shape_fail("matmul", "inner dimension mismatch " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
  }
  NdValue out(matrix_shape(m, n));
  mm_nn(a.data().data(), b.data().data(), out.data.data(), m, k, n);
  return make_op("matmul", std::move(out), {a, b},
                 [m, k, n](const detail::Node& self, std::span<const double> g,
                           std::span<std::vector<double>* const> gin) {
                   if (gin[0]) mm_nt(g.data(), in_data(self, 1).data(), gin[0]->data(), m, n, k);
                   if (gin[1]) mm_tn(in_data(self, 0).data(), g.data(), gin[1]->data(), m, k, n);
                 });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  NdValue out(matrix_shape(c, r));
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[j * r + i] = x[i * c + j];
  return make_op("transpose", std::move(out), {a},
                 [r, c](const detail::Node&, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   auto& ga = *gin[0];
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                 });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same("add", a, b);
  NdValue out(a.shape());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] + y[i];
  return make_op("add", std::move(out), {a, b},
                 [](const detail::Node&, std::span<const double> g,
                    std::span<std::vector<double>* const> gin) {
                   for (auto* slot : gin) {
                     if (!slot) continue;
                     for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same("sub", a, b);
  NdValue out(a.shape());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] - y[i];
  return make_op("sub", std::move(out), {a, b},
                 [](const detail::Node&, std::span<const double> g,
                    std::span<std::vector<double>* const> gin) {
                   if (gin[0])
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                   if (gin[1])
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] -= g[i];
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same("mul", a, b);
  NdValue out(a.shape());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = x[i] * y[i];
  return make_op("mul", std::move(out), {a, b},
                 [](const detail::Node& self, std::span<const double> g,
                    std::span<std::vector<double>* const> gin) {
                   const auto& xv = in_data(self, 0);
                   const auto& yv = in_data(self, 1);
                   if (gin[0])
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * yv[i];
                   if (gin[1])
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[1])[i] += g[i] * xv[i];
                 });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.rows(), c = a.cols();
  if (b.numel() != c) {
    shape_fail("add_row", shape_str(a.shape()) + " + row " + shape_str(b.shape()));
  }
  NdValue out(a.shape());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = x[i * c + j] + y[j];
  return make_op("add_row", std::move(out), {a, b},
                 [r, c](const detail::Node&, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   if (gin[0])
                     for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                   if (gin[1])
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) (*gin[1])[j] += g[i * c + j];
                 });
}

Tensor mul_row(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.rows(), c = a.cols();
  if (b.numel() != c) {
    shape_fail("mul_row", shape_str(a.shape()) + " * row " + shape_str(b.shape()));
  }
  NdValue out(a.shape());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.data[i * c + j] = x[i * c + j] * y[j];
  return make_op("mul_row", std::move(out), {a, b},
                 [r, c](const detail::Node& self, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   const auto& xv = in_data(self, 0);
                   const auto& yv = in_data(self, 1);
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) {
                       if (gin[0]) (*gin[0])[i * c + j] += g[i * c + j] * yv[j];
                       if (gin[1]) (*gin[1])[j] += g[i * c + j] * xv[i * c + j];
                     }
                 });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_op("sum", NdValue({1}, {s}), {a},
                 [](const detail::Node&, std::span<const double> g,
                    std::span<std::vector<double>* const> gin) {
                   for (auto& v : *gin[0]) v += g[0];
                 });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.numel());
  return scale(sum(a), 1.0 / n);
}

Tensor row_sum(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  NdValue out(matrix_shape(r, 1));
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += x[i * c + j];
    out.data[i] = s;
  }
  return make_op("row_sum", std::move(out), {a},
                 [r, c](const detail::Node&, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j) (*gin[0])[i * c + j] += g[i];
                 });
}

Tensor min_of(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) shape_fail("min_of", "empty input");
  std::size_t best = 0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].numel() != 1) shape_fail("min_of", "non-scalar argument");
    if (scalars[i].item() < scalars[best].item()) best = i;
  }
  return make_op("min_of", NdValue({1}, {scalars[best].item()}), scalars,
                 [best](const detail::Node&, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   if (gin[best]) (*gin[best])[0] += g[0];
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_fail("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  NdValue out(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()));
  return make_op("reshape", std::move(out), {a},
                 [](const detail::Node&, std::span<const double> g,
                    std::span<std::vector<double>* const> gin) {
                   for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
                 });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_fail("concat_rows", "no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) {
      shape_fail("concat_rows", "width " + std::to_string(p.cols()) + " vs " + std::to_string(c));
    }
    r += p.rows();
  }
  NdValue out(matrix_shape(r, c));
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data.begin() + static_cast<long>(off));
    off += p.numel();
  }
  return make_op("concat_rows", std::move(out), parts,
                 [](const detail::Node& self, std::span<const double> g,
                    std::span<std::vector<double>* const> gin) {
                   std::size_t o = 0;
                   for (std::size_t k = 0; k < gin.size(); ++k) {
                     const std::size_t n = self.inputs[k]->value.numel();
                     if (gin[k])
                       for (std::size_t i = 0; i < n; ++i) (*gin[k])[i] += g[o + i];
                     o += n;
                   }
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_fail("concat_cols", "no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      shape_fail("concat_cols", "rows " + std::to_string(p.rows()) + " vs " + std::to_string(r));
    }
    c += p.cols();
  }
  NdValue out(matrix_shape(r, c));
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    const auto x = p.data();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < pc; ++j) out.data[i * c + off + j] = x[i * pc + j];
    off += pc;
  }
  return make_op("concat_cols", std::move(out), parts,
                 [r, c](const detail::Node& self, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   std::size_t o = 0;
                   for (std::size_t k = 0; k < gin.size(); ++k) {
                     const std::size_t pc = self.inputs[k]->value.cols();
                     if (gin[k])
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < pc; ++j)
                           (*gin[k])[i * pc + j] += g[i * c + o + j];
                     o += pc;
                   }
                 });
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t c = a.cols();
  if (start + count > a.rows() || count == 0) {
    shape_fail("slice_rows", "rows [" + std::to_string(start) + ", " +
                                 std::to_string(start + count) + ") of " + shape_str(a.shape()));
  }
  NdValue out(matrix_shape(count, c));
  std::copy_n(a.data().begin() + static_cast<long>(start * c), count * c, out.data.begin());
  return make_op("slice_rows", std::move(out), {a},
                 [start, c](const detail::Node&, std::span<const double> g,
                            std::span<std::vector<double>* const> gin) {
                   for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[start * c + i] += g[i];
                 });
}

Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  const std::size_t r = a.rows(), c = a.cols();
  if (start + count > c || count == 0) {
    shape_fail("slice_cols", "cols [" + std::to_string(start) + ", " +
                                 std::to_string(start + count) + ") of " + shape_str(a.shape()));
  }
  NdValue out(matrix_shape(r, count));
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out.data[i * count + j] = x[i * c + start + j];
  return make_op("slice_cols", std::move(out), {a},
                 [r, c, start, count](const detail::Node&, std::span<const double> g,
                                      std::span<std::vector<double>* const> gin) {
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < count; ++j)
                       (*gin[0])[i * c + start + j] += g[i * count + j];
                 });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const std::size_t c = a.cols();
  NdValue out(matrix_shape(index.size(), c));
  const auto x = a.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.rows()) {
      shape_fail("gather_rows", "row " + std::to_string(index[i]) + " of " + shape_str(a.shape()));
    }
    std::copy_n(x.begin() + static_cast<long>(index[i] * c), c,
                out.data.begin() + static_cast<long>(i * c));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_op("gather_rows", std::move(out), {a},
                 [idx = std::move(idx), c](const detail::Node&, std::span<const double> g,
                                           std::span<std::vector<double>* const> gin) {
                   for (std::size_t i = 0; i < idx.size(); ++i)
                     for (std::size_t j = 0; j < c; ++j) (*gin[0])[idx[i] * c + j] += g[i * c + j];
                 });
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  NdValue out(a.shape());
  const auto x = a.data();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = x.data() + i * c;
    double* y = out.data.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  return make_op("softmax_rows", std::move(out), {a},
                 [r, c](const detail::Node& self, std::span<const double> g,
                        std::span<std::vector<double>* const> gin) {
                   const auto& y = self.value.data;
                   for (std::size_t i = 0; i < r; ++i) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                     for (std::size_t j = 0; j < c; ++j)
                       (*gin[0])[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                   }
                 });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    shape_fail("layer_norm", "input " + shape_str(x.shape()) + " gain " + shape_str(gain.shape()));
  }
  NdValue out(x.shape());
  std::vector<double> xhat(r * c), inv_std(r);
  const auto xv = x.data(), gv = gain.data(), bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[i * c + j] - mu) * (xv[i * c + j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mu) * inv_std[i];
      out.data[i * c + j] = xhat[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_op(
      "layer_norm", std::move(out), {x, gain, bias},
      [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const detail::Node& self, std::span<const double> g,
          std::span<std::vector<double>* const> gin) {
        const auto& gv = in_data(self, 1);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t i = 0; i < r; ++i) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double gx = g[i * c + j] * gv[j];
            m1 += gx;
            m2 += gx * xhat[i * c + j];
          }
          m1 *= inv_c;
          m2 *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const std::size_t k = i * c + j;
            if (gin[0]) (*gin[0])[k] += inv_std[i] * (g[k] * gv[j] - m1 - xhat[k] * m2);
            if (gin[1]) (*gin[1])[j] += g[k] * xhat[k];
            if (gin[2]) (*gin[2])[j] += g[k];
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  const std::size_t r = logits.rows(), c = logits.cols();
  if (labels.size() != r) {
    shape_fail("cross_entropy", std::to_string(labels.size()) + " labels for " +
                                    shape_str(logits.shape()));
  }
  std::vector<double> prob(r * c);
  double loss = 0.0;
  const auto x = logits.data();
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c) shape_fail("cross_entropy", "label out of range");
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (prob[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] /= z;
    loss -= row[labels[i]] - mx - std::log(z);
  }
  loss /= static_cast<double>(r);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return make_op("cross_entropy", NdValue({1}, {loss}), {logits},
                 [r, c, prob = std::move(prob), lab = std::move(lab)](
                     const detail::Node&, std::span<const double> g,
                     std::span<std::vector<double>* const> gin) {
                   const double s = g[0] / static_cast<double>(r);
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       (*gin[0])[i * c + j] +=
                           s * (prob[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                 });
}

namespace {

// In-place LU with partial pivoting; returns false on an exactly zero pivot.
bool lu_decompose(std::vector<double>& lu, std::vector<std::size_t>& perm, std::size_t n,
                  int& sign) {
  perm.resize(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  sign = 1;
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t i = col + 1; i < n; ++i)
      if (std::abs(lu[i * n + col]) > std::abs(lu[piv * n + col])) piv = i;
    if (lu[piv * n + col] == 0.0) return false;
    if (piv != col) {
      for (std::size_t j = 0; j < n; ++j) std::swap(lu[piv * n + j], lu[col * n + j]);
      std::swap(perm[piv], perm[col]);
      sign = -sign;
    }
    for (std::size_t i = col + 1; i < n; ++i) {
      const double f = lu[i * n + col] / lu[col * n + col];
      lu[i * n + col] = f;
      for (std::size_t j = col + 1; j < n; ++j) lu[i * n + j] -= f * lu[col * n + j];
    }
  }
  return true;
}

}  // namespace

Tensor logabsdet(const Tensor& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) shape_fail("logabsdet", "non-square " + shape_str(a.shape()));
  std::vector<double> lu(a.data().begin(), a.data().end());
  std::vector<std::size_t> perm;
  int sign = 1;
  if (!lu_decompose(lu, perm, n, sign)) {
    throw NumericError("logabsdet: singular matrix" +
                       (current_scope().empty() ? std::string() : " in " + current_scope()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::log(std::abs(lu[i * n + i]));
  return make_op(
      "logabsdet", NdValue({1}, {acc}), {a},
      [n, lu = std::move(lu), perm = std::move(perm)](const detail::Node&,
                                                      std::span<const double> g,
                                                      std::span<std::vector<double>* const> gin) {
        // Solve for columns of A^{-1}; d log|det A| / dA = A^{-T}.
        std::vector<double> inv(n * n);
        std::vector<double> col(n);
        for (std::size_t e = 0; e < n; ++e) {
          for (std::size_t i = 0; i < n; ++i) col[i] = (perm[i] == e) ? 1.0 : 0.0;
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < i; ++k) col[i] -= lu[i * n + k] * col[k];
          for (std::size_t ii = n; ii-- > 0;) {
            for (std::size_t k = ii + 1; k < n; ++k) col[ii] -= lu[ii * n + k] * col[k];
            col[ii] /= lu[ii * n + ii];
          }
          for (std::size_t i = 0; i < n; ++i) inv[i * n + e] = col[i];
        }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) (*gin[0])[i * n + j] += g[0] * inv[j * n + i];
      });
}

namespace {

struct AttnDims {
  std::size_t batch, heads, tq, tk, d, dh;
};

AttnDims attention_dims(const char* op, const Tensor& q, const Tensor& k, std::size_t batch,
                        std::size_t heads, const AttentionMask* mask) {
  if (batch == 0 || heads == 0) shape_fail(op, "batch and heads must be positive");
  const std::size_t d = q.cols();
  if (k.cols() != d) {
    shape_fail(op, "query width " + std::to_string(d) + " vs key width " +
                       std::to_string(k.cols()));
  }
  if (d % heads != 0) {
    shape_fail(op, "width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                       " heads");
  }
  if (q.rows() % batch != 0 || k.rows() % batch != 0) {
    shape_fail(op, "rows not divisible by batch " + std::to_string(batch));
  }
  AttnDims dims{batch, heads, q.rows() / batch, k.rows() / batch, d, d / heads};
  if (mask && (mask->rows != dims.tq || mask->cols != dims.tk)) {
    shape_fail(op, "mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                       " for " + std::to_string(dims.tq) + "x" + std::to_string(dims.tk) +
                       " scores");
  }
  return dims;
}

// Row-softmax probabilities, laid out [batch][head][tq][tk].
std::vector<double> compute_probs(const AttnDims& s, std::span<const double> q,
                                  std::span<const double> k, const AttentionMask* mask) {
  const double scl = 1.0 / std::sqrt(static_cast<double>(s.dh));
  std::vector<double> probs(s.batch * s.heads * s.tq * s.tk);
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < s.tq; ++i) {
        double* p = probs.data() + ((b * s.heads + h) * s.tq + i) * s.tk;
        const double* qi = q.data() + (b * s.tq + i) * s.d + h * s.dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s.tk; ++j) {
          const double bias = mask ? mask->at(i, j) : 0.0;
          if (bias == -std::numeric_limits<double>::infinity()) {
            p[j] = bias;
            continue;
          }
          const double* kj = k.data() + (b * s.tk + j) * s.d + h * s.dh;
          double acc = 0.0;
          for (std::size_t c = 0; c < s.dh; ++c) acc += qi[c] * kj[c];
          p[j] = acc * scl + bias;
          mx = std::max(mx, p[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) {
          throw ValidationError("attention: every position masked for query row " +
                                std::to_string(i) +
                                (current_scope().empty() ? "" : " in " + current_scope()));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < s.tk; ++j) z += (p[j] = std::exp(p[j] - mx));
        for (std::size_t j = 0; j < s.tk; ++j) p[j] /= z;
      }
  return probs;
}

}  // namespace

NdValue attention_probs(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads,
                        const AttentionMask* mask) {
  const auto s = attention_dims("attention_probs", q, k, batch, heads, mask);
  return NdValue({s.batch * s.heads * s.tq, s.tk}, compute_probs(s, q.data(), k.data(), mask));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                 std::size_t heads, const AttentionMask* mask) {
  const auto s = attention_dims("attention", q, k, batch, heads, mask);
  if (v.rows() != k.rows() || v.cols() != s.d) {
    shape_fail("attention", "value " + shape_str(v.shape()) + " vs key " + shape_str(k.shape()));
  }
  auto probs = compute_probs(s, q.data(), k.data(), mask);
  NdValue out({s.batch * s.tq, s.d});
  const auto vv = v.data();
  for (std::size_t b = 0; b < s.batch; ++b)
    for (std::size_t h = 0; h < s.heads; ++h)
      for (std::size_t i = 0; i < s.tq; ++i) {
        const double* p = probs.data() + ((b * s.heads + h) * s.tq + i) * s.tk;
        double* o = out.data.data() + (b * s.tq + i) * s.d + h * s.dh;
        for (std::size_t j = 0; j < s.tk; ++j) {
          if (p[j] == 0.0) continue;
          const double* vj = vv.data() + (b * s.tk + j) * s.d + h * s.dh;
          for (std::size_t c = 0; c < s.dh; ++c) o[c] += p[j] * vj[c];
        }
      }
  return make_op(
      "attention", std::move(out), {q, k, v},
      [s, probs = std::move(probs)](const detail::Node& self, std::span<const double> g,
                                    std::span<std::vector<double>* const> gin) {
        const auto& qv = in_data(self, 0);
        const auto& kv = in_data(self, 1);
        const auto& vv = in_data(self, 2);
        const double scl = 1.0 / std::sqrt(static_cast<double>(s.dh));
        std::vector<double> dp(s.tk);
        for (std::size_t b = 0; b < s.batch; ++b)
          for (std::size_t h = 0; h < s.heads; ++h)
            for (std::size_t i = 0; i < s.tq; ++i) {
              const double* p = probs.data() + ((b * s.heads + h) * s.tq + i) * s.tk;
              const double* go = g.data() + (b * s.tq + i) * s.d + h * s.dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < s.tk; ++j) {
                const std::size_t vrow = (b * s.tk + j) * s.d + h * s.dh;
                double acc = 0.0;
                for (std::size_t c = 0; c < s.dh; ++c) acc += go[c] * vv[vrow + c];
                dp[j] = acc;
                dot += p[j] * acc;
                if (gin[2] && p[j] != 0.0)
                  for (std::size_t c = 0; c < s.dh; ++c) (*gin[2])[vrow + c] += p[j] * go[c];
              }
              const std::size_t qrow = (b * s.tq + i) * s.d + h * s.dh;
              for (std::size_t j = 0; j < s.tk; ++j) {
                const double ds = p[j] * (dp[j] - dot) * scl;
                if (ds == 0.0) continue;
                const std::size_t krow = (b * s.tk + j) * s.d + h * s.dh;
                if (gin[0])
                  for (std::size_t c = 0; c < s.dh; ++c) (*gin[0])[qrow + c] += ds * kv[krow + c];
                if (gin[1])
                  for (std::size_t c = 0; c < s.dh; ++c) (*gin[1])[krow + c] += ds * qv[qrow + c];
              }
            }
      });
}

}  // namespace motionpred

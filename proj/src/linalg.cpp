#include "cilfuse/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cilfuse/errors.hpp"

namespace cilfuse {

namespace {

std::string shape(const Mat& m) { return std::to_string(m.rows) + "x" + std::to_string(m.cols); }

}  // namespace

Mat::Mat(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != r * c) {
    throw DimensionError("Mat: " + std::to_string(data.size()) + " values for shape " + std::to_string(r) + "x" +
                         std::to_string(c));
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Mat::fill(double v) { std::fill(data.begin(), data.end(), v); }

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: " + shape(a) + " by " + shape(b));
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    const double* ar = a.data.data() + i * a.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = ar[k];
      const double* br = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aik * br[j];
    }
  }
  return out;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows != b.rows) throw DimensionError("matmul_tn: " + shape(a) + "ᵀ by " + shape(b));
  Mat out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ar = a.data.data() + k * a.cols;
    const double* br = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = ar[i];
      double* o = out.data.data() + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += aki * br[j];
    }
  }
  return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols != b.cols) throw DimensionError("matmul_nt: " + shape(a) + " by " + shape(b) + "ᵀ");
  Mat out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.data.data() + j * b.cols;
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) acc += ar[k] * br[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Mat transpose(const Mat& a) {
  Mat out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
  return out;
}

Mat select_rows(const Mat& a, std::span<const std::size_t> rows) {
  Mat out(rows.size(), a.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.rows) throw IndexError("select_rows: row " + std::to_string(rows[i]) + " of " + shape(a));
    std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * a.cols), a.cols,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * a.cols));
  }
  return out;
}

Mat hstack(std::span<const Mat> blocks) {
  if (blocks.empty()) return {};
  const std::size_t rows = blocks.front().rows;
  std::size_t cols = 0;
  for (const auto& b : blocks) {
    if (b.rows != rows) throw DimensionError("hstack: row count mismatch");
    cols += b.cols;
  }
  Mat out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (const auto& b : blocks) {
      std::copy_n(b.row(r).begin(), b.cols, out.row(r).begin() + static_cast<std::ptrdiff_t>(off));
      off += b.cols;
    }
  }
  return out;
}

bool all_finite(const Mat& a) {
  return std::all_of(a.data.begin(), a.data.end(), [](double v) { return std::isfinite(v); });
}

double log_sum_exp(std::span<const double> z) {
  if (z.empty()) throw DomainError("log_sum_exp: empty vector");
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s);
}

std::vector<double> softmax(std::span<const double> z) {
  if (z.empty()) throw DomainError("softmax: empty vector");
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - mx);
    s += p[i];
  }
  for (double& v : p) v /= s;
  return p;
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) {
    throw IndexError("cross_entropy: label " + std::to_string(label) + " with " + std::to_string(logits.size()) +
                     " logits");
  }
  return std::max(0.0, log_sum_exp(logits) - logits[label]);
}

std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw IndexError("cross_entropy_grad: label out of range");
  auto g = softmax(logits);
  g[label] -= 1.0;
  return g;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

std::vector<double> l2_normalize(std::span<const double> v) {
  std::vector<double> out(v.begin(), v.end());
  const double n = l2_norm(v);
  if (n > kNormEpsilon) {
    for (double& x : out) x /= n;
  }
  return out;
}

void l2_normalize_rows(Mat& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    auto row = m.row(r);
    const double n = l2_norm(row);
    if (n > kNormEpsilon) {
      for (double& x : row) x /= n;
    }
  }
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw DomainError("argmax: empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

double SgdConfig::lr_at(std::size_t epoch) const {
  const std::size_t steps = decay_every == 0 ? 0 : epoch / decay_every;
  return base_lr * std::pow(decay_factor, static_cast<double>(steps));
}

void SgdConfig::validate() const {
  if (!(base_lr > 0.0)) throw SpecError("SgdConfig: base_lr must be > 0");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw SpecError("SgdConfig: decay_factor must be in (0,1]");
  if (batch_size < 1) throw SpecError("SgdConfig: batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw SpecError("SgdConfig: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw SpecError("SgdConfig: weight_decay must be >= 0");
}

void sgd_step(std::span<Param* const> params, std::size_t epoch, const SgdConfig& cfg) {
  const double lr = cfg.lr_at(epoch);
  for (Param* p : params) {
    if (!p->frozen) {
      auto& v = p->value.data;
      const auto& g = p->grad.data;
      if (cfg.momentum > 0.0) {
        if (p->velocity.size() != v.size()) p->velocity = Mat(p->value.rows, p->value.cols);
        auto& vel = p->velocity.data;
        for (std::size_t i = 0; i < v.size(); ++i) {
          vel[i] = cfg.momentum * vel[i] + g[i] + cfg.weight_decay * v[i];
          v[i] -= lr * vel[i];
        }
      } else {
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (g[i] + cfg.weight_decay * v[i]);
      }
    }
    p->zero_grad();
  }
}

Mat finite_diff_grad(const std::function<double(const Param&)>& loss_fn, Param& p, double h) {
  if (!(h > 0.0)) throw DomainError("finite_diff_grad: step must be > 0");
  Mat g(p.value.rows, p.value.cols);
  for (std::size_t i = 0; i < p.value.data.size(); ++i) {
    const double saved = p.value.data[i];
    p.value.data[i] = saved + h;
    const double fp = loss_fn(p);
    p.value.data[i] = saved - h;
    const double fm = loss_fn(p);
    p.value.data[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("finite_diff_grad: non-finite loss");
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double relative_error(const Mat& analytic, const Mat& numeric, double floor) {
  if (analytic.rows != numeric.rows || analytic.cols != numeric.cols) {
    throw DimensionError("relative_error: shape mismatch");
  }
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.data.size(); ++i) {
    const double d = analytic.data[i] - numeric.data[i];
    diff += d * d;
    na += analytic.data[i] * analytic.data[i];
    nn += numeric.data[i] * numeric.data[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

}  // namespace cilfuse

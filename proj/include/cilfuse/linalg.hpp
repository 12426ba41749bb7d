#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace cilfuse {

using ClassId = std::uint32_t;

/// Dense row-major matrix of 64-bit reals.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Mat(std::size_t r, std::size_t c, std::vector<double> values);

  static Mat identity(std::size_t n);

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void fill(double v);

  bool operator==(const Mat&) const = default;
};

// Products. Every entry is summed over the inner index in increasing order,
// starting from 0.0, so results are reproducible bit for bit.
Mat matmul(const Mat& a, const Mat& b);
Mat matmul_tn(const Mat& a, const Mat& b);  // aᵀ·b
Mat matmul_nt(const Mat& a, const Mat& b);  // a·bᵀ

Mat transpose(const Mat& a);
Mat select_rows(const Mat& a, std::span<const std::size_t> rows);
Mat hstack(std::span<const Mat> blocks);
bool all_finite(const Mat& a);

std::vector<double> softmax(std::span<const double> z);
double log_sum_exp(std::span<const double> z);
double cross_entropy(std::span<const double> logits, std::size_t label);
// d/dz of cross_entropy: softmax(z) - onehot(label).
std::vector<double> cross_entropy_grad(std::span<const double> logits, std::size_t label);

inline constexpr double kNormEpsilon = 1e-12;

double l2_norm(std::span<const double> v);
std::vector<double> l2_normalize(std::span<const double> v);
void l2_normalize_rows(Mat& m);

// Index of the maximum entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const double> v);

/// Trainable tensor with gradient buffer and freeze flag.
struct Param {
  Mat value;
  Mat grad;
  Mat velocity;  // allocated on first momentum step
  bool frozen = false;

  Param() = default;
  explicit Param(Mat v, bool frozen_flag = false)
      : value(std::move(v)), grad(value.rows, value.cols), frozen(frozen_flag) {}

  void zero_grad() { grad.fill(0.0); }
};

struct SgdConfig {
  double base_lr = 0.1;
  std::size_t decay_every = 30;
  double decay_factor = 0.1;
  std::size_t epochs = 90;
  std::size_t batch_size = 64;
  double momentum = 0.0;
  double weight_decay = 0.0;

  double lr_at(std::size_t epoch) const;
  void validate() const;
};

// Plain SGD with step decay. Frozen params are never written; all grads are
// zeroed afterwards.
void sgd_step(std::span<Param* const> params, std::size_t epoch, const SgdConfig& cfg);

// Central-difference gradient of loss_fn with respect to p.value. The value
// is perturbed in place and restored bit-exactly after each probe.
Mat finite_diff_grad(const std::function<double(const Param&)>& loss_fn, Param& p, double h);

// ‖a-b‖₂ / max(‖a‖₂, ‖b‖₂, floor).
double relative_error(const Mat& analytic, const Mat& numeric, double floor = 1e-8);

}  // namespace cilfuse

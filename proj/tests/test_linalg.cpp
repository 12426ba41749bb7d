#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "cilfuse/errors.hpp"
#include "cilfuse/linalg.hpp"
#include "test_util.hpp"

using namespace cilfuse;
using cilfuse::testing::random_mat;
using cilfuse::testing::random_vec;

namespace {

// Independent triple loop, column-outer, summing left to right from 0.0.
Mat naive_product(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (std::size_t j = 0; j < b.cols; ++j) {
    for (std::size_t i = 0; i < a.rows; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a.data[i * a.cols + k] * b.data[k * b.cols + j];
      out.data[i * out.cols + j] = s;
    }
  }
  return out;
}

bool bitwise_equal(const Mat& a, const Mat& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("matmul small cases") {
  const Mat m(2, 2, {1, 2, 3, 4});
  CHECK(matmul(Mat::identity(2), m) == m);
  CHECK(matmul(Mat(1, 2, {1, 0}), Mat(2, 1, {5, 7})) == Mat(1, 1, {5}));
  CHECK_THROWS_AS(matmul(Mat(2, 3), Mat(2, 3)), DimensionError);
}

TEST_CASE("matmul matches a triple loop exactly up to 8x8") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + rng.index(8), k = 1 + rng.index(8), c = 1 + rng.index(8);
    const Mat a = random_mat(r, k, rng, -3, 3);
    const Mat b = random_mat(k, c, rng, -3, 3);
    CHECK(bitwise_equal(matmul(a, b), naive_product(a, b)));
    CHECK(bitwise_equal(matmul_tn(transpose(a), b), naive_product(a, b)));
    CHECK(bitwise_equal(matmul_nt(a, transpose(b)), naive_product(a, b)));
  }
}

TEST_CASE("softmax") {
  auto p = softmax(std::vector<double>{0, 0});
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
  p = softmax(std::vector<double>{std::log(2.0), 0.0});
  CHECK(p[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  p = softmax(std::vector<double>{1000, 0});
  CHECK(std::isfinite(p[0]));
  CHECK(p[0] == doctest::Approx(1.0));
  CHECK(p[1] < 1e-300);
  CHECK_THROWS_AS(softmax(std::vector<double>{}), DomainError);

  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const auto z = random_vec(1 + rng.index(10), rng, -1000, 1000);
    const auto q = softmax(z);
    double s = 0.0;
    for (double v : q) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy(std::vector<double>{10, -10}, 0) == doctest::Approx(0.0).epsilon(1e-8));
  CHECK(cross_entropy(std::vector<double>{0, 0}, 1) == doctest::Approx(std::log(2.0)));
  CHECK_THROWS_AS(cross_entropy(std::vector<double>{0, 0}, 2), IndexError);

  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_vec(5, rng, -4, 4);
    const std::size_t label = rng.index(5);
    long double denom = 0.0L;
    for (double v : z) denom += std::exp(static_cast<long double>(v));
    const double direct = static_cast<double>(-std::log(std::exp(static_cast<long double>(z[label])) / denom));
    CHECK(cross_entropy(z, label) == doctest::Approx(direct).epsilon(1e-12));
    CHECK(cross_entropy(z, label) >= 0.0);
  }
}

TEST_CASE("cross entropy gradient agrees with central differences") {
  Rng rng(5);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Param p(random_mat(1, 6, rng, -3, 3));
    const std::size_t label = rng.index(6);
    const auto g = cross_entropy_grad(p.value.data, label);
    const Mat numeric = finite_diff_grad([&](const Param& q) { return cross_entropy(q.value.data, label); }, p, 1e-5);
    CHECK(relative_error(Mat(1, 6, g), numeric) < 1e-6);
  }
}

TEST_CASE("l2_normalize") {
  auto v = l2_normalize(std::vector<double>{3, 4});
  CHECK(v[0] == doctest::Approx(0.6));
  CHECK(v[1] == doctest::Approx(0.8));
  v = l2_normalize(std::vector<double>{0, 0});
  CHECK(v == std::vector<double>{0, 0});
  const std::vector<double> tiny{1e-13, 0};
  CHECK(l2_normalize(tiny) == tiny);
  const std::vector<double> unit{0, 1, 0};
  CHECK(l2_normalize(unit) == unit);
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto w = l2_normalize(random_vec(7, rng, -50, 50));
    CHECK(std::abs(l2_norm(w) - 1.0) < 1e-12);
  }
}

TEST_CASE("argmax takes the first of equal maxima") {
  CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
  CHECK(argmax(std::vector<double>{-1}) == 0);
  CHECK_THROWS_AS(argmax(std::vector<double>{}), DomainError);
}

TEST_CASE("sgd_step") {
  SgdConfig cfg{.base_lr = 0.1, .decay_every = 10, .decay_factor = 0.1, .epochs = 20, .batch_size = 4};
  Param p(Mat(1, 1, {1.0}));
  p.grad(0, 0) = 0.5;
  Param* ps[] = {&p};
  sgd_step(ps, 0, cfg);
  CHECK(p.value(0, 0) == doctest::Approx(0.95).epsilon(1e-15));
  CHECK(p.grad(0, 0) == 0.0);

  CHECK(cfg.lr_at(9) == doctest::Approx(0.1));
  CHECK(cfg.lr_at(10) == doctest::Approx(0.01));
  CHECK(cfg.lr_at(25) == doctest::Approx(0.001));

  Rng rng(2);
  Param frozen(random_mat(3, 3, rng), true);
  const Mat before = frozen.value;
  frozen.grad = random_mat(3, 3, rng);
  Param* fs[] = {&frozen};
  sgd_step(fs, 0, cfg);
  CHECK(bitwise_equal(frozen.value, before));
}

TEST_CASE("SgdConfig validation") {
  SgdConfig c;
  CHECK_NOTHROW(c.validate());
  c.base_lr = 0.0;
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = {};
  c.epochs = 0;
  CHECK_NOTHROW(c.validate());
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = {};
  c.decay_factor = 1.5;
  CHECK_THROWS_AS(c.validate(), SpecError);
}

TEST_CASE("finite_diff_grad") {
  Param p(Mat(1, 1, {3.0}));
  const Mat g = finite_diff_grad([](const Param& q) { return q.value(0, 0) * q.value(0, 0); }, p, 1e-5);
  CHECK(std::abs(g(0, 0) - 6.0) < 1e-6);
  CHECK(p.value(0, 0) == 3.0);

  Rng rng(4);
  Param q(random_mat(2, 3, rng));
  const Mat before = q.value;
  const Mat zero = finite_diff_grad([](const Param&) { return 1.25; }, q, 1e-5);
  CHECK(zero == Mat(2, 3));
  CHECK(bitwise_equal(q.value, before));

  CHECK_THROWS_AS(finite_diff_grad([](const Param&) { return std::numeric_limits<double>::quiet_NaN(); }, q, 1e-5),
                  NumericError);
  CHECK_THROWS_AS(finite_diff_grad([](const Param&) { return 0.0; }, q, 0.0), DomainError);
}

TEST_CASE("Mat construction checks the value count") {
  CHECK_THROWS_AS(Mat(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK(all_finite(Mat(2, 2, 1.0)));
  Mat m(1, 2);
  m(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_FALSE(all_finite(m));
}

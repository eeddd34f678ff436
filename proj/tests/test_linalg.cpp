#include <cmath>
#include <numbers>

#include "doctest.h"
#include "protoprompt/linalg.hpp"
#include "test_helpers.hpp"

using namespace protoprompt;

namespace {

// Loop-based reference kept independent of the library kernels.
double loop_cosine(const Vector& a, const Vector& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

}  // namespace

TEST_CASE("cosine_sim closed forms") {
  CHECK(cosine_sim(Vector{1, 0}, Vector{0, 1}) == doctest::Approx(0.0));
  CHECK(cosine_sim(Vector{2, 0}, Vector{1, 0}) == doctest::Approx(1.0));
}

TEST_CASE("cosine_sim matches loop oracle on seeded 8-dim vectors") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = testing::random_vector(8, rng);
    const auto b = testing::random_vector(8, rng);
    CHECK(std::abs(cosine_sim(a, b) - loop_cosine(a, b)) <= 1e-12);
  }
}

TEST_CASE("l2_normalize errors") {
  try {
    l2_normalize(Vector{0, 0});
    FAIL("expected DegenerateVector");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateVector);
  }
  try {
    l2_normalize(Vector{1, std::nan("")});
    FAIL("expected NumericError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NumericError);
  }
}

TEST_CASE("cosine_sim errors") {
  CHECK_THROWS_AS(cosine_sim(Vector{0, 0}, Vector{1, 0}), Error);
  try {
    cosine_sim(Vector{0, 0}, Vector{1, 0});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateVector);
  }
  try {
    cosine_sim(Vector{1, 0, 0}, Vector{1, 0});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeError);
  }
}

TEST_CASE("cosine_sim properties") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 1 + rng.below(16);
    auto a = testing::random_vector(dim, rng);
    const auto b = testing::random_vector(dim, rng);
    const double c = cosine_sim(a, b);
    CHECK(c >= -1.0 - 1e-9);
    CHECK(c <= 1.0 + 1e-9);
    CHECK(std::abs(c - cosine_sim(b, a)) <= 1e-15);
    const double alpha = rng.uniform(0.01, 100.0);
    for (double& x : a) x *= alpha;
    CHECK(std::abs(cosine_sim(a, b) - c) <= 1e-12);
  }
}

TEST_CASE("log_sum_exp") {
  CHECK(log_sum_exp(Vector{0.0}) == 0.0);
  CHECK(log_sum_exp(Vector{1.5, 1.5}) == doctest::Approx(1.5 + std::numbers::ln2).epsilon(1e-15));
  const double big = log_sum_exp(Vector{700.0, 700.0});
  CHECK(std::isfinite(big));
  CHECK(big == doctest::Approx(700.0 + std::numbers::ln2).epsilon(1e-15));
  try {
    log_sum_exp(Vector{});
    FAIL("expected EmptyInput");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyInput);
  }
}

TEST_CASE("log_sum_exp shift invariance") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    auto v = testing::random_vector(1 + rng.below(10), rng);
    for (double& x : v) x *= 20.0;
    const double base = log_sum_exp(v);
    const double c = rng.uniform(-1000.0, 1000.0);
    for (double& x : v) x += c;
    CHECK(std::abs(log_sum_exp(v) - (base + c)) <= 1e-10);
  }
}

TEST_CASE("l2_normalize") {
  const auto v = l2_normalize(Vector{3, 4});
  CHECK(v[0] == doctest::Approx(0.6));
  CHECK(v[1] == doctest::Approx(0.8));
  const Vector unit{0.0, 1.0, 0.0};
  CHECK(l2_normalize(unit) == unit);
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = l2_normalize(testing::random_vector(1 + rng.below(32), rng));
    double n = 0.0;
    for (double x : r) n += x * x;
    CHECK(std::abs(std::sqrt(n) - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(l2_normalize(Vector{0, 0}), Error);
}

TEST_CASE("pairwise_cosine") {
  const std::vector<Vector> axes{{1, 0}, {0, 1}};
  const auto m = pairwise_cosine(axes, axes);
  CHECK(m(0, 0) == 1.0);
  CHECK(m(0, 1) == 0.0);
  CHECK(m(1, 0) == 0.0);
  CHECK(m(1, 1) == 1.0);

  const std::vector<Vector> a1{{1, 2}}, b1{{3, -1}};
  CHECK(pairwise_cosine(a1, b1)(0, 0) == cosine_sim(a1[0], b1[0]));

  Rng rng(15);
  std::vector<Vector> a, b;
  for (int i = 0; i < 5; ++i) a.push_back(testing::random_vector(6, rng));
  for (int i = 0; i < 3; ++i) b.push_back(testing::random_vector(6, rng));
  const auto ab = pairwise_cosine(a, b);
  REQUIRE(ab.rows == 5);
  REQUIRE(ab.cols == 3);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 3; ++j) CHECK(std::abs(ab(i, j) - loop_cosine(a[i], b[j])) <= 1e-12);

  const auto aa = pairwise_cosine(a, a);
  for (int i = 0; i < 5; ++i) {
    CHECK(std::abs(aa(i, i) - 1.0) <= 1e-12);
    for (int j = 0; j < 5; ++j) CHECK(std::abs(aa(i, j) - aa(j, i)) <= 1e-12);
  }

  std::vector<Vector> bad{{1, 2, 3}};
  try {
    pairwise_cosine(a, bad);
    FAIL("expected ShapeError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ShapeError);
  }
}

TEST_CASE("rng split streams are reproducible and distinct") {
  Rng a(5), b(5);
  CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(5).split(1), d = Rng(5).split(2);
  CHECK(c.next_u64() != d.next_u64());
  Rng e(9);
  double mean = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = e.normal();
    mean += z;
    sq += z * z;
  }
  mean /= n;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
}

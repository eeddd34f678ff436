#include <cmath>

#include "doctest.h"
#include "protoprompt/metrics.hpp"
#include "test_helpers.hpp"

using namespace protoprompt;

namespace {

template <typename F>
void expect_kind(F&& f, ErrorKind kind) {
  try {
    f();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == kind);
  }
}

}  // namespace

TEST_CASE("average accuracy fixtures") {
  const AccuracyMatrix two({{90}, {80, 70}});
  CHECK(average_accuracy(two, 2) == 75.0);
  CHECK(average_accuracy(two, 1) == 90.0);
  const AccuracyMatrix three({{90}, {85, 80}, {80, 75, 70}});
  CHECK(average_accuracy(three, 3) == 75.0);
  CHECK(average_accuracy(three, 3, Protocol::Macro) == 82.5);
  expect_kind([&] { average_accuracy(two, 3); }, ErrorKind::IncompleteMatrix);
}

TEST_CASE("forgetting fixtures") {
  CHECK(forgetting(AccuracyMatrix({{90}, {80, 70}}), 2) == 10.0);
  CHECK(forgetting(AccuracyMatrix({{90}, {95, 70}}), 2) == -5.0);
  CHECK(forgetting(AccuracyMatrix({{90}, {85, 80}, {80, 75, 70}}), 3) == 7.5);
  expect_kind([] { forgetting(AccuracyMatrix(std::vector<std::vector<double>>{{90.0}}), 1); }, ErrorKind::UndefinedForgetting);
}

TEST_CASE("accuracy matrix shape checks") {
  AccuracyMatrix a;
  CHECK_THROWS_AS(a.push_row({1, 2}), Error);
  CHECK_THROWS_AS(a.push_row({101}), Error);
  a.push_row({50});
  CHECK(a.rows() == 1);
  CHECK(accuracy_csv(AccuracyMatrix({{90}, {80, 70}})) == "session,task_1,task_2\n1,90,\n2,80,70\n");
}

TEST_CASE("aggregates are invariant to relabeling tasks within a row") {
  Rng rng(1);
  // Permuting the tasks of the last row changes which entry is where but not
  // the mean of that row.
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> r;
    for (std::size_t j = 0; j <= i; ++j) r.push_back(std::round(rng.uniform(0, 100)));
    rows.push_back(r);
  }
  auto shuffled = rows;
  std::reverse(shuffled[3].begin(), shuffled[3].end());
  CHECK(average_accuracy(AccuracyMatrix(rows), 4) == average_accuracy(AccuracyMatrix(shuffled), 4));
}

TEST_CASE("energy") {
  CHECK(energy(Vector{0.8}, 0.6) == doctest::Approx(-0.8).epsilon(1e-15));
  CHECK(std::abs(energy(Vector{0.9, 0.1}, 0.01) + 0.9) <= 1e-6);
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Vector s;
    for (int k = 0; k < 10; ++k) s.push_back(rng.uniform(-1, 1));
    double sum = 0.0;
    for (double v : s) sum += std::exp(v / 0.6);
    CHECK(std::abs(energy(s, 0.6) - (-0.6 * std::log(sum))) <= 1e-12);
  }
  expect_kind([] { energy(Vector{}, 0.6); }, ErrorKind::EmptyInput);
}

TEST_CASE("memory per class") {
  CHECK(memory_per_class({64, 5, 4, 1, 4}) == 705.0);
  CHECK(memory_per_class({64, 1, 4, 1, 4}) == 2.0 * 64 + 1 + 64);
  // Linear in C and in D.
  const double c1 = memory_per_class({32, 1, 4, 1, 4}), c2 = memory_per_class({32, 2, 4, 1, 4}),
               c3 = memory_per_class({32, 3, 4, 1, 4});
  CHECK(c3 - c2 == c2 - c1);
  const double d1 = memory_per_class({16, 5, 4, 1, 4}), d2 = memory_per_class({32, 5, 4, 1, 4}),
               d3 = memory_per_class({48, 5, 4, 1, 4});
  CHECK(d3 - d2 == d2 - d1);
}

TEST_CASE("run report") {
  PrototypeStore store(StoreConfig{2, 1, 1, 0.6});
  BackboneConfig bc{1, 2, 1, 2, 4};
  store.commit_task(0, empty_prompts(bc, 0), {ClassRecord{0, 0, {{1, 0}}, {{1, 0}}, 0.0, 1}});
  RunLog log;
  const nlohmann::ordered_json manifest = {{"seed", 7}};
  expect_kind([&] { run_report(log, store, manifest); }, ErrorKind::IncompleteMatrix);
  log.accuracy.push_row({100});
  log.inferences = 10;
  log.forward_passes = 20;
  log.retrieved = 10;
  log.retrieve_r = 3;
  auto single = run_report(log, store, manifest);
  CHECK(!single.contains("forgetting_last"));
  CHECK(single["avg_forward_passes"] == 2.0);
  const double j = single["avg_retrieved_prompts"];
  CHECK(j >= 1.0);
  CHECK(j <= 3.0);
  log.accuracy.push_row({90, 80});
  const auto r1 = run_report(log, store, manifest).dump(2);
  const auto r2 = run_report(log, store, manifest).dump(2);
  CHECK(r1 == r2);
  const auto parsed = nlohmann::json::parse(r1);
  for (const char* key : {"protocol", "avg_acc_last", "avg_acc_macro", "forgetting_last", "avg_forward_passes",
                          "extra_params_per_class", "per_task_rows", "manifest"})
    CHECK(parsed.contains(key));
  CHECK(parsed["forgetting_last"] == 10.0);
}

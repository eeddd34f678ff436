// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "protoprompt/prototype_store.hpp"

namespace protoprompt {

/// Lower-triangular accuracy table in percent. Row i (0-based) holds the
/// accuracy on tasks 0..i measured after training task i.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::vector<std::vector<double>> rows);

  /// Appends the next row; ShapeError unless it has rows()+1 entries in [0,100].
  void push_row(std::vector<double> row);
  std::size_t rows() const noexcept { return rows_.size(); }
  const std::vector<double>& row(std::size_t i) const;
  double at(std::size_t i, std::size_t j) const;
  const std::vector<std::vector<double>>& data() const noexcept { return rows_; }

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::vector<std::vector<double>> rows_;
};

enum class Protocol { Last, Macro };
std::string_view to_string(Protocol p);

/// `session` is 1-based. Last: mean of row `session`. Macro: mean of the
/// Last values of sessions 1..session. IncompleteMatrix if rows are missing.
double average_accuracy(const AccuracyMatrix& a, std::size_t session, Protocol protocol = Protocol::Last);

/// 1-based session >= 2; UndefinedForgetting for session 1. Negative values
/// are returned as they come.
double forgetting(const AccuracyMatrix& a, std::size_t session);

/// -tau * log(sum(exp(s / tau))). EmptyInput on no sims; ConfigError on tau <= 0.
double energy(std::span<const double> sims, double temperature);

struct MemoryConfig {
  std::size_t dim = 64;
  std::size_t centroids = 5;
  std::size_t layers = 4;
  std::size_t prompt_length = 1;
  std::size_t classes_per_task = 4;
};

/// f64 slots per class: key and value centroids, the augmentation scale and
/// an amortized share of the task's prompt.
double memory_per_class(const MemoryConfig& config);

struct EpochRecord {
  TaskId task = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  std::size_t skipped_batches = 0;
};

/// Everything a run produces besides the store.
struct RunLog {
  AccuracyMatrix accuracy;
  std::vector<EpochRecord> epochs;
  std::uint64_t inferences = 0;
  std::uint64_t forward_passes = 0;  // coarse + fine
  std::uint64_t retrieved = 0;       // sum of J
  std::size_t retrieve_r = 0;        // r used for inference
  // Smallest and largest J seen in each evaluation call.
  std::vector<std::size_t> min_retrieved, max_retrieved;
  double energy_sum = 0.0;           // selected-prompt energy over the final evaluation
  std::uint64_t energy_count = 0;
  MemoryConfig memory;
};

/// Deterministic JSON report. `manifest` is embedded verbatim.
/// IncompleteMatrix when the log has no accuracy rows.
nlohmann::ordered_json run_report(const RunLog& log, const PrototypeStore& store, const nlohmann::ordered_json& manifest,
                                  std::string_view protocol = "both");

/// One line per row: session,task_1,...,task_T (empty cells above the diagonal).
std::string accuracy_csv(const AccuracyMatrix& a);

}  // namespace protoprompt

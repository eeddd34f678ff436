// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace protoprompt {

AccuracyMatrix::AccuracyMatrix(std::vector<std::vector<double>> rows) {
  for (auto& r : rows) push_row(std::move(r));
}

void AccuracyMatrix::push_row(std::vector<double> row) {
  require(row.size() == rows_.size() + 1, ErrorKind::ShapeError, "accuracy row has the wrong length");
  for (double v : row)
    require(std::isfinite(v) && v >= 0.0 && v <= 100.0, ErrorKind::ShapeError, "accuracy outside [0, 100]");
  rows_.push_back(std::move(row));
}

const std::vector<double>& AccuracyMatrix::row(std::size_t i) const {
  require(i < rows_.size(), ErrorKind::IncompleteMatrix, "accuracy row " + std::to_string(i + 1) + " missing");
  return rows_[i];
}

double AccuracyMatrix::at(std::size_t i, std::size_t j) const {
  const auto& r = row(i);
  require(j < r.size(), ErrorKind::ShapeError, "entry above the diagonal");
  return r[j];
}

std::string_view to_string(Protocol p) { return p == Protocol::Last ? "last" : "macro"; }

double average_accuracy(const AccuracyMatrix& a, std::size_t session, Protocol protocol) {
  require(session >= 1, ErrorKind::ConfigError, "sessions are 1-based");
  require(session <= a.rows(), ErrorKind::IncompleteMatrix, "accuracy row " + std::to_string(session) + " missing");
  auto last = [&](std::size_t i) {
    const auto& r = a.row(i - 1);
    double s = 0.0;
    for (double v : r) s += v;
    return s / static_cast<double>(i);
  };
  if (protocol == Protocol::Last) return last(session);
  double s = 0.0;
  for (std::size_t i = 1; i <= session; ++i) s += last(i);
  return s / static_cast<double>(session);
}

double forgetting(const AccuracyMatrix& a, std::size_t session) {
  require(session >= 2, ErrorKind::UndefinedForgetting, "forgetting needs at least two sessions");
  require(session <= a.rows(), ErrorKind::IncompleteMatrix, "accuracy row " + std::to_string(session) + " missing");
  double total = 0.0;
  for (std::size_t j = 0; j + 1 < session; ++j) {
    double best = a.at(j, j);
    for (std::size_t jp = j; jp + 1 < session; ++jp) best = std::max(best, a.at(jp, j));
    total += best - a.at(session - 1, j);
  }
  return total / static_cast<double>(session - 1);
}

double energy(std::span<const double> sims, double temperature) {
  require(!sims.empty(), ErrorKind::EmptyInput, "energy of no similarities");
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::ConfigError, "temperature must be > 0");
  Vector scaled(sims.begin(), sims.end());
  for (double& v : scaled) v /= temperature;
  return -temperature * log_sum_exp(scaled);
}

double memory_per_class(const MemoryConfig& c) {
  require(c.classes_per_task >= 1, ErrorKind::ConfigError, "classes_per_task must be positive");
  return 2.0 * static_cast<double>(c.centroids * c.dim) + 1.0 +
         static_cast<double>(c.layers * c.prompt_length * c.dim) / static_cast<double>(c.classes_per_task);
}

nlohmann::ordered_json run_report(const RunLog& log, const PrototypeStore& store, const nlohmann::ordered_json& manifest,
                                  std::string_view protocol) {
  const auto& a = log.accuracy;
  require(a.rows() >= 1, ErrorKind::IncompleteMatrix, "run log has no accuracy rows");
  const std::size_t t = a.rows();
  nlohmann::ordered_json j;
  j["protocol"] = std::string(protocol);
  j["sessions"] = t;
  j["avg_acc_last"] = average_accuracy(a, t, Protocol::Last);
  j["avg_acc_macro"] = average_accuracy(a, t, Protocol::Macro);
  if (t >= 2) j["forgetting_last"] = forgetting(a, t);
  if (log.inferences > 0) {
    j["avg_forward_passes"] = static_cast<double>(log.forward_passes) / static_cast<double>(log.inferences);
    j["avg_retrieved_prompts"] = static_cast<double>(log.retrieved) / static_cast<double>(log.inferences);
  }
  j["extra_params_per_class"] = memory_per_class(log.memory);
  j["per_task_rows"] = a.data();
  if (log.energy_count > 0) j["energies"] = {{"mean_selected", log.energy_sum / double(log.energy_count)},
                                             {"samples", log.energy_count}};
  j["store"] = {{"tasks", store.committed_tasks().size()},
                {"classes", store.records().size()},
                {"key_centroids", store.total_centroids()}};
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const auto& e : log.epochs)
    epochs.push_back({{"task", e.task}, {"epoch", e.epoch}, {"loss", e.loss}, {"skipped_batches", e.skipped_batches}});
  j["epochs"] = std::move(epochs);
  j["manifest"] = manifest;
  return j;
}

std::string accuracy_csv(const AccuracyMatrix& a) {
  std::ostringstream os;
  os.precision(17);
  os << "session";
  for (std::size_t j = 0; j < a.rows(); ++j) os << ",task_" << j + 1;
  os << "\n";
  for (std::size_t i = 0; i < a.rows(); ++i) {
    os << i + 1;
    for (std::size_t j = 0; j < a.rows(); ++j) {
      os << ",";
      if (j <= i) os << a.at(i, j);
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace protoprompt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "protoprompt/backbone.hpp"
#include "protoprompt/linalg.hpp"
#include "protoprompt/neck_loss.hpp"

namespace protoprompt {

using TaskId = std::int32_t;

struct ClassRecord {
  ClassId class_id = 0;
  TaskId task_id = 0;
  std::vector<Vector> key_centroids;    // unit norm
  std::vector<Vector> value_centroids;  // unit norm, same count as keys
  double aug_scale = 0.0;
  std::int32_t sample_count = 0;

  friend bool operator==(const ClassRecord&, const ClassRecord&) = default;
};

/// Normalized arithmetic mean. EmptyInput on an empty list.
Vector class_mean(std::span<const Vector> embeddings);

/// Spectral clustering into min(C, n) groups; returns the normalized mean of
/// each group, ordered by the smallest member index.
std::vector<Vector> multi_centroid(std::span<const Vector> embeddings, std::size_t centroids, std::uint64_t seed);

/// Group index per embedding, as used by multi_centroid.
std::vector<std::size_t> spectral_partition(std::span<const Vector> embeddings, std::size_t groups,
                                            std::uint64_t seed);

struct StoreConfig {
  std::size_t dim = 64;
  std::size_t centroids = 5;  // C
  std::size_t retrieve = 3;   // r
  double temperature = 0.6;

  friend bool operator==(const StoreConfig&, const StoreConfig&) = default;
};

/// Append-only long-term memory: one prompt set per task and one key/value
/// record per class.
class PrototypeStore {
 public:
  PrototypeStore() = default;
  explicit PrototypeStore(StoreConfig config) : config_(config) {}

  const StoreConfig& config() const noexcept { return config_; }
  bool empty() const noexcept { return tasks_.empty(); }
  const std::map<ClassId, ClassRecord>& records() const noexcept { return records_; }
  const std::map<TaskId, PromptSet>& prompts() const noexcept { return prompts_; }
  const std::vector<TaskId>& committed_tasks() const noexcept { return tasks_; }

  bool has_task(TaskId t) const { return prompts_.count(t) != 0; }
  bool has_class(ClassId c) const { return records_.count(c) != 0; }
  /// KeyError when absent.
  const ClassRecord& record(ClassId c) const;
  const PromptSet& prompt(TaskId t) const;
  std::vector<ClassId> classes_of(TaskId t) const;
  std::size_t total_centroids() const;

  /// DuplicateTask / DuplicateClass; ShapeError on malformed records.
  void commit_task(TaskId task_id, PromptSet prompts, std::vector<ClassRecord> records);

  /// FNV-1a over one record's serialized payload.
  std::uint64_t record_checksum(ClassId c) const;

  void save(const std::string& path) const;
  static PrototypeStore load(const std::string& path);

  friend bool operator==(const PrototypeStore&, const PrototypeStore&) = default;

 private:
  StoreConfig config_;
  std::map<ClassId, ClassRecord> records_;
  std::map<TaskId, PromptSet> prompts_;
  std::vector<TaskId> tasks_;
};

struct RankedCentroid {
  double similarity = 0.0;
  ClassId class_id = 0;
  std::size_t index = 0;
  TaskId task_id = 0;
};

/// Every key centroid ordered by (similarity desc, class id asc, index asc).
std::vector<RankedCentroid> rank_keys(std::span<const double> query, const PrototypeStore& store);

/// Task ids of the top-r key centroids, deduplicated in rank order.
/// EmptyStore on an empty store; ConfigError when r == 0.
std::vector<TaskId> query(std::span<const double> q, const PrototypeStore& store, std::size_t r);

struct Prediction {
  ClassId class_id = 0;
  double similarity = 0.0;
  TaskId via_task = 0;  // whose fine query produced the winning score
};

/// Max cosine over (fine query, class, value centroid); ties go to the lowest
/// class id. `allowed`, when non-empty, restricts the candidate classes.
Prediction predict_detailed(const std::map<TaskId, Vector>& fine_queries, const PrototypeStore& store,
                            std::span<const ClassId> allowed = {});
ClassId predict(const std::map<TaskId, Vector>& fine_queries, const PrototypeStore& store);

/// Multi-line summary for the inspect subcommand.
std::string describe(const PrototypeStore& store);

}  // namespace protoprompt

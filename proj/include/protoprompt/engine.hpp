// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protoprompt/backbone.hpp"
#include "protoprompt/metrics.hpp"
#include "protoprompt/neck_loss.hpp"
#include "protoprompt/prototype_store.hpp"
#include "protoprompt/streams.hpp"

namespace protoprompt {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  double lr_init = 1e-3;
  double lr_final = 1e-6;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_steps = 1;
};

/// Cosine schedule: lr_final + (lr_init - lr_final)(1 + cos(pi step/total))/2.
double cosine_lr(const AdamWConfig& config, std::size_t step);

/// First and second moments for a fixed list of tensors.
class AdamW {
 public:
  AdamW(AdamWConfig config, std::vector<std::size_t> sizes);

  /// One update at schedule position step_count(). Decoupled decay, then the
  /// bias-corrected moment step. ShapeError if shapes differ from construction.
  void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads);

  std::size_t step_count() const noexcept { return steps_; }
  const AdamWConfig& config() const noexcept { return config_; }

 private:
  AdamWConfig config_;
  std::vector<Vector> m_, v_;
  std::size_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Configuration

enum class PrototypeMode { MultiCentroid, ClassMean };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double lr_init = 1e-3;
  double lr_final = 1e-6;
  double weight_decay = 0.01;
  double temperature = 0.6;
  std::size_t prompt_length = 1;
  std::size_t centroids = 5;
  std::size_t retrieve = 3;
  std::uint64_t seed = 0;
  LossVariant loss = LossVariant::Cpl;
  NeckConfig neck;
  double jitter = 0.1;
  double jitter_dropout = 0.1;
  bool augment_anchors = true;
  /// Training-free mode: no prompts, no optimization, key centroids double as values.
  bool training_free = false;
  PrototypeMode prototypes = PrototypeMode::MultiCentroid;

  /// ConfigError on invalid values.
  void validate() const;
};

struct PretrainConfig {
  std::size_t epochs = 6;
  std::size_t batch_size = 32;
  double lr_init = 2e-3;
  double lr_final = 1e-5;
  double weight_decay = 0.01;
  double jitter = 0.1;
};

/// Worker count from CPP_THREADS (default 1, clamped to [1, 64]).
std::size_t thread_count();

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainResult {
  Backbone backbone;  // frozen
  double heldout_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

/// Supervised pretraining with a throwaway linear head. LeakageError when a
/// pretext class also appears in `eval_classes`.
PretrainResult pretrain_backbone(const BackboneConfig& config, const Dataset& pretext,
                                 std::span<const ClassId> eval_classes, const PretrainConfig& pcfg,
                                 std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training and inference

struct EngineState {
  const Backbone* backbone = nullptr;
  PrototypeStore store;
};

EngineState make_state(const Backbone& backbone, const TrainConfig& config);

struct TaskReport {
  TaskId task_id = 0;
  std::vector<double> epoch_losses;
  std::vector<std::size_t> skipped_batches;
  std::size_t optimizer_steps = 0;
};

/// Trains one task and commits it. FrozenError for an unfrozen backbone,
/// DuplicateClass for a class already stored, NumericError on a non-finite loss.
TaskReport train_task(EngineState& state, const TaskData& task, const TrainConfig& config);

struct InferenceResult {
  ClassId prediction = 0;
  std::vector<TaskId> candidates;
  std::size_t forward_passes = 0;
  double energy = 0.0;  // of the winning candidate's fine query
  std::map<TaskId, double> candidate_energies;
};

InferenceResult infer_detailed(const TokenSequence& x, const EngineState& state, std::size_t r);
ClassId infer(const TokenSequence& x, const EngineState& state, std::size_t r);

/// Skips retrieval and uses `task`'s prompt. With `restrict_to_task`, only the
/// task's own classes compete. KeyError for an unknown task.
ClassId infer_with_oracle_task(const TokenSequence& x, TaskId task, const EngineState& state,
                               bool restrict_to_task = false);

/// Percent correct per task on the test splits of tasks[0..count).
std::vector<double> evaluate(const EngineState& state, std::span<const TaskData> tasks, std::size_t r,
                             RunLog* log = nullptr);

struct RunOptions {
  /// Called after each committed task with its index.
  std::function<void(std::size_t, const TaskReport&, const std::vector<double>&)> on_task;
};

struct RunResult {
  EngineState state;
  RunLog log;
  /// Oracle-routed, task-restricted accuracy of task t measured right after it trained.
  std::vector<double> oracle_after_training;
  std::vector<std::uint64_t> checksum_after_task;
};

/// Algorithm over the whole stream: train each task, then evaluate on all seen tasks.
RunResult run_stream(const Backbone& backbone, const Dataset& data, const TrainConfig& config,
                     const RunOptions& options = {});

/// Test accuracy of task t under oracle routing restricted to its classes.
double oracle_task_accuracy(const EngineState& state, const TaskData& task);

// ---------------------------------------------------------------------------
// Variants for comparisons

/// cpp, baseline, ce, supcon, cpl_with_uniform, cpl_no_proto, mean_proto, joint.
std::vector<std::string> variant_names();
/// Returns `base` adjusted for the named variant; ConfigError on unknown names.
TrainConfig apply_variant(TrainConfig base, std::string_view variant);
/// Merges every task into a single one (the joint-training reference).
Dataset merge_tasks(const Dataset& data);

}  // namespace protoprompt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "protoprompt/backbone.hpp"
#include "protoprompt/prototype_store.hpp"

namespace protoprompt {

enum class GeneratorKind : std::uint32_t { GaussianToken = 0, ProceduralRaster = 1, Spiral2dLifted = 2 };

std::string_view to_string(GeneratorKind k);
GeneratorKind parse_generator_kind(std::string_view name);

struct ClassSpec {
  ClassId class_id = 0;
  GeneratorKind kind = GeneratorKind::GaussianToken;
  double noise = 0.5;      // per-entry std of the sample noise
  double amplitude = 1.0;  // scale of the class pattern
  // Per-sample offset drawn inside the shared dictionary span and added to
  // every token; nuisance variation that generic features pick up.
  double style = 0.0;
  // Mixing weight towards another class's pattern, for deliberate overlap.
  double overlap = 0.0;
  ClassId partner = -1;
  std::uint32_t train_count = 40;
  std::uint32_t test_count = 20;

  friend bool operator==(const ClassSpec&, const ClassSpec&) = default;
};

struct TaskStream {
  std::string name;
  std::uint64_t seed = 0;
  // Shared token dictionary; pretext and evaluation streams use the same one.
  std::uint64_t world_seed = 2024;
  std::uint32_t seq_len = 16;
  std::uint32_t dim = 64;
  std::vector<std::vector<ClassSpec>> tasks;

  /// ConfigError on invalid parameters or label overlap across tasks.
  void validate() const;
  std::vector<ClassId> all_classes() const;
  friend bool operator==(const TaskStream&, const TaskStream&) = default;
};

struct Sample {
  TokenSequence x;
  ClassId label = 0;
  friend bool operator==(const Sample&, const Sample&) = default;
};

struct TaskData {
  TaskId task_id = 0;
  std::vector<ClassId> classes;
  std::vector<Sample> train;
  std::vector<Sample> test;
  friend bool operator==(const TaskData&, const TaskData&) = default;
};

struct Dataset {
  TaskStream spec;
  std::vector<TaskData> tasks;

  std::vector<ClassId> all_classes() const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Deterministic in the spec. Each class draws from its own split stream.
Dataset generate(const TaskStream& spec);

/// Mean token pattern of a gaussian-token class (before noise).
TokenSequence class_pattern(const TaskStream& spec, const ClassSpec& cls);

/// Preset names: sep5x4, hard10x4, pretext, tiny.
std::vector<std::string> preset_names();
/// ConfigError on unknown name.
TaskStream default_stream(std::string_view name, std::uint64_t seed);
/// The pretext preset shaped like `eval` (same dim, seq_len and world).
TaskStream pretext_for(const TaskStream& eval, std::uint64_t seed);

/// Reads a flat key=value stream description (see README).
TaskStream parse_stream_spec(const std::string& text);

struct JitterOptions {
  double dropout = 0.0;  // probability a token is replaced by the sequence mean
};

/// Additive Gaussian token noise with E|delta| == strength per entry, plus
/// optional token dropout-to-mean. strength 0 returns x unchanged.
TokenSequence jitter_augment(const TokenSequence& x, double strength, Rng& rng, JitterOptions opts = {});

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Plain CSV: a "# seq_len=.. dim=.." line, a header, then one row per sample:
/// task,split,label,flattened tokens.
void write_csv(const Dataset& data, const std::string& path);
Dataset read_csv(const std::string& path);

}  // namespace protoprompt

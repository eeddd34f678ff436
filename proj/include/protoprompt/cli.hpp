// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "protoprompt/engine.hpp"

namespace protoprompt {

/// Everything a command needs besides its inputs. The backbone width and
/// length always come from the stream.
struct Settings {
  std::uint64_t seed = 0;
  BackboneConfig backbone;
  PretrainConfig pretrain;
  TrainConfig train;
};

/// Sets one dotted key (e.g. train.epochs). ConfigError on unknown keys or
/// values that do not parse.
void apply_setting(Settings& s, const std::string& key, const std::string& value);

/// Applies a key=value file body on top of `s`. '#' starts a comment.
void apply_settings_text(Settings& s, const std::string& text);

/// Every key with its resolved value, in a fixed order.
nlohmann::ordered_json settings_json(const Settings& s);

/// Maps an error kind onto the documented process exit code.
int exit_code(ErrorKind kind);

/// Entry point of the command-line tool. Returns the process exit code.
int run_cli(int argc, char** argv);

/// First two principal components of `points` (rows). Each axis is signed so
/// that its largest-magnitude loading is positive.
std::vector<std::pair<double, double>> pca_2d(const std::vector<Vector>& points);

}  // namespace protoprompt

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "protoprompt/linalg.hpp"

namespace protoprompt {

struct BackboneConfig {
  std::uint32_t num_layers = 4;
  std::uint32_t embed_dim = 64;
  std::uint32_t num_heads = 4;
  std::uint32_t seq_len = 16;
  std::uint32_t mlp_hidden = 128;

  /// Throws ConfigError when a field is zero or heads do not divide the width.
  void validate() const;

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

/// Data tokens of one sample, seq_len x embed_dim.
using TokenSequence = Matrix;

struct LayerNormParams {
  Vector gain;
  Vector bias;
};

/// One pre-norm encoder block. Projection matrices are applied as x * W.
struct LayerWeights {
  LayerNormParams ln_attn;
  Matrix w_query, w_key, w_value, w_out;
  Vector b_query, b_key, b_value, b_out;
  LayerNormParams ln_mlp;
  Matrix w_hidden;  // D x H
  Vector b_hidden;
  Matrix w_proj;  // H x D
  Vector b_proj;
};

struct BackboneWeights {
  Matrix input_proj;  // D x D, applied to raw data tokens
  Vector input_bias;
  Matrix position;  // seq_len x D
  Vector class_token;
  std::vector<LayerWeights> layers;
  LayerNormParams ln_final;

  /// Visits every tensor in serialization order.
  void for_each_tensor(const std::function<void(std::span<double>)>& fn);
  void for_each_tensor(const std::function<void(std::span<const double>)>& fn) const;
  std::size_t parameter_count() const;
};

/// Deep prompt: one L_p x D block injected in front of the data tokens of
/// every layer. An empty block (zero rows) disables injection at that layer.
struct PromptSet {
  std::int32_t task_id = 0;
  std::vector<Matrix> layers;

  std::size_t length() const { return layers.empty() ? 0 : layers.front().rows; }
  std::size_t parameter_count() const;
  std::uint64_t fingerprint() const;

  friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

using PromptGrads = std::vector<Matrix>;

/// Per-layer activations cached by a traced forward pass.
struct LayerTrace {
  Matrix input;  // [c, p, e], n x D
  Matrix attn_norm;  // layer-norm output fed to attention
  Matrix attn_xhat;
  Vector attn_rstd;
  Matrix query, key, value;
  std::vector<Matrix> probs;  // per head, n x n
  Matrix attended;  // concatenated head outputs, n x D
  Matrix residual;  // x + attention
  Matrix mlp_norm;
  Matrix mlp_xhat;
  Vector mlp_rstd;
  Matrix pre_act;  // n x H
  Matrix act;
};

struct ForwardTrace {
  Matrix raw_tokens;
  std::vector<LayerTrace> layers;
  Vector final_class;  // class token before the final layer norm
  Vector final_xhat;
  double final_rstd = 0.0;
  std::uint64_t prompt_fingerprint = 0;
  std::size_t prompt_length = 0;
  bool valid = false;
};

class Backbone {
 public:
  Backbone() = default;

  const BackboneConfig& config() const noexcept { return config_; }
  const BackboneWeights& weights() const noexcept { return weights_; }
  /// Throws FrozenError once frozen.
  BackboneWeights& mutable_weights();

  bool frozen() const noexcept { return frozen_; }
  /// Irreversible.
  void freeze() noexcept { frozen_ = true; }

  /// Throws FrozenError once frozen.
  void reinitialize(std::uint64_t seed);

  std::uint64_t checksum() const;

  void save(const std::filesystem::path& path) const;
  static Backbone load(const std::filesystem::path& path);

  friend Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed);

  friend bool operator==(const Backbone& a, const Backbone& b);

 private:
  BackboneConfig config_;
  BackboneWeights weights_;
  bool frozen_ = false;
};

Backbone init_backbone(const BackboneConfig& config, std::uint64_t seed);
inline void freeze(Backbone& backbone) noexcept { backbone.freeze(); }

/// Zero-valued weights with the shapes of `config`; used as a gradient buffer.
BackboneWeights zero_weights(const BackboneConfig& config);

/// Prompt tokens drawn uniformly from [-0.05, 0.05].
PromptSet init_prompts(const BackboneConfig& config, std::size_t prompt_length, std::int32_t task_id,
                       Rng& rng);

/// Prompt set with zero-row blocks at every layer.
PromptSet empty_prompts(const BackboneConfig& config, std::int32_t task_id = 0);

struct LayerOutput {
  Vector class_token;
  Matrix tokens;
};

/// One encoder block over [class, prompt, tokens]; prompt outputs are dropped.
LayerOutput layer_forward(const BackboneConfig& config, const LayerWeights& layer,
                          std::span<const double> class_token, const Matrix& prompt, const Matrix& tokens);

/// Final-layer class token after the closing layer norm. With `prompts ==
/// nullptr` this is the bare frozen embedding. When `trace` is non-null the
/// activations needed by the backward passes are recorded into it.
Vector encode(const Backbone& backbone, const TokenSequence& x, const PromptSet* prompts,
              ForwardTrace* trace = nullptr);

/// d(grad_embedding . embedding)/dP for the traced pass. Weight gradients are
/// not formed.
PromptGrads backward_to_prompts(const Backbone& backbone, const ForwardTrace& trace, const PromptSet& prompts,
                                std::span<const double> grad_embedding);

/// Accumulates weight gradients of (grad_embedding . embedding) into `grads`.
/// Used only for pretraining, before the backbone is frozen.
void backward_to_weights(const Backbone& backbone, const ForwardTrace& trace, const PromptSet* prompts,
                         std::span<const double> grad_embedding, BackboneWeights& grads);

}  // namespace protoprompt

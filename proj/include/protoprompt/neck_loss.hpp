// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protoprompt/backbone.hpp"
#include "protoprompt/linalg.hpp"

namespace protoprompt {

using ClassId = std::int32_t;

// ---------------------------------------------------------------------------
// MLP neck

struct NeckConfig {
  std::size_t num_layers = 3;
  /// 0 selects 4 * input width.
  std::size_t hidden = 0;
};

/// Disposable projection head used only while a task trains. Rectifier
/// between layers, linear output, then l2 normalization.
struct MlpNeck {
  std::vector<Matrix> weights;  // in x out, applied as x * W
  std::vector<Vector> biases;

  std::size_t input_dim() const { return weights.empty() ? 0 : weights.front().rows; }
  std::size_t output_dim() const { return weights.empty() ? 0 : weights.back().cols; }
  std::size_t parameter_count() const;
};

struct NeckTrace {
  std::vector<Vector> layer_inputs;  // input of each affine layer (post-activation)
  std::vector<Vector> pre_acts;
  Vector output;  // normalized
  double raw_norm = 0.0;
};

using NeckGrads = MlpNeck;

MlpNeck init_neck(std::size_t dim, const NeckConfig& config, Rng& rng);
/// Single identity layer; neck_forward then reduces to l2_normalize.
MlpNeck identity_neck(std::size_t dim);
NeckGrads zero_grads_like(const MlpNeck& neck);

Vector neck_forward(const MlpNeck& neck, std::span<const double> input, NeckTrace* trace = nullptr);

/// Accumulates parameter gradients into `grads` and returns d(input).
Vector neck_backward(const MlpNeck& neck, const NeckTrace& trace, std::span<const double> grad_output,
                     NeckGrads& grads);

// ---------------------------------------------------------------------------
// Contrastive losses

enum class LossVariant { Cpl, CplWithUniform, CplNoProto, SupCon, CrossEntropy };

std::string_view to_string(LossVariant v);
/// Throws ConfigError on an unknown name.
LossVariant parse_loss_variant(std::string_view name);

/// Embeddings and anchors are expected unit-norm; similarities are plain dot
/// products.
struct LossBatch {
  std::vector<Vector> embeddings;
  std::vector<ClassId> labels;
  std::vector<Vector> anchors;
  std::vector<ClassId> anchor_labels;  // optional; checked for disjointness when present
  double temperature = 0.6;
};

/// Per-sample similarity gradients. Row i of `batch` holds dL_i/ds_{i,j};
/// row i of `anchors` holds dL_i/ds_{i,a}. Skipped samples have zero rows.
struct SimilarityGrads {
  Matrix batch;
  Matrix anchors;
  std::vector<bool> skipped;
};

/// Loss in terms of raw similarity rows. `batch_sims` is N x N (diagonal
/// ignored), `anchor_sims` is N x K.
double similarity_loss(const Matrix& batch_sims, const Matrix& anchor_sims, std::span<const ClassId> labels,
                       double temperature, LossVariant variant);
SimilarityGrads similarity_loss_grads(const Matrix& batch_sims, const Matrix& anchor_sims,
                                      std::span<const ClassId> labels, double temperature, LossVariant variant);

double cpl_loss(const LossBatch& batch);
SimilarityGrads cpl_grad_similarities(const LossBatch& batch);

/// Linear classifier used only by the cross-entropy ablation.
struct LinearHead {
  Matrix weight;  // classes x D
  Vector bias;
  std::vector<ClassId> classes;  // row -> class id
};

LinearHead init_linear_head(std::size_t dim, std::vector<ClassId> classes, Rng& rng);

struct LossResult {
  double value = 0.0;
  std::vector<Vector> grad_embeddings;  // dL/dz for each batch embedding
  std::size_t contributing = 0;  // samples that entered the mean
};

/// Batch loss for any variant, with gradients w.r.t. the embeddings. The
/// cross-entropy variant needs `head` and accumulates into `head_grads`.
LossResult variant_loss(const LossBatch& batch, LossVariant variant, const LinearHead* head = nullptr,
                        LinearHead* head_grads = nullptr);

// ---------------------------------------------------------------------------
// Backprop through the neck into the prompts

struct SampleTrace {
  ForwardTrace backbone;
  NeckTrace neck;
};

struct TrainableGrads {
  NeckGrads neck;
  PromptGrads prompts;
};

/// Chains embedding gradients through the neck and the frozen backbone.
/// Only neck and prompt gradients are produced.
TrainableGrads cpl_backward(const Backbone& backbone, const MlpNeck& neck, const PromptSet& prompts,
                            std::span<const SampleTrace> traces, std::span<const Vector> grad_embeddings);

// ---------------------------------------------------------------------------
// Prototype augmentation

/// mu + scale * e with e ~ N(0, I), before normalization.
Vector perturb_prototype(std::span<const double> prototype, double scale, Rng& rng);
/// l2_normalize(perturb_prototype(...)).
Vector augment_prototype(std::span<const double> prototype, double scale, Rng& rng);

}  // namespace protoprompt

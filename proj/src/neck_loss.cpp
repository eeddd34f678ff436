// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/neck_loss.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace protoprompt {

std::size_t MlpNeck::parameter_count() const {
  std::size_t n = 0;
  for (const auto& w : weights) n += w.size();
  for (const auto& b : biases) n += b.size();
  return n;
}

MlpNeck init_neck(std::size_t dim, const NeckConfig& config, Rng& rng) {
  require(dim > 0 && config.num_layers > 0, ErrorKind::ConfigError, "neck needs positive width and depth");
  const std::size_t hidden = config.hidden == 0 ? 4 * dim : config.hidden;
  MlpNeck neck;
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::size_t in = l == 0 ? dim : hidden;
    const std::size_t out = l + 1 == config.num_layers ? dim : hidden;
    const bool last = l + 1 == config.num_layers;
    const double sd = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(in));
    Matrix w(in, out);
    for (double& v : w.data) v = sd * rng.normal();
    neck.weights.push_back(std::move(w));
    neck.biases.emplace_back(out, 0.0);
  }
  return neck;
}

MlpNeck identity_neck(std::size_t dim) {
  MlpNeck neck;
  Matrix w(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) w(i, i) = 1.0;
  neck.weights.push_back(std::move(w));
  neck.biases.emplace_back(dim, 0.0);
  return neck;
}

NeckGrads zero_grads_like(const MlpNeck& neck) {
  NeckGrads g;
  for (const auto& w : neck.weights) g.weights.emplace_back(w.rows, w.cols);
  for (const auto& b : neck.biases) g.biases.emplace_back(b.size(), 0.0);
  return g;
}

Vector neck_forward(const MlpNeck& neck, std::span<const double> input, NeckTrace* trace) {
  require(!neck.weights.empty(), ErrorKind::ConfigError, "empty neck");
  require(input.size() == neck.input_dim(), ErrorKind::ShapeError, "neck input width mismatch");
  if (trace) *trace = NeckTrace{};
  Vector x(input.begin(), input.end());
  const std::size_t depth = neck.weights.size();
  for (std::size_t l = 0; l < depth; ++l) {
    const Matrix& w = neck.weights[l];
    Vector y = neck.biases[l];
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      const double* row = w.data.data() + i * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * row[j];
    }
    if (trace) {
      trace->layer_inputs.push_back(x);
      trace->pre_acts.push_back(y);
    }
    if (l + 1 < depth) {
      for (double& v : y) v = std::max(v, 0.0);
    }
    x = std::move(y);
  }
  const double n = norm(x);
  Vector out = l2_normalize(x);
  if (trace) {
    trace->raw_norm = n;
    trace->output = out;
  }
  return out;
}

Vector neck_backward(const MlpNeck& neck, const NeckTrace& trace, std::span<const double> grad_output,
                     NeckGrads& grads) {
  const std::size_t depth = neck.weights.size();
  require(trace.layer_inputs.size() == depth && trace.pre_acts.size() == depth, ErrorKind::TraceError,
          "neck trace does not match the neck");
  require(grad_output.size() == neck.output_dim(), ErrorKind::ShapeError, "neck gradient width mismatch");
  Vector g = l2_normalize_backward(trace.output, trace.raw_norm, grad_output);
  for (std::size_t l = depth; l-- > 0;) {
    if (l + 1 < depth) {
      const Vector& pre = trace.pre_acts[l];
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (pre[j] <= 0.0) g[j] = 0.0;
      }
    }
    const Matrix& w = neck.weights[l];
    const Vector& x = trace.layer_inputs[l];
    Matrix& gw = grads.weights[l];
    axpy(1.0, g, grads.biases[l]);
    Vector gx(w.rows, 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double* row = w.data.data() + i * w.cols;
      double* grow = gw.data.data() + i * gw.cols;
      double s = 0.0;
      const double xi = x[i];
      for (std::size_t j = 0; j < w.cols; ++j) {
        s += row[j] * g[j];
        grow[j] += xi * g[j];
      }
      gx[i] = s;
    }
    g = std::move(gx);
  }
  return g;
}

std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::Cpl: return "cpl";
    case LossVariant::CplWithUniform: return "cpl_with_uniform";
    case LossVariant::CplNoProto: return "cpl_no_proto";
    case LossVariant::SupCon: return "supcon";
    case LossVariant::CrossEntropy: return "ce";
  }
  return "unknown";
}

LossVariant parse_loss_variant(std::string_view name) {
  for (auto v : {LossVariant::Cpl, LossVariant::CplWithUniform, LossVariant::CplNoProto, LossVariant::SupCon,
                 LossVariant::CrossEntropy}) {
    if (to_string(v) == name) return v;
  }
  fail(ErrorKind::ConfigError, "unknown loss variant '" + std::string(name) + "'");
}

namespace {

bool uses_anchors(LossVariant v) { return v == LossVariant::Cpl || v == LossVariant::CplWithUniform; }
bool positives_in_denominator(LossVariant v) {
  return v == LossVariant::CplWithUniform || v == LossVariant::SupCon;
}

struct SampleTerms {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> batch_denominator;  // batch indices in the denominator
  bool with_anchors = false;
};

SampleTerms sample_terms(std::size_t i, std::span<const ClassId> labels, std::size_t num_anchors,
                         LossVariant variant) {
  SampleTerms t;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    if (j == i) continue;
    if (labels[j] == labels[i]) {
      t.positives.push_back(j);
      if (positives_in_denominator(variant)) t.batch_denominator.push_back(j);
    } else {
      t.batch_denominator.push_back(j);
    }
  }
  t.with_anchors = uses_anchors(variant) && num_anchors > 0;
  return t;
}

void check_similarity_shapes(const Matrix& batch_sims, const Matrix& anchor_sims, std::span<const ClassId> labels,
                             double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorKind::ConfigError, "temperature must be positive");
  require(batch_sims.rows == labels.size() && batch_sims.cols == labels.size(), ErrorKind::ShapeError,
          "similarity matrix must be N x N");
  require(anchor_sims.cols == 0 || anchor_sims.rows == labels.size(), ErrorKind::ShapeError,
          "anchor similarity rows must match the batch");
  require(labels.size() >= 2, ErrorKind::EmptyInput, "a contrastive batch needs at least two samples");
}

// Per-sample loss and, optionally, its similarity gradients. Returns nullopt
// for a skipped sample (no positives).
std::optional<double> sample_loss(std::size_t i, const Matrix& batch_sims, const Matrix& anchor_sims,
                                  std::span<const ClassId> labels, double tau, LossVariant variant,
                                  double* grad_batch_row, double* grad_anchor_row) {
  const std::size_t num_anchors = anchor_sims.cols;
  const SampleTerms t = sample_terms(i, labels, num_anchors, variant);
  if (t.positives.empty()) return std::nullopt;
  const std::size_t denom_size = t.batch_denominator.size() + (t.with_anchors ? num_anchors : 0);
  require(denom_size > 0, ErrorKind::AnchorlessSample,
          "sample " + std::to_string(i) + " has no negatives and no anchors");

  Vector logits;
  logits.reserve(denom_size);
  for (std::size_t j : t.batch_denominator) logits.push_back(batch_sims(i, j) / tau);
  if (t.with_anchors) {
    for (std::size_t a = 0; a < num_anchors; ++a) logits.push_back(anchor_sims(i, a) / tau);
  }
  const double lse = log_sum_exp(logits);
  const double inv_pos = 1.0 / static_cast<double>(t.positives.size());
  double pos_mean = 0.0;
  for (std::size_t p : t.positives) pos_mean += batch_sims(i, p) / tau;
  pos_mean *= inv_pos;

  if (grad_batch_row) {
    for (std::size_t p : t.positives) grad_batch_row[p] += -inv_pos / tau;
    std::size_t k = 0;
    for (std::size_t j : t.batch_denominator) grad_batch_row[j] += std::exp(logits[k++] - lse) / tau;
    if (t.with_anchors) {
      for (std::size_t a = 0; a < num_anchors; ++a) grad_anchor_row[a] += std::exp(logits[k++] - lse) / tau;
    }
  }
  return lse - pos_mean;
}

Matrix similarity_block(std::span<const Vector> a, std::span<const Vector> b) {
  Matrix m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = dot(a[i], b[j]);
  return m;
}

void check_batch(const LossBatch& batch) {
  require(batch.embeddings.size() == batch.labels.size(), ErrorKind::ShapeError, "labels must match embeddings");
  require(batch.embeddings.size() >= 2, ErrorKind::EmptyInput, "a contrastive batch needs at least two samples");
  const std::size_t d = batch.embeddings.front().size();
  for (const auto& z : batch.embeddings) require(z.size() == d, ErrorKind::ShapeError, "embedding width mismatch");
  for (const auto& u : batch.anchors) require(u.size() == d, ErrorKind::ShapeError, "anchor width mismatch");
  if (!batch.anchor_labels.empty()) {
    require(batch.anchor_labels.size() == batch.anchors.size(), ErrorKind::ShapeError,
            "anchor labels must match anchors");
    const std::set<ClassId> current(batch.labels.begin(), batch.labels.end());
    for (ClassId c : batch.anchor_labels) {
      require(!current.contains(c), ErrorKind::ConfigError,
              "anchor class " + std::to_string(c) + " also appears in the batch");
    }
  }
}

}  // namespace

double similarity_loss(const Matrix& batch_sims, const Matrix& anchor_sims, std::span<const ClassId> labels,
                       double temperature, LossVariant variant) {
  require(variant != LossVariant::CrossEntropy, ErrorKind::ConfigError, "cross-entropy is not similarity based");
  check_similarity_shapes(batch_sims, anchor_sims, labels, temperature);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (auto li = sample_loss(i, batch_sims, anchor_sims, labels, temperature, variant, nullptr, nullptr)) {
      total += *li;
      ++count;
    }
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

SimilarityGrads similarity_loss_grads(const Matrix& batch_sims, const Matrix& anchor_sims,
                                      std::span<const ClassId> labels, double temperature, LossVariant variant) {
  require(variant != LossVariant::CrossEntropy, ErrorKind::ConfigError, "cross-entropy is not similarity based");
  check_similarity_shapes(batch_sims, anchor_sims, labels, temperature);
  SimilarityGrads g;
  g.batch = Matrix(labels.size(), labels.size());
  g.anchors = Matrix(labels.size(), anchor_sims.cols);
  g.skipped.assign(labels.size(), false);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double* arow = anchor_sims.cols ? g.anchors.row(i).data() : nullptr;
    const auto li =
        sample_loss(i, batch_sims, anchor_sims, labels, temperature, variant, g.batch.row(i).data(), arow);
    g.skipped[i] = !li.has_value();
  }
  return g;
}

double cpl_loss(const LossBatch& batch) {
  check_batch(batch);
  return similarity_loss(similarity_block(batch.embeddings, batch.embeddings),
                         similarity_block(batch.embeddings, batch.anchors), batch.labels, batch.temperature,
                         LossVariant::Cpl);
}

SimilarityGrads cpl_grad_similarities(const LossBatch& batch) {
  check_batch(batch);
  return similarity_loss_grads(similarity_block(batch.embeddings, batch.embeddings),
                               similarity_block(batch.embeddings, batch.anchors), batch.labels, batch.temperature,
                               LossVariant::Cpl);
}

LinearHead init_linear_head(std::size_t dim, std::vector<ClassId> classes, Rng& rng) {
  require(!classes.empty(), ErrorKind::ConfigError, "linear head needs at least one class");
  LinearHead head;
  head.weight = Matrix(classes.size(), dim);
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : head.weight.data) v = sd * rng.normal();
  head.bias.assign(classes.size(), 0.0);
  head.classes = std::move(classes);
  return head;
}

namespace {

LossResult cross_entropy(const LossBatch& batch, const LinearHead& head, LinearHead* head_grads) {
  const std::size_t n = batch.embeddings.size();
  const std::size_t k = head.classes.size();
  const std::size_t d = head.weight.cols;
  LossResult r;
  r.grad_embeddings.assign(n, Vector(d, 0.0));
  r.contributing = n;
  Vector logits(k);
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = std::find(head.classes.begin(), head.classes.end(), batch.labels[i]);
    require(it != head.classes.end(), ErrorKind::ConfigError,
            "label " + std::to_string(batch.labels[i]) + " is not covered by the linear head");
    const auto target = static_cast<std::size_t>(it - head.classes.begin());
    require(batch.embeddings[i].size() == d, ErrorKind::ShapeError, "embedding width mismatch");
    for (std::size_t c = 0; c < k; ++c) logits[c] = head.bias[c] + dot(head.weight.row(c), batch.embeddings[i]);
    const double lse = log_sum_exp(logits);
    r.value += lse - logits[target];
    for (std::size_t c = 0; c < k; ++c) {
      const double dlogit = (std::exp(logits[c] - lse) - (c == target ? 1.0 : 0.0)) / static_cast<double>(n);
      axpy(dlogit, head.weight.row(c), r.grad_embeddings[i]);
      if (head_grads) {
        axpy(dlogit, batch.embeddings[i], head_grads->weight.row(c));
        head_grads->bias[c] += dlogit;
      }
    }
  }
  r.value /= static_cast<double>(n);
  return r;
}

}  // namespace

LossResult variant_loss(const LossBatch& batch, LossVariant variant, const LinearHead* head,
                        LinearHead* head_grads) {
  check_batch(batch);
  if (variant == LossVariant::CrossEntropy) {
    require(head != nullptr, ErrorKind::ConfigError, "cross-entropy variant needs a linear head");
    return cross_entropy(batch, *head, head_grads);
  }
  const std::size_t n = batch.embeddings.size();
  const std::size_t d = batch.embeddings.front().size();
  const bool anchored = uses_anchors(variant);
  const std::span<const Vector> anchors = anchored ? std::span<const Vector>(batch.anchors) : std::span<const Vector>();
  const Matrix sims = similarity_block(batch.embeddings, batch.embeddings);
  const Matrix anchor_sims = similarity_block(batch.embeddings, anchors);
  const SimilarityGrads g = similarity_loss_grads(sims, anchor_sims, batch.labels, batch.temperature, variant);

  LossResult r;
  r.grad_embeddings.assign(n, Vector(d, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    if (!g.skipped[i]) ++r.contributing;
  }
  r.value = similarity_loss(sims, anchor_sims, batch.labels, batch.temperature, variant);
  if (r.contributing == 0) return r;
  const double scale = 1.0 / static_cast<double>(r.contributing);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double gij = g.batch(i, j);
      if (gij == 0.0) continue;
      // s_ij = z_i . z_j
      axpy(scale * gij, batch.embeddings[j], r.grad_embeddings[i]);
      axpy(scale * gij, batch.embeddings[i], r.grad_embeddings[j]);
    }
    for (std::size_t a = 0; a < anchors.size(); ++a) {
      const double gia = g.anchors(i, a);
      if (gia != 0.0) axpy(scale * gia, anchors[a], r.grad_embeddings[i]);
    }
  }
  return r;
}

TrainableGrads cpl_backward(const Backbone& backbone, const MlpNeck& neck, const PromptSet& prompts,
                            std::span<const SampleTrace> traces, std::span<const Vector> grad_embeddings) {
  require(traces.size() == grad_embeddings.size(), ErrorKind::TraceError,
          "one trace per embedding gradient is required");
  TrainableGrads out;
  out.neck = zero_grads_like(neck);
  out.prompts.reserve(prompts.layers.size());
  for (const auto& layer : prompts.layers) out.prompts.emplace_back(layer.rows, layer.cols);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const Vector g_emb = neck_backward(neck, traces[i].neck, grad_embeddings[i], out.neck);
    const PromptGrads pg = backward_to_prompts(backbone, traces[i].backbone, prompts, g_emb);
    for (std::size_t l = 0; l < pg.size(); ++l) axpy(1.0, pg[l].data, out.prompts[l].data);
  }
  return out;
}

Vector perturb_prototype(std::span<const double> prototype, double scale, Rng& rng) {
  require(scale >= 0.0 && std::isfinite(scale), ErrorKind::ConfigError, "augmentation scale must be finite and >= 0");
  Vector v(prototype.begin(), prototype.end());
  if (scale == 0.0) return v;
  for (double& x : v) x += scale * rng.normal();
  return v;
}

Vector augment_prototype(std::span<const double> prototype, double scale, Rng& rng) {
  return l2_normalize(perturb_prototype(prototype, scale, rng));
}

}  // namespace protoprompt

// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <set>
#include <thread>

namespace protoprompt {

namespace {

constexpr std::uint64_t kTrainKey = 0x7A5C;
constexpr std::uint64_t kPretrainKey = 0x9E7;
constexpr std::uint64_t kClusterKey = 0xC1;

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; results
// must be written to per-index slots so the outcome does not depend on the
// worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * n / workers; i < (w + 1) * n / workers; ++i) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

std::uint64_t cluster_seed(std::uint64_t seed, ClassId c) {
  return Rng::mix(seed ^ Rng::mix(kClusterKey + static_cast<std::uint32_t>(c)));
}

std::vector<Vector> prototypes_of(std::span<const Vector> embeddings, const TrainConfig& cfg, ClassId c) {
  if (cfg.prototypes == PrototypeMode::ClassMean) return {class_mean(embeddings)};
  return multi_centroid(embeddings, cfg.centroids, cluster_seed(cfg.seed, c));
}

// Mean over coordinates of the per-coordinate (population) variance.
double mean_variance(std::span<const Vector> embeddings) {
  const std::size_t n = embeddings.size(), d = embeddings.front().size();
  double total = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double mean = 0.0;
    for (const auto& e : embeddings) mean += e[k];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (const auto& e : embeddings) var += (e[k] - mean) * (e[k] - mean);
    total += var / static_cast<double>(n);
  }
  return total / static_cast<double>(d);
}

void add_into(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void add_grads(TrainableGrads& acc, const TrainableGrads& g) {
  for (std::size_t l = 0; l < acc.prompts.size(); ++l) add_into(acc.prompts[l].data, g.prompts[l].data);
  for (std::size_t l = 0; l < acc.neck.weights.size(); ++l) {
    add_into(acc.neck.weights[l].data, g.neck.weights[l].data);
    add_into(acc.neck.biases[l], g.neck.biases[l]);
  }
}

bool uses_anchors(LossVariant v) { return v == LossVariant::Cpl || v == LossVariant::CplWithUniform; }

}  // namespace

// ---------------------------------------------------------------------------

double cosine_lr(const AdamWConfig& c, std::size_t step) {
  const double total = static_cast<double>(std::max<std::size_t>(c.total_steps, 1));
  const double t = std::min(static_cast<double>(step), total);
  if (t == total) return c.lr_final;
  return c.lr_final + 0.5 * (c.lr_init - c.lr_final) * (1.0 + std::cos(std::numbers::pi * t / total));
}

AdamW::AdamW(AdamWConfig config, std::vector<std::size_t> sizes) : config_(config) {
  require(config.lr_init > 0.0 && config.lr_final > 0.0 && config.lr_final <= config.lr_init, ErrorKind::ConfigError,
          "need 0 < lr_final <= lr_init");
  require(config.weight_decay >= 0.0, ErrorKind::ConfigError, "weight decay must be >= 0");
  for (auto n : sizes) {
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
  }
}

void AdamW::step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads) {
  require(params.size() == m_.size() && grads.size() == m_.size(), ErrorKind::ShapeError,
          "optimizer tensor count mismatch");
  const double lr = cosine_lr(config_, steps_);
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < m_.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    require(p.size() == m_[k].size() && g.size() == m_[k].size(), ErrorKind::ShapeError, "optimizer shape mismatch");
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] -= lr * config_.weight_decay * p[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
  }
}

void TrainConfig::validate() const {
  require(batch_size >= 1, ErrorKind::ConfigError, "batch_size must be >= 1");
  require(lr_init > 0.0 && lr_final > 0.0 && lr_final <= lr_init, ErrorKind::ConfigError,
          "need 0 < lr_final <= lr_init");
  require(weight_decay >= 0.0, ErrorKind::ConfigError, "weight_decay must be >= 0");
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::ConfigError, "temperature must be > 0");
  require(centroids >= 1, ErrorKind::ConfigError, "centroids must be >= 1");
  require(retrieve >= 1, ErrorKind::ConfigError, "retrieve must be >= 1");
  require(jitter >= 0.0 && jitter_dropout >= 0.0 && jitter_dropout <= 1.0, ErrorKind::ConfigError,
          "bad jitter settings");
  require(neck.num_layers >= 1, ErrorKind::ConfigError, "neck needs at least one layer");
}

std::size_t thread_count() {
  const char* env = std::getenv("CPP_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (!end || *end != '\0' || n < 1) return 1;
  return static_cast<std::size_t>(std::min<long>(n, 64));
}

// ---------------------------------------------------------------------------

PretrainResult pretrain_backbone(const BackboneConfig& config, const Dataset& pretext,
                                 std::span<const ClassId> eval_classes, const PretrainConfig& pcfg,
                                 std::uint64_t seed) {
  const auto classes = pretext.all_classes();
  for (ClassId c : classes)
    require(std::find(eval_classes.begin(), eval_classes.end(), c) == eval_classes.end(), ErrorKind::LeakageError,
            "pretext class " + std::to_string(c) + " also appears in the evaluation stream");
  require(pretext.spec.dim == config.embed_dim && pretext.spec.seq_len == config.seq_len, ErrorKind::ConfigError,
          "pretext stream shape does not match the backbone");
  require(pcfg.batch_size >= 1, ErrorKind::ConfigError, "batch_size must be >= 1");

  std::vector<const Sample*> train, test;
  for (const auto& t : pretext.tasks) {
    for (const auto& s : t.train) train.push_back(&s);
    for (const auto& s : t.test) test.push_back(&s);
  }
  require(!train.empty(), ErrorKind::EmptyInput, "pretext stream has no training samples");

  Rng rng = Rng(seed).split(kPretrainKey);
  Backbone bb = init_backbone(config, seed);
  Rng head_rng = rng.split(1);
  LinearHead head = init_linear_head(config.embed_dim, classes, head_rng);

  const std::size_t steps_per_epoch = (train.size() + pcfg.batch_size - 1) / pcfg.batch_size;
  AdamWConfig ocfg{pcfg.lr_init, pcfg.lr_final, pcfg.weight_decay, 0.9, 0.999, 1e-8,
                   std::max<std::size_t>(1, pcfg.epochs * steps_per_epoch)};
  std::vector<std::size_t> sizes;
  bb.mutable_weights().for_each_tensor([&](std::span<double> t) { sizes.push_back(t.size()); });
  sizes.push_back(head.weight.size());
  sizes.push_back(head.bias.size());
  AdamW opt(ocfg, sizes);

  PretrainResult result;
  for (std::size_t epoch = 0; epoch < pcfg.epochs; ++epoch) {
    Rng erng = rng.split(100 + epoch);
    const auto order = shuffled(train.size(), erng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t lo = b * pcfg.batch_size, hi = std::min(train.size(), lo + pcfg.batch_size);
      const std::size_t n = hi - lo;
      Rng brng = erng.split(b);
      LossBatch batch;
      batch.embeddings.resize(n);
      batch.labels.resize(n);
      std::vector<ForwardTrace> traces(n);
      parallel_for(n, [&](std::size_t i) {
        const Sample& s = *train[order[lo + i]];
        Rng srng = brng.split(i);
        const auto x = jitter_augment(s.x, pcfg.jitter, srng);
        batch.embeddings[i] = encode(bb, x, nullptr, &traces[i]);
        batch.labels[i] = s.label;
      });
      LinearHead head_grads = head;
      std::fill(head_grads.weight.data.begin(), head_grads.weight.data.end(), 0.0);
      std::fill(head_grads.bias.begin(), head_grads.bias.end(), 0.0);
      const auto res = variant_loss(batch, LossVariant::CrossEntropy, &head, &head_grads);
      require(std::isfinite(res.value), ErrorKind::NumericError, "non-finite pretraining loss");
      loss_sum += res.value;

      std::vector<BackboneWeights> per_sample(n, zero_weights(config));
      parallel_for(n, [&](std::size_t i) {
        backward_to_weights(bb, traces[i], nullptr, res.grad_embeddings[i], per_sample[i]);
      });
      BackboneWeights total = zero_weights(config);
      std::vector<std::span<double>> total_spans;
      total.for_each_tensor([&](std::span<double> t) { total_spans.push_back(t); });
      for (auto& g : per_sample) {
        std::size_t k = 0;
        g.for_each_tensor([&](std::span<double> t) { add_into(total_spans[k++], t); });
      }
      std::vector<std::span<double>> params;
      std::vector<std::span<const double>> grads;
      bb.mutable_weights().for_each_tensor([&](std::span<double> t) { params.push_back(t); });
      for (auto s : total_spans) grads.emplace_back(s);
      params.emplace_back(head.weight.data);
      params.emplace_back(head.bias);
      grads.emplace_back(head_grads.weight.data);
      grads.emplace_back(head_grads.bias);
      opt.step(params, grads);
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(steps_per_epoch));
  }

  std::size_t correct = 0;
  std::vector<int> hits(test.size(), 0);
  parallel_for(test.size(), [&](std::size_t i) {
    const auto e = encode(bb, test[i]->x, nullptr);
    std::size_t best = 0;
    double best_v = -1e300;
    for (std::size_t c = 0; c < head.classes.size(); ++c) {
      double v = head.bias[c];
      for (std::size_t k = 0; k < e.size(); ++k) v += head.weight(c, k) * e[k];
      if (v > best_v) best_v = v, best = c;
    }
    hits[i] = head.classes[best] == test[i]->label;
  });
  for (int h : hits) correct += static_cast<std::size_t>(h);
  result.heldout_accuracy = test.empty() ? 0.0 : 100.0 * double(correct) / double(test.size());
  bb.freeze();
  result.backbone = std::move(bb);
  return result;
}

// ---------------------------------------------------------------------------

EngineState make_state(const Backbone& backbone, const TrainConfig& config) {
  config.validate();
  EngineState s;
  s.backbone = &backbone;
  s.store = PrototypeStore(StoreConfig{backbone.config().embed_dim,
                                       config.prototypes == PrototypeMode::ClassMean ? 1 : config.centroids,
                                       config.retrieve, config.temperature});
  return s;
}

TaskReport train_task(EngineState& state, const TaskData& task, const TrainConfig& cfg) {
  cfg.validate();
  require(state.backbone != nullptr, ErrorKind::ConfigError, "engine has no backbone");
  const Backbone& bb = *state.backbone;
  require(bb.frozen(), ErrorKind::FrozenError, "train_task needs a frozen backbone");
  for (ClassId c : task.classes)
    require(!state.store.has_class(c), ErrorKind::DuplicateClass, "class " + std::to_string(c) + " already learned");
  require(!task.train.empty(), ErrorKind::EmptyInput, "task has no training samples");
  for (const auto& s : task.train)
    require(std::find(task.classes.begin(), task.classes.end(), s.label) != task.classes.end(),
            ErrorKind::ConfigError, "training label outside the task's class list");

  const std::size_t n = task.train.size();
  const std::size_t dim = bb.config().embed_dim;
  Rng rng = Rng(cfg.seed).split(kTrainKey).split(static_cast<std::uint32_t>(task.task_id));
  TaskReport report;
  report.task_id = task.task_id;

  // Key prototypes from the bare frozen encoder.
  std::vector<Vector> keys(n);
  parallel_for(n, [&](std::size_t i) { keys[i] = l2_normalize(encode(bb, task.train[i].x, nullptr)); });

  PromptSet prompts = empty_prompts(bb.config(), task.task_id);
  std::vector<Vector> values = keys;

  if (!cfg.training_free) {
    Rng neck_rng = rng.split(1), prompt_rng = rng.split(2), head_rng = rng.split(3);
    MlpNeck neck = init_neck(dim, cfg.neck, neck_rng);
    prompts = init_prompts(bb.config(), cfg.prompt_length, task.task_id, prompt_rng);
    LinearHead head;
    const bool ce = cfg.loss == LossVariant::CrossEntropy;
    if (ce) head = init_linear_head(dim, task.classes, head_rng);

    // Previous-class value centroids and their scales.
    std::vector<std::pair<const Vector*, double>> previous;
    std::vector<ClassId> previous_labels;
    if (uses_anchors(cfg.loss))
      for (const auto& [id, r] : state.store.records())
        for (const auto& v : r.value_centroids) {
          previous.emplace_back(&v, r.aug_scale);
          previous_labels.push_back(id);
        }

    std::vector<std::size_t> sizes;
    for (const auto& l : prompts.layers) sizes.push_back(l.size());
    for (std::size_t l = 0; l < neck.weights.size(); ++l) {
      sizes.push_back(neck.weights[l].size());
      sizes.push_back(neck.biases[l].size());
    }
    if (ce) {
      sizes.push_back(head.weight.size());
      sizes.push_back(head.bias.size());
    }
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    AdamW opt(AdamWConfig{cfg.lr_init, cfg.lr_final, cfg.weight_decay, 0.9, 0.999, 1e-8,
                          std::max<std::size_t>(1, cfg.epochs * steps_per_epoch)},
              sizes);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng erng = rng.split(1000 + epoch);
      const auto order = shuffled(n, erng);
      double loss_sum = 0.0;
      std::size_t used = 0, skipped = 0;
      for (std::size_t b = 0; b < steps_per_epoch; ++b) {
        const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
        const std::size_t bn = hi - lo;
        Rng brng = erng.split(b);
        LossBatch batch;
        batch.temperature = cfg.temperature;
        batch.embeddings.resize(bn);
        batch.labels.resize(bn);
        Rng arng = brng.split(0xA);
        for (std::size_t a = 0; a < previous.size(); ++a) {
          const auto& [v, m] = previous[a];
          batch.anchors.push_back(cfg.augment_anchors ? augment_prototype(*v, m, arng) : *v);
        }
        batch.anchor_labels = previous_labels;
        std::vector<SampleTrace> traces(bn);
        parallel_for(bn, [&](std::size_t i) {
          const Sample& s = task.train[order[lo + i]];
          Rng srng = brng.split(i + 1);
          const auto x = jitter_augment(s.x, cfg.jitter, srng, JitterOptions{cfg.jitter_dropout});
          const auto e = encode(bb, x, &prompts, &traces[i].backbone);
          batch.embeddings[i] = neck_forward(neck, e, &traces[i].neck);
          batch.labels[i] = s.label;
        });

        LinearHead head_grads;
        if (ce) {
          head_grads = head;
          std::fill(head_grads.weight.data.begin(), head_grads.weight.data.end(), 0.0);
          std::fill(head_grads.bias.begin(), head_grads.bias.end(), 0.0);
        }
        LossResult res;
        try {
          res = variant_loss(batch, cfg.loss, ce ? &head : nullptr, ce ? &head_grads : nullptr);
        } catch (const Error& e) {
          // A single-class batch with nothing to contrast against.
          if (e.kind() != ErrorKind::AnchorlessSample) throw;
          ++skipped;
          continue;
        }
        require(std::isfinite(res.value), ErrorKind::NumericError,
                "non-finite loss in task " + std::to_string(task.task_id));
        if (res.contributing == 0) {
          ++skipped;
          continue;
        }

        std::vector<TrainableGrads> per_sample(bn);
        parallel_for(bn, [&](std::size_t i) {
          per_sample[i] = cpl_backward(bb, neck, prompts, std::span(traces).subspan(i, 1),
                                       std::span(res.grad_embeddings).subspan(i, 1));
        });
        TrainableGrads total = std::move(per_sample[0]);
        for (std::size_t i = 1; i < bn; ++i) add_grads(total, per_sample[i]);

        std::vector<std::span<double>> params;
        std::vector<std::span<const double>> grads;
        for (std::size_t l = 0; l < prompts.layers.size(); ++l) {
          params.emplace_back(prompts.layers[l].data);
          grads.emplace_back(total.prompts[l].data);
        }
        for (std::size_t l = 0; l < neck.weights.size(); ++l) {
          params.emplace_back(neck.weights[l].data);
          grads.emplace_back(total.neck.weights[l].data);
          params.emplace_back(neck.biases[l]);
          grads.emplace_back(total.neck.biases[l]);
        }
        if (ce) {
          params.emplace_back(head.weight.data);
          grads.emplace_back(head_grads.weight.data);
          params.emplace_back(head.bias);
          grads.emplace_back(head_grads.bias);
        }
        opt.step(params, grads);
        loss_sum += res.value;
        ++used;
      }
      report.epoch_losses.push_back(used ? loss_sum / static_cast<double>(used) : 0.0);
      report.skipped_batches.push_back(skipped);
    }
    report.optimizer_steps = opt.step_count();
    for (const auto& l : prompts.layers)
      require(all_finite(l.data), ErrorKind::NumericError, "prompt diverged in task " + std::to_string(task.task_id));

    parallel_for(n, [&](std::size_t i) { values[i] = l2_normalize(encode(bb, task.train[i].x, &prompts)); });
  }

  std::vector<ClassRecord> records;
  for (ClassId c : task.classes) {
    std::vector<Vector> k, v;
    for (std::size_t i = 0; i < n; ++i)
      if (task.train[i].label == c) {
        k.push_back(keys[i]);
        v.push_back(values[i]);
      }
    require(!k.empty(), ErrorKind::EmptyInput, "class " + std::to_string(c) + " has no training samples");
    ClassRecord r;
    r.class_id = c;
    r.task_id = task.task_id;
    r.sample_count = static_cast<std::int32_t>(k.size());
    r.key_centroids = prototypes_of(k, cfg, c);
    r.value_centroids = cfg.training_free ? r.key_centroids : prototypes_of(v, cfg, c);
    require(r.key_centroids.size() == r.value_centroids.size(), ErrorKind::NumericError, "centroid count mismatch");
    r.aug_scale = mean_variance(v);
    records.push_back(std::move(r));
  }
  state.store.commit_task(task.task_id, std::move(prompts), std::move(records));
  return report;
}

InferenceResult infer_detailed(const TokenSequence& x, const EngineState& state, std::size_t r) {
  require(state.backbone != nullptr, ErrorKind::ConfigError, "engine has no backbone");
  require(!state.store.empty(), ErrorKind::EmptyStore, "inference against an empty store");
  const Backbone& bb = *state.backbone;
  InferenceResult out;
  const Vector q = l2_normalize(encode(bb, x, nullptr));
  out.forward_passes = 1;
  out.candidates = query(q, state.store, r);
  std::map<TaskId, Vector> fine;
  for (TaskId t : out.candidates) {
    const PromptSet& p = state.store.prompt(t);
    if (p.length() == 0) {
      fine[t] = q;  // no prompt: the fine query is the coarse one
    } else {
      fine[t] = l2_normalize(encode(bb, x, &p));
      ++out.forward_passes;
    }
  }
  const auto pred = predict_detailed(fine, state.store);
  out.prediction = pred.class_id;
  const double tau = state.store.config().temperature;
  for (const auto& [t, q_fine] : fine) {
    Vector sims;
    for (const auto& [id, rec] : state.store.records())
      for (const auto& v : rec.value_centroids) sims.push_back(dot(v, q_fine));
    out.candidate_energies[t] = energy(sims, tau);
  }
  out.energy = out.candidate_energies.at(pred.via_task);
  return out;
}

ClassId infer(const TokenSequence& x, const EngineState& state, std::size_t r) {
  return infer_detailed(x, state, r).prediction;
}

ClassId infer_with_oracle_task(const TokenSequence& x, TaskId task, const EngineState& state, bool restrict_to_task) {
  require(state.backbone != nullptr, ErrorKind::ConfigError, "engine has no backbone");
  const PromptSet& p = state.store.prompt(task);
  const Vector q = l2_normalize(encode(*state.backbone, x, p.length() ? &p : nullptr));
  const auto allowed = restrict_to_task ? state.store.classes_of(task) : std::vector<ClassId>{};
  return predict_detailed({{task, q}}, state.store, allowed).class_id;
}

std::vector<double> evaluate(const EngineState& state, std::span<const TaskData> tasks, std::size_t r, RunLog* log) {
  std::vector<double> row;
  std::size_t lo_j = SIZE_MAX, hi_j = 0;
  for (const auto& t : tasks) {
    require(!t.test.empty(), ErrorKind::EmptyInput, "task has no test samples");
    std::vector<InferenceResult> res(t.test.size());
    parallel_for(t.test.size(), [&](std::size_t i) { res[i] = infer_detailed(t.test[i].x, state, r); });
    std::size_t correct = 0;
    for (std::size_t i = 0; i < res.size(); ++i) {
      correct += res[i].prediction == t.test[i].label;
      lo_j = std::min(lo_j, res[i].candidates.size());
      hi_j = std::max(hi_j, res[i].candidates.size());
      if (log) {
        ++log->inferences;
        log->forward_passes += res[i].forward_passes;
        log->retrieved += res[i].candidates.size();
        log->energy_sum += res[i].energy;
        ++log->energy_count;
      }
    }
    row.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(t.test.size()));
  }
  if (log) {
    log->min_retrieved.push_back(lo_j);
    log->max_retrieved.push_back(hi_j);
  }
  return row;
}

double oracle_task_accuracy(const EngineState& state, const TaskData& task) {
  std::vector<int> hit(task.test.size(), 0);
  parallel_for(task.test.size(), [&](std::size_t i) {
    hit[i] = infer_with_oracle_task(task.test[i].x, task.task_id, state, true) == task.test[i].label;
  });
  std::size_t correct = 0;
  for (int h : hit) correct += static_cast<std::size_t>(h);
  return 100.0 * static_cast<double>(correct) / static_cast<double>(std::max<std::size_t>(1, task.test.size()));
}

RunResult run_stream(const Backbone& backbone, const Dataset& data, const TrainConfig& config,
                     const RunOptions& options) {
  RunResult out;
  out.state = make_state(backbone, config);
  out.log.retrieve_r = config.retrieve;
  std::size_t max_classes = 1;
  for (const auto& t : data.tasks) max_classes = std::max(max_classes, t.classes.size());
  out.log.memory = MemoryConfig{backbone.config().embed_dim, out.state.store.config().centroids,
                                backbone.config().num_layers, config.training_free ? 0 : config.prompt_length,
                                max_classes};
  for (std::size_t t = 0; t < data.tasks.size(); ++t) {
    const auto report = train_task(out.state, data.tasks[t], config);
    out.checksum_after_task.push_back(backbone.checksum());
    out.oracle_after_training.push_back(oracle_task_accuracy(out.state, data.tasks[t]));
    for (std::size_t e = 0; e < report.epoch_losses.size(); ++e)
      out.log.epochs.push_back({report.task_id, e, report.epoch_losses[e], report.skipped_batches[e]});
    auto row = evaluate(out.state, std::span(data.tasks).first(t + 1), config.retrieve, &out.log);
    if (options.on_task) options.on_task(t, report, row);
    out.log.accuracy.push_row(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::string> variant_names() {
  return {"cpp", "baseline", "ce", "supcon", "cpl_with_uniform", "cpl_no_proto", "mean_proto", "joint"};
}

TrainConfig apply_variant(TrainConfig base, std::string_view variant) {
  if (variant == "cpp" || variant == "joint") return base;
  if (variant == "baseline") {
    base.training_free = true;
    return base;
  }
  if (variant == "ce") {
    base.loss = LossVariant::CrossEntropy;
    return base;
  }
  if (variant == "supcon") {
    base.loss = LossVariant::SupCon;
    return base;
  }
  if (variant == "cpl_with_uniform") {
    base.loss = LossVariant::CplWithUniform;
    return base;
  }
  if (variant == "cpl_no_proto") {
    base.loss = LossVariant::CplNoProto;
    return base;
  }
  if (variant == "mean_proto") {
    base.prototypes = PrototypeMode::ClassMean;
    base.centroids = 1;
    return base;
  }
  fail(ErrorKind::ConfigError, "unknown variant: " + std::string(variant));
}

Dataset merge_tasks(const Dataset& data) {
  Dataset out;
  out.spec = data.spec;
  out.spec.tasks.clear();
  out.spec.tasks.emplace_back();
  TaskData all;
  all.task_id = 0;
  for (const auto& t : data.tasks) {
    all.classes.insert(all.classes.end(), t.classes.begin(), t.classes.end());
    all.train.insert(all.train.end(), t.train.begin(), t.train.end());
    all.test.insert(all.test.end(), t.test.begin(), t.test.end());
  }
  for (const auto& t : data.spec.tasks) out.spec.tasks[0].insert(out.spec.tasks[0].end(), t.begin(), t.end());
  out.tasks.push_back(std::move(all));
  return out;
}

}  // namespace protoprompt

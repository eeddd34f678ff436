// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/prototype_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "protoprompt/binary_io.hpp"

namespace protoprompt {

namespace {

constexpr std::uint32_t kStoreVersion = 1;
constexpr int kKMeansRestarts = 20;
constexpr int kKMeansMaxIter = 300;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct KMeansResult {
  std::vector<std::size_t> assign;
  double inertia = 0.0;
};

// Lloyd iterations from a farthest-point start. Ties go to the lower index
// everywhere so a restart is a pure function of its rng.
KMeansResult kmeans_once(const Matrix& pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.rows;
  Matrix centers(k, pts.cols);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(n);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(pts.row(pick).begin(), pts.row(pick).end(), centers.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], sq_dist(pts.row(i), centers.row(c)));
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i)
      if (nearest[i] > best) {
        best = nearest[i];
        pick = i;
      }
  }

  std::vector<std::size_t> assign(n, k);
  for (int iter = 0; iter < kKMeansMaxIter; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best_c = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(pts.row(i), centers.row(c));
        if (d < best_d) {
          best_d = d;
          best_c = c;
        }
      }
      if (assign[i] != best_c) {
        assign[i] = best_c;
        changed = true;
      }
    }
    // Refill empty clusters with the point farthest from its own center.
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<std::size_t> counts(k, 0);
      for (auto a : assign) ++counts[a];
      if (counts[c] > 0) continue;
      std::size_t victim = n;
      double far = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[assign[i]] < 2) continue;
        const double d = sq_dist(pts.row(i), centers.row(assign[i]));
        if (d > far) {
          far = d;
          victim = i;
        }
      }
      assign[victim] = c;
      changed = true;
    }
    centers = Matrix(k, pts.cols);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      axpy(1.0, pts.row(i), centers.row(assign[i]));
    }
    for (std::size_t c = 0; c < k; ++c)
      for (double& v : centers.row(c)) v /= static_cast<double>(counts[c]);
    if (!changed) break;
  }
  KMeansResult out{assign, 0.0};
  for (std::size_t i = 0; i < n; ++i) out.inertia += sq_dist(pts.row(i), centers.row(assign[i]));
  return out;
}

void check_unit(const std::vector<Vector>& vs, std::size_t dim, const char* what) {
  for (const auto& v : vs) {
    require(v.size() == dim, ErrorKind::ShapeError, std::string(what) + ": centroid width mismatch");
    require(all_finite(v) && std::abs(norm(v) - 1.0) <= 1e-9, ErrorKind::ShapeError,
            std::string(what) + ": centroid is not unit norm");
  }
}

void write_record(std::ostream& os, const ClassRecord& r) {
  binio::write_i32(os, r.class_id);
  binio::write_i32(os, r.task_id);
  binio::write_i32(os, r.sample_count);
  binio::write_u32(os, static_cast<std::uint32_t>(r.key_centroids.size()));
  binio::write_f64(os, r.aug_scale);
  for (const auto& v : r.key_centroids) binio::write_f64s(os, v);
  for (const auto& v : r.value_centroids) binio::write_f64s(os, v);
}

}  // namespace

Vector class_mean(std::span<const Vector> embeddings) {
  require(!embeddings.empty(), ErrorKind::EmptyInput, "class_mean of an empty list");
  const std::size_t dim = embeddings.front().size();
  Vector mean(dim, 0.0);
  for (const auto& e : embeddings) {
    require(e.size() == dim, ErrorKind::ShapeError, "class_mean: width mismatch");
    axpy(1.0, e, mean);
  }
  for (double& v : mean) v /= static_cast<double>(embeddings.size());
  return l2_normalize(mean);
}

std::vector<std::size_t> spectral_partition(std::span<const Vector> embeddings, std::size_t groups,
                                            std::uint64_t seed) {
  require(!embeddings.empty(), ErrorKind::EmptyInput, "spectral_partition of an empty list");
  require(groups >= 1, ErrorKind::ConfigError, "need at least one group");
  const std::size_t n = embeddings.size();
  const std::size_t k = std::min(groups, n);
  std::vector<std::size_t> assign(n, 0);
  if (k == 1) return assign;
  if (k == n) {
    std::iota(assign.begin(), assign.end(), std::size_t{0});
    return assign;
  }

  Matrix w = pairwise_cosine(embeddings, embeddings);
  for (double& v : w.data) v = 0.5 * (1.0 + v);
  Vector inv_sqrt_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t j = 0; j < n; ++j) d += w(i, j);
    inv_sqrt_deg[i] = d > 0.0 ? 1.0 / std::sqrt(d) : 0.0;
  }
  Matrix lap(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      lap(i, j) = (i == j ? 1.0 : 0.0) - inv_sqrt_deg[i] * w(i, j) * inv_sqrt_deg[j];
  const auto eig = symmetric_eigen(lap);

  Matrix embed(n, k);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      embed(i, c) = eig.vectors(i, c);
      s += embed(i, c) * embed(i, c);
    }
    if (s > 0.0)
      for (std::size_t c = 0; c < k; ++c) embed(i, c) /= std::sqrt(s);
  }

  Rng base(seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int restart = 0; restart < kKMeansRestarts; ++restart) {
    Rng rng = base.split(static_cast<std::uint64_t>(restart));
    auto res = kmeans_once(embed, k, rng);
    if (res.inertia < best.inertia) best = std::move(res);
  }

  // Relabel groups by their smallest member index.
  std::vector<std::size_t> relabel(k, k);
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (relabel[best.assign[i]] == k) relabel[best.assign[i]] = next++;
  for (std::size_t i = 0; i < n; ++i) assign[i] = relabel[best.assign[i]];
  return assign;
}

std::vector<Vector> multi_centroid(std::span<const Vector> embeddings, std::size_t centroids, std::uint64_t seed) {
  require(!embeddings.empty(), ErrorKind::EmptyInput, "multi_centroid of an empty list");
  const std::size_t k = std::min(std::max<std::size_t>(centroids, 1), embeddings.size());
  if (k == 1) return {class_mean(embeddings)};
  const auto assign = spectral_partition(embeddings, k, seed);
  std::vector<std::vector<Vector>> members(k);
  for (std::size_t i = 0; i < embeddings.size(); ++i) members[assign[i]].push_back(embeddings[i]);
  std::vector<Vector> out;
  out.reserve(k);
  for (const auto& m : members) out.push_back(class_mean(m));
  return out;
}

// ---------------------------------------------------------------------------

const ClassRecord& PrototypeStore::record(ClassId c) const {
  auto it = records_.find(c);
  require(it != records_.end(), ErrorKind::KeyError, "unknown class " + std::to_string(c));
  return it->second;
}

const PromptSet& PrototypeStore::prompt(TaskId t) const {
  auto it = prompts_.find(t);
  require(it != prompts_.end(), ErrorKind::KeyError, "unknown task " + std::to_string(t));
  return it->second;
}

std::vector<ClassId> PrototypeStore::classes_of(TaskId t) const {
  std::vector<ClassId> out;
  for (const auto& [id, r] : records_)
    if (r.task_id == t) out.push_back(id);
  return out;
}

std::size_t PrototypeStore::total_centroids() const {
  std::size_t n = 0;
  for (const auto& [id, r] : records_) n += r.key_centroids.size();
  return n;
}

void PrototypeStore::commit_task(TaskId task_id, PromptSet prompts, std::vector<ClassRecord> records) {
  require(!has_task(task_id), ErrorKind::DuplicateTask, "task " + std::to_string(task_id) + " already committed");
  require(!records.empty(), ErrorKind::EmptyInput, "a task needs at least one class");
  for (const auto& layer : prompts.layers)
    require(layer.cols == config_.dim, ErrorKind::ShapeError, "prompt width mismatch");
  std::vector<ClassId> seen;
  for (const auto& r : records) {
    require(!has_class(r.class_id) && std::find(seen.begin(), seen.end(), r.class_id) == seen.end(),
            ErrorKind::DuplicateClass, "class " + std::to_string(r.class_id) + " already stored");
    seen.push_back(r.class_id);
    require(r.task_id == task_id, ErrorKind::ShapeError, "record task id does not match the commit");
    require(!r.key_centroids.empty() && r.key_centroids.size() == r.value_centroids.size() &&
                r.key_centroids.size() <= std::max<std::size_t>(config_.centroids, 1),
            ErrorKind::ShapeError, "bad centroid counts");
    require(r.sample_count >= 1 &&
                r.key_centroids.size() <= static_cast<std::size_t>(r.sample_count),
            ErrorKind::ShapeError, "centroid count exceeds sample count");
    require(std::isfinite(r.aug_scale) && r.aug_scale >= 0.0, ErrorKind::ShapeError, "bad augmentation scale");
    check_unit(r.key_centroids, config_.dim, "key");
    check_unit(r.value_centroids, config_.dim, "value");
  }
  prompts.task_id = task_id;
  prompts_.emplace(task_id, std::move(prompts));
  tasks_.push_back(task_id);
  for (auto& r : records) records_.emplace(r.class_id, std::move(r));
}

std::uint64_t PrototypeStore::record_checksum(ClassId c) const {
  std::ostringstream os;
  write_record(os, record(c));
  const auto s = os.str();
  return binio::fnv1a(std::as_bytes(std::span(s.data(), s.size())));
}

void PrototypeStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), ErrorKind::MissingFile, "cannot write " + path);
  binio::write_magic(os, "CPPS");
  binio::write_u32(os, kStoreVersion);
  binio::write_u32(os, static_cast<std::uint32_t>(config_.dim));
  binio::write_u32(os, static_cast<std::uint32_t>(config_.centroids));
  binio::write_u32(os, static_cast<std::uint32_t>(config_.retrieve));
  binio::write_f64(os, config_.temperature);
  binio::write_u32(os, static_cast<std::uint32_t>(tasks_.size()));
  binio::write_u32(os, static_cast<std::uint32_t>(records_.size()));
  for (TaskId t : tasks_) {
    const auto& p = prompts_.at(t);
    binio::write_i32(os, t);
    binio::write_u32(os, static_cast<std::uint32_t>(p.layers.size()));
    for (const auto& m : p.layers) {
      binio::write_u32(os, static_cast<std::uint32_t>(m.rows));
      binio::write_f64s(os, m.data);
    }
  }
  for (const auto& [id, r] : records_) write_record(os, r);
  require(os.good(), ErrorKind::FormatError, "write failed for " + path);
}

PrototypeStore PrototypeStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorKind::MissingFile, "cannot open " + path);
  binio::expect_magic(is, "CPPS");
  require(binio::read_u32(is) == kStoreVersion, ErrorKind::FormatError, "unsupported store version");
  StoreConfig cfg;
  cfg.dim = binio::read_u32(is);
  cfg.centroids = binio::read_u32(is);
  cfg.retrieve = binio::read_u32(is);
  cfg.temperature = binio::read_f64(is);
  require(cfg.dim >= 1 && cfg.dim <= 1u << 16 && cfg.centroids >= 1 && cfg.retrieve >= 1 &&
              std::isfinite(cfg.temperature) && cfg.temperature > 0.0,
          ErrorKind::FormatError, "bad store header");
  const auto num_tasks = binio::read_u32(is);
  const auto num_records = binio::read_u32(is);
  require(num_tasks <= 1u << 20 && num_records <= 1u << 24, ErrorKind::FormatError, "bad store counts");

  std::vector<std::pair<TaskId, PromptSet>> prompts;
  for (std::uint32_t t = 0; t < num_tasks; ++t) {
    PromptSet p;
    p.task_id = binio::read_i32(is);
    const auto layers = binio::read_u32(is);
    require(layers <= 1024, ErrorKind::FormatError, "bad prompt layer count");
    for (std::uint32_t l = 0; l < layers; ++l) {
      const auto rows = binio::read_u32(is);
      require(rows <= 4096, ErrorKind::FormatError, "bad prompt length");
      Matrix m(rows, cfg.dim);
      binio::read_f64s(is, m.data);
      p.layers.push_back(std::move(m));
    }
    prompts.emplace_back(p.task_id, std::move(p));
  }
  std::map<TaskId, std::vector<ClassRecord>> by_task;
  for (std::uint32_t i = 0; i < num_records; ++i) {
    ClassRecord r;
    r.class_id = binio::read_i32(is);
    r.task_id = binio::read_i32(is);
    r.sample_count = binio::read_i32(is);
    const auto count = binio::read_u32(is);
    require(count >= 1 && count <= cfg.centroids, ErrorKind::FormatError, "bad centroid count");
    r.aug_scale = binio::read_f64(is);
    r.key_centroids.assign(count, Vector(cfg.dim));
    r.value_centroids.assign(count, Vector(cfg.dim));
    for (auto& v : r.key_centroids) binio::read_f64s(is, v);
    for (auto& v : r.value_centroids) binio::read_f64s(is, v);
    by_task[r.task_id].push_back(std::move(r));
  }
  is.peek();
  require(is.eof(), ErrorKind::FormatError, "trailing bytes in store file");

  PrototypeStore store(cfg);
  try {
    for (auto& [t, p] : prompts) {
      auto it = by_task.find(t);
      require(it != by_task.end(), ErrorKind::FormatError, "task without classes");
      store.commit_task(t, std::move(p), std::move(it->second));
      by_task.erase(it);
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::FormatError) throw;
    fail(ErrorKind::FormatError, std::string("inconsistent store: ") + e.what());
  }
  require(by_task.empty(), ErrorKind::FormatError, "class record references an unknown task");
  return store;
}

// ---------------------------------------------------------------------------

std::vector<RankedCentroid> rank_keys(std::span<const double> q, const PrototypeStore& store) {
  require(!store.empty(), ErrorKind::EmptyStore, "query against an empty store");
  std::vector<RankedCentroid> ranked;
  ranked.reserve(store.total_centroids());
  for (const auto& [id, r] : store.records())
    for (std::size_t i = 0; i < r.key_centroids.size(); ++i)
      ranked.push_back({cosine_sim(q, r.key_centroids[i]), id, i, r.task_id});
  std::stable_sort(ranked.begin(), ranked.end(), [](const RankedCentroid& a, const RankedCentroid& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.index < b.index;
  });
  return ranked;
}

std::vector<TaskId> query(std::span<const double> q, const PrototypeStore& store, std::size_t r) {
  require(r >= 1, ErrorKind::ConfigError, "r must be at least 1");
  const auto ranked = rank_keys(q, store);
  std::vector<TaskId> out;
  for (std::size_t i = 0; i < std::min(r, ranked.size()); ++i)
    if (std::find(out.begin(), out.end(), ranked[i].task_id) == out.end()) out.push_back(ranked[i].task_id);
  return out;
}

Prediction predict_detailed(const std::map<TaskId, Vector>& fine_queries, const PrototypeStore& store,
                            std::span<const ClassId> allowed) {
  require(!fine_queries.empty(), ErrorKind::EmptyInput, "predict needs at least one fine query");
  require(!store.empty(), ErrorKind::EmptyStore, "predict against an empty store");
  Prediction best;
  bool have = false;
  for (const auto& [id, r] : store.records()) {
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), id) == allowed.end()) continue;
    for (const auto& [task, q] : fine_queries) {
      require(store.has_task(task), ErrorKind::KeyError, "fine query for unknown task " + std::to_string(task));
      for (const auto& v : r.value_centroids) {
        const double s = cosine_sim(v, q);
        if (!have || s > best.similarity) {
          best = {id, s, task};
          have = true;
        }
      }
    }
  }
  require(have, ErrorKind::EmptyInput, "no candidate classes");
  return best;
}

ClassId predict(const std::map<TaskId, Vector>& fine_queries, const PrototypeStore& store) {
  return predict_detailed(fine_queries, store).class_id;
}

std::string describe(const PrototypeStore& store) {
  std::ostringstream os;
  const auto& c = store.config();
  os << "store: dim=" << c.dim << " C=" << c.centroids << " r=" << c.retrieve << " tau=" << c.temperature << "\n";
  os << "tasks: " << store.committed_tasks().size() << "  classes: " << store.records().size()
     << "  key centroids: " << store.total_centroids() << "\n";
  for (TaskId t : store.committed_tasks()) {
    const auto& p = store.prompt(t);
    os << "task " << t << ": prompt length " << p.length() << " x " << p.layers.size() << " layers ("
       << p.parameter_count() << " params), classes";
    for (ClassId id : store.classes_of(t)) {
      const auto& r = store.record(id);
      os << " " << id << "[C'=" << r.key_centroids.size() << ",n=" << r.sample_count << ",m=" << r.aug_scale << "]";
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace protoprompt

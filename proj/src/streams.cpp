// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/streams.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "protoprompt/binary_io.hpp"

namespace protoprompt {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr std::size_t kAtoms = 16;
constexpr std::size_t kGrid = 16;
constexpr std::size_t kPatch = 4;

// Keys for rng splits.
constexpr std::uint64_t kAtomKey = 0xA70;
constexpr std::uint64_t kRasterMapKey = 0xA71;
constexpr std::uint64_t kSpiralMapKey = 0xA72;
constexpr std::uint64_t kPatternKey = 0x5000;
constexpr std::uint64_t kSampleKey = 0x6000;

Matrix world_atoms(const TaskStream& spec) {
  Rng rng = Rng(spec.world_seed).split(kAtomKey);
  Matrix a(kAtoms, spec.dim);
  for (double& v : a.data) v = rng.normal();
  return a;
}

Rng pattern_rng(const TaskStream& spec, ClassId id) {
  return Rng(spec.seed).split(kPatternKey).split(static_cast<std::uint64_t>(static_cast<std::uint32_t>(id)));
}

TokenSequence own_gaussian_pattern(const TaskStream& spec, ClassId id, const Matrix& atoms) {
  Rng rng = pattern_rng(spec, id);
  TokenSequence m(spec.seq_len, spec.dim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(kAtoms));
  for (std::size_t l = 0; l < spec.seq_len; ++l)
    for (std::size_t k = 0; k < kAtoms; ++k) axpy(scale * rng.normal(), atoms.row(k), m.row(l));
  return m;
}

struct RasterShape {
  int kind = 0;
  double cx = 8, cy = 8, size = 3;
};

RasterShape raster_shape(const TaskStream& spec, ClassId id) {
  Rng rng = pattern_rng(spec, id).split(1);
  RasterShape s;
  s.kind = static_cast<int>(rng.below(6));
  s.cx = rng.uniform(5.0, 11.0);
  s.cy = rng.uniform(5.0, 11.0);
  s.size = rng.uniform(2.0, 5.0);
  return s;
}

double raster_pixel(const RasterShape& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double r = std::sqrt(dx * dx + dy * dy);
  switch (s.kind) {
    case 0: return r <= s.size ? 1.0 : 0.0;                                      // disc
    case 1: return std::abs(r - s.size) <= 0.8 ? 1.0 : 0.0;                      // ring
    case 2: return std::abs(dy) <= 1.0 && std::abs(dx) <= s.size ? 1.0 : 0.0;    // horizontal bar
    case 3: return std::abs(dx) <= 1.0 && std::abs(dy) <= s.size ? 1.0 : 0.0;    // vertical bar
    case 4: return (std::abs(dx) <= 0.8 || std::abs(dy) <= 0.8) && r <= s.size + 1 ? 1.0 : 0.0;  // cross
    default: return std::abs(dx) <= s.size && std::abs(dy) <= s.size ? 1.0 : 0.0;                // square
  }
}

// Patchify a 16x16 grid into 16 tokens of 4x4 values and map each to D.
TokenSequence patchify(const Matrix& grid, const Matrix& map, double amplitude) {
  TokenSequence out(kGrid / kPatch * (kGrid / kPatch), map.cols);
  std::size_t token = 0;
  for (std::size_t py = 0; py < kGrid; py += kPatch)
    for (std::size_t px = 0; px < kGrid; px += kPatch, ++token) {
      std::size_t k = 0;
      for (std::size_t y = 0; y < kPatch; ++y)
        for (std::size_t x = 0; x < kPatch; ++x, ++k) axpy(amplitude * grid(py + y, px + x), map.row(k), out.row(token));
    }
  return out;
}

Matrix raster_map(const TaskStream& spec) {
  Rng rng = Rng(spec.world_seed).split(kRasterMapKey);
  Matrix m(kPatch * kPatch, spec.dim);
  for (double& v : m.data) v = rng.normal() / std::sqrt(double(kPatch * kPatch)) * 2.0;
  return m;
}

Matrix spiral_map(const TaskStream& spec) {
  Rng rng = Rng(spec.world_seed).split(kSpiralMapKey);
  Matrix m(2 * spec.seq_len, spec.dim);
  for (double& v : m.data) v = rng.normal();
  return m;
}

std::vector<Sample> draw_samples(const TaskStream& spec, const ClassSpec& cls, std::uint32_t count, Rng rng,
                                 const Matrix& atoms) {
  std::vector<Sample> out;
  out.reserve(count);
  switch (cls.kind) {
    case GeneratorKind::GaussianToken: {
      const TokenSequence mean = class_pattern(spec, cls);
      const double scale = 1.0 / std::sqrt(static_cast<double>(kAtoms));
      for (std::uint32_t i = 0; i < count; ++i) {
        TokenSequence x = mean;
        if (cls.style > 0.0) {
          Vector offset(spec.dim, 0.0);
          for (std::size_t k = 0; k < kAtoms; ++k) axpy(cls.style * scale * rng.normal(), atoms.row(k), offset);
          for (std::size_t l = 0; l < x.rows; ++l) axpy(1.0, offset, x.row(l));
        }
        for (double& v : x.data) v += cls.noise * rng.normal();
        out.push_back({std::move(x), cls.class_id});
      }
      break;
    }
    case GeneratorKind::ProceduralRaster: {
      const RasterShape base = raster_shape(spec, cls.class_id);
      const Matrix map = raster_map(spec);
      for (std::uint32_t i = 0; i < count; ++i) {
        RasterShape s = base;
        s.cx += static_cast<double>(rng.below(3)) - 1.0;
        s.cy += static_cast<double>(rng.below(3)) - 1.0;
        s.size += rng.uniform(-0.5, 0.5);
        Matrix grid(kGrid, kGrid);
        for (std::size_t y = 0; y < kGrid; ++y)
          for (std::size_t x = 0; x < kGrid; ++x)
            grid(y, x) = raster_pixel(s, double(x) + 0.5, double(y) + 0.5) + cls.noise * rng.normal();
        out.push_back({patchify(grid, map, cls.amplitude), cls.class_id});
      }
      break;
    }
    case GeneratorKind::Spiral2dLifted: {
      const Matrix map = spiral_map(spec);
      const double offset = 2.0 * std::numbers::pi * pattern_rng(spec, cls.class_id).split(2).uniform();
      for (std::uint32_t i = 0; i < count; ++i) {
        const double t = rng.uniform(0.1, 1.0);
        const double theta = offset + 3.0 * std::numbers::pi * t;
        const double px = t * std::cos(theta) + cls.noise * rng.normal();
        const double py = t * std::sin(theta) + cls.noise * rng.normal();
        TokenSequence x(spec.seq_len, spec.dim);
        for (std::size_t l = 0; l < spec.seq_len; ++l) {
          axpy(cls.amplitude * px, map.row(2 * l), x.row(l));
          axpy(cls.amplitude * py, map.row(2 * l + 1), x.row(l));
        }
        out.push_back({std::move(x), cls.class_id});
      }
      break;
    }
  }
  return out;
}

void write_sample(std::ostream& os, const Sample& s) {
  binio::write_i32(os, s.label);
  binio::write_f64s(os, s.x.data);
}

Sample read_sample(std::istream& is, std::uint32_t seq_len, std::uint32_t dim) {
  Sample s;
  s.label = binio::read_i32(is);
  s.x = TokenSequence(seq_len, dim);
  binio::read_f64s(is, s.x.data);
  require(all_finite(s.x.data), ErrorKind::FormatError, "non-finite sample");
  return s;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    char* end = nullptr;
    out = std::strtod(value.c_str(), &end);
    require(end && *end == '\0' && !value.empty(), ErrorKind::ConfigError, "bad number for " + key + ": " + value);
  } else {
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    require(ec == std::errc() && ptr == value.data() + value.size(), ErrorKind::ConfigError,
            "bad integer for " + key + ": " + value);
  }
  return out;
}

}  // namespace

std::string_view to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::GaussianToken: return "gaussian-token";
    case GeneratorKind::ProceduralRaster: return "procedural-raster";
    case GeneratorKind::Spiral2dLifted: return "spiral-2d-lifted";
  }
  return "?";
}

GeneratorKind parse_generator_kind(std::string_view name) {
  for (auto k : {GeneratorKind::GaussianToken, GeneratorKind::ProceduralRaster, GeneratorKind::Spiral2dLifted})
    if (to_string(k) == name) return k;
  fail(ErrorKind::ConfigError, "unknown generator kind: " + std::string(name));
}

void TaskStream::validate() const {
  require(seq_len >= 1 && dim >= 1, ErrorKind::ConfigError, "stream needs positive seq_len and dim");
  require(!tasks.empty(), ErrorKind::ConfigError, "stream has no tasks");
  std::set<ClassId> seen;
  for (const auto& task : tasks) {
    require(!task.empty(), ErrorKind::ConfigError, "empty task in stream");
    for (const auto& c : task) {
      require(seen.insert(c.class_id).second, ErrorKind::ConfigError,
              "class " + std::to_string(c.class_id) + " appears in more than one place");
      require(c.train_count >= 1 && c.test_count >= 1, ErrorKind::ConfigError, "sample counts must be positive");
      require(std::isfinite(c.noise) && c.noise >= 0.0, ErrorKind::ConfigError, "noise must be >= 0");
      require(std::isfinite(c.amplitude) && c.amplitude > 0.0, ErrorKind::ConfigError, "amplitude must be > 0");
      require(std::isfinite(c.style) && c.style >= 0.0, ErrorKind::ConfigError, "style must be >= 0");
      require(std::isfinite(c.overlap) && c.overlap >= 0.0 && c.overlap <= 1.0, ErrorKind::ConfigError,
              "overlap must lie in [0, 1]");
      if (c.overlap > 0.0) {
        require(c.kind == GeneratorKind::GaussianToken, ErrorKind::ConfigError,
                "overlap is only defined for gaussian-token classes");
        require(c.partner >= 0 && c.partner != c.class_id, ErrorKind::ConfigError, "overlap needs a partner class");
      }
      if (c.kind == GeneratorKind::ProceduralRaster)
        require(seq_len == (kGrid / kPatch) * (kGrid / kPatch), ErrorKind::ConfigError,
                "procedural-raster needs seq_len 16");
    }
  }
}

std::vector<ClassId> TaskStream::all_classes() const {
  std::vector<ClassId> out;
  for (const auto& t : tasks)
    for (const auto& c : t) out.push_back(c.class_id);
  return out;
}

std::vector<ClassId> Dataset::all_classes() const {
  std::vector<ClassId> out;
  for (const auto& t : tasks) out.insert(out.end(), t.classes.begin(), t.classes.end());
  return out;
}

TokenSequence class_pattern(const TaskStream& spec, const ClassSpec& cls) {
  require(cls.kind == GeneratorKind::GaussianToken, ErrorKind::ConfigError,
          "class_pattern is defined for gaussian-token classes");
  const Matrix atoms = world_atoms(spec);
  TokenSequence m = own_gaussian_pattern(spec, cls.class_id, atoms);
  if (cls.overlap > 0.0) {
    const TokenSequence other = own_gaussian_pattern(spec, cls.partner, atoms);
    const double keep = std::sqrt(1.0 - cls.overlap * cls.overlap);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = keep * m.data[i] + cls.overlap * other.data[i];
  }
  for (double& v : m.data) v *= cls.amplitude;
  return m;
}

Dataset generate(const TaskStream& spec) {
  spec.validate();
  const Matrix atoms = world_atoms(spec);
  Dataset out;
  out.spec = spec;
  for (std::size_t t = 0; t < spec.tasks.size(); ++t) {
    TaskData td;
    td.task_id = static_cast<TaskId>(t);
    for (const auto& cls : spec.tasks[t]) {
      td.classes.push_back(cls.class_id);
      const Rng base =
          Rng(spec.seed).split(kSampleKey).split(static_cast<std::uint64_t>(static_cast<std::uint32_t>(cls.class_id)));
      auto train = draw_samples(spec, cls, cls.train_count, base.split(1), atoms);
      auto test = draw_samples(spec, cls, cls.test_count, base.split(2), atoms);
      td.train.insert(td.train.end(), std::make_move_iterator(train.begin()), std::make_move_iterator(train.end()));
      td.test.insert(td.test.end(), std::make_move_iterator(test.begin()), std::make_move_iterator(test.end()));
    }
    out.tasks.push_back(std::move(td));
  }
  return out;
}

TaskStream pretext_for(const TaskStream& eval, std::uint64_t seed) {
  TaskStream s = default_stream("pretext", seed);
  s.dim = eval.dim;
  s.seq_len = eval.seq_len;
  s.world_seed = eval.world_seed;
  return s;
}

std::vector<std::string> preset_names() { return {"sep5x4", "hard10x4", "pretext", "tiny"}; }

TaskStream default_stream(std::string_view name, std::uint64_t seed) {
  TaskStream s;
  s.name = std::string(name);
  s.seed = seed;
  auto build = [&](std::size_t tasks, std::size_t per_task, ClassId first, ClassSpec proto) {
    ClassId id = first;
    for (std::size_t t = 0; t < tasks; ++t) {
      std::vector<ClassSpec> task;
      for (std::size_t c = 0; c < per_task; ++c) {
        ClassSpec cs = proto;
        cs.class_id = id++;
        task.push_back(cs);
      }
      s.tasks.push_back(std::move(task));
    }
  };
  if (name == "sep5x4") {
    ClassSpec proto;
    proto.noise = 0.6;
    build(5, 4, 0, proto);
  } else if (name == "hard10x4") {
    // Ten tasks on the small desk backbone (D=32, 8 tokens).
    s.dim = 32;
    s.seq_len = 8;
    ClassSpec proto;
    proto.noise = 0.7;
    build(10, 4, 100, proto);
    // Every class leans towards a class two tasks earlier (wrapping), so old
    // and new prototypes interfere.
    const ClassId n = 40;
    for (std::size_t t = 0; t < s.tasks.size(); ++t)
      for (std::size_t c = 0; c < s.tasks[t].size(); ++c) {
        auto& cs = s.tasks[t][c];
        const ClassId idx = cs.class_id - 100;
        cs.partner = 100 + (idx + n - 8) % n;
        cs.overlap = 0.6;
      }
  } else if (name == "pretext") {
    ClassSpec proto;
    proto.noise = 0.6;
    proto.style = 0.5;
    proto.train_count = 60;
    build(1, 16, 1000, proto);
  } else if (name == "tiny") {
    ClassSpec proto;
    proto.noise = 0.5;
    proto.train_count = 12;
    proto.test_count = 6;
    build(2, 2, 500, proto);
  } else {
    fail(ErrorKind::ConfigError, "unknown preset: " + std::string(name));
  }
  s.validate();
  return s;
}

TaskStream parse_stream_spec(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::ConfigError, "expected key=value: " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto take = [&](const std::string& key, const std::string& def) {
    auto it = kv.find(key);
    if (it == kv.end()) return def;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  TaskStream s;
  s.name = take("name", "custom");
  s.seed = parse_number<std::uint64_t>("seed", take("seed", "0"));
  s.world_seed = parse_number<std::uint64_t>("world_seed", take("world_seed", "2024"));
  s.seq_len = parse_number<std::uint32_t>("seq_len", take("seq_len", "16"));
  s.dim = parse_number<std::uint32_t>("dim", take("dim", "64"));
  const auto tasks = parse_number<std::uint32_t>("tasks", take("tasks", "5"));
  const auto per_task = parse_number<std::uint32_t>("classes_per_task", take("classes_per_task", "4"));
  auto first = parse_number<ClassId>("first_class", take("first_class", "0"));
  ClassSpec proto;
  proto.kind = parse_generator_kind(take("kind", "gaussian-token"));
  proto.noise = parse_number<double>("noise", take("noise", "0.5"));
  proto.amplitude = parse_number<double>("amplitude", take("amplitude", "1"));
  proto.style = parse_number<double>("style", take("style", "0"));
  proto.train_count = parse_number<std::uint32_t>("train", take("train", "40"));
  proto.test_count = parse_number<std::uint32_t>("test", take("test", "20"));
  require(kv.empty(), ErrorKind::ConfigError, "unknown stream key: " + (kv.empty() ? "" : kv.begin()->first));
  require(tasks >= 1 && per_task >= 1 && tasks * per_task <= 100000, ErrorKind::ConfigError, "bad task layout");
  for (std::uint32_t t = 0; t < tasks; ++t) {
    std::vector<ClassSpec> task;
    for (std::uint32_t c = 0; c < per_task; ++c) {
      ClassSpec cs = proto;
      cs.class_id = first++;
      task.push_back(cs);
    }
    s.tasks.push_back(std::move(task));
  }
  s.validate();
  return s;
}

TokenSequence jitter_augment(const TokenSequence& x, double strength, Rng& rng, JitterOptions opts) {
  require(std::isfinite(strength) && strength >= 0.0, ErrorKind::ConfigError, "jitter strength must be >= 0");
  require(opts.dropout >= 0.0 && opts.dropout <= 1.0, ErrorKind::ConfigError, "dropout must lie in [0, 1]");
  if (strength == 0.0) return x;
  TokenSequence out = x;
  if (opts.dropout > 0.0 && x.rows > 0) {
    Vector mean(x.cols, 0.0);
    for (std::size_t l = 0; l < x.rows; ++l) axpy(1.0 / static_cast<double>(x.rows), x.row(l), mean);
    for (std::size_t l = 0; l < x.rows; ++l)
      if (rng.uniform() < opts.dropout) std::copy(mean.begin(), mean.end(), out.row(l).begin());
  }
  // E|N(0, s^2)| = s * sqrt(2/pi).
  const double sigma = strength * std::sqrt(std::numbers::pi / 2.0);
  for (double& v : out.data) v += sigma * rng.normal();
  return out;
}

// ---------------------------------------------------------------------------

void save_dataset(const Dataset& data, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  require(os.good(), ErrorKind::MissingFile, "cannot write " + path);
  const auto& s = data.spec;
  binio::write_magic(os, "CPPD");
  binio::write_u32(os, kDatasetVersion);
  binio::write_string(os, s.name);
  binio::write_pod<std::uint64_t>(os, s.seed);
  binio::write_pod<std::uint64_t>(os, s.world_seed);
  binio::write_u32(os, s.seq_len);
  binio::write_u32(os, s.dim);
  binio::write_u32(os, static_cast<std::uint32_t>(s.tasks.size()));
  for (const auto& task : s.tasks) {
    binio::write_u32(os, static_cast<std::uint32_t>(task.size()));
    for (const auto& c : task) {
      binio::write_i32(os, c.class_id);
      binio::write_u32(os, static_cast<std::uint32_t>(c.kind));
      binio::write_f64(os, c.noise);
      binio::write_f64(os, c.amplitude);
      binio::write_f64(os, c.style);
      binio::write_f64(os, c.overlap);
      binio::write_i32(os, c.partner);
      binio::write_u32(os, c.train_count);
      binio::write_u32(os, c.test_count);
    }
  }
  binio::write_u32(os, static_cast<std::uint32_t>(data.tasks.size()));
  for (const auto& t : data.tasks) {
    binio::write_i32(os, t.task_id);
    binio::write_u32(os, static_cast<std::uint32_t>(t.classes.size()));
    for (ClassId c : t.classes) binio::write_i32(os, c);
    binio::write_u32(os, static_cast<std::uint32_t>(t.train.size()));
    for (const auto& smp : t.train) write_sample(os, smp);
    binio::write_u32(os, static_cast<std::uint32_t>(t.test.size()));
    for (const auto& smp : t.test) write_sample(os, smp);
  }
  require(os.good(), ErrorKind::FormatError, "write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorKind::MissingFile, "cannot open " + path);
  binio::expect_magic(is, "CPPD");
  require(binio::read_u32(is) == kDatasetVersion, ErrorKind::FormatError, "unsupported stream version");
  Dataset d;
  auto& s = d.spec;
  s.name = binio::read_string(is, 4096);
  s.seed = binio::read_pod<std::uint64_t>(is);
  s.world_seed = binio::read_pod<std::uint64_t>(is);
  s.seq_len = binio::read_u32(is);
  s.dim = binio::read_u32(is);
  require(s.seq_len >= 1 && s.seq_len <= 4096 && s.dim >= 1 && s.dim <= 65536, ErrorKind::FormatError,
          "bad stream shape");
  const auto num_tasks = binio::read_u32(is);
  require(num_tasks <= 100000, ErrorKind::FormatError, "bad task count");
  for (std::uint32_t t = 0; t < num_tasks; ++t) {
    const auto n = binio::read_u32(is);
    require(n <= 100000, ErrorKind::FormatError, "bad class count");
    std::vector<ClassSpec> task(n);
    for (auto& c : task) {
      c.class_id = binio::read_i32(is);
      const auto kind = binio::read_u32(is);
      require(kind <= 2, ErrorKind::FormatError, "bad generator kind");
      c.kind = static_cast<GeneratorKind>(kind);
      c.noise = binio::read_f64(is);
      c.amplitude = binio::read_f64(is);
      c.style = binio::read_f64(is);
      c.overlap = binio::read_f64(is);
      c.partner = binio::read_i32(is);
      c.train_count = binio::read_u32(is);
      c.test_count = binio::read_u32(is);
    }
    s.tasks.push_back(std::move(task));
  }
  const auto data_tasks = binio::read_u32(is);
  require(data_tasks <= 100000, ErrorKind::FormatError, "bad task count");
  for (std::uint32_t t = 0; t < data_tasks; ++t) {
    TaskData td;
    td.task_id = binio::read_i32(is);
    const auto nc = binio::read_u32(is);
    require(nc <= 100000, ErrorKind::FormatError, "bad class count");
    for (std::uint32_t i = 0; i < nc; ++i) td.classes.push_back(binio::read_i32(is));
    const auto ntr = binio::read_u32(is);
    require(ntr <= 10000000, ErrorKind::FormatError, "bad sample count");
    for (std::uint32_t i = 0; i < ntr; ++i) td.train.push_back(read_sample(is, s.seq_len, s.dim));
    const auto nte = binio::read_u32(is);
    require(nte <= 10000000, ErrorKind::FormatError, "bad sample count");
    for (std::uint32_t i = 0; i < nte; ++i) td.test.push_back(read_sample(is, s.seq_len, s.dim));
    d.tasks.push_back(std::move(td));
  }
  is.peek();
  require(is.eof(), ErrorKind::FormatError, "trailing bytes in stream file");
  try {
    s.validate();
  } catch (const Error& e) {
    fail(ErrorKind::FormatError, std::string("invalid stream spec: ") + e.what());
  }
  return d;
}

void write_csv(const Dataset& data, const std::string& path) {
  std::ofstream os(path);
  require(os.good(), ErrorKind::MissingFile, "cannot write " + path);
  os << "# seq_len=" << data.spec.seq_len << " dim=" << data.spec.dim << "\n";
  os << "task,split,label";
  for (std::size_t l = 0; l < data.spec.seq_len; ++l)
    for (std::size_t k = 0; k < data.spec.dim; ++k) os << ",t" << l << "_" << k;
  os << "\n";
  char buf[32];
  for (const auto& t : data.tasks) {
    for (int split = 0; split < 2; ++split) {
      for (const auto& s : split == 0 ? t.train : t.test) {
        os << t.task_id << "," << (split == 0 ? "train" : "test") << "," << s.label;
        for (double v : s.x.data) {
          std::snprintf(buf, sizeof buf, "%.17g", v);
          os << "," << buf;
        }
        os << "\n";
      }
    }
  }
  require(os.good(), ErrorKind::FormatError, "write failed for " + path);
}

Dataset read_csv(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), ErrorKind::MissingFile, "cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), ErrorKind::FormatError, "empty csv");
  unsigned seq_len = 0, dim = 0;
  require(std::sscanf(line.c_str(), "# seq_len=%u dim=%u", &seq_len, &dim) == 2 && seq_len >= 1 && dim >= 1,
          ErrorKind::FormatError, "missing shape line in csv");
  require(static_cast<bool>(std::getline(is, line)), ErrorKind::FormatError, "missing csv header");
  Dataset d;
  d.spec.name = "csv";
  d.spec.seq_len = seq_len;
  d.spec.dim = dim;
  std::map<TaskId, std::size_t> task_index;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    require(cells.size() == 3 + std::size_t(seq_len) * dim, ErrorKind::FormatError, "csv row has the wrong width");
    TaskId task = 0;
    ClassId label = 0;
    try {
      task = parse_number<TaskId>("task", cells[0]);
      label = parse_number<ClassId>("label", cells[2]);
    } catch (const Error&) {
      fail(ErrorKind::FormatError, "bad id in csv row");
    }
    require(cells[1] == "train" || cells[1] == "test", ErrorKind::FormatError, "bad split in csv row");
    Sample s{TokenSequence(seq_len, dim), label};
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      char* end = nullptr;
      s.x.data[i] = std::strtod(cells[3 + i].c_str(), &end);
      require(end && *end == '\0' && std::isfinite(s.x.data[i]), ErrorKind::FormatError, "bad value in csv row");
    }
    auto [it, inserted] = task_index.emplace(task, d.tasks.size());
    if (inserted) {
      d.tasks.push_back(TaskData{});
      d.tasks.back().task_id = task;
      d.spec.tasks.emplace_back();
    }
    auto& td = d.tasks[it->second];
    auto& specs = d.spec.tasks[it->second];
    if (std::find(td.classes.begin(), td.classes.end(), label) == td.classes.end()) {
      td.classes.push_back(label);
      ClassSpec cs;
      cs.class_id = label;
      cs.train_count = 0;
      cs.test_count = 0;
      specs.push_back(cs);
    }
    auto& cs = *std::find_if(specs.begin(), specs.end(), [&](const ClassSpec& c) { return c.class_id == label; });
    (cells[1] == "train" ? cs.train_count : cs.test_count) += 1;
    (cells[1] == "train" ? td.train : td.test).push_back(std::move(s));
  }
  require(!d.tasks.empty(), ErrorKind::FormatError, "csv has no samples");
  std::set<ClassId> seen;
  for (const auto& t : d.tasks)
    for (ClassId c : t.classes)
      require(seen.insert(c).second, ErrorKind::FormatError, "class appears in more than one task of the csv");
  return d;
}

}  // namespace protoprompt

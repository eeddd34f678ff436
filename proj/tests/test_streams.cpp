#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "protoprompt/streams.hpp"

using namespace protoprompt;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("pp_streams_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_CASE("presets") {
  const auto sep = generate(default_stream("sep5x4", 1));
  CHECK(sep.tasks.size() == 5);
  CHECK(sep.all_classes().size() == 20);
  const auto hard = default_stream("hard10x4", 1);
  CHECK(hard.tasks.size() == 10);
  CHECK(hard.all_classes().size() == 40);
  const auto pre = default_stream("pretext", 1).all_classes();
  for (const char* name : {"sep5x4", "hard10x4"})
    for (ClassId c : default_stream(name, 1).all_classes())
      CHECK(std::find(pre.begin(), pre.end(), c) == pre.end());
  try {
    default_stream("cifar", 1);
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ConfigError);
  }
}

TEST_CASE("generation is a pure function of the spec") {
  const auto spec = default_stream("tiny", 5);
  const auto a = generate(spec), b = generate(spec);
  CHECK(a == b);
  const auto pa = temp_path("a.bin"), pb = temp_path("b.bin");
  save_dataset(a, pa);
  save_dataset(b, pb);
  CHECK(slurp(pa) == slurp(pb));
  CHECK(!(generate(default_stream("tiny", 6)) == a));
}

TEST_CASE("labels are disjoint across tasks and splits are disjoint") {
  const auto d = generate(default_stream("sep5x4", 2));
  std::set<ClassId> seen;
  for (const auto& t : d.tasks) {
    std::set<ClassId> own;
    for (const auto& s : t.train) own.insert(s.label);
    for (const auto& s : t.test) CHECK(own.count(s.label) == 1);
    for (ClassId c : own) CHECK(seen.insert(c).second);
    for (const auto& s : t.test)
      for (const auto& r : t.train) CHECK(!(s.x == r.x));
  }
  TaskStream bad = default_stream("tiny", 1);
  bad.tasks[1][0].class_id = bad.tasks[0][0].class_id;
  CHECK_THROWS_AS(generate(bad), Error);
}

TEST_CASE("zero noise gives identical samples per class") {
  auto spec = default_stream("tiny", 3);
  for (auto& t : spec.tasks)
    for (auto& c : t) c.noise = 0.0;
  const auto d = generate(spec);
  for (const auto& t : d.tasks)
    for (const auto& s : t.train)
      for (const auto& o : t.train)
        if (s.label == o.label) CHECK(s.x == o.x);
}

TEST_CASE("overlap pulls class patterns together") {
  auto spec = default_stream("tiny", 4);
  auto& a = spec.tasks[0][0];
  auto& b = spec.tasks[1][0];
  auto cos_ab = [&] {
    const auto pa = class_pattern(spec, a), pb = class_pattern(spec, b);
    return cosine_sim(pa.data, pb.data);
  };
  const double before = cos_ab();
  b.partner = a.class_id;
  b.overlap = 0.9;
  CHECK(cos_ab() > before + 0.5);
  a.kind = GeneratorKind::ProceduralRaster;
  a.overlap = 0.5;
  a.partner = b.class_id;
  CHECK_THROWS_AS(spec.validate(), Error);
}

TEST_CASE("raster and spiral generators") {
  TaskStream s;
  s.name = "mixed";
  s.seed = 9;
  s.seq_len = 16;
  s.dim = 8;
  ClassSpec r;
  r.kind = GeneratorKind::ProceduralRaster;
  r.noise = 0.1;
  r.train_count = 5;
  r.test_count = 2;
  ClassSpec sp = r;
  sp.kind = GeneratorKind::Spiral2dLifted;
  sp.noise = 0.02;
  r.class_id = 0;
  sp.class_id = 1;
  s.tasks = {{r}, {sp}};
  const auto d = generate(s);
  for (const auto& t : d.tasks)
    for (const auto& smp : t.train) {
      CHECK(smp.x.rows == 16);
      CHECK(smp.x.cols == 8);
      CHECK(all_finite(smp.x.data));
    }
  s.seq_len = 8;
  CHECK_THROWS_AS(generate(s), Error);
  s.tasks = {{sp}};
  CHECK_NOTHROW(generate(s));
}

TEST_CASE("jitter_augment") {
  Rng rng(10);
  const auto d = generate(default_stream("tiny", 1));
  const auto& x = d.tasks[0].train[0].x;
  CHECK(jitter_augment(x, 0.0, rng) == x);
  CHECK(jitter_augment(x, 0.0, rng, {0.5}) == x);
  const auto y = jitter_augment(x, 0.3, rng, {0.2});
  CHECK(y.rows == x.rows);
  CHECK(y.cols == x.cols);
  CHECK_THROWS_AS(jitter_augment(x, -1.0, rng), Error);

  // Mean absolute per-entry perturbation over 10000 draws of a single entry.
  const double strength = 0.25;
  TokenSequence one(1, 1);
  double sum = 0.0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) sum += std::abs(jitter_augment(one, strength, rng)(0, 0));
  // Std of |N(0, s^2)| is s * sqrt(pi/2 - 1); allow four standard errors.
  const double se = strength * std::sqrt(std::numbers::pi / 2.0) * std::sqrt(1.0 - 2.0 / std::numbers::pi) /
                    std::sqrt(double(draws));
  CHECK(std::abs(sum / draws - strength) <= 4.0 * se);
}

TEST_CASE("stream file round-trip and errors") {
  const auto d = generate(default_stream("tiny", 11));
  const auto path = temp_path("rt.bin");
  save_dataset(d, path);
  CHECK(load_dataset(path) == d);
  const auto bytes = slurp(path);
  {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
  }
  try {
    load_dataset(path);
    FAIL("expected FormatError");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::FormatError);
  }
  try {
    load_dataset(temp_path("missing.bin"));
    FAIL("expected MissingFile");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MissingFile);
  }
}

TEST_CASE("csv round-trip keeps samples exactly") {
  const auto d = generate(default_stream("tiny", 12));
  const auto path = temp_path("rt.csv");
  write_csv(d, path);
  const auto back = read_csv(path);
  REQUIRE(back.tasks.size() == d.tasks.size());
  for (std::size_t t = 0; t < d.tasks.size(); ++t) {
    CHECK(back.tasks[t].classes == d.tasks[t].classes);
    CHECK(back.tasks[t].train == d.tasks[t].train);
    CHECK(back.tasks[t].test == d.tasks[t].test);
  }
}

TEST_CASE("stream spec text") {
  const auto s = parse_stream_spec("name = mine\nseed=3\ntasks=2\nclasses_per_task=3\nnoise=0.2 # comment\n");
  CHECK(s.name == "mine");
  CHECK(s.tasks.size() == 2);
  CHECK(s.tasks[1][2].class_id == 5);
  CHECK(s.tasks[0][0].noise == 0.2);
  CHECK_THROWS_AS(parse_stream_spec("tasks=2\ncolour=red\n"), Error);
  CHECK_THROWS_AS(parse_stream_spec("noise=abc\n"), Error);
}

TEST_CASE("hard preset overlaps across tasks") {
  const auto spec = default_stream("hard10x4", 1);
  // Raw class means: a class leaning on class 100 shares roughly
  // overlap * sqrt(1 - overlap^2) = 0.48 of its direction.
  double best = -1.0;
  const auto& first = spec.tasks[0][0];
  for (std::size_t t = 1; t < spec.tasks.size(); ++t)
    for (const auto& c : spec.tasks[t]) {
      const auto a = class_pattern(spec, first).data, b = class_pattern(spec, c).data;
      best = std::max(best, dot(a, b) / std::sqrt(dot(a, a) * dot(b, b)));
    }
  CHECK(best > 0.4);
  const auto pre = pretext_for(spec, 3);
  CHECK(pre.dim == spec.dim);
  CHECK(pre.seq_len == spec.seq_len);
}

// SPDX-License-Identifier: Apache-2.0
#include "protoprompt/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

namespace protoprompt {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size(), ErrorKind::ConfigError,
          key + ": expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && p == v.data() + v.size() && std::isfinite(out), ErrorKind::ConfigError,
          key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::ConfigError, key + ": expected true or false, got '" + v + "'");
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct Key {
  const char* name;
  std::function<void(Settings&, const std::string&)> set;
  std::function<json(const Settings&)> get;
};

#define INT_KEY(NAME, FIELD)                                                                                     \
  Key {                                                                                                          \
    NAME, [](Settings& s, const std::string& v) { s.FIELD = parse_int<decltype(s.FIELD)>(NAME, v); },        \
        [](const Settings& s) { return json(s.FIELD); }                                                        \
  }
#define REAL_KEY(NAME, FIELD)                                                                      \
  Key {                                                                                            \
    NAME, [](Settings& s, const std::string& v) { s.FIELD = parse_real(NAME, v); },              \
        [](const Settings& s) { return json(s.FIELD); }                                          \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      INT_KEY("seed", seed),
      INT_KEY("backbone.layers", backbone.num_layers),
      INT_KEY("backbone.heads", backbone.num_heads),
      INT_KEY("backbone.mlp_hidden", backbone.mlp_hidden),
      INT_KEY("pretrain.epochs", pretrain.epochs),
      INT_KEY("pretrain.batch_size", pretrain.batch_size),
      REAL_KEY("pretrain.lr_init", pretrain.lr_init),
      REAL_KEY("pretrain.lr_final", pretrain.lr_final),
      REAL_KEY("pretrain.weight_decay", pretrain.weight_decay),
      REAL_KEY("pretrain.jitter", pretrain.jitter),
      INT_KEY("train.epochs", train.epochs),
      INT_KEY("train.batch_size", train.batch_size),
      REAL_KEY("train.lr_init", train.lr_init),
      REAL_KEY("train.lr_final", train.lr_final),
      REAL_KEY("train.weight_decay", train.weight_decay),
      REAL_KEY("train.temperature", train.temperature),
      INT_KEY("train.prompt_length", train.prompt_length),
      INT_KEY("train.centroids", train.centroids),
      INT_KEY("train.retrieve", train.retrieve),
      REAL_KEY("train.jitter", train.jitter),
      REAL_KEY("train.jitter_dropout", train.jitter_dropout),
      Key{"train.augment_anchors",
          [](Settings& s, const std::string& v) { s.train.augment_anchors = parse_bool("train.augment_anchors", v); },
          [](const Settings& s) { return json(s.train.augment_anchors); }},
      Key{"train.loss", [](Settings& s, const std::string& v) { s.train.loss = parse_loss_variant(v); },
          [](const Settings& s) { return json(std::string(to_string(s.train.loss))); }},
      Key{"train.prototypes",
          [](Settings& s, const std::string& v) {
            require(v == "multi" || v == "mean", ErrorKind::ConfigError, "train.prototypes: multi or mean");
            s.train.prototypes = v == "mean" ? PrototypeMode::ClassMean : PrototypeMode::MultiCentroid;
          },
          [](const Settings& s) { return json(s.train.prototypes == PrototypeMode::ClassMean ? "mean" : "multi"); }},
      Key{"train.training_free",
          [](Settings& s, const std::string& v) { s.train.training_free = parse_bool("train.training_free", v); },
          [](const Settings& s) { return json(s.train.training_free); }},
      INT_KEY("neck.layers", train.neck.num_layers),
      INT_KEY("neck.hidden", train.neck.hidden),
  };
  return k;
}

#undef INT_KEY
#undef REAL_KEY

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::MissingFile, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::MissingFile, "cannot write " + path.string());
  out << body;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Options shared by most subcommands.
struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string preset;
  std::string stream;
  std::string out;
  std::string protocol = "both";
};

Settings resolve(const Common& c) {
  Settings s;
  if (!c.config.empty()) apply_settings_text(s, read_file(c.config));
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    require(eq != std::string::npos, ErrorKind::ConfigError, "--set expects key=value, got " + kv);
    apply_setting(s, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
  if (c.seed_given) s.seed = c.seed;
  s.train.seed = s.seed;
  s.train.validate();
  return s;
}

Dataset load_stream(const Common& c, const Settings& s) {
  require(c.preset.empty() != c.stream.empty(), ErrorKind::ConfigError, "give exactly one of --preset or --stream");
  if (!c.preset.empty()) return generate(default_stream(c.preset, s.seed));
  if (ends_with(c.stream, ".csv")) return read_csv(c.stream);
  return load_dataset(c.stream);
}

BackboneConfig shaped(const Settings& s, const Dataset& data) {
  BackboneConfig b = s.backbone;
  b.embed_dim = data.spec.dim;
  b.seq_len = data.spec.seq_len;
  b.validate();
  return b;
}

json stream_json(const Common& c, const Dataset& data) {
  json j;
  if (!c.preset.empty())
    j["preset"] = c.preset;
  else
    j["file"] = c.stream;
  j["name"] = data.spec.name;
  j["seed"] = data.spec.seed;
  j["tasks"] = data.tasks.size();
  j["classes"] = data.all_classes().size();
  j["dim"] = data.spec.dim;
  j["seq_len"] = data.spec.seq_len;
  return j;
}

json manifest_json(const std::string& command, const Common& c, const Settings& s, const Dataset& data) {
  json m;
  m["command"] = command;
  m["config_file"] = c.config;
  m["seed"] = s.seed;
  m["stream"] = stream_json(c, data);
  m["settings"] = settings_json(s);
  json bb = {{"layers", s.backbone.num_layers}, {"dim", data.spec.dim},          {"heads", s.backbone.num_heads},
             {"seq_len", data.spec.seq_len},    {"mlp_hidden", s.backbone.mlp_hidden}};
  m["backbone_config"] = bb;
  return m;
}

// Loads --backbone or pretrains one in-process.
struct BackboneSource {
  Backbone backbone;
  json info;
};

BackboneSource obtain_backbone(const std::string& path, const Settings& s, const Dataset& data) {
  BackboneSource out;
  if (!path.empty()) {
    out.backbone = Backbone::load(path);
    out.info = {{"file", path}};
  } else {
    const auto pre = generate(pretext_for(data.spec, s.seed));
    std::cerr << "pretraining backbone on " << pre.all_classes().size() << " pretext classes\n";
    auto r = pretrain_backbone(shaped(s, data), pre, data.all_classes(), s.pretrain, s.seed);
    out.backbone = std::move(r.backbone);
    out.info = {{"pretrained_in_process", true}, {"heldout_accuracy", r.heldout_accuracy}};
  }
  require(out.backbone.config().embed_dim == data.spec.dim && out.backbone.config().seq_len == data.spec.seq_len,
          ErrorKind::ConfigError, "backbone shape does not match the stream");
  require(out.backbone.frozen(), ErrorKind::FrozenError, "backbone file is not frozen");
  out.info["checksum"] = out.backbone.checksum();
  return out;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void add_common(CLI::App* app, Common& c, bool stream = true) {
  app->add_option("--config", c.config, "key=value settings file");
  app->add_option("--set", c.sets, "override one setting (key=value), repeatable");
  app->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& v) { c.seed = v, c.seed_given = true; }, "master seed");
  if (stream) {
    app->add_option("--preset", c.preset, "named stream preset");
    app->add_option("--stream", c.stream, "stream file (.cppd or .csv)");
  }
  app->add_option("--out", c.out, "output path");
}

// ---------------------------------------------------------------------------

int cmd_gen(const Common& c, const std::string& spec_file) {
  const Settings s = resolve(c);
  require(c.preset.empty() != spec_file.empty(), ErrorKind::ConfigError, "give exactly one of --preset or --spec");
  TaskStream spec = spec_file.empty() ? default_stream(c.preset, s.seed) : parse_stream_spec(read_file(spec_file));
  if (!spec_file.empty() && c.seed_given) spec.seed = s.seed;
  require(!c.out.empty(), ErrorKind::ConfigError, "--out is required");
  const auto data = generate(spec);
  if (ends_with(c.out, ".csv"))
    write_csv(data, c.out);
  else
    save_dataset(data, c.out);
  std::cout << json{{"out", c.out}, {"tasks", data.tasks.size()}, {"classes", data.all_classes().size()}}.dump()
            << "\n";
  return 0;
}

int cmd_pretrain(const Common& c) {
  const Settings s = resolve(c);
  const Dataset data = load_stream(c, s);
  require(!c.out.empty(), ErrorKind::ConfigError, "--out is required");
  const auto pre = generate(pretext_for(data.spec, s.seed));
  auto r = pretrain_backbone(shaped(s, data), pre, data.all_classes(), s.pretrain, s.seed);
  r.backbone.save(c.out);
  json j = {{"out", c.out},
            {"heldout_accuracy", r.heldout_accuracy},
            {"epoch_losses", r.epoch_losses},
            {"checksum", r.backbone.checksum()}};
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_run(const Common& c, const std::string& backbone_path, const std::string& variant) {
  Settings s = resolve(c);
  s.train = apply_variant(s.train, variant);
  const Dataset raw = load_stream(c, s);
  const Dataset data = variant == "joint" ? merge_tasks(raw) : raw;
  require(!c.out.empty(), ErrorKind::ConfigError, "--out is required");
  const fs::path dir(c.out);
  fs::create_directories(dir);

  auto src = obtain_backbone(backbone_path, s, data);
  if (backbone_path.empty()) {
    src.backbone.save(dir / "backbone.bin");
    src.info["file"] = "backbone.bin";
  }
  json manifest = manifest_json("run", c, s, data);
  manifest["variant"] = variant;
  manifest["backbone"] = src.info;
  manifest["artifacts"] = {{"store", "store.cpps"},
                           {"report", "report.json"},
                           {"accuracy", "accuracy.csv"},
                           {"log", "run_log.jsonl"}};
  std::cerr << "resolved settings: " << settings_json(s).dump() << "\n";

  std::ostringstream log_lines;
  RunOptions opts;
  opts.on_task = [&](std::size_t t, const TaskReport& rep, const std::vector<double>& row) {
    for (std::size_t e = 0; e < rep.epoch_losses.size(); ++e)
      log_lines << json{{"type", "epoch"},
                        {"task", rep.task_id},
                        {"epoch", e},
                        {"loss", rep.epoch_losses[e]},
                        {"skipped_batches", rep.skipped_batches[e]}}
                       .dump()
                << "\n";
    log_lines << json{{"type", "accuracy"}, {"session", t + 1}, {"row", row}}.dump() << "\n";
    double mean = 0.0;
    for (double v : row) mean += v;
    std::cerr << "task " << t + 1 << "/" << data.tasks.size() << " avg acc " << std::fixed << std::setprecision(2)
              << mean / double(row.size()) << "\n";
  };
  const auto res = run_stream(src.backbone, data, s.train, opts);
  res.state.store.save((dir / "store.cpps").string());
  const json report = run_report(res.log, res.state.store, manifest, c.protocol);
  write_file(dir / "report.json", dump(report));
  write_file(dir / "accuracy.csv", accuracy_csv(res.log.accuracy));
  write_file(dir / "run_log.jsonl", log_lines.str());
  std::cout << json{{"avg_acc_last", report["avg_acc_last"]}, {"avg_acc_macro", report["avg_acc_macro"]}}.dump()
            << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& backbone_path, const std::string& store_path) {
  const Settings s = resolve(c);
  const Dataset data = load_stream(c, s);
  require(!backbone_path.empty() && !store_path.empty(), ErrorKind::ConfigError, "--backbone and --store are required");
  const Backbone bb = Backbone::load(backbone_path);
  EngineState state;
  state.backbone = &bb;
  state.store = PrototypeStore::load(store_path);
  std::vector<TaskData> seen;
  for (const auto& t : data.tasks)
    if (state.store.has_task(t.task_id)) seen.push_back(t);
  require(!seen.empty(), ErrorKind::ConfigError, "the store holds none of the stream's tasks");
  RunLog log;
  log.retrieve_r = state.store.config().retrieve;
  const auto row = evaluate(state, seen, state.store.config().retrieve, &log);
  double mean = 0.0;
  for (double v : row) mean += v;
  json manifest = manifest_json("eval", c, s, data);
  manifest["backbone"] = {{"file", backbone_path}, {"checksum", bb.checksum()}};
  manifest["store"] = store_path;
  json report;
  report["protocol"] = c.protocol;
  report["final_row"] = row;
  report["avg_acc_last"] = mean / double(row.size());
  report["avg_forward_passes"] = double(log.forward_passes) / double(log.inferences);
  report["avg_retrieved_prompts"] = double(log.retrieved) / double(log.inferences);
  report["manifest"] = manifest;
  if (c.out.empty())
    std::cout << dump(report);
  else
    write_file(c.out, dump(report));
  return 0;
}

int cmd_compare(const Common& c, const std::string& backbone_path, std::vector<std::string> variants) {
  const Settings base = resolve(c);
  if (variants.empty()) variants = variant_names();
  for (const auto& v : variants) apply_variant(base.train, v);  // fail fast on unknown names
  const Dataset data = load_stream(c, base);
  auto src = obtain_backbone(backbone_path, base, data);
  json rows = json::array();
  std::ostringstream table;
  table << std::left << std::setw(18) << "variant" << std::right << std::setw(10) << "last" << std::setw(10)
        << "macro" << std::setw(11) << "forgetting" << std::setw(8) << "J" << std::setw(12) << "params/cls"
        << "\n";
  for (const auto& v : variants) {
    Settings s = base;
    s.train = apply_variant(s.train, v);
    const Dataset d = v == "joint" ? merge_tasks(data) : data;
    std::cerr << "variant " << v << "\n";
    const auto res = run_stream(src.backbone, d, s.train);
    const auto& a = res.log.accuracy;
    json r;
    r["variant"] = v;
    r["avg_acc_last"] = average_accuracy(a, a.rows(), Protocol::Last);
    r["avg_acc_macro"] = average_accuracy(a, a.rows(), Protocol::Macro);
    if (a.rows() >= 2) r["forgetting_last"] = forgetting(a, a.rows());
    r["avg_retrieved_prompts"] = double(res.log.retrieved) / double(res.log.inferences);
    r["extra_params_per_class"] = memory_per_class(res.log.memory);
    r["per_task_rows"] = a.data();
    char line[160];
    std::snprintf(line, sizeof line, "%-18s%10.2f%10.2f%11s%8.2f%12.1f\n", v.c_str(), r["avg_acc_last"].get<double>(),
                  r["avg_acc_macro"].get<double>(),
                  a.rows() >= 2 ? std::to_string(forgetting(a, a.rows())).substr(0, 6).c_str() : "-",
                  r["avg_retrieved_prompts"].get<double>(), r["extra_params_per_class"].get<double>());
    table << line;
    rows.push_back(std::move(r));
  }
  std::cout << table.str();
  json manifest = manifest_json("compare", c, base, data);
  manifest["backbone"] = src.info;
  json report = {{"protocol", c.protocol}, {"variants", rows}, {"manifest", manifest}};
  if (!c.out.empty()) write_file(c.out, dump(report));
  return 0;
}

int cmd_export(const Common& c, const std::string& backbone_path, const std::string& store_path) {
  const Settings s = resolve(c);
  const Dataset data = load_stream(c, s);
  require(!backbone_path.empty() && !store_path.empty(), ErrorKind::ConfigError, "--backbone and --store are required");
  require(!c.out.empty(), ErrorKind::ConfigError, "--out is required");
  const Backbone bb = Backbone::load(backbone_path);
  const PrototypeStore store = PrototypeStore::load(store_path);

  struct Row {
    const char* kind;
    TaskId task;
    ClassId cls;
  };
  // Bare space: sample embeddings without prompts plus key centroids.
  // Prompted space: embeddings under the sample's own task prompt plus value centroids.
  std::vector<Vector> bare, prompted;
  std::vector<Row> bare_rows, prompted_rows;
  for (const auto& t : data.tasks) {
    if (!store.has_task(t.task_id)) continue;
    const PromptSet& p = store.prompt(t.task_id);
    for (const auto& smp : t.test) {
      bare.push_back(l2_normalize(encode(bb, smp.x, nullptr)));
      bare_rows.push_back({"sample", t.task_id, smp.label});
      prompted.push_back(l2_normalize(encode(bb, smp.x, p.length() ? &p : nullptr)));
      prompted_rows.push_back({"sample", t.task_id, smp.label});
    }
  }
  for (const auto& [id, r] : store.records()) {
    for (const auto& k : r.key_centroids) {
      bare.push_back(k);
      bare_rows.push_back({"key_centroid", r.task_id, id});
    }
    for (const auto& v : r.value_centroids) {
      prompted.push_back(v);
      prompted_rows.push_back({"value_centroid", r.task_id, id});
    }
  }
  require(!bare.empty(), ErrorKind::ConfigError, "the store holds none of the stream's tasks");
  std::ostringstream os;
  os << std::setprecision(10) << "space,kind,task,class,pc1,pc2\n";
  auto emit = [&](const char* space, const std::vector<Vector>& pts, const std::vector<Row>& rows) {
    const auto proj = pca_2d(pts);
    for (std::size_t i = 0; i < pts.size(); ++i)
      os << space << "," << rows[i].kind << "," << rows[i].task << "," << rows[i].cls << "," << proj[i].first << ","
         << proj[i].second << "\n";
  };
  emit("bare", bare, bare_rows);
  emit("prompted", prompted, prompted_rows);
  write_file(c.out, os.str());
  std::cout << json{{"out", c.out}, {"points", bare.size() + prompted.size()}}.dump() << "\n";
  return 0;
}

int cmd_inspect(const std::string& store_path) {
  require(!store_path.empty(), ErrorKind::ConfigError, "--store is required");
  std::cout << describe(PrototypeStore::load(store_path));
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------

void apply_setting(Settings& s, const std::string& key, const std::string& value) {
  for (const auto& k : keys())
    if (key == k.name) {
      k.set(s, value);
      return;
    }
  fail(ErrorKind::ConfigError, "unknown setting: " + key);
}

void apply_settings_text(Settings& s, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::ConfigError,
            "line " + std::to_string(lineno) + ": expected key=value");
    apply_setting(s, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

nlohmann::ordered_json settings_json(const Settings& s) {
  json j;
  for (const auto& k : keys()) j[k.name] = k.get(s);
  return j;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingFile: return 2;
    case ErrorKind::FormatError: return 3;
    case ErrorKind::NumericError: return 5;
    default: return 4;
  }
}

std::vector<std::pair<double, double>> pca_2d(const std::vector<Vector>& points) {
  require(!points.empty(), ErrorKind::EmptyInput, "nothing to project");
  const std::size_t n = points.size(), d = points.front().size();
  Vector mean(d, 0.0);
  for (const auto& p : points) axpy(1.0 / double(n), p, mean);
  Matrix cov(d, d);
  for (const auto& p : points)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += (p[a] - mean[a]) * (p[b] - mean[b]) / double(n);
  const auto eig = symmetric_eigen(cov);  // ascending
  std::vector<Vector> axes;
  for (std::size_t k = 0; k < std::min<std::size_t>(2, d); ++k) {
    const std::size_t col = d - 1 - k;
    Vector axis(d);
    std::size_t arg = 0;
    for (std::size_t a = 0; a < d; ++a) {
      axis[a] = eig.vectors(a, col);
      if (std::abs(axis[a]) > std::abs(axis[arg])) arg = a;
    }
    if (axis[arg] < 0)
      for (double& v : axis) v = -v;
    axes.push_back(std::move(axis));
  }
  std::vector<std::pair<double, double>> out;
  out.reserve(n);
  for (const auto& p : points) {
    Vector c(d);
    for (std::size_t a = 0; a < d; ++a) c[a] = p[a] - mean[a];
    out.emplace_back(dot(c, axes[0]), axes.size() > 1 ? dot(c, axes[1]) : 0.0);
  }
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"protoprompt: prompt-based rehearsal-free continual learning on synthetic streams"};
  app.require_subcommand(1);
  Common c;
  std::string backbone, store, spec;
  std::vector<std::string> variants;
  std::string variant = "cpp";

  auto* gen = app.add_subcommand("gen", "materialize a stream file");
  add_common(gen, c);
  gen->add_option("--spec", spec, "key=value stream description");

  auto* pre = app.add_subcommand("pretrain", "pretrain and freeze a backbone");
  add_common(pre, c);

  auto* run = app.add_subcommand("run", "train over every task and evaluate after each");
  add_common(run, c);
  run->add_option("--backbone", backbone, "frozen backbone file (pretrained in-process if absent)");
  run->add_option("--variant", variant, "cpp, baseline, ce, supcon, cpl_with_uniform, cpl_no_proto, mean_proto, joint");

  auto* ev = app.add_subcommand("eval", "evaluate a stored run");
  add_common(ev, c);
  ev->add_option("--backbone", backbone, "frozen backbone file")->required();
  ev->add_option("--store", store, "store file")->required();

  auto* cmp = app.add_subcommand("compare", "run several variants and print a table");
  add_common(cmp, c);
  cmp->add_option("--backbone", backbone, "frozen backbone file (pretrained in-process if absent)");
  cmp->add_option("--variant", variants, "variant to include, repeatable (default: all)");

  auto* ex = app.add_subcommand("export", "2-D principal projections of embeddings and prototypes");
  add_common(ex, c);
  ex->add_option("--backbone", backbone, "frozen backbone file")->required();
  ex->add_option("--store", store, "store file")->required();

  auto* ins = app.add_subcommand("store-inspect", "summarize a store file");
  ins->add_option("--store", store, "store file")->required();

  for (auto* sub : {pre, run, ev, cmp, ex})
    sub->add_option("--protocol", c.protocol, "headline protocol")
        ->check(CLI::IsMember({"last", "macro", "both"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 4;
  }

  try {
    if (gen->parsed()) return cmd_gen(c, spec);
    if (pre->parsed()) return cmd_pretrain(c);
    if (run->parsed()) return cmd_run(c, backbone, variant);
    if (ev->parsed()) return cmd_eval(c, backbone, store);
    if (cmp->parsed()) return cmd_compare(c, backbone, variants);
    if (ex->parsed()) return cmd_export(c, backbone, store);
    if (ins->parsed()) return cmd_inspect(store);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 4;
}

}  // namespace protoprompt

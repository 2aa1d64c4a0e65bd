#include "lossprio/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string_view>

#include <fmt/format.h>
#include <yaml-cpp/yaml.h>

namespace lossprio {

namespace {

class Reader {
 public:
  explicit Reader(std::string source) : source_(std::move(source)) {}

  [[noreturn]] void fail(const YAML::Node& node, const std::string& message) const {
    fail_at(node.Mark(), message);
  }

  [[noreturn]] void fail_at(const YAML::Mark& mark, const std::string& message) const {
    throw ConfigFileError(source_, mark.is_null() ? 0 : static_cast<std::size_t>(mark.line) + 1,
                          message);
  }

  void expect_map(const YAML::Node& node, std::string_view section,
                  std::initializer_list<std::string_view> allowed) const {
    if (!node.IsMap()) fail(node, fmt::format("'{}' must be a mapping", section));
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      bool known = false;
      for (auto a : allowed) known = known || key == a;
      if (!known) fail(kv.first, fmt::format("unknown key '{}' in '{}'", key, section));
    }
  }

  template <typename T>
  void read(const YAML::Node& map, const char* key, T& out) const {
    const YAML::Node node = map[key];
    if (!node) return;
    try {
      out = node.as<T>();
    } catch (const YAML::Exception&) {
      fail(node, fmt::format("bad value for '{}'", key));
    }
  }

  template <typename T>
  void read_list(const YAML::Node& map, const char* key, std::vector<T>& out) const {
    const YAML::Node node = map[key];
    if (!node) return;
    if (!node.IsSequence()) fail(node, fmt::format("'{}' must be a list", key));
    out.clear();
    for (const auto& item : node) {
      try {
        out.push_back(item.as<T>());
      } catch (const YAML::Exception&) {
        fail(item, fmt::format("bad list entry in '{}'", key));
      }
    }
  }

  template <typename Fn>
  void guarded(const YAML::Node& node, Fn&& fn) const {
    try {
      fn();
    } catch (const ConfigFileError&) {
      throw;
    } catch (const ConfigError& e) {
      fail(node, e.what());
    }
  }

 private:
  std::string source_;
};

void read_prioritizer(const Reader& r, const YAML::Node& node, PrioritizerConfig& cfg,
                      std::string_view section, bool allow_name) {
  if (allow_name) {
    r.expect_map(node, section,
                 {"name", "kind", "beta", "histogram_capacity", "pool_capacity", "gate_threshold"});
  } else {
    r.expect_map(node, section,
                 {"kind", "beta", "histogram_capacity", "pool_capacity", "gate_threshold"});
  }
  if (node["kind"]) {
    std::string kind;
    r.read(node, "kind", kind);
    r.guarded(node["kind"], [&] { cfg.kind = parse_prioritizer_kind(kind); });
  }
  r.read(node, "beta", cfg.beta);
  r.read(node, "histogram_capacity", cfg.histogram_capacity);
  r.read(node, "pool_capacity", cfg.pool_capacity);
  r.read(node, "gate_threshold", cfg.gate_threshold);
}

std::string num(double v) { return fmt::format("{}", v); }

void emit_prioritizer(YAML::Emitter& out, const PrioritizerConfig& p) {
  out << YAML::Key << "kind" << YAML::Value << std::string(to_string(p.kind));
  out << YAML::Key << "beta" << YAML::Value << num(p.beta);
  out << YAML::Key << "histogram_capacity" << YAML::Value << p.histogram_capacity;
  out << YAML::Key << "pool_capacity" << YAML::Value << p.pool_capacity;
  out << YAML::Key << "gate_threshold" << YAML::Value << num(p.gate_threshold);
}

}  // namespace

std::vector<Variant> BenchmarkConfig::default_variants() {
  auto sb = [](double beta) {
    PrioritizerConfig p;
    p.kind = PrioritizerKind::sb_loss;
    p.beta = beta;
    return p;
  };
  auto vr = [](std::size_t pool) {
    PrioritizerConfig p;
    p.kind = PrioritizerKind::vr;
    p.pool_capacity = pool;
    return p;
  };
  // Batch size 128: pools of 3B and 2B cap selectivity at 33% and 50%.
  return {{"sb_50", sb(1.0)}, {"sb_33", sb(2.0)}, {"vr_max33", vr(384)}, {"vr_max50", vr(256)}};
}

void ExperimentConfig::validate() const {
  trainer.validate();
  prioritizer.validate(trainer.batch_size);
  if (!(corruption.fraction >= 0.0 && corruption.fraction <= 1.0)) {
    throw ConfigError("corruption fraction must be in [0, 1]");
  }
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (dataset.source == DatasetSource::synthetic) {
    if (dataset.num_classes < 2 || dataset.feature_dim < 2 ||
        dataset.train_size < dataset.num_classes || dataset.test_size == 0) {
      throw ConfigError("synthetic dataset needs num_classes >= 2, feature_dim >= 2, "
                        "train_size >= num_classes and test_size >= 1");
    }
  } else if (dataset.train_images.empty() || dataset.train_labels.empty() ||
             dataset.test_images.empty() || dataset.test_labels.empty()) {
    throw ConfigError("idx dataset needs train_images, train_labels, test_images and test_labels");
  }
  if (!(benchmark.slack > 1.0)) throw ConfigError("benchmark slack must be > 1");
  for (double f : benchmark.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("benchmark fractions must be in (0, 1]");
  }
  for (const auto& v : benchmark.variants) {
    if (v.name.empty()) throw ConfigError("benchmark variants need a name");
    v.prioritizer.validate(trainer.batch_size);
  }
}

ExperimentConfig parse_config(const std::string& text, const std::string& source_name) {
  Reader r(source_name);
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    r.fail_at(e.mark, e.msg);
  }

  ExperimentConfig cfg;
  if (!root || root.IsNull()) return cfg;
  r.expect_map(root, "<root>",
               {"dataset", "corruption", "trainer", "prioritizer", "seeds", "output_dir",
                "eval_every", "benchmark"});

  if (const auto d = root["dataset"]) {
    r.expect_map(d, "dataset",
                 {"source", "train_size", "test_size", "num_classes", "feature_dim", "seed",
                  "separation", "modes_per_class", "mode_decay", "noise", "train_images",
                  "train_labels", "test_images", "test_labels"});
    auto& ds = cfg.dataset;
    if (d["source"]) {
      std::string source;
      r.read(d, "source", source);
      if (source == "synthetic") {
        ds.source = DatasetSource::synthetic;
      } else if (source == "idx") {
        ds.source = DatasetSource::idx;
      } else {
        r.fail(d["source"], fmt::format("unknown dataset source '{}'", source));
      }
    }
    r.read(d, "train_size", ds.train_size);
    r.read(d, "test_size", ds.test_size);
    r.read(d, "num_classes", ds.num_classes);
    r.read(d, "feature_dim", ds.feature_dim);
    r.read(d, "seed", ds.seed);
    r.read(d, "separation", ds.synthetic.separation);
    r.read(d, "modes_per_class", ds.synthetic.modes_per_class);
    r.read(d, "mode_decay", ds.synthetic.mode_decay);
    r.read(d, "noise", ds.synthetic.noise);
    std::string path;
    if (d["train_images"]) { r.read(d, "train_images", path); ds.train_images = path; }
    if (d["train_labels"]) { r.read(d, "train_labels", path); ds.train_labels = path; }
    if (d["test_images"]) { r.read(d, "test_images", path); ds.test_images = path; }
    if (d["test_labels"]) { r.read(d, "test_labels", path); ds.test_labels = path; }
    r.guarded(d, [&] {
      if (ds.source == DatasetSource::synthetic) {
        SyntheticOptions probe = ds.synthetic;
        if (probe.modes_per_class == 0 || !(probe.separation >= 0.0) || !(probe.noise > 0.0) ||
            !(probe.mode_decay > 0.0)) {
          throw ConfigError("synthetic options need modes_per_class >= 1, separation >= 0, "
                            "noise > 0 and mode_decay > 0");
        }
      }
    });
  }

  if (const auto c = root["corruption"]) {
    r.expect_map(c, "corruption", {"kind", "fraction", "seed"});
    if (c["kind"]) {
      std::string kind;
      r.read(c, "kind", kind);
      r.guarded(c["kind"], [&] { cfg.corruption.kind = parse_corruption_kind(kind); });
    }
    r.read(c, "fraction", cfg.corruption.fraction);
    r.read(c, "seed", cfg.corruption.seed);
    if (!(cfg.corruption.fraction >= 0.0 && cfg.corruption.fraction <= 1.0)) {
      r.fail(c["fraction"], "corruption fraction must be in [0, 1]");
    }
  }

  if (const auto t = root["trainer"]) {
    r.expect_map(t, "trainer",
                 {"learning_rate", "momentum", "weight_decay", "lr_drop_factor", "lr_drop_points",
                  "batch_size", "epochs", "hidden_layers"});
    auto& tc = cfg.trainer;
    r.read(t, "learning_rate", tc.learning_rate);
    r.read(t, "momentum", tc.momentum);
    r.read(t, "weight_decay", tc.weight_decay);
    r.read(t, "lr_drop_factor", tc.lr_drop_factor);
    r.read_list(t, "lr_drop_points", tc.lr_drop_points);
    r.read(t, "batch_size", tc.batch_size);
    r.read(t, "epochs", tc.total_epochs);
    r.read_list(t, "hidden_layers", tc.hidden_layers);
    r.guarded(t, [&] { tc.validate(); });
  }

  if (const auto p = root["prioritizer"]) {
    read_prioritizer(r, p, cfg.prioritizer, "prioritizer", false);
    r.guarded(p, [&] { cfg.prioritizer.validate(cfg.trainer.batch_size); });
  }

  if (root["seeds"]) {
    const auto s = root["seeds"];
    if (s.IsScalar()) {
      std::uint64_t seed = 0;
      r.read(root, "seeds", seed);
      cfg.seeds = {seed};
    } else {
      r.read_list(root, "seeds", cfg.seeds);
    }
    if (cfg.seeds.empty()) r.fail(s, "at least one seed is required");
  }
  if (root["output_dir"]) {
    std::string dir;
    r.read(root, "output_dir", dir);
    cfg.output_dir = dir;
  }
  r.read(root, "eval_every", cfg.eval_every);
  if (cfg.eval_every == 0 && root["eval_every"]) r.fail(root["eval_every"], "eval_every must be positive");

  if (const auto b = root["benchmark"]) {
    r.expect_map(b, "benchmark", {"corruptions", "fractions", "slack", "variants"});
    auto& bc = cfg.benchmark;
    if (b["corruptions"]) {
      std::vector<std::string> names;
      r.read_list(b, "corruptions", names);
      bc.corruptions.clear();
      r.guarded(b["corruptions"], [&] {
        for (const auto& n : names) bc.corruptions.push_back(parse_corruption_kind(n));
      });
    }
    r.read_list(b, "fractions", bc.fractions);
    r.read(b, "slack", bc.slack);
    if (const auto vs = b["variants"]) {
      if (!vs.IsSequence()) r.fail(vs, "'variants' must be a list");
      bc.variants.clear();
      for (const auto& v : vs) {
        Variant variant;
        read_prioritizer(r, v, variant.prioritizer, "variants", true);
        r.read(v, "name", variant.name);
        if (variant.name.empty()) variant.name = std::string(to_string(variant.prioritizer.kind));
        bc.variants.push_back(std::move(variant));
      }
    }
    r.guarded(b, [&] {
      if (!(bc.slack > 1.0)) throw ConfigError("benchmark slack must be > 1");
      for (const auto& v : bc.variants) v.prioritizer.validate(cfg.trainer.batch_size);
    });
  }

  r.guarded(root, [&] { cfg.validate(); });
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigFileError(path.string(), 0, "cannot open config file");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str(), path.string());
}

std::string to_yaml(const ExperimentConfig& config) {
  YAML::Emitter out;
  out << YAML::BeginMap;

  const auto& ds = config.dataset;
  out << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "source" << YAML::Value
      << (ds.source == DatasetSource::synthetic ? "synthetic" : "idx");
  out << YAML::Key << "train_size" << YAML::Value << ds.train_size;
  out << YAML::Key << "test_size" << YAML::Value << ds.test_size;
  out << YAML::Key << "num_classes" << YAML::Value << ds.num_classes;
  out << YAML::Key << "feature_dim" << YAML::Value << ds.feature_dim;
  out << YAML::Key << "seed" << YAML::Value << ds.seed;
  out << YAML::Key << "separation" << YAML::Value << num(ds.synthetic.separation);
  out << YAML::Key << "modes_per_class" << YAML::Value << ds.synthetic.modes_per_class;
  out << YAML::Key << "mode_decay" << YAML::Value << num(ds.synthetic.mode_decay);
  out << YAML::Key << "noise" << YAML::Value << num(ds.synthetic.noise);
  if (ds.source == DatasetSource::idx) {
    out << YAML::Key << "train_images" << YAML::Value << ds.train_images.string();
    out << YAML::Key << "train_labels" << YAML::Value << ds.train_labels.string();
    out << YAML::Key << "test_images" << YAML::Value << ds.test_images.string();
    out << YAML::Key << "test_labels" << YAML::Value << ds.test_labels.string();
  }
  out << YAML::EndMap;

  out << YAML::Key << "corruption" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "kind" << YAML::Value << std::string(to_string(config.corruption.kind));
  out << YAML::Key << "fraction" << YAML::Value << num(config.corruption.fraction);
  out << YAML::Key << "seed" << YAML::Value << config.corruption.seed;
  out << YAML::EndMap;

  const auto& tc = config.trainer;
  out << YAML::Key << "trainer" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "learning_rate" << YAML::Value << num(tc.learning_rate);
  out << YAML::Key << "momentum" << YAML::Value << num(tc.momentum);
  out << YAML::Key << "weight_decay" << YAML::Value << num(tc.weight_decay);
  out << YAML::Key << "lr_drop_factor" << YAML::Value << num(tc.lr_drop_factor);
  out << YAML::Key << "lr_drop_points" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double p : tc.lr_drop_points) out << num(p);
  out << YAML::EndSeq;
  out << YAML::Key << "batch_size" << YAML::Value << tc.batch_size;
  out << YAML::Key << "epochs" << YAML::Value << tc.total_epochs;
  out << YAML::Key << "hidden_layers" << YAML::Value << YAML::Flow << tc.hidden_layers;
  out << YAML::EndMap;

  out << YAML::Key << "prioritizer" << YAML::Value << YAML::BeginMap;
  emit_prioritizer(out, config.prioritizer);
  out << YAML::EndMap;

  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << config.seeds;
  out << YAML::Key << "output_dir" << YAML::Value << config.output_dir.string();
  out << YAML::Key << "eval_every" << YAML::Value << config.eval_every;

  const auto& bc = config.benchmark;
  out << YAML::Key << "benchmark" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "corruptions" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (auto k : bc.corruptions) out << std::string(to_string(k));
  out << YAML::EndSeq;
  out << YAML::Key << "fractions" << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (double f : bc.fractions) out << num(f);
  out << YAML::EndSeq;
  out << YAML::Key << "slack" << YAML::Value << num(bc.slack);
  out << YAML::Key << "variants" << YAML::Value << YAML::BeginSeq;
  for (const auto& v : bc.variants) {
    out << YAML::BeginMap;
    out << YAML::Key << "name" << YAML::Value << v.name;
    emit_prioritizer(out, v.prioritizer);
    out << YAML::EndMap;
  }
  out << YAML::EndSeq;
  out << YAML::EndMap;

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace lossprio

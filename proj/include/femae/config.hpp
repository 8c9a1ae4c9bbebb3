#pragma once

// Flat key=value run configuration. Keys map 1:1 onto ModelConfig and
// TrainConfig fields; unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "femae/data.hpp"
#include "femae/errors.hpp"
#include "femae/model_config.hpp"

namespace femae {

enum class FinetuneMode { Full, LemAndHead };

inline const char* to_string(FinetuneMode m) { return m == FinetuneMode::Full ? "full" : "lem_and_head"; }

inline FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "full") return FinetuneMode::Full;
  if (s == "lem_and_head") return FinetuneMode::LemAndHead;
  throw ConfigError("unknown finetune mode '" + s + "' (full, lem_and_head)");
}

struct TrainConfig {
  std::size_t steps = 200;
  std::size_t batch_size = 8;
  double base_lr = 1e-3;
  double weight_decay = 5e-2;
  std::size_t warmup_steps = 10;
  std::uint64_t seed = 0;
  FinetuneMode finetune_mode = FinetuneMode::Full;
  Augmentation augmentation = Augmentation::None;

  void validate() const {
    if (steps == 0) throw ConfigError("steps must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (warmup_steps >= steps) throw ConfigError("warmup_steps must be smaller than steps");
  }
};

namespace config_detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    if constexpr (std::is_floating_point_v<N>) {
      // fractions such as 1/16 are accepted
      if (auto slash = text.find('/'); slash != std::string::npos) {
        const double num = parse_number<double>(key, text.substr(0, slash));
        const double den = parse_number<double>(key, text.substr(slash + 1));
        if (den == 0) throw std::invalid_argument("zero denominator");
        return static_cast<N>(num / den);
      }
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing characters");
      return static_cast<N>(v);
    } else {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      const unsigned long long v = std::stoull(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing characters");
      return static_cast<N>(v);
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + text + "'");
  }
}

struct Field {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename N>
Field number(const std::string& key, N& ref) {
  return {[&ref] {
            if constexpr (std::is_floating_point_v<N>) return fmt_double(ref);
            else return std::to_string(ref);
          },
          [&ref, key](const std::string& v) { ref = parse_number<N>(key, v); }};
}

}  // namespace config_detail

/// Model + training configuration with a flat key=value text form.
struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainConfig train;

  /// Ordered key table; model keys first, then training keys.
  std::vector<std::pair<std::string, config_detail::Field>> fields() {
    using config_detail::number;
    ModelConfig& m = model;
    TrainConfig& t = train;
    std::vector<std::pair<std::string, config_detail::Field>> f;
    f.emplace_back("n_layers", number("n_layers", m.n_layers));
    f.emplace_back("embed_dim", number("embed_dim", m.embed_dim));
    f.emplace_back("heads", number("heads", m.heads));
    f.emplace_back("lem_k", number("lem_k", m.lem_k));
    f.emplace_back("lem_scale", number("lem_scale", m.lem_scale));
    f.emplace_back("decoder_depth", number("decoder_depth", m.decoder_depth));
    f.emplace_back("mask_ratio", number("mask_ratio", m.mask_ratio));
    f.emplace_back("patches", number("patches", m.patches));
    f.emplace_back("group_size", number("group_size", m.group_size));
    f.emplace_back("points", number("points", m.points));
    f.emplace_back("variant", config_detail::Field{[&m] { return std::string(1, to_char(m.variant)); },
                                                   [&m](const std::string& v) { m.variant = parse_variant(v); }});
    f.emplace_back("layer_order",
                   config_detail::Field{[&m] { return std::string(to_string(m.layer_order)); },
                                        [&m](const std::string& v) { m.layer_order = parse_layer_order(v); }});
    f.emplace_back("local_blocks", number("local_blocks", m.local_blocks));
    f.emplace_back("embed_hidden1", number("embed_hidden1", m.embed_hidden1));
    f.emplace_back("embed_hidden2", number("embed_hidden2", m.embed_hidden2));
    f.emplace_back("embed_hidden3", number("embed_hidden3", m.embed_hidden3));
    f.emplace_back("pos_hidden", number("pos_hidden", m.pos_hidden));
    f.emplace_back("mlp_ratio", number("mlp_ratio", m.mlp_ratio));
    f.emplace_back("head_hidden", number("head_hidden", m.head_hidden));
    f.emplace_back("num_classes", number("num_classes", m.num_classes));
    f.emplace_back("init_seed", number("init_seed", m.init_seed));
    f.emplace_back("steps", number("steps", t.steps));
    f.emplace_back("batch_size", number("batch_size", t.batch_size));
    f.emplace_back("base_lr", number("base_lr", t.base_lr));
    f.emplace_back("weight_decay", number("weight_decay", t.weight_decay));
    f.emplace_back("warmup_steps", number("warmup_steps", t.warmup_steps));
    f.emplace_back("seed", number("seed", t.seed));
    f.emplace_back("finetune_mode",
                   config_detail::Field{[&t] { return std::string(to_string(t.finetune_mode)); },
                                        [&t](const std::string& v) { t.finetune_mode = parse_finetune_mode(v); }});
    f.emplace_back("augmentation",
                   config_detail::Field{[&t] { return std::string(to_string(t.augmentation)); },
                                        [&t](const std::string& v) { t.augmentation = parse_augmentation(v); }});
    return f;
  }

  void set(const std::string& key, const std::string& value) {
    if (key == "preset") {
      apply_preset(value);
      return;
    }
    for (auto& [k, field] : fields()) {
      if (k == key) {
        field.set(value);
        return;
      }
    }
    throw ConfigError("unknown config key '" + key + "'");
  }

  std::string get(const std::string& key) {
    for (auto& [k, field] : fields())
      if (k == key) return field.get();
    throw ConfigError("unknown config key '" + key + "'");
  }

  /// Replaces the model block with a named preset (toy or base), keeping training keys.
  void apply_preset(const std::string& name) {
    if (name == "toy") {
      model = ModelConfig::toy();
    } else if (name == "base") {
      model = ModelConfig::base();
    } else {
      throw ConfigError("unknown preset '" + name + "' (toy, base)");
    }
  }

  /// Effective configuration, one `key=value` line per field.
  std::string echo() {
    std::string out;
    for (auto& [k, field] : fields()) out += k + "=" + field.get() + "\n";
    return out;
  }

  void validate() const {
    model.validate();
    train.validate();
  }
};

/// Parsed `key=value` pairs in file order. `#` starts a comment; blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_kv(std::istream& in) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", lineno);
    std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError("empty key", lineno);
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

/// Applies a config file. A `preset` key is applied before all others wherever it appears.
inline void apply_kv(RunConfig& rc, const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [k, v] : kv)
    if (k == "preset") rc.apply_preset(v);
  for (const auto& [k, v] : kv)
    if (k != "preset") rc.set(k, v);
}

inline RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path.string() + "'");
  try {
    apply_kv(base, parse_kv(in));
  } catch (const ParseError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return base;
}

inline constexpr const char* kConfigEchoName = "config.echo";

inline void write_config_echo(const std::filesystem::path& dir, RunConfig rc,
                              const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::ofstream out(dir / kConfigEchoName);
  if (!out) throw UsageError("cannot write '" + (dir / kConfigEchoName).string() + "'");
  out << rc.echo();
  for (const auto& [k, v] : extra) out << k << "=" << v << "\n";
}

/// Model keys only, in table order; used for checkpoint manifests.
inline std::vector<std::pair<std::string, std::string>> model_items(const ModelConfig& m) {
  RunConfig rc;
  rc.model = m;
  std::vector<std::pair<std::string, std::string>> out;
  for (auto& [k, field] : rc.fields()) {
    if (k == "steps") break;
    out.emplace_back(k, field.get());
  }
  return out;
}

inline ModelConfig model_from_items(const std::vector<std::pair<std::string, std::string>>& items) {
  RunConfig rc;
  rc.model = ModelConfig{};
  for (const auto& [k, v] : items) rc.set(k, v);
  return rc.model;
}

}  // namespace femae

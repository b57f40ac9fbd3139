#include "inn/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>

#include "inn/checkpoint.hpp"
#include "inn/errors.hpp"

namespace inn {

namespace {

struct Preset {
  const char* name;
  float alpha, beta, gamma;
  int backgrounds;
};

constexpr Preset kPresets[] = {
    {"fig3-blue", 0.5f, 0.4f, 0.4f, 8},
    {"fig3-green", 0.3f, 0.3f, 0.4f, 4},
    {"fig3-red", 0.2f, 0.3f, 0.2f, 4},
    {"fig3-purple", 0.1f, 0.1f, 0.1f, 8},
};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    parts.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::uint64_t to_u64(std::string_view s, const std::string& what) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError(what + ": expected a non-negative integer, got '" + std::string(s) + "'");
  }
  return v;
}

float to_float(std::string_view s, const std::string& what) {
  float v = 0.0f;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v)) {
    throw ConfigError(what + ": expected a number, got '" + std::string(s) + "'");
  }
  return v;
}

bool to_bool(std::string_view s, const std::string& what) {
  if (s == "true") return true;
  if (s == "false") return false;
  throw ConfigError(what + ": expected true or false, got '" + std::string(s) + "'");
}

using Setter = std::function<void(ExperimentConfig&, std::string_view, const std::string&)>;

void add_train_keys(std::map<std::string, Setter>& keys, const std::string& prefix, TrainConfig ExperimentConfig::*member) {
  keys[prefix + ".batch_size"] = [member](ExperimentConfig& c, std::string_view v, const std::string& w) {
    (c.*member).batch_size = to_u64(v, w);
  };
  keys[prefix + ".learning_rate"] = [member](ExperimentConfig& c, std::string_view v, const std::string& w) {
    (c.*member).learning_rate = to_float(v, w);
  };
  keys[prefix + ".momentum"] = [member](ExperimentConfig& c, std::string_view v, const std::string& w) {
    (c.*member).momentum = to_float(v, w);
  };
  keys[prefix + ".weight_decay"] = [member](ExperimentConfig& c, std::string_view v, const std::string& w) {
    (c.*member).weight_decay = to_float(v, w);
  };
  keys[prefix + ".epochs"] = [member](ExperimentConfig& c, std::string_view v, const std::string& w) {
    (c.*member).epochs = to_u64(v, w);
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> keys = [] {
    std::map<std::string, Setter> k;
    k["dataset.format"] = [](ExperimentConfig& c, std::string_view v, const std::string&) { c.dataset.format = v; };
    k["dataset.path"] = [](ExperimentConfig& c, std::string_view v, const std::string&) { c.dataset.path = v; };
    k["dataset.train_count"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.dataset.train_count = to_u64(v, w);
    };
    k["dataset.test_count"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.dataset.test_count = to_u64(v, w);
    };
    k["seed"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) { c.seed = to_u64(v, w); };
    k["pretrain.seed"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.pretrain_seed = to_u64(v, w);
    };
    k["alpha"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.interference.alpha = to_float(v, w);
    };
    k["beta"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.interference.beta = to_float(v, w);
    };
    k["gamma"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.interference.gamma = to_float(v, w);
    };
    k["K"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      const auto n = to_u64(v, w);
      if (n < 1 || n > 4096) throw ConfigError(w + ": K must lie in [1,4096]");
      c.interference.backgrounds = static_cast<int>(n);
    };
    add_train_keys(k, "pretrain", &ExperimentConfig::pretrain);
    add_train_keys(k, "finetune", &ExperimentConfig::finetune);
    k["attack.iterations"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.attack.iterations = to_u64(v, w);
    };
    k["attack.step_size"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      if (v == "auto") {
        c.attack.step_size.reset();
      } else {
        c.attack.step_size = to_float(v, w);
      }
    };
    k["attack.snapshot_index"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.attack.snapshot_index = to_u64(v, w);
    };
    k["attack.eot_resample"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.attack.eot_resample = to_bool(v, w);
    };
    k["attack.random_start"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      c.attack.random_start = to_bool(v, w);
    };
    k["eps"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) {
      try {
        c.epsilons = parse_epsilon_list(v);
      } catch (const ConfigError& e) {
        throw ConfigError(w + ": " + e.what());
      }
    };
    k["modes"] = [](ExperimentConfig& c, std::string_view v, const std::string&) {
      c.modes.clear();
      for (auto part : split(v, ',')) c.modes.push_back(curve_mode_from_string(std::string(part)));
    };
    k["eval_count"] = [](ExperimentConfig& c, std::string_view v, const std::string& w) { c.eval_count = to_u64(v, w); };
    k["out"] = [](ExperimentConfig& c, std::string_view v, const std::string&) { c.out = v; };
    return k;
  }();
  return keys;
}

std::string render_train(const std::string& prefix, const TrainConfig& t) {
  std::string s;
  s += prefix + ".batch_size = " + std::to_string(t.batch_size) + "\n";
  s += prefix + ".learning_rate = " + format_float_exact(t.learning_rate) + "\n";
  s += prefix + ".momentum = " + format_float_exact(t.momentum) + "\n";
  s += prefix + ".weight_decay = " + format_float_exact(t.weight_decay) + "\n";
  s += prefix + ".epochs = " + std::to_string(t.epochs) + "\n";
  return s;
}

}  // namespace

const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& p : kPresets) n.emplace_back(p.name);
    return n;
  }();
  return names;
}

InterferenceConfig preset_interference(const std::string& name) {
  for (const auto& p : kPresets) {
    if (name == p.name) return InterferenceConfig{p.alpha, p.beta, p.gamma, p.backgrounds, 0};
  }
  std::string known;
  for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

void apply_preset(ExperimentConfig& cfg, const std::string& name) {
  const InterferenceConfig p = preset_interference(name);
  cfg.preset = name;
  cfg.interference.alpha = p.alpha;
  cfg.interference.beta = p.beta;
  cfg.interference.gamma = p.gamma;
  cfg.interference.backgrounds = p.backgrounds;
}

void ExperimentConfig::finalize() {
  interference.master_seed = seed;
  pretrain.seed = effective_pretrain_seed();
  finetune.seed = seed;
  attack.seed = seed;
  validate();
}

void ExperimentConfig::validate() const {
  if (dataset.format != "synth-digits" && dataset.format != "idx" && dataset.format != "cifar") {
    throw ConfigError("unknown dataset format '" + dataset.format + "' (expected synth-digits, idx or cifar)");
  }
  if (dataset.format != "synth-digits" && dataset.path.empty()) {
    throw ConfigError("dataset format '" + dataset.format + "' needs a dataset path");
  }
  interference.validate();
  pretrain.validate();
  finetune.validate();
  attack.validate();
  if (attack.snapshot_index >= finetune.epochs) {
    throw ConfigError("attack snapshot index " + std::to_string(attack.snapshot_index) + " needs at least " +
                      std::to_string(attack.snapshot_index + 1) + " fine-tuning epochs");
  }
  if (epsilons.empty()) throw ConfigError("epsilon grid is empty");
  for (float e : epsilons) {
    if (!(e >= 0.0f && e <= 1.0f)) throw ConfigError("epsilon " + format_epsilon(e) + " outside [0,1]");
  }
  if (modes.empty()) throw ConfigError("no curve modes configured");
  if (eval_count < 1) throw ConfigError("eval_count must be >= 1");
  if (out.empty()) throw ConfigError("output directory is empty");
}

ExperimentConfig parse_config(std::string_view text) {
  struct Entry {
    std::size_t line;
    std::string key;
    std::string value;
  };
  std::vector<Entry> entries;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    const auto hash = raw.find('#');
    const auto line = trim(hash == std::string_view::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    }
    entries.push_back({line_no, std::move(key), std::move(value)});
  }

  ExperimentConfig cfg;
  for (const auto& e : entries) {
    if (e.key == "preset") apply_preset(cfg, e.value);
  }
  for (const auto& e : entries) {
    if (e.key == "preset") continue;
    const auto it = setters().find(e.key);
    const std::string where = "config line " + std::to_string(e.line) + " (" + e.key + ")";
    if (it == setters().end()) throw ConfigError(where + ": unknown key");
    it->second(cfg, e.value, where);
  }
  cfg.finalize();
  return cfg;
}

std::string render_config(const ExperimentConfig& cfg) {
  std::string s;
  if (cfg.preset) s += "preset = " + *cfg.preset + "\n";
  s += "dataset.format = " + cfg.dataset.format + "\n";
  if (!cfg.dataset.path.empty()) s += "dataset.path = " + cfg.dataset.path + "\n";
  s += "dataset.train_count = " + std::to_string(cfg.dataset.train_count) + "\n";
  s += "dataset.test_count = " + std::to_string(cfg.dataset.test_count) + "\n";
  s += "seed = " + std::to_string(cfg.seed) + "\n";
  if (cfg.pretrain_seed) s += "pretrain.seed = " + std::to_string(*cfg.pretrain_seed) + "\n";
  s += "alpha = " + format_float_exact(cfg.interference.alpha) + "\n";
  s += "beta = " + format_float_exact(cfg.interference.beta) + "\n";
  s += "gamma = " + format_float_exact(cfg.interference.gamma) + "\n";
  s += "K = " + std::to_string(cfg.interference.backgrounds) + "\n";
  s += render_train("pretrain", cfg.pretrain);
  s += render_train("finetune", cfg.finetune);
  s += "attack.iterations = " + std::to_string(cfg.attack.iterations) + "\n";
  s += "attack.step_size = " + (cfg.attack.step_size ? format_float_exact(*cfg.attack.step_size) : std::string("auto")) +
       "\n";
  s += "attack.snapshot_index = " + std::to_string(cfg.attack.snapshot_index) + "\n";
  s += std::string("attack.eot_resample = ") + (cfg.attack.eot_resample ? "true" : "false") + "\n";
  s += std::string("attack.random_start = ") + (cfg.attack.random_start ? "true" : "false") + "\n";
  std::string eps;
  for (float e : cfg.epsilons) eps += (eps.empty() ? "" : ",") + format_epsilon(e);
  s += "eps = " + eps + "\n";
  std::string modes;
  for (auto m : cfg.modes) modes += (modes.empty() ? "" : ",") + to_string(m);
  s += "modes = " + modes + "\n";
  s += "eval_count = " + std::to_string(cfg.eval_count) + "\n";
  s += "out = " + cfg.out + "\n";
  return s;
}

float parse_epsilon(std::string_view text) {
  const auto t = trim(text);
  if (t.empty()) throw ConfigError("empty epsilon");
  float value = 0.0f;
  const auto slash = t.find('/');
  if (slash != std::string_view::npos) {
    const float num = to_float(trim(t.substr(0, slash)), "epsilon '" + std::string(t) + "'");
    const float den = to_float(trim(t.substr(slash + 1)), "epsilon '" + std::string(t) + "'");
    if (!(den > 0.0f)) throw ConfigError("epsilon '" + std::string(t) + "' has a non-positive denominator");
    value = num / den;
  } else if (t.find_first_of(".eE") != std::string_view::npos) {
    value = to_float(t, "epsilon '" + std::string(t) + "'");
  } else {
    value = static_cast<float>(to_u64(t, "epsilon '" + std::string(t) + "'")) / 255.0f;
  }
  if (!(value >= 0.0f && value <= 1.0f)) {
    throw ConfigError("epsilon '" + std::string(t) + "' is outside [0,1]");
  }
  return value;
}

std::vector<float> parse_epsilon_list(std::string_view text) {
  std::vector<float> out;
  for (auto part : split(text, ',')) out.push_back(parse_epsilon(part));
  return out;
}

std::string format_epsilon(float epsilon) {
  std::string s = format_float_exact(epsilon);
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("INN_SEED");
  if (!v) return std::nullopt;
  return to_u64(trim(v), "INN_SEED");
}

}  // namespace inn

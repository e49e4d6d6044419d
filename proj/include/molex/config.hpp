// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: INI sections of `key = value` lines validated against a
// schema table. The same table drives defaults, `--help` text and
// serialization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "molex/backbone.hpp"
#include "molex/ensemble.hpp"
#include "molex/probe.hpp"
#include "molex/routing.hpp"
#include "molex/tasks.hpp"
#include "molex/training.hpp"

namespace molex {

enum class ValueType { kInt, kUint, kReal, kBool, kString, kEnum, kIntList, kRealList, kUintList };

struct KeySpec {
  const char* section;
  const char* key;
  ValueType type;
  const char* def;  // nullptr: required
  const char* doc;
  const char* choices = "";  // '|'-separated for kEnum
};

inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      {"backbone", "num_layers", ValueType::kInt, "4", "number of residual layers T"},
      {"backbone", "model_dim", ValueType::kInt, "16", "model width D"},
      {"backbone", "block", ValueType::kEnum, "mlp", "residual block kind", "linear|mlp"},
      {"backbone", "hidden_dim", ValueType::kInt, "32", "MLP hidden width H"},
      {"backbone", "activation", ValueType::kEnum, "gelu", "MLP activation", "relu|gelu|sigmoid|identity"},
      {"backbone", "num_classes", ValueType::kInt, "4", "base-task classes (group count)"},
      {"backbone", "seq_len", ValueType::kInt, "16", "tokens per sequence N"},
      {"backbone", "vocab_size", ValueType::kInt, "33", "vocabulary size V (token 0 is padding)"},
      {"backbone", "checkpoint", ValueType::kString, "", "pretrained checkpoint directory; empty: pretrain in-process"},
      {"backbone", "pretrain_steps", ValueType::kInt, "2000", "pretraining steps"},
      {"backbone", "pretrain_batch", ValueType::kInt, "16", "pretraining batch size"},
      {"backbone", "pretrain_lr", ValueType::kReal, "0.003", "pretraining peak learning rate"},
      {"backbone", "pretrain_seed", ValueType::kUint, "0", "pretraining seed"},
      {"lora", "rank", ValueType::kInt, "8", "adapter rank r"},
      {"lora", "alpha", ValueType::kReal, "8", "adapter scale numerator (scale = alpha / r)"},
      {"lora", "target_w1", ValueType::kBool, "true", "adapt the first block weight"},
      {"lora", "target_w2", ValueType::kBool, "true", "adapt the second block weight"},
      {"lora", "init_std", ValueType::kReal, "0.02", "standard deviation of A at init"},
      {"molex", "enabled", ValueType::kBool, "true", "mix layer experts; false: LoRA baseline"},
      {"molex", "gate", ValueType::kEnum, "linear", "router kind", "linear|cosine"},
      {"molex", "proj_dim", ValueType::kInt, "8", "cosine gate projection dim"},
      {"molex", "temperature", ValueType::kReal, "0.5", "cosine gate temperature"},
      {"molex", "sigmoid_scores", ValueType::kBool, "false", "apply sigmoid to scores before TopK"},
      {"molex", "shared", ValueType::kBool, "true", "one gate for all layers; false: per-layer gates"},
      {"molex", "batch_agg", ValueType::kEnum, "mode", "routing aggregation", "mode|mean|per_token"},
      {"molex", "whole_batch", ValueType::kBool, "false", "aggregate mode/mean over the minibatch, not per sequence"},
      {"molex", "top_k", ValueType::kInt, "1", "experts per decision K"},
      {"molex", "alpha_mode", ValueType::kEnum, "fixed", "mixing weight", "fixed|learned"},
      {"molex", "alpha", ValueType::kReal, "0.95", "mixing weight (initial value when learned)"},
      {"molex", "load_balance", ValueType::kReal, "0", "load-balancing loss coefficient"},
      {"molex", "grad_mode", ValueType::kEnum, "prob_weighted", "router gradient path", "onehot|prob_weighted"},
      {"molex", "init_std", ValueType::kReal, "0.02", "router weight init standard deviation"},
      {"train", "epochs", ValueType::kInt, "4", "fine-tuning epochs"},
      {"train", "batch_size", ValueType::kInt, "16", "fine-tuning batch size"},
      {"train", "lr", ValueType::kReal, "0.005", "LoRA and head peak learning rate"},
      {"train", "weight_decay", ValueType::kReal, "0", "LoRA and head decoupled weight decay"},
      {"train", "gate_lr", ValueType::kReal, "0.1", "router and alpha peak learning rate"},
      {"train", "gate_weight_decay", ValueType::kReal, "0.01", "router and alpha weight decay"},
      {"train", "warmup_ratio", ValueType::kReal, "0.06", "linear warmup fraction"},
      {"train", "noise_sigma", ValueType::kReal, "1", "embedding noise standard deviation for noisy evaluation"},
      {"train", "eval_seed", ValueType::kUint, "1234", "noise seed for noisy evaluation"},
      {"train", "eval_batch", ValueType::kInt, "64", "evaluation batch size"},
      {"train", "seeds", ValueType::kUintList, "0,1,2,3,4", "fine-tuning seeds"},
      {"task", "name", ValueType::kEnum, nullptr, "fine-tuning task",
       "group_majority|majority_token|pattern_pair|pattern_pair_shifted|random_labels"},
      {"task", "seed", ValueType::kUint, "0", "data generator seed"},
      {"task", "train_size", ValueType::kInt, "1000", "training examples"},
      {"task", "val_size", ValueType::kInt, "500", "validation examples"},
      {"task", "test_size", ValueType::kInt, "1000", "test examples"},
      {"task", "paraphrase_rate", ValueType::kReal, "0.2", "pair tasks: synonym substitution probability"},
      {"task", "corruption_rate", ValueType::kReal, "0.1", "pair tasks: random-token substitution probability"},
      {"task", "patterns_per_family", ValueType::kInt, "4", "pair tasks: templates per family"},
      {"task", "pattern_seed", ValueType::kUint, "7", "pair tasks: template seed"},
      {"task", "transfer", ValueType::kString, "", "zero-shot target task; empty: none"},
      {"task", "transfer_seed", ValueType::kUint, "99", "zero-shot target data seed"},
      {"probe", "hidden", ValueType::kIntList, "50,100,200", "probe hidden sizes"},
      {"probe", "dropout", ValueType::kRealList, "0,0.1,0.2", "probe dropout rates"},
      {"probe", "train_size", ValueType::kInt, "1000", "probe training examples"},
      {"probe", "val_size", ValueType::kInt, "500", "probe validation examples"},
      {"probe", "test_size", ValueType::kInt, "500", "probe test examples"},
      {"probe", "epochs", ValueType::kInt, "10", "probe training epochs"},
      {"probe", "batch_size", ValueType::kInt, "32", "probe batch size"},
      {"probe", "lr", ValueType::kReal, "0.01", "probe learning rate"},
      {"probe", "seed", ValueType::kUint, "0", "probe seed"},
      {"probe", "token", ValueType::kInt, "1", "token_presence target token"},
  };
  return schema;
}

inline const std::vector<std::string>& config_sections() {
  static const std::vector<std::string> s = {"backbone", "lora", "molex", "train", "task", "probe"};
  return s;
}

inline const KeySpec* find_key(const std::string& section, const std::string& key) {
  for (const auto& k : config_schema()) {
    if (section == k.section && key == k.key) return &k;
  }
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

namespace detail {

inline bool parse_int(const std::string& s, long long& v) {
  try {
    std::size_t pos = 0;
    v = std::stoll(s, &pos);
    return pos == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

inline bool parse_uint(const std::string& s, unsigned long long& v) {
  if (s.empty() || s[0] == '-') return false;
  try {
    std::size_t pos = 0;
    v = std::stoull(s, &pos);
    return pos == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

inline bool parse_real(const std::string& s, double& v) {
  try {
    std::size_t pos = 0;
    v = std::stod(s, &pos);
    return pos == s.size() && std::isfinite(v);
  } catch (const std::exception&) {
    return false;
  }
}

inline bool valid_value(const KeySpec& spec, const std::string& v) {
  long long i = 0;
  unsigned long long u = 0;
  double r = 0;
  switch (spec.type) {
    case ValueType::kInt: return parse_int(v, i);
    case ValueType::kUint: return parse_uint(v, u);
    case ValueType::kReal: return parse_real(v, r);
    case ValueType::kBool: return v == "true" || v == "false";
    case ValueType::kString: return true;
    case ValueType::kEnum: {
      std::string choices = spec.choices;
      std::replace(choices.begin(), choices.end(), '|', ',');
      const auto opts = split_list(choices);
      return std::find(opts.begin(), opts.end(), v) != opts.end();
    }
    case ValueType::kIntList:
      for (const auto& e : split_list(v)) {
        if (!parse_int(e, i)) return false;
      }
      return !v.empty();
    case ValueType::kUintList:
      for (const auto& e : split_list(v)) {
        if (!parse_uint(e, u)) return false;
      }
      return !v.empty();
    case ValueType::kRealList:
      for (const auto& e : split_list(v)) {
        if (!parse_real(e, r)) return false;
      }
      return !v.empty();
  }
  return false;
}

inline const char* type_name(ValueType t) {
  switch (t) {
    case ValueType::kInt: return "integer";
    case ValueType::kUint: return "unsigned integer";
    case ValueType::kReal: return "real";
    case ValueType::kBool: return "true|false";
    case ValueType::kString: return "string";
    case ValueType::kEnum: return "choice";
    case ValueType::kIntList: return "integer list";
    case ValueType::kUintList: return "unsigned list";
    case ValueType::kRealList: return "real list";
  }
  return "?";
}

}  // namespace detail

// Explicitly set values; defaults are resolved on access.
class RunConfig {
 public:
  // `where` prefixes diagnostics (e.g. "base.ini:12").
  void set(const std::string& section, const std::string& key, const std::string& value,
           const std::string& where = "") {
    const std::string pre = where.empty() ? "" : where + ": ";
    const KeySpec* spec = find_key(section, key);
    if (spec == nullptr) throw ConfigError(pre + "unknown key '" + section + "." + key + "'");
    if (!detail::valid_value(*spec, value)) {
      std::string msg = pre + "invalid value '" + value + "' for " + section + "." + key + " (expected " +
                        detail::type_name(spec->type);
      if (spec->type == ValueType::kEnum) msg += std::string(": ") + spec->choices;
      throw ConfigError(msg + ")");
    }
    values_[section + "." + key] = value;
  }

  // `section.key=value`
  void set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override '" + assignment + "' must look like section.key=value");
    }
    set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
        trim(assignment.substr(eq + 1)), "--set");
  }

  bool has(const std::string& dotted) const { return values_.count(dotted) > 0; }

  std::string get(const std::string& dotted) const {
    const auto it = values_.find(dotted);
    if (it != values_.end()) return it->second;
    const auto dot = dotted.find('.');
    const KeySpec* spec = find_key(dotted.substr(0, dot), dotted.substr(dot + 1));
    if (spec == nullptr) throw ConfigError("unknown key '" + dotted + "'");
    if (spec->def == nullptr) throw ConfigError("missing required key " + dotted);
    return spec->def;
  }

  long long get_int(const std::string& k) const { return std::stoll(get(k)); }
  std::uint64_t get_uint(const std::string& k) const { return std::stoull(get(k)); }
  double get_real(const std::string& k) const { return std::stod(get(k)); }
  bool get_bool(const std::string& k) const { return get(k) == "true"; }

  template <typename T>
  std::vector<T> get_list(const std::string& k) const {
    std::vector<T> out;
    for (const auto& e : split_list(get(k))) {
      if constexpr (std::is_same_v<T, double>) {
        out.push_back(std::stod(e));
      } else if constexpr (std::is_same_v<T, std::uint64_t>) {
        out.push_back(std::stoull(e));
      } else {
        out.push_back(static_cast<T>(std::stoll(e)));
      }
    }
    return out;
  }

  void require_all() const {
    for (const auto& k : config_schema()) {
      const std::string dotted = std::string(k.section) + "." + k.key;
      if (k.def == nullptr && !has(dotted)) throw ConfigError("missing required key " + dotted);
    }
  }

  const std::map<std::string, std::string>& values() const { return values_; }
  bool operator==(const RunConfig& o) const { return values_ == o.values_; }

  // Explicit values grouped by section in schema order, keys sorted.
  std::string serialize() const {
    std::ostringstream os;
    bool first = true;
    for (const auto& sec : config_sections()) {
      std::vector<std::pair<std::string, std::string>> rows;
      for (const auto& [k, v] : values_) {
        if (k.compare(0, sec.size() + 1, sec + ".") == 0) rows.emplace_back(k.substr(sec.size() + 1), v);
      }
      if (rows.empty()) continue;
      if (!first) os << "\n";
      first = false;
      os << "[" << sec << "]\n";
      for (const auto& [k, v] : rows) os << k << " = " << v << "\n";
    }
    return os.str();
  }

 private:
  std::map<std::string, std::string> values_;
};

inline RunConfig parse_ini(const std::string& text, const std::string& origin = "config") {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (std::find(config_sections().begin(), config_sections().end(), section) == config_sections().end()) {
        throw ConfigError(where + ": unknown section [" + section + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of a section");
    cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
  }
  return cfg;
}

inline RunConfig parse_json_config(const std::string& text, const std::string& origin = "config") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(origin + ": top level must be an object of sections");
  RunConfig cfg;
  for (const auto& [sec, body] : j.items()) {
    if (!body.is_object()) throw ConfigError(origin + ": section '" + sec + "' must be an object");
    for (const auto& [key, v] : body.items()) {
      std::string s;
      if (v.is_string()) {
        s = v.get<std::string>();
      } else if (v.is_boolean()) {
        s = v.get<bool>() ? "true" : "false";
      } else if (v.is_array()) {
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + (v[i].is_string() ? v[i].get<std::string>() : v[i].dump());
      } else {
        s = v.dump();
      }
      cfg.set(sec, key, s, origin);
    }
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path, bool json = false) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  const bool as_json = json || (path.size() > 5 && path.substr(path.size() - 5) == ".json");
  return as_json ? parse_json_config(ss.str(), path) : parse_ini(ss.str(), path);
}

// `--help` text: every key with its default.
inline std::string config_help() {
  std::ostringstream os;
  os << "Configuration keys (section.key: type, default):\n";
  for (const auto& k : config_schema()) {
    os << "  " << k.section << "." << k.key << " (" << detail::type_name(k.type);
    if (k.type == ValueType::kEnum) os << ": " << k.choices;
    os << ") default=" << (k.def == nullptr ? "<required>" : (std::string(k.def).empty() ? "\"\"" : k.def))
       << "  " << k.doc << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Typed views

inline BackboneConfig backbone_config(const RunConfig& c) {
  BackboneConfig b;
  b.num_layers = static_cast<int>(c.get_int("backbone.num_layers"));
  b.model_dim = static_cast<int>(c.get_int("backbone.model_dim"));
  b.block = parse_block(c.get("backbone.block"));
  b.hidden_dim = static_cast<int>(c.get_int("backbone.hidden_dim"));
  b.activation = parse_activation(c.get("backbone.activation"));
  b.num_classes = static_cast<int>(c.get_int("backbone.num_classes"));
  b.seq_len = static_cast<int>(c.get_int("backbone.seq_len"));
  b.vocab_size = static_cast<int>(c.get_int("backbone.vocab_size"));
  b.validate();
  return b;
}

inline PretrainConfig pretrain_config(const RunConfig& c) {
  PretrainConfig p;
  p.steps = static_cast<int>(c.get_int("backbone.pretrain_steps"));
  p.batch_size = static_cast<int>(c.get_int("backbone.pretrain_batch"));
  p.lr = c.get_real("backbone.pretrain_lr");
  return p;
}

inline LoraConfig lora_config(const RunConfig& c) {
  LoraConfig l;
  l.rank = static_cast<int>(c.get_int("lora.rank"));
  l.alpha = c.get_real("lora.alpha");
  l.target_w1 = c.get_bool("lora.target_w1");
  l.target_w2 = c.get_bool("lora.target_w2");
  l.init_std = c.get_real("lora.init_std");
  if (l.rank < 1) throw ConfigError("lora.rank must be >= 1");
  return l;
}

inline Variant variant_config(const RunConfig& c, int num_layers) {
  Variant v;
  v.molex = c.get_bool("molex.enabled");
  v.name = v.molex ? "molex" : "lora";
  GateConfig& g = v.gate;
  g.kind = c.get("molex.gate") == "cosine" ? GateKind::kCosine : GateKind::kLinear;
  g.proj_dim = static_cast<int>(c.get_int("molex.proj_dim"));
  g.temperature = c.get_real("molex.temperature");
  g.sigmoid_scores = c.get_bool("molex.sigmoid_scores");
  g.shared = c.get_bool("molex.shared");
  const std::string agg = c.get("molex.batch_agg");
  g.batch_agg = agg == "mean" ? BatchAgg::kMean : (agg == "per_token" ? BatchAgg::kPerToken : BatchAgg::kMode);
  g.whole_batch = c.get_bool("molex.whole_batch");
  g.top_k = static_cast<int>(c.get_int("molex.top_k"));
  g.alpha_mode = c.get("molex.alpha_mode") == "learned" ? AlphaMode::kLearned : AlphaMode::kFixed;
  g.alpha = c.get_real("molex.alpha");
  g.load_balance = c.get_real("molex.load_balance");
  g.grad_mode = c.get("molex.grad_mode") == "onehot" ? GradMode::kOneHot : GradMode::kProbWeighted;
  g.init_std = c.get_real("molex.init_std");
  if (v.molex) g.validate(num_layers);
  return v;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.epochs = static_cast<int>(c.get_int("train.epochs"));
  t.batch_size = static_cast<int>(c.get_int("train.batch_size"));
  t.lr = c.get_real("train.lr");
  t.weight_decay = c.get_real("train.weight_decay");
  t.gate_lr = c.get_real("train.gate_lr");
  t.gate_weight_decay = c.get_real("train.gate_weight_decay");
  t.warmup_ratio = c.get_real("train.warmup_ratio");
  t.noise_sigma = c.get_real("train.noise_sigma");
  t.eval_seed = c.get_uint("train.eval_seed");
  t.eval_batch = static_cast<int>(c.get_int("train.eval_batch"));
  if (t.noise_sigma < 0.0) throw ConfigError("train.noise_sigma must be >= 0");
  return t;
}

inline std::vector<std::uint64_t> train_seeds(const RunConfig& c) { return c.get_list<std::uint64_t>("train.seeds"); }

// Fine-tuning task; sequence shape comes from the backbone and the class
// count from the task kind.
inline TaskSpec task_config(const RunConfig& c, const BackboneConfig& b, const std::string& name_key = "task.name") {
  TaskSpec t;
  t.name = c.get(name_key);
  t.seed = c.get_uint("task.seed");
  t.seq_len = b.seq_len;
  t.vocab_size = b.vocab_size;
  t.num_classes = t.name == "group_majority" ? b.num_classes : 2;
  t.train_size = static_cast<int>(c.get_int("task.train_size"));
  t.val_size = static_cast<int>(c.get_int("task.val_size"));
  t.test_size = static_cast<int>(c.get_int("task.test_size"));
  t.paraphrase_rate = c.get_real("task.paraphrase_rate");
  t.corruption_rate = c.get_real("task.corruption_rate");
  t.patterns_per_family = static_cast<int>(c.get_int("task.patterns_per_family"));
  t.pattern_seed = c.get_uint("task.pattern_seed");
  t.validate();
  return t;
}

inline std::optional<TaskSpec> transfer_task(const RunConfig& c, const BackboneConfig& b) {
  if (c.get("task.transfer").empty()) return std::nullopt;
  TaskSpec t = task_config(c, b);
  t.name = c.get("task.transfer");
  t.seed = c.get_uint("task.transfer_seed");
  t.num_classes = t.name == "group_majority" ? b.num_classes : 2;
  t.validate();
  return t;
}

inline ProbeConfig probe_config(const RunConfig& c) {
  ProbeConfig p;
  p.hidden = c.get_list<int>("probe.hidden");
  p.dropout = c.get_list<double>("probe.dropout");
  p.train_size = static_cast<int>(c.get_int("probe.train_size"));
  p.val_size = static_cast<int>(c.get_int("probe.val_size"));
  p.test_size = static_cast<int>(c.get_int("probe.test_size"));
  p.epochs = static_cast<int>(c.get_int("probe.epochs"));
  p.batch_size = static_cast<int>(c.get_int("probe.batch_size"));
  p.lr = c.get_real("probe.lr");
  p.seed = c.get_uint("probe.seed");
  p.probe_token = static_cast<int>(c.get_int("probe.token"));
  for (double d : p.dropout) {
    if (d < 0.0 || d >= 1.0) throw ConfigError("probe.dropout entries must lie in [0, 1)");
  }
  return p;
}

}  // namespace molex

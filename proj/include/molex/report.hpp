// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// JSON reports and fine-tuned model directories. Report objects hold no
// wall-clock fields; timing is always emitted as its own object.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "molex/config.hpp"
#include "molex/ensemble.hpp"
#include "molex/matrix_io.hpp"
#include "molex/probe.hpp"
#include "molex/training.hpp"

namespace molex {

using Json = nlohmann::ordered_json;

// Infinite radii are written as null.
inline Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline Json certificate_json(const Certificate& c) {
  Json j;
  j["y"] = c.y;
  j["correct"] = c.correct;
  Json rivals = Json::array();
  for (const auto& r : c.per_rival) {
    rivals.push_back({{"rival", r.rival}, {"margin", r.margin}, {"sensitivity", r.sensitivity},
                      {"radius", finite_or_null(r.radius)}});
  }
  j["per_rival"] = rivals;
  j["eps_star"] = finite_or_null(c.eps_star);
  j["binding_rival"] = c.binding_rival;
  Json cond1 = Json::array();
  for (bool b : c.cond1) cond1.push_back(b);
  j["assumptions"] = {{"epsilon", c.epsilon},
                      {"cond1", cond1},
                      {"noncolinear", c.noncolinear()},
                      {"colinearity", colinearity_name(c.colinearity)},
                      {"min_sine", c.min_sine}};
  j["strict_gap"] = finite_or_null(c.strict_gap);
  return j;
}

inline const char* kVerdictNotApplicable = "theorem not applicable";

inline Json stack_certificate_json(const MolexVsSequential& r) {
  Json j;
  j["eps_molex"] = finite_or_null(r.eps_molex);
  j["eps_sequential"] = finite_or_null(r.eps_sequential);
  j["eps_baseline"] = finite_or_null(r.eps_baseline);
  j["strict_gap"] = finite_or_null(r.strict_gap);
  j["verdict"] = !r.applicable ? kVerdictNotApplicable : (r.strict ? "strict" : "violation");
  j["molex"] = certificate_json(r.molex);
  j["sequential"] = certificate_json(r.sequential);
  j["baseline"] = certificate_json(r.baseline);
  return j;
}

inline Json ensemble_certificate_json(const Certificate& c) {
  Json j = certificate_json(c);
  j["verdict"] = !c.theorem_applicable ? kVerdictNotApplicable : (c.strict ? "strict" : "violation");
  return j;
}

inline Json summary_json(const SummaryStat& s) { return {{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; }

inline Json run_json(const RunResult& r, const std::string& selection_csv_path) {
  Json j;
  j["seed"] = r.seed;
  j["task"] = r.task;
  j["variant"] = r.variant;
  j["ok"] = r.ok;
  if (!r.ok) j["error"] = r.error;
  j["epoch_metrics"] = r.epoch_metrics;
  j["best_epoch"] = r.best_epoch;
  j["best_metric"] = r.best_metric;
  j["clean_acc"] = r.clean_acc;
  j["noisy_acc"] = r.noisy_acc;
  j["selection_csv_path"] = selection_csv_path;
  j["frozen_hash_before"] = r.frozen_hash_before;
  j["frozen_hash_after"] = r.frozen_hash_after;
  return j;
}

inline Json timing_json(const TimingReport& t) {
  return {{"samples", t.samples},         {"baseline_s", t.baseline_s},
          {"molex_seq_s", t.molex_seq_s}, {"molex_par_s", t.molex_par_s},
          {"ratio_seq", t.ratio_seq},     {"ratio_par", t.ratio_par}};
}

inline Json probe_json(const ProbeReport& rep) {
  Json cells = Json::array();
  for (const auto& c : rep.cells) {
    cells.push_back({{"layer", c.layer},
                     {"property", c.property},
                     {"grid_val_acc", c.grid_val_acc},
                     {"best_val_acc", c.best_val_acc},
                     {"test_acc", c.test_acc},
                     {"best_hidden", c.best_hidden},
                     {"best_dropout", c.best_dropout}});
  }
  return {{"cells", cells}, {"skipped", rep.skipped}};
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Fine-tuned model directory: a backbone checkpoint with adapters, the task
// head, router matrices, router.txt (one α logit per router) and config.ini.

inline void save_finetuned(const std::filesystem::path& dir, const Backbone& bb, const FinetuneState& st,
                           const RunConfig& cfg) {
  save_checkpoint(dir, bb, &st.adapters);
  save_matrix(dir / "task_head.W.mat", st.head.weight);
  save_matrix(dir / "task_head.b.mat", st.head.bias);
  std::string logits;
  for (std::size_t i = 0; i < st.routers.size(); ++i) {
    const Router& r = st.routers[i];
    const std::string p = "router." + std::to_string(i);
    if (r.kind == GateKind::kLinear) {
      save_matrix(dir / (p + ".weight.mat"), r.weight);
      save_matrix(dir / (p + ".bias.mat"), r.bias);
    } else {
      save_matrix(dir / (p + ".proj.mat"), r.proj);
      save_matrix(dir / (p + ".experts.mat"), r.experts);
    }
    logits += format_double(r.alpha_logit) + "\n";
  }
  write_text(dir / "router.txt", logits);
  write_text(dir / "config.ini", cfg.serialize());
}

struct LoadedModel {
  Backbone backbone;
  FinetuneState state;
  RunConfig config;
};

inline LoadedModel load_finetuned(const std::filesystem::path& dir) {
  LoadedModel m;
  m.backbone = load_checkpoint(dir);
  m.config = parse_ini(read_text(dir / "config.ini"), (dir / "config.ini").string());
  const LoraConfig lora = lora_config(m.config);
  const Variant v = variant_config(m.config, m.backbone.num_layers());
  for (int t = 0; t < m.backbone.num_layers(); ++t) {
    const std::string p = "layer." + std::to_string(t) + ".lora.";
    LayerAdapters la;
    for (auto [name, slot] : {std::pair{"W1", &la.w1}, std::pair{"W2", &la.w2}}) {
      const auto a_path = dir / (p + name + ".A.mat");
      if (!std::filesystem::exists(a_path)) continue;
      LoraAdapter ad;
      ad.a = load_matrix(a_path);
      ad.b = load_matrix(dir / (p + name + ".B.mat"));
      ad.rank = static_cast<int>(ad.a.rows());
      ad.scale = lora.alpha / static_cast<double>(ad.rank);
      *slot = std::move(ad);
    }
    m.state.adapters.push_back(std::move(la));
  }
  m.state.head.weight = load_matrix(dir / "task_head.W.mat");
  m.state.head.bias = load_matrix(dir / "task_head.b.mat");
  if (v.molex) {
    std::istringstream logits(read_text(dir / "router.txt"));
    std::string line;
    for (int i = 0; std::getline(logits, line); ++i) {
      if (line.empty()) continue;
      Router r;
      r.kind = v.gate.kind;
      r.temperature = v.gate.temperature;
      const std::string p = "router." + std::to_string(i);
      if (r.kind == GateKind::kLinear) {
        r.weight = load_matrix(dir / (p + ".weight.mat"));
        r.bias = load_matrix(dir / (p + ".bias.mat"));
      } else {
        r.proj = load_matrix(dir / (p + ".proj.mat"));
        r.experts = load_matrix(dir / (p + ".experts.mat"));
      }
      r.alpha_logit = std::stod(line);
      m.state.routers.push_back(std::move(r));
    }
    const std::size_t expected = v.gate.shared ? 1 : static_cast<std::size_t>(m.backbone.num_layers());
    if (m.state.routers.size() != expected) throw FormatError("router.txt: wrong number of routers");
  }
  return m;
}

// ---------------------------------------------------------------------------
// Text heat map: one character per cell, 10 shading levels from ' ' to '@'.

inline constexpr const char* kShades = " .:-=+*#%@";

inline std::string render_heatmap(const std::vector<std::vector<double>>& fractions) {
  std::string out;
  for (std::size_t t = 0; t < fractions.size(); ++t) {
    char label[16];
    std::snprintf(label, sizeof(label), "%3zu |", t);
    out += label;
    for (double f : fractions[t]) {
      const int level = std::clamp(static_cast<int>(std::floor(f * 10.0)), 0, 9);
      out += kShades[level];
    }
    out += "|\n";
  }
  return out;
}

}  // namespace molex

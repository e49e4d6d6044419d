// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// molex <pretrain|finetune|eval|certify|probe|heatmap|timing>
//       [--config PATH] [--set section.key=value ...] [--seed N] [--out DIR]
//
// Exit codes: 0 success (including "theorem not applicable"), 2 bad config or
// malformed input file, 3 numeric or training failure, 4 certification of a
// model with nonlinear blocks.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "molex/config.hpp"
#include "molex/ensemble.hpp"
#include "molex/probe.hpp"
#include "molex/report.hpp"
#include "molex/training.hpp"

namespace fs = std::filesystem;
using namespace molex;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitNonlinear = 4;

struct Common {
  std::string config_path;
  bool json_config = false;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "INI config file (or JSON with --json-config / .json suffix)");
  sub->add_flag("--json-config", c.json_config, "parse --config as JSON");
  sub->add_option("--set", c.overrides, "override, section.key=value (repeatable)");
  sub->add_option("--seed", c.seed, "seed for the command (see --help footer)");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
}

// Layers: `base` (if any), then --config, then --set.
RunConfig resolve_config(const Common& c, RunConfig base = {}) {
  if (!c.config_path.empty()) {
    const RunConfig file = load_config(c.config_path, c.json_config);
    for (const auto& [k, v] : file.values()) {
      const auto dot = k.find('.');
      base.set(k.substr(0, dot), k.substr(dot + 1), v);
    }
  }
  for (const auto& o : c.overrides) base.set_override(o);
  return base;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Pretrained backbone from backbone.checkpoint, or pretrained in-process.
Backbone obtain_backbone(const RunConfig& cfg) {
  const std::string ckpt = cfg.get("backbone.checkpoint");
  if (!ckpt.empty()) return load_checkpoint(ckpt);
  return pretrain(backbone_config(cfg), cfg.get_uint("backbone.pretrain_seed"), pretrain_config(cfg)).backbone;
}

std::unique_ptr<PairExecutor> executor_from_env() {
  return threads_from_env() > 0 ? std::make_unique<PairExecutor>() : nullptr;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const Common& c) {
  RunConfig cfg = resolve_config(c);
  if (c.seed) cfg.set("backbone", "pretrain_seed", std::to_string(*c.seed));
  const auto t0 = std::chrono::steady_clock::now();
  const auto bc = backbone_config(cfg);
  const auto res = pretrain(bc, cfg.get_uint("backbone.pretrain_seed"), pretrain_config(cfg));
  const fs::path out(c.out);
  save_checkpoint(out / "checkpoint", res.backbone);
  Json j;
  j["seed"] = cfg.get_uint("backbone.pretrain_seed");
  j["base_accuracy"] = res.accuracy;
  j["final_loss"] = res.final_loss;
  j["frozen_hash"] = hex64(frozen_hash(res.backbone));
  j["frozen_params"] = frozen_param_count(res.backbone);
  j["checkpoint"] = "checkpoint";
  j["timing"] = {{"seconds", seconds_since(t0)}};
  write_json(out / "pretrain.json", j);
  write_text(out / "config.ini", cfg.serialize());
  std::printf("pretrain: base-task accuracy %.4f, checkpoint %s\n", res.accuracy, (out / "checkpoint").c_str());
  return kExitOk;
}

int cmd_finetune(const Common& c) {
  RunConfig cfg = resolve_config(c);
  cfg.require_all();
  if (c.seed) cfg.set("train", "seeds", std::to_string(*c.seed));
  const auto t0 = std::chrono::steady_clock::now();
  const Backbone bb = obtain_backbone(cfg);
  const auto lora = lora_config(cfg);
  const auto variant = variant_config(cfg, bb.num_layers());
  const auto tc = train_config(cfg);
  const auto task = task_config(cfg, bb.config);
  const auto transfer = transfer_task(cfg, bb.config);
  const Dataset data = make_dataset(task);
  std::vector<Example> transfer_test;
  if (transfer) transfer_test = make_split(*transfer, Split::kTest, static_cast<std::size_t>(transfer->test_size));

  const fs::path out(c.out);
  fs::create_directories(out);
  Json runs = Json::array();
  std::vector<double> best, clean, noisy, zs;
  bool any_failed = false;
  std::size_t trainable = 0;
  for (auto seed : train_seeds(cfg)) {
    const RunResult r = finetune_run(bb, variant, lora, tc, task, data, seed);
    std::string csv_name;
    Json rj;
    if (r.ok) {
      save_finetuned(out / ("seed_" + std::to_string(seed)), bb, r.best_state, cfg);
      trainable = param_count(bb, r.best_state, true);
      if (variant.molex) {
        csv_name = "selection_seed" + std::to_string(seed) + ".csv";
        write_text(out / csv_name, selection_counts_csv(r.stats));
      }
      rj = run_json(r, csv_name);
      best.push_back(r.best_metric);
      clean.push_back(r.clean_acc);
      noisy.push_back(r.noisy_acc);
      if (transfer) {
        const FinetuneModel fm{&bb, &r.best_state, &variant};
        const double acc = zero_shot_transfer(fm, transfer_test);
        rj["transfer_acc"] = acc;
        zs.push_back(acc);
      }
    } else {
      any_failed = true;
      rj = run_json(r, csv_name);
      std::fprintf(stderr, "seed %llu failed: %s\n", static_cast<unsigned long long>(seed), r.error.c_str());
    }
    runs.push_back(rj);
  }
  Json j;
  j["task"] = task.name;
  j["variant"] = variant.name;
  j["frozen_hash"] = hex64(frozen_hash(bb));
  j["trainable_params"] = trainable;
  j["runs"] = runs;
  j["summary"] = {{"best_metric", summary_json(summarize(best))},
                  {"clean_acc", summary_json(summarize(clean))},
                  {"noisy_acc", summary_json(summarize(noisy))}};
  if (transfer) {
    j["summary"]["transfer_acc"] = summary_json(summarize(zs));
    j["transfer_task"] = transfer->name;
  }
  j["timing"] = {{"seconds", seconds_since(t0)}};
  write_json(out / "metrics.json", j);
  write_text(out / "config.ini", cfg.serialize());
  std::printf("finetune %s on %s: best_metric %.4f ± %.4f over %zu seeds\n", variant.name.c_str(), task.name.c_str(),
              summarize(best).mean, summarize(best).std, best.size());
  return any_failed ? kExitNumeric : kExitOk;
}

int cmd_eval(const Common& c, const std::string& model_dir) {
  LoadedModel m = load_finetuned(model_dir);
  const RunConfig cfg = resolve_config(c, m.config);
  const auto t0 = std::chrono::steady_clock::now();
  const auto variant = variant_config(cfg, m.backbone.num_layers());
  const auto tc = train_config(cfg);
  const auto task = task_config(cfg, m.backbone.config);
  const auto transfer = transfer_task(cfg, m.backbone.config);
  const auto test = make_split(task, Split::kTest, static_cast<std::size_t>(task.test_size));
  if (static_cast<int>(m.state.head.weight.rows()) != task.num_classes) {
    throw ConfigError("task.name: model head has " + std::to_string(m.state.head.weight.rows()) +
                      " classes but the task has " + std::to_string(task.num_classes));
  }
  const FinetuneModel fm{&m.backbone, &m.state, &variant};
  SelectionStats stats(m.backbone.num_layers());
  EvalOptions eo;
  eo.stats = &stats;
  eo.batch = tc.eval_batch;
  auto exec = executor_from_env();
  eo.executor = exec.get();
  const double clean = evaluate(fm, test, eo);
  const double noisy = evaluate_noisy(fm, test, tc.noise_sigma, tc.eval_seed);
  const fs::path out(c.out);
  Json j;
  j["task"] = task.name;
  j["variant"] = variant.name;
  j["clean_acc"] = clean;
  j["noisy_acc"] = noisy;
  j["noise_sigma"] = tc.noise_sigma;
  if (transfer) {
    j["transfer_task"] = transfer->name;
    j["transfer_acc"] =
        zero_shot_transfer(fm, make_split(*transfer, Split::kTest, static_cast<std::size_t>(transfer->test_size)));
  }
  if (variant.molex) {
    write_text(out / "selection_eval.csv", selection_counts_csv(stats));
    j["selection_csv_path"] = "selection_eval.csv";
  }
  j["timing"] = {{"seconds", seconds_since(t0)}};
  write_json(out / "eval.json", j);
  std::printf("eval %s: clean %.4f noisy %.4f\n", task.name.c_str(), clean, noisy);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// certify

Matrix json_matrix(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.empty() || !j[0].is_array()) throw InputError(what + ": expected a non-empty 2-D array");
  Matrix m(j.size(), j[0].size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (j[i].size() != m.cols()) throw InputError(what + ": ragged rows");
    for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = j[i][k].get<double>();
  }
  return m;
}

std::vector<double> parse_reals(const std::string& s, const std::string& what) {
  std::vector<double> v;
  for (const auto& e : split_list(s)) {
    double d = 0.0;
    if (!detail::parse_real(e, d)) throw InputError(what + ": bad number '" + e + "'");
    v.push_back(d);
  }
  return v;
}

struct CertifyArgs {
  std::string input;
  std::string model;
  bool generate = false;
  std::string x;
  int y = 0;
  std::string route;
  double alpha = 0.95;
};

Json certify_input(const nlohmann::json& in, bool& not_applicable) {
  const auto x = in.at("x").get<std::vector<double>>();
  const int y = in.at("y").get<int>();
  const double eps = in.value("epsilon", 0.0);
  Json report;
  if (in.contains("classifier")) {
    const Certificate cert = certify_single(json_matrix(in["classifier"], "classifier"), x, y, eps);
    report = certificate_json(cert);
    report["kind"] = "single";
  } else if (in.contains("bases")) {
    std::vector<Matrix> bases;
    for (const auto& b : in["bases"]) bases.push_back(json_matrix(b, "bases"));
    const auto coeffs = in.at("coeffs").get<std::vector<double>>();
    const Certificate cert = certify_ensemble(bases, coeffs, x, y, eps);
    report = ensemble_certificate_json(cert);
    report["kind"] = "ensemble";
    not_applicable = !cert.theorem_applicable;
  } else if (in.contains("stack")) {
    const auto& s = in["stack"];
    if (s.value("block", std::string("linear")) != "linear") {
      throw UnsupportedModelError("certification requires linear blocks");
    }
    LinearStack stack;
    for (const auto& w : s.at("w")) stack.w.push_back(json_matrix(w, "stack.w"));
    stack.route = s.at("route").get<std::vector<int>>();
    stack.alpha = s.value("alpha", 0.95);
    const Matrix head = in.contains("head") ? json_matrix(in["head"], "head") : Matrix::identity(stack.dim());
    const auto r = molex_vs_sequential(stack, head, x, y);
    report = stack_certificate_json(r);
    report["kind"] = "stack";
    report["num_terms"] = unroll(stack).size();
    not_applicable = !r.applicable;
  } else {
    throw InputError("certify input needs one of: classifier, bases, stack");
  }
  return report;
}

int cmd_certify(const Common& c, const CertifyArgs& a) {
  const int sources = !a.input.empty() + !a.model.empty() + a.generate;
  if (sources != 1) throw ConfigError("certify: give exactly one of --input, --model, --generate");
  nlohmann::json in;
  if (!a.input.empty()) {
    try {
      in = nlohmann::json::parse(read_text(a.input));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(a.input + ": " + e.what());
    }
  } else if (!a.model.empty()) {
    const Backbone bb = load_checkpoint(a.model);
    if (bb.config.block != BlockKind::kLinear) throw UnsupportedModelError("certification requires linear blocks");
    std::vector<int> route;
    for (double r : parse_reals(a.route.empty() ? "" : a.route, "--route")) route.push_back(static_cast<int>(r));
    if (route.empty()) {
      for (int t = 0; t < bb.num_layers(); ++t) route.push_back(t);
    }
    in["stack"]["w"] = nlohmann::json::array();
    for (const auto& l : bb.layers) {
      nlohmann::json w = nlohmann::json::array();
      for (std::size_t i = 0; i < l.w1.rows(); ++i) w.push_back(std::vector<double>(l.w1.row(i).begin(), l.w1.row(i).end()));
      in["stack"]["w"].push_back(w);
    }
    in["stack"]["route"] = route;
    in["stack"]["alpha"] = a.alpha;
    nlohmann::json head = nlohmann::json::array();
    for (std::size_t i = 0; i < bb.head.weight.rows(); ++i) {
      head.push_back(std::vector<double>(bb.head.weight.row(i).begin(), bb.head.weight.row(i).end()));
    }
    in["head"] = head;
    in["x"] = parse_reals(a.x, "--x");
    in["y"] = a.y;
  } else {
    Rng rng(c.seed.value_or(0));
    StackInstance inst;
    while (!sample_stack_instance(rng, inst)) {
    }
    in["stack"]["w"] = nlohmann::json::array();
    for (const auto& w : inst.stack.w) {
      nlohmann::json m = nlohmann::json::array();
      for (std::size_t i = 0; i < w.rows(); ++i) m.push_back(std::vector<double>(w.row(i).begin(), w.row(i).end()));
      in["stack"]["w"].push_back(m);
    }
    in["stack"]["route"] = inst.stack.route;
    in["stack"]["alpha"] = inst.stack.alpha;
    in["x"] = inst.x;
    in["y"] = inst.y;
  }
  bool not_applicable = false;
  Json report;
  try {
    report = certify_input(in, not_applicable);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("certify input: ") + e.what());
  }
  write_json(fs::path(c.out) / "certificate.json", report);
  std::cout << report.dump(2) << "\n";
  if (not_applicable) std::fprintf(stderr, "verdict: %s\n", kVerdictNotApplicable);
  return kExitOk;
}

// ---------------------------------------------------------------------------

int cmd_probe(const Common& c, const std::string& model_dir) {
  RunConfig cfg = resolve_config(c);
  cfg.require_all();
  if (c.seed) cfg.set("probe", "seed", std::to_string(*c.seed));
  const auto t0 = std::chrono::steady_clock::now();
  const Backbone bb = model_dir.empty() ? obtain_backbone(cfg) : load_checkpoint(model_dir);
  const auto task = task_config(cfg, bb.config);
  const ProbeReport rep = run_probe(bb, task, probe_config(cfg));
  for (const auto& s : rep.skipped) std::fprintf(stderr, "warning: probe property %s undefined for task %s, skipped\n", s.c_str(), task.name.c_str());
  Json j = probe_json(rep);
  j["task"] = task.name;
  j["timing"] = {{"seconds", seconds_since(t0)}};
  write_json(fs::path(c.out) / "probe.json", j);
  std::printf("%-6s %-16s %8s %8s %6s %7s\n", "layer", "property", "val", "test", "hidden", "dropout");
  for (const auto& cell : rep.cells) {
    std::printf("%-6d %-16s %8.4f %8.4f %6d %7.2f\n", cell.layer, cell.property.c_str(), cell.best_val_acc,
                cell.test_acc, cell.best_hidden, cell.best_dropout);
  }
  return kExitOk;
}

int cmd_heatmap(const Common& c, const std::string& input, bool render) {
  const auto rows = parse_selection_csv(read_text(input));
  // Integer counts reproduce the exporter exactly; fractional input is
  // scaled to integers first.
  bool integral = true;
  for (const auto& r : rows) {
    for (double v : r) integral = integral && v == std::floor(v) && v < 9.0e15;
  }
  std::vector<std::vector<std::uint64_t>> counts;
  for (const auto& r : rows) {
    double sum = 0.0;
    for (double v : r) sum += v;
    std::vector<std::uint64_t> row;
    for (double v : r) {
      row.push_back(integral ? static_cast<std::uint64_t>(v)
                             : static_cast<std::uint64_t>(std::llround(sum > 0.0 ? v / sum * 1e12 : 0.0)));
    }
    counts.push_back(std::move(row));
  }
  const std::string csv = heatmap_csv(counts);
  const fs::path out(c.out);
  write_text(out / "heatmap.csv", csv);
  std::cout << csv;
  if (render) {
    std::vector<std::vector<double>> frac;
    for (const auto& row : counts) {
      std::vector<double> f;
      for (auto u : apportion_millionths(row)) f.push_back(static_cast<double>(u) / 1e6);
      frac.push_back(std::move(f));
    }
    const std::string text = render_heatmap(frac);
    write_text(out / "heatmap.txt", text);
    std::cout << text;
  }
  return kExitOk;
}

int cmd_timing(const Common& c) {
  RunConfig cfg = resolve_config(c);
  cfg.require_all();
  const std::uint64_t seed = c.seed.value_or(0);
  const Backbone bb = obtain_backbone(cfg);
  Variant base_variant;
  const Variant mv = [&] {
    RunConfig m = cfg;
    m.set("molex", "enabled", "true");
    return variant_config(m, bb.num_layers());
  }();
  const auto lora = lora_config(cfg);
  const auto task = task_config(cfg, bb.config);
  const auto st_base = init_finetune_state(bb, base_variant, lora, task.num_classes, seed);
  const auto st_molex = init_finetune_state(bb, mv, lora, task.num_classes, seed);
  const auto test = make_split(task, Split::kTest, static_cast<std::size_t>(task.test_size));
  const TimingReport rep = timing_report(bb, st_base, st_molex, mv, test);
  Json j;
  j["baseline_params"] = rep.baseline_params;
  j["molex_params"] = rep.molex_params;
  j["overhead"] = rep.overhead;
  j["timing"] = timing_json(rep);
  write_json(fs::path(c.out) / "timing.json", j);
  std::printf("per-sample: baseline %.3e s, molex %.3e s (x%.2f), paired %.3e s (x%.2f); overhead %zu params\n",
              rep.baseline_s, rep.molex_seq_s, rep.ratio_seq, rep.molex_par_s, rep.ratio_par, rep.overhead);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture of layer experts: pretraining, fine-tuning, certification and probing"};
  app.require_subcommand(1);
  app.footer(config_help() +
             "\n--seed sets backbone.pretrain_seed (pretrain), train.seeds (finetune), probe.seed (probe),\n"
             "the instance generator (certify --generate) and the init seed (timing).\n"
             "MOLEX_THREADS > 0 enables paired-expert evaluation; 0 is sequential.\n");

  Common common;
  std::string model_dir;
  CertifyArgs cert;
  std::string heat_input;
  bool render = false;

  auto* pre = app.add_subcommand("pretrain", "pretrain the backbone on the base task");
  auto* fin = app.add_subcommand("finetune", "fine-tune LoRA or MoLEx over the configured seeds");
  auto* ev = app.add_subcommand("eval", "evaluate a fine-tuned model directory");
  auto* cer = app.add_subcommand("certify", "certified radii for linear models and stacks");
  auto* pro = app.add_subcommand("probe", "layer-wise probing classifiers");
  auto* hm = app.add_subcommand("heatmap", "normalize a selection-count CSV");
  auto* tim = app.add_subcommand("timing", "inference timing and parameter overhead");
  for (auto* s : {pre, fin, ev, cer, pro, hm, tim}) add_common(s, common);
  ev->add_option("--model", model_dir, "fine-tuned model directory")->required();
  pro->add_option("--model", model_dir, "checkpoint directory (default: backbone.checkpoint or pretrain)");
  cer->add_option("--input", cert.input, "JSON with x, y and one of classifier, bases, stack");
  cer->add_option("--model", cert.model, "checkpoint directory of a linear backbone");
  cer->add_flag("--generate", cert.generate, "random stack passing the assumption checks");
  cer->add_option("--x", cert.x, "input vector for --model, comma separated");
  cer->add_option("--y", cert.y, "label for --model");
  cer->add_option("--route", cert.route, "route per layer for --model (default identity)");
  cer->add_option("--alpha", cert.alpha, "mixing weight for --model")->capture_default_str();
  hm->add_option("--input", heat_input, "selection counts CSV")->required();
  hm->add_flag("--render", render, "also print a 10-level text rendering");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(common);
    if (fin->parsed()) return cmd_finetune(common);
    if (ev->parsed()) return cmd_eval(common, model_dir);
    if (cer->parsed()) return cmd_certify(common, cert);
    if (pro->parsed()) return cmd_probe(common, model_dir);
    if (hm->parsed()) return cmd_heatmap(common, heat_input, render);
    if (tim->parsed()) return cmd_timing(common);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const CsvError& e) {
    std::fprintf(stderr, "csv error: %s\n", e.what());
    return kExitConfig;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kExitConfig;
  } catch (const InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return kExitConfig;
  } catch (const UnsupportedModelError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNonlinear;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const TrainingError& e) {
    std::fprintf(stderr, "training failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const ProtocolError& e) {
    std::fprintf(stderr, "protocol error: %s\n", e.what());
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kExitOk;
}

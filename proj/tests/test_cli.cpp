// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Drives the built `molex` binary end to end.

#include <catch_amalgamated.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <string>

#include "molex/config.hpp"
#include "molex/report.hpp"
#include "molex/routing.hpp"

#ifndef MOLEX_CLI_PATH
#error "MOLEX_CLI_PATH must name the molex binary"
#endif
#ifndef MOLEX_SOURCE_DIR
#error "MOLEX_SOURCE_DIR must name the source tree"
#endif

using namespace molex;
namespace fs = std::filesystem;
using Catch::Matchers::WithinAbs;

namespace {

struct ScratchDir {
  fs::path dir;
  ScratchDir() : dir(fs::temp_directory_path() / ("molex_cli_test_" + std::to_string(::getpid()))) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }
};

const fs::path& work_dir() {
  static const ScratchDir scratch;
  return scratch.dir;
}

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result run(const std::string& args) {
  static int counter = 0;
  const fs::path out = work_dir() / ("stdout_" + std::to_string(counter));
  const fs::path err = work_dir() / ("stderr_" + std::to_string(counter++));
  const std::string cmd = "MOLEX_THREADS=0 " + std::string(MOLEX_CLI_PATH) + " " + args + " >" + out.string() +
                          " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(out);
  r.err = read_text(err);
  return r;
}

std::string path(const std::string& rel) { return (work_dir() / rel).string(); }

// Small pretrained backbone shared by the fine-tuning tests.
const std::string& checkpoint() {
  static const std::string ckpt = [] {
    const Result r = run("pretrain --set backbone.pretrain_steps=300 --out " + path("pre"));
    REQUIRE(r.code == 0);
    return path("pre/checkpoint");
  }();
  return ckpt;
}

std::string small_finetune_args(const std::string& task) {
  return "--set backbone.checkpoint=" + checkpoint() + " --set task.name=" + task +
         " --set task.train_size=200 --set task.val_size=100 --set task.test_size=200"
         " --set train.epochs=2 --set train.seeds=0,1";
}

Json without_timing(Json j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [k, v] : j.items()) v = without_timing(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = without_timing(v);
  }
  return j;
}

Json load_json(const std::string& p) { return Json::parse(read_text(p)); }

}  // namespace

TEST_CASE("help lists every key with its default", "[cli]") {
  const Result r = run("--help");
  CHECK(r.code == 0);
  for (const auto& k : config_schema()) {
    const std::string full = std::string(k.section) + "." + k.key;
    INFO(full);
    CHECK(r.out.find(full) != std::string::npos);
    if (k.def != nullptr) CHECK(r.out.find(full + " (") != std::string::npos);
  }
  CHECK(r.out.find("default=0.95") != std::string::npos);
  CHECK(r.out.find("MOLEX_THREADS") != std::string::npos);
}

TEST_CASE("configuration errors exit 2 with diagnostics", "[cli][config]") {
  SECTION("missing required key") {
    const Result r = run("finetune --set backbone.checkpoint=x --out " + path("e1"));
    CHECK(r.code == 2);
    CHECK(r.err.find("task.name") != std::string::npos);
  }
  SECTION("unknown key reports file and line") {
    write_text(path("bad.ini"), "[task]\nname = majority_token\n\n[molex]\ntopk = 2\n");
    const Result r = run("finetune --config " + path("bad.ini") + " --out " + path("e2"));
    CHECK(r.code == 2);
    CHECK(r.err.find("bad.ini:5") != std::string::npos);
    CHECK(r.err.find("molex.topk") != std::string::npos);
  }
  SECTION("bad override value") {
    const Result r = run("finetune --set task.name=majority_token --set molex.top_k=two --out " + path("e3"));
    CHECK(r.code == 2);
    CHECK(r.err.find("molex.top_k") != std::string::npos);
  }
  SECTION("unknown subcommand option") {
    CHECK(run("finetune --bogus").code == 2);
    CHECK(run("").code == 2);
  }
}

TEST_CASE("shipped configs are round-trip fixed points", "[cli][config]") {
  int seen = 0;
  for (const auto& e : fs::directory_iterator(fs::path(MOLEX_SOURCE_DIR) / "configs")) {
    const bool json = e.path().extension() == ".json";
    if (e.path().extension() != ".ini" && !json) continue;
    ++seen;
    INFO(e.path().string());
    const RunConfig a = load_config(e.path(), json);
    const std::string text = a.serialize();
    const RunConfig b = parse_ini(text, "roundtrip");
    CHECK(a == b);
    CHECK(b.serialize() == text);
  }
  CHECK(seen >= 5);
}

TEST_CASE("finetune is deterministic and leaves the backbone frozen", "[cli][determinism]") {
  const std::string args = small_finetune_args("majority_token");
  const Result m1 = run("finetune " + args + " --set molex.enabled=true --out " + path("ft_m1"));
  const Result m2 = run("finetune " + args + " --set molex.enabled=true --out " + path("ft_m2"));
  const Result l1 = run("finetune " + args + " --set molex.enabled=false --out " + path("ft_l1"));
  REQUIRE(m1.code == 0);
  REQUIRE(m2.code == 0);
  REQUIRE(l1.code == 0);
  const Json a = load_json(path("ft_m1/metrics.json"));
  const Json b = load_json(path("ft_m2/metrics.json"));
  const Json l = load_json(path("ft_l1/metrics.json"));
  CHECK(without_timing(a) == without_timing(b));
  CHECK(a.contains("timing"));
  CHECK(a["frozen_hash"] == l["frozen_hash"]);
  CHECK(a["variant"] == "molex");
  CHECK(l["variant"] == "lora");
  CHECK(a["trainable_params"].get<std::size_t>() - l["trainable_params"].get<std::size_t>() == 4 * 16 + 4 + 1);
  for (const char* f : {"selection_seed0.csv", "selection_seed1.csv", "seed_0/config.ini", "seed_1/router.txt"}) {
    CHECK(read_text(path("ft_m1/") + f) == read_text(path("ft_m2/") + f));
  }
  for (const auto& r : a["runs"]) {
    CHECK(r.contains("epoch_metrics"));
    CHECK(r["selection_csv_path"].get<std::string>().rfind("selection_seed", 0) == 0);
    double best = 0.0;
    for (double v : r["epoch_metrics"]) best = std::max(best, v);
    CHECK(r["best_metric"].get<double>() == best);
  }

  {
    // eval reproduces the run's test metrics
    const Result e = run("eval --model " + path("ft_m1/seed_1") + " --out " + path("ev"));
    REQUIRE(e.code == 0);
    const Json j = load_json(path("ev/eval.json"));
    CHECK(j["clean_acc"] == a["runs"][1]["clean_acc"]);
    CHECK(j["noisy_acc"] == a["runs"][1]["noisy_acc"]);
    CHECK(read_text(path("ev/selection_eval.csv")) == read_text(path("ft_m1/selection_seed1.csv")));
  }
  {
    // heatmap of a selection log matches the exporter byte for byte
    const std::string log = read_text(path("ft_m1/selection_seed0.csv"));
    const auto rows = parse_selection_csv(log);
    SelectionStats stats(static_cast<int>(rows.size()));
    for (std::size_t t = 0; t < rows.size(); ++t)
      for (std::size_t j = 0; j < rows[t].size(); ++j) stats.record(static_cast<int>(t), static_cast<int>(j),
                                                                    static_cast<std::uint64_t>(rows[t][j]));
    const Result h = run("heatmap --input " + path("ft_m1/selection_seed0.csv") + " --render --out " + path("hm"));
    REQUIRE(h.code == 0);
    CHECK(read_text(path("hm/heatmap.csv")) == export_selection_stats(stats));
    for (const auto& row : parse_selection_csv(read_text(path("hm/heatmap.csv")))) {
      double s = 0.0;
      for (double v : row) s += v;
      CHECK_THAT(s, WithinAbs(1.0, 1e-6));
    }
    CHECK(fs::exists(path("hm/heatmap.txt")));
  }
}

TEST_CASE("pair-task transfer is reported", "[cli]") {
  const Result r = run("finetune " + small_finetune_args("pattern_pair") +
                       " --set task.transfer=pattern_pair_shifted --out " + path("ft_pp"));
  REQUIRE(r.code == 0);
  const Json j = load_json(path("ft_pp/metrics.json"));
  CHECK(j["transfer_task"] == "pattern_pair_shifted");
  for (const auto& rj : j["runs"]) {
    const double t = rj["transfer_acc"];
    CHECK(t >= 0.5);
    CHECK(t <= 1.0);
  }
}

TEST_CASE("numeric failure exits 3", "[cli]") {
  const Result r = run("finetune " + small_finetune_args("majority_token") + " --set train.lr=1e300 --out " +
                       path("ft_bad"));
  CHECK(r.code == 3);
  const Json j = load_json(path("ft_bad/metrics.json"));
  for (const auto& rj : j["runs"]) CHECK(rj["ok"] == false);
}

TEST_CASE("heatmap inputs", "[cli][heatmap]") {
  write_text(path("one.csv"), "layer,expert_0,expert_1,expert_2\n0,0,7,0\n1,3,0,0\n2,0,0,1\n");
  const Result r = run("heatmap --input " + path("one.csv") + " --out " + path("hm1"));
  REQUIRE(r.code == 0);
  CHECK(read_text(path("hm1/heatmap.csv")) ==
        "layer,expert_0,expert_1,expert_2\n0,0.000000,1.000000,0.000000\n1,1.000000,0.000000,0.000000\n"
        "2,0.000000,0.000000,1.000000\n");

  write_text(path("thirds.csv"), "layer,expert_0,expert_1,expert_2\n0,1,1,1\n1,2,0,1\n2,0,5,0\n");
  REQUIRE(run("heatmap --input " + path("thirds.csv") + " --out " + path("hm2")).code == 0);
  for (const auto& row : parse_selection_csv(read_text(path("hm2/heatmap.csv")))) {
    double s = 0.0;
    for (double v : row) s += v;
    CHECK_THAT(s, WithinAbs(1.0, 1e-6));
  }

  write_text(path("bad.csv"), "layer,expert_0\n0,abc\n");
  CHECK(run("heatmap --input " + path("bad.csv") + " --out " + path("hm3")).code == 2);
  CHECK(run("heatmap --input " + path("missing.csv") + " --out " + path("hm4")).code != 0);
}

TEST_CASE("certify examples", "[cli][certify]") {
  SECTION("identity classifier gives sqrt 2") {
    write_text(path("c1.json"), R"({"classifier": [[1, 0], [0, 1]], "x": [3, 1], "y": 0})");
    const Result r = run("certify --input " + path("c1.json") + " --out " + path("ce1"));
    REQUIRE(r.code == 0);
    const Json j = load_json(path("ce1/certificate.json"));
    CHECK_THAT(j["eps_star"].get<double>(), WithinAbs(std::numbers::sqrt2, 1e-9));
    CHECK(r.out.find("1.41421") != std::string::npos);
  }
  SECTION("alpha = 1 stack has equal MoLEx and residual radii") {
    write_text(path("c2.json"),
               R"({"stack": {"w": [[[0.2, 0.1], [0.0, 0.3]], [[0.1, -0.2], [0.3, 0.1]]], "route": [1, 0],
                  "alpha": 1.0}, "x": [2.0, 0.5], "y": 0})");
    const Result r = run("certify --input " + path("c2.json") + " --out " + path("ce2"));
    REQUIRE(r.code == 0);
    const Json j = load_json(path("ce2/certificate.json"));
    CHECK_THAT(j["eps_molex"].get<double>(), WithinAbs(j["eps_baseline"].get<double>(), 1e-12));
  }
  SECTION("colinear bases are not applicable and still exit 0") {
    write_text(path("c3.json"),
               R"({"bases": [[[1, 0], [0, 1]], [[2, 0], [0, 2]]], "coeffs": [0.5, 0.5], "x": [3, 1], "y": 0,
                  "epsilon": 0.5})");
    const Result r = run("certify --input " + path("c3.json") + " --out " + path("ce3"));
    CHECK(r.code == 0);
    CHECK(r.err.find("theorem not applicable") != std::string::npos);
  }
  SECTION("generated instances are strict and reproducible") {
    const Result a = run("certify --generate --seed 4 --out " + path("ce4"));
    const Result b = run("certify --generate --seed 4 --out " + path("ce5"));
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    const Json j = load_json(path("ce4/certificate.json"));
    CHECK(j["verdict"] == "strict");
    CHECK(j["strict_gap"].get<double>() > 1e-9);
  }
  SECTION("nonlinear checkpoints exit 4") {
    const Result r = run("certify --model " + checkpoint() + " --x 1,0 --out " + path("ce6"));
    CHECK(r.code == 4);
    CHECK(r.err.find("certification requires linear blocks") != std::string::npos);
  }
  SECTION("malformed input exits 2") {
    write_text(path("c7.json"), R"({"x": [1, 2]})");
    CHECK(run("certify --input " + path("c7.json") + " --out " + path("ce7")).code == 2);
    CHECK(run("certify --generate --input " + path("c7.json") + " --out " + path("ce8")).code == 2);
  }
}

TEST_CASE("probe report", "[cli][probe]") {
  const std::string args = "probe --model " + checkpoint() +
                           " --set task.name=majority_token --set probe.hidden=50 --set probe.dropout=0"
                           " --set probe.epochs=5 --set probe.test_size=1000";
  const Result r = run(args + " --out " + path("pr1"));
  REQUIRE(r.code == 0);
  CHECK(r.err.find("pair_order") != std::string::npos);
  const Json j = load_json(path("pr1/probe.json"));
  CHECK(j["skipped"] == Json::array({"pair_order"}));
  const auto& cells = j["cells"];
  CHECK(cells.size() == 5u * 3u);
  for (const auto& c : cells) {
    const double acc = c["test_acc"];
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    if (c["property"] == "length_bin" && c["layer"] == 0) CHECK(acc > 0.9);
    if (c["property"] == "random_control") CHECK_THAT(acc, WithinAbs(0.5, 0.05));
  }
  const Result again = run(args + " --out " + path("pr2"));
  CHECK(without_timing(j) == without_timing(load_json(path("pr2/probe.json"))));
}

TEST_CASE("timing reports the parameter overhead", "[cli][timing]") {
  const Result r = run("timing --set backbone.checkpoint=" + checkpoint() +
                       " --set task.name=majority_token --out " + path("tm"));
  REQUIRE(r.code == 0);
  const Json j = load_json(path("tm/timing.json"));
  CHECK(j["overhead"] == 4 * 16 + 4 + 1);
  CHECK(j["molex_params"].get<std::size_t>() - j["baseline_params"].get<std::size_t>() == 69u);
  CHECK(j["timing"]["ratio_seq"].get<double>() > 0.0);
}

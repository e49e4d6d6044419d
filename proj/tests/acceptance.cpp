// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if
// any criterion fails. Tolerances and budgets are fixed; nothing here is
// tuned to the outcome.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <thread>
#include <vector>

#include "molex/ensemble.hpp"
#include "molex/gradcheck.hpp"
#include "molex/molex.hpp"
#include "molex/probe.hpp"
#include "molex/training.hpp"
#include "test_support.hpp"

using namespace molex;
using namespace molex::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (budget_s > 0.0 && s >= budget_s) {
    o.pass = false;
    o.detail += "; over the " + std::to_string(static_cast<int>(budget_s)) + " s budget";
  }
  failures += !o.pass;
  std::printf("criterion %2d %s  %s (%.2f s): %s\n", id, o.pass ? "PASS" : "FAIL", name, s, o.detail.c_str());
  std::fflush(stdout);
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  }
  return true;
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

// Random small configuration for the property criteria.
struct RandomSetup {
  BackboneConfig cfg;
  GateConfig gate;
};

RandomSetup random_setup(Rng& rng) {
  RandomSetup r;
  const BlockKind block = rng.uniform() < 0.5 ? BlockKind::kLinear : BlockKind::kMlp;
  r.cfg = small_config(block, 1 + static_cast<int>(rng.uniform_int(4)), 2 + static_cast<int>(rng.uniform_int(4)),
                       2 + static_cast<int>(rng.uniform_int(5)));
  r.gate.kind = rng.uniform() < 0.5 ? GateKind::kLinear : GateKind::kCosine;
  r.gate.proj_dim = 2;
  const BatchAgg aggs[] = {BatchAgg::kMode, BatchAgg::kMean, BatchAgg::kPerToken};
  r.gate.batch_agg = aggs[rng.uniform_int(3)];
  r.gate.top_k = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(r.cfg.num_layers)));
  r.gate.grad_mode = GradMode::kProbWeighted;
  r.gate.shared = rng.uniform() < 0.5;
  r.gate.whole_batch = r.gate.batch_agg != BatchAgg::kPerToken && rng.uniform() < 0.5;
  return r;
}

// Plan forcing expert t at layer t, laid out like the gate's own decisions.
RoutingPlan self_route_plan(const GateConfig& gate, int layers, int seqs, std::size_t rows) {
  std::vector<int> route(layers);
  for (int t = 0; t < layers; ++t) route[t] = t;
  if (gate.batch_agg != BatchAgg::kPerToken && !gate.whole_batch) return fixed_route_plan(route, seqs, rows);
  RoutingPlan plan;
  for (int t = 0; t < layers; ++t) {
    LayerRouting lr;
    lr.decision_of.assign(seqs, std::vector<int>(rows, 0));
    auto push = [&](int sb, int se, int row, std::size_t members) {
      Decision d;
      d.experts = {t};
      d.seq_begin = sb;
      d.seq_end = se;
      d.row = row;
      d.member_tokens = members;
      for (int s = sb; s < se; ++s) {
        for (std::size_t n = 0; n < rows; ++n) {
          if (row < 0 || static_cast<int>(n) == row) lr.decision_of[s][n] = static_cast<int>(lr.decisions.size());
        }
      }
      lr.decisions.push_back(d);
    };
    if (gate.whole_batch) {
      push(0, seqs, -1, rows * static_cast<std::size_t>(seqs));
    } else {
      for (int s = 0; s < seqs; ++s) {
        for (std::size_t n = 0; n < rows; ++n) push(s, s + 1, static_cast<int>(n), 1);
      }
    }
    plan.layers.push_back(std::move(lr));
  }
  return plan;
}

// ---------------------------------------------------------------------------

Outcome gating_exactness() {
  Rng rng(1);
  std::size_t weight_checks = 0, rows = 0, mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(1 + rng.uniform_int(12));
    for (double& v : s) v = rng.gaussian(0.0, 3.0);
    const auto w = gate_weights(topk(s, 1));
    int ones = 0, zeros = 0;
    for (double v : w) {
      ones += v == 1.0;
      zeros += v == 0.0;
    }
    mismatches += !(ones == 1 && zeros == static_cast<int>(s.size()) - 1);
    ++weight_checks;
  }
  for (int trial = 0; trial < 100; ++trial) {
    GateConfig gate;
    gate.batch_agg = BatchAgg::kPerToken;
    gate.alpha = rng.uniform();
    const BlockKind block = trial % 2 == 0 ? BlockKind::kMlp : BlockKind::kLinear;
    SmallModel m = small_model(1000 + trial, small_config(block, 4, 5, 6), true, gate);
    const Matrix z = random_inputs(2000 + trial, 1, 6, 5)[0];
    const int t = static_cast<int>(rng.uniform_int(4));
    const Matrix got = molex_forward(z, t, m.ref());
    const Matrix scores = gate_scores(z, m.st.routers[0]);
    const auto& cfg = m.bb.config;
    auto u = [&](int j) { return layer_forward(z, m.bb.layers[j], cfg.block, cfg.activation, &m.st.adapters[j]); };
    const Matrix ut = u(t);
    for (std::size_t n = 0; n < z.rows(); ++n) {
      const int i = argmax_lowest(scores.row(n));
      const Matrix ui = u(i);
      for (std::size_t c = 0; c < z.cols(); ++c) {
        // i_t = t is the self-routing collapse z + u_t
        const double want = i == t ? z(n, c) + ut(n, c) : z(n, c) + gate.alpha * ut(n, c) + (1.0 - gate.alpha) * ui(n, c);
        mismatches += std::bit_cast<std::uint64_t>(want) != std::bit_cast<std::uint64_t>(got(n, c));
      }
      ++rows;
    }
  }
  return {mismatches == 0, std::to_string(weight_checks) + " Top-1 weight vectors one-hot, " + std::to_string(rows) +
                               " routed rows bitwise, " + std::to_string(mismatches) + " mismatches"};
}

Outcome degenerate_collapses() {
  Rng rng(2);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    RandomSetup rs = random_setup(rng);
    const int seqs = 3;
    const int len = 2 + static_cast<int>(rng.uniform_int(4));
    const auto z0 = random_inputs(3000 + trial, seqs, len, rs.cfg.model_dim);

    rs.gate.alpha = 1.0;
    SmallModel a1 = small_model(4000 + trial, rs.cfg, true, rs.gate);
    const BatchTrace ta = forward_batch(a1.ref(), z0);

    rs.gate.alpha = rng.uniform();
    SmallModel self = small_model(4000 + trial, rs.cfg, true, rs.gate);
    const RoutingPlan plan = self_route_plan(rs.gate, rs.cfg.num_layers, seqs, static_cast<std::size_t>(len));
    ForwardOptions fo;
    fo.replay = &plan;
    const BatchTrace ts = forward_batch(self.ref(), z0, fo);

    for (int s = 0; s < seqs; ++s) {
      bad += !bitwise_equal(ta.features[s], forward_residual_from(z0[s], a1.bb, &a1.st.adapters).features);
      bad += !bitwise_equal(ts.features[s], forward_residual_from(z0[s], self.bb, &self.st.adapters).features);
    }
  }
  return {bad == 0, "100 random configs x {alpha = 1, self routing}, " + std::to_string(bad) + " non-bitwise outputs"};
}

// Max relative error over every slot of one model, routing replayed.
double max_gradient_error(SmallModel& m, const std::vector<Matrix>& z0, const std::vector<int>& labels) {
  const BatchTrace tr = forward_batch(m.ref(), z0);
  const RoutingPlan plan = tr.plan();
  BatchGrads g;
  backward_batch(m.ref(), tr, labels, g);
  double worst = 0.0;
  auto check = [&](Matrix& slot, const Matrix& analytic) {
    const Matrix orig = slot;
    worst = std::max(worst, finite_diff_check(
                                [&](const Matrix& p) {
                                  slot = p;
                                  const double l = replay_loss(m.ref(), z0, labels, &plan);
                                  slot = orig;
                                  return l;
                                },
                                orig, analytic, 1e-5));
  };
  for (int t = 0; t < m.bb.num_layers(); ++t) {
    auto& la = m.st.adapters[t];
    for (auto [ad, dw] : {std::pair{&la.w1, &g.layers[t].w1}, std::pair{&la.w2, &g.layers[t].w2}}) {
      if (!*ad) continue;
      Matrix da, db;
      adapter_grads(**ad, *dw, da, db);
      check((*ad)->a, da);
      check((*ad)->b, db);
    }
  }
  check(m.st.head.weight, g.head.weight);
  for (std::size_t i = 0; i < m.st.routers.size(); ++i) {
    auto& r = m.st.routers[i];
    if (r.kind == GateKind::kLinear) {
      check(r.weight, g.routers[i].weight);
      check(r.bias, g.routers[i].bias);
    } else {
      check(r.proj, g.routers[i].proj);
      check(r.experts, g.routers[i].experts);
    }
    if (m.variant.gate.alpha_mode == AlphaMode::kLearned) {
      const double orig = r.alpha_logit;
      worst = std::max(worst, finite_diff_check(
                                  [&](const Matrix& p) {
                                    r.alpha_logit = p(0, 0);
                                    const double l = replay_loss(m.ref(), z0, labels, &plan);
                                    r.alpha_logit = orig;
                                    return l;
                                  },
                                  Matrix{{orig}}, Matrix{{g.routers[i].alpha_logit}}, 1e-5));
    }
  }
  return worst;
}

Outcome gradient_suite() {
  struct Family {
    const char* name;
    bool molex;
    BlockKind block;
    AlphaMode alpha;
  };
  const Family families[] = {{"lora", false, BlockKind::kLinear, AlphaMode::kFixed},
                             {"router", true, BlockKind::kLinear, AlphaMode::kFixed},
                             {"alpha", true, BlockKind::kMlp, AlphaMode::kLearned},
                             {"mlp", true, BlockKind::kMlp, AlphaMode::kFixed}};
  std::string detail;
  double overall = 0.0;
  int configs = 0;
  for (const auto& f : families) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(500 + seed);
      GateConfig gate;
      gate.grad_mode = GradMode::kProbWeighted;
      gate.alpha_mode = f.alpha;
      gate.alpha = 0.7;
      gate.top_k = 1 + static_cast<int>(seed % 2);
      gate.batch_agg = seed % 3 == 0 ? BatchAgg::kPerToken : BatchAgg::kMode;
      gate.kind = seed == 4 ? GateKind::kCosine : GateKind::kLinear;
      gate.proj_dim = 3;
      SmallModel m = small_model(600 + seed, small_config(f.block, 3, 4, 5), f.molex, gate);
      const auto z0 = random_inputs(700 + seed, 3, 4, 4);
      worst = std::max(worst, max_gradient_error(m, z0, {0, 1, 2}));
      ++configs;
    }
    overall = std::max(overall, worst);
    detail += std::string(detail.empty() ? "" : ", ") + f.name + fmt(" %.2e", worst);
  }
  return {overall < 1e-4, std::to_string(configs) + " configs, max rel err " + detail + " (bound 1e-4, h = 1e-5)"};
}

std::vector<double> molex_stack_forward(const LinearStack& s, std::span<const double> x) {
  const Backbone bb = stack_backbone(s);
  GateConfig gate;
  gate.alpha = s.alpha;
  Rng rng(0);
  const std::vector<Router> routers{init_router(gate, s.num_layers(), static_cast<int>(s.dim()), rng)};
  const ModelRef m{&bb, nullptr, &bb.head, &routers, &gate};
  const RoutingPlan plan = fixed_route_plan(s.route, 1, 1);
  ForwardOptions fo;
  fo.replay = &plan;
  const Matrix z = forward_features(m, Matrix::row_vector(x), fo);
  return {z.data().begin(), z.data().end()};
}

LinearStack random_stack(Rng& rng, int layers, int dim, double alpha) {
  LinearStack s;
  s.alpha = alpha;
  for (int t = 0; t < layers; ++t) {
    s.w.push_back(gaussian_matrix(dim, dim, 0.5, rng));
    s.route.push_back(static_cast<int>(rng.uniform_int(layers)));
  }
  return s;
}

Outcome ensemble_unrolling() {
  Rng rng(4);
  double worst = 0.0;
  bool bound_ok = true;
  std::string counts;
  for (int layers = 1; layers <= 4; ++layers) {
    const LinearStack s = random_stack(rng, layers, 4, rng.uniform());
    const auto terms = unroll(s);
    bound_ok = bound_ok && term_bound_check(terms, layers - 1);
    counts += std::string(counts.empty() ? "" : ",") + std::to_string(non_identity_terms(terms));
    for (int k = 0; k < 50; ++k) {
      std::vector<double> x(4);
      for (double& v : x) v = rng.gaussian();
      const Matrix e = evaluate_terms(terms, column(x));
      const auto mf = molex_stack_forward(s, x);
      for (std::size_t i = 0; i < 4; ++i) worst = std::max(worst, std::abs(e[i] - mf[i]));
    }
  }
  return {worst <= 1e-10 && bound_ok,
          fmt("max |unrolled - forward| %.2e (bound 1e-10)", worst) + ", non-identity terms T=1..4: " + counts +
              (bound_ok ? " within 3^(t+1)-1" : " BOUND VIOLATED")};
}

Outcome decomposition_identity() {
  Rng rng(5);
  double worst_id = 0.0, worst_r = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    LinearStack s = random_stack(rng, 2, 4, rng.uniform());
    s.route = {1, 0};
    const double a = s.alpha;
    const auto d = decompose_two_layer(s);
    std::vector<double> x(4);
    for (double& v : x) v = rng.gaussian();
    const Matrix xc = column(x);
    const auto mf = molex_stack_forward(s, x);
    const Matrix f0 = matmul(d.f0, xc), fu = matmul(d.upcycled, xc), r = matmul(d.remainder, xc);
    const Matrix v0 = matmul(s.w[s.route[0]], xc), w0z = matmul(s.w[0], xc);
    const Matrix closed = scaled(matmul(s.w[1], add(v0, scaled(w0z, -1.0))), (1.0 - a) * a);
    for (std::size_t i = 0; i < 4; ++i) {
      worst_id = std::max(worst_id, std::abs(a * f0[i] + (1.0 - a) * fu[i] + r[i] - mf[i]));
      worst_r = std::max(worst_r, std::abs(r[i] - closed[i]));
    }
  }
  return {worst_id <= 1e-10 && worst_r <= 1e-10,
          fmt("20 instances, identity err %.2e, remainder vs closed form %.2e (bound 1e-10)", worst_id, worst_r)};
}

Outcome certificate_tightness() {
  const Matrix eye = Matrix::identity(2);
  const std::vector<double> x{3.0, 1.0};
  const Certificate c = certify_single(eye, x, 0);
  const bool radius_ok = std::abs(c.eps_star - std::numbers::sqrt2) <= 1e-9;
  Rng rng(6);
  int flips = 0;
  for (int k = 0; k < 1000; ++k) {
    const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = 0.999 * c.eps_star * std::sqrt(rng.uniform());
    const std::vector<double> xp{x[0] + r * std::cos(ang), x[1] + r * std::sin(ang)};
    const Matrix f = matmul_at(eye, column(xp));
    flips += argmax_lowest(f.data()) != 0;
  }
  const auto s = sensitivity_vector(eye, 0, c.binding_rival);
  const double sn = norm2(s);
  const double e = c.eps_star + 1e-6;
  const std::vector<double> xw{x[0] - e * s[0] / sn, x[1] - e * s[1] / sn};
  const Matrix fw = matmul_at(eye, column(xw));
  const bool worst_flips = fw(0, 0) <= fw(c.binding_rival, 0);
  return {radius_ok && flips == 0 && worst_flips,
          fmt("eps* = %.12f (sqrt 2 +- 1e-9), ", c.eps_star) + std::to_string(flips) +
              " flips in 1000 samples inside 0.999 eps*, worst-case direction at eps*+1e-6 " +
              (worst_flips ? "flips or ties" : "does not flip")};
}

Outcome strictness() {
  Rng rng(7);
  int ens = 0, ens_viol = 0;
  double ens_gap = std::numeric_limits<double>::infinity();
  while (ens < 100) {
    EnsembleInstance inst;
    if (!sample_ensemble_instance(rng, inst)) continue;
    ++ens;
    const Certificate c = certify_ensemble(inst.bases, inst.coeffs, inst.x, inst.y, inst.epsilon);
    ens_gap = std::min(ens_gap, c.eps_star - inst.epsilon);
    ens_viol += !(c.eps_star - inst.epsilon > 1e-9);
  }
  int stacks = 0, stack_viol = 0;
  double stack_gap = std::numeric_limits<double>::infinity();
  while (stacks < 100) {
    StackInstance inst;
    if (!sample_stack_instance(rng, inst)) continue;
    ++stacks;
    const auto r = molex_vs_sequential(inst.stack, inst.head, inst.x, inst.y);
    stack_gap = std::min(stack_gap, r.strict_gap);
    stack_viol += !(r.applicable && r.strict_gap > 1e-9);
  }
  return {ens_viol == 0 && stack_viol == 0,
          "ensembles: " + std::to_string(ens_viol) + " violations, min gap " + fmt("%.3e", ens_gap) +
              "; stacks: " + std::to_string(stack_viol) + " violations, min gap " + fmt("%.3e", stack_gap)};
}

Outcome parameter_accounting(const Backbone& bb) {
  Variant lora, mx;
  mx.molex = true;
  LoraConfig lc;
  const auto sb = init_finetune_state(bb, lora, lc, 2, 0);
  const auto sm = init_finetune_state(bb, mx, lc, 2, 0);
  const std::size_t t = bb.num_layers(), d = bb.dim();
  const std::size_t overhead = param_count(bb, sm, true) - param_count(bb, sb, true);
  GateConfig g;
  Rng rng(0);
  const std::size_t big = router_param_count(init_router(g, 12, 768, rng));
  return {overhead == t * d + t + 1 && big == 9229,
          "overhead " + std::to_string(overhead) + " = T*D+T+1 = " + std::to_string(t * d + t + 1) +
              "; T=12, D=768: " + std::to_string(big) + " (expected 9229)"};
}

// ---------------------------------------------------------------------------
// Directional fine-tuning criteria

struct Sweep {
  std::vector<RunResult> runs;
  SummaryStat best, clean, noisy, transfer;
  bool all_ok = true;
};

Sweep sweep(const Backbone& bb, const Variant& v, const TaskSpec& task, const std::vector<Example>* transfer) {
  const LoraConfig lora;
  const TrainConfig tc;
  const Dataset data = make_dataset(task);
  Sweep s;
  std::vector<double> best, clean, noisy, zs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    s.runs.push_back(finetune_run(bb, v, lora, tc, task, data, seed));
    const auto& r = s.runs.back();
    s.all_ok = s.all_ok && r.ok;
    if (!r.ok) continue;
    best.push_back(r.best_metric);
    clean.push_back(r.clean_acc);
    noisy.push_back(r.noisy_acc);
    if (transfer) {
      const FinetuneModel fm{&bb, &r.best_state, &v};
      zs.push_back(zero_shot_transfer(fm, *transfer));
    }
  }
  s.best = summarize(best);
  s.clean = summarize(clean);
  s.noisy = summarize(noisy);
  s.transfer = summarize(zs);
  return s;
}

TaskSpec make_task(const std::string& name, const Backbone& bb, std::uint64_t seed = 0) {
  TaskSpec t;
  t.name = name;
  t.seed = seed;
  t.num_classes = 2;
  t.seq_len = bb.config.seq_len;
  t.vocab_size = bb.config.vocab_size;
  t.train_size = 1000;
  t.val_size = 500;
  t.test_size = 1000;
  return t;
}

Variant molex_variant(int top_k) {
  Variant v;
  v.name = top_k == 1 ? "molex" : "molex_top2";
  v.molex = true;
  v.gate.grad_mode = GradMode::kProbWeighted;
  v.gate.top_k = top_k;
  v.gate.alpha = 0.95;
  return v;
}

}  // namespace

int main() {
  std::printf("acceptance: default backbone T=4, D=16, H=32, pretrained 2000 steps, seed 0\n");
  std::fflush(stdout);

  report(1, "gating exactness", 1.0, gating_exactness);
  report(2, "degenerate collapses", 10.0, degenerate_collapses);
  report(3, "gradient suite", 120.0, gradient_suite);
  report(4, "ensemble unrolling oracle", 30.0, ensemble_unrolling);
  report(5, "two-layer decomposition", 5.0, decomposition_identity);
  report(6, "certificate tightness", 30.0, certificate_tightness);
  report(7, "ensemble and MoLEx strictness", 60.0, strictness);

  const auto pre = pretrain(BackboneConfig{}, 0);
  const Backbone& bb = pre.backbone;
  std::printf("pretrained base-task accuracy %.4f\n", pre.accuracy);
  report(8, "parameter accounting", 1.0, [&] { return parameter_accounting(bb); });

  const Variant lora;
  const Variant mx = molex_variant(1);
  Sweep mt_lora, mt_molex;
  report(9, "directional fine-tuning gain", 600.0, [&] {
    const TaskSpec task = make_task("majority_token", bb);
    mt_lora = sweep(bb, lora, task, nullptr);
    mt_molex = sweep(bb, mx, task, nullptr);
    const bool ok = mt_lora.all_ok && mt_molex.all_ok && mt_molex.best.mean >= mt_lora.best.mean &&
                    mt_molex.best.std <= 1.5 * mt_lora.best.std;
    return Outcome{ok, fmt("majority_token best-epoch accuracy: molex %.4f +- %.4f, lora %.4f +- %.4f",
                           mt_molex.best.mean, mt_molex.best.std, mt_lora.best.mean, mt_lora.best.std) +
                           fmt(" (std ratio %.2f, bound 1.5)", mt_molex.best.std / mt_lora.best.std)};
  });

  Sweep pp_lora, pp_molex;
  const auto shifted = make_split(make_task("pattern_pair_shifted", bb, 99), Split::kTest, 1000);
  report(10, "directional noise robustness", 300.0, [&] {
    const TaskSpec task = make_task("pattern_pair", bb);
    pp_lora = sweep(bb, lora, task, &shifted);
    pp_molex = sweep(bb, mx, task, &shifted);
    const bool ok = pp_lora.all_ok && pp_molex.all_ok && pp_molex.noisy.mean >= pp_lora.noisy.mean;
    return Outcome{ok, fmt("pattern_pair noisy accuracy (sigma 1.0): molex %.4f +- %.4f, lora %.4f +- %.4f",
                           pp_molex.noisy.mean, pp_molex.noisy.std, pp_lora.noisy.mean, pp_lora.noisy.std)};
  });
  report(11, "directional zero-shot transfer", 300.0, [&] {
    const bool ok = pp_lora.all_ok && pp_molex.all_ok && pp_molex.transfer.mean >= pp_lora.transfer.mean;
    return Outcome{ok, fmt("pattern_pair -> pattern_pair_shifted: molex %.4f +- %.4f, lora %.4f +- %.4f",
                           pp_molex.transfer.mean, pp_molex.transfer.std, pp_lora.transfer.mean,
                           pp_lora.transfer.std)};
  });

  report(12, "top-1 vs top-2 ablation", 0.0, [&] {
    const Sweep top2 = sweep(bb, molex_variant(2), make_task("pattern_pair", bb), &shifted);
    return Outcome{top2.all_ok && top2.runs.size() == 5,
                   fmt("pattern_pair clean accuracy: top-1 %.4f +- %.4f, top-2 %.4f +- %.4f", pp_molex.clean.mean,
                       pp_molex.clean.std, top2.clean.mean, top2.clean.std) +
                       fmt("; transfer top-1 %.4f, top-2 %.4f", pp_molex.transfer.mean, top2.transfer.mean)};
  });

  report(13, "efficiency envelope", 120.0, [&] {
    const auto data = make_split(make_task("majority_token", bb), Split::kTest, 1000);
    const TimingReport rep = timing_report(bb, mt_lora.runs.at(0).best_state, mt_molex.runs.at(0).best_state, mx, data);
    double worst_row = 0.0;
    for (const auto& r : mt_molex.runs) {
      for (const auto& row : parse_selection_csv(export_selection_stats(r.stats))) {
        double s = 0.0;
        for (double v : row) s += v;
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    }
    const bool ok = rep.ratio_seq <= 2.2 && rep.ratio_par <= 1.3 && worst_row <= 1e-6;
    return Outcome{ok, fmt("per-sample baseline %.3e s; molex x%.3f sequential (bound 2.2), x%.3f paired (bound 1.3)",
                           rep.baseline_s, rep.ratio_seq, rep.ratio_par) +
                           fmt("; heat-map max |row sum - 1| %.1e; hardware threads %.0f", worst_row,
                               static_cast<double>(std::thread::hardware_concurrency()))};
  });

  report(14, "determinism", 0.0, [&] {
    const auto again = pretrain(BackboneConfig{}, 0);
    bool ok = frozen_hash(again.backbone) == frozen_hash(bb) && again.accuracy == pre.accuracy;
    const TaskSpec task = make_task("majority_token", bb);
    const Dataset data = make_dataset(task);
    for (const Variant* v : {&lora, &mx}) {
      const RunResult a = finetune_run(bb, *v, LoraConfig{}, TrainConfig{}, task, data, 2);
      const Sweep& ref = v->molex ? mt_molex : mt_lora;
      const RunResult& b = ref.runs.at(2);
      ok = ok && a.epoch_metrics == b.epoch_metrics && a.clean_acc == b.clean_acc && a.noisy_acc == b.noisy_acc &&
           a.stats.counts == b.stats.counts && a.best_state.head.weight == b.best_state.head.weight;
      for (std::size_t t = 0; t < a.best_state.adapters.size(); ++t) {
        ok = ok && a.best_state.adapters[t].w1->a == b.best_state.adapters[t].w1->a &&
             a.best_state.adapters[t].w2->b == b.best_state.adapters[t].w2->b;
      }
      if (v->molex) ok = ok && a.best_state.routers[0].weight == b.best_state.routers[0].weight;
    }
    Rng r1(3), r2(3);
    StackInstance i1, i2;
    while (!sample_stack_instance(r1, i1)) {
    }
    while (!sample_stack_instance(r2, i2)) {
    }
    ok = ok && i1.x == i2.x && i1.stack.w[0] == i2.stack.w[0];
    return Outcome{ok, "pretrain, LoRA and MoLEx fine-tuning reruns and instance generation are bitwise identical"};
  });

  std::printf("acceptance: %d of 14 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}

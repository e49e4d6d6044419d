// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <numbers>
#include <vector>

#include "molex/ensemble.hpp"
#include "molex/molex.hpp"
#include "molex/rng.hpp"

using namespace molex;
using Catch::Matchers::WithinAbs;

namespace {

LinearStack random_stack(Rng& rng, int layers, int dim, double alpha) {
  LinearStack s;
  s.alpha = alpha;
  for (int t = 0; t < layers; ++t) {
    s.w.push_back(gaussian_matrix(dim, dim, 0.5, rng));
    s.route.push_back(static_cast<int>(rng.uniform_int(layers)));
  }
  return s;
}

// Enumerates all 3^T choice sequences (skip, own layer, routed layer) and
// collects coefficient products by path.
std::map<std::vector<int>, double> brute_force_terms(const LinearStack& s) {
  std::map<std::vector<int>, double> out;
  const int t_count = s.num_layers();
  int total = 1;
  for (int t = 0; t < t_count; ++t) total *= 3;
  for (int code = 0; code < total; ++code) {
    std::vector<int> path;
    double c = 1.0;
    int rest = code;
    for (int t = 0; t < t_count; ++t) {
      const int choice = rest % 3;
      rest /= 3;
      if (choice == 1) {
        path.push_back(t);
        c *= s.alpha;
      } else if (choice == 2) {
        path.push_back(s.route[t]);
        c *= 1.0 - s.alpha;
      }
    }
    out[path] += c;
  }
  std::erase_if(out, [](const auto& kv) { return kv.second == 0.0; });
  return out;
}

// MoLEx forward of the stack on one input through the model code path,
// with the route replayed as a fixed plan. Rows are tokens, so the column
// vector x becomes a single row.
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

std::vector<double> random_vector(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.gaussian();
  return v;
}

}  // namespace

TEST_CASE("unroll examples", "[ensemble]") {
  Rng rng(1);
  LinearStack s = random_stack(rng, 1, 3, 0.95);
  s.route = {0};
  const auto terms = unroll(s);
  REQUIRE(terms.size() == 2);
  CHECK(terms[0].path.empty());
  CHECK(terms[0].coeff == 1.0);
  CHECK(terms[1].path == std::vector<int>{0});
  CHECK(terms[1].coeff == 1.0);
  const Matrix want = add(Matrix::identity(3), s.w[0]);
  const Matrix got = ensemble_matrix(terms);
  for (std::size_t i = 0; i < want.size(); ++i) CHECK_THAT(got[i], WithinAbs(want[i], 1e-15));
}

TEST_CASE("unroll matches the brute-force expansion and the model forward", "[ensemble]") {
  Rng rng(2);
  LinearStack s = random_stack(rng, 2, 4, 0.95);
  s.route = {1, 0};
  const auto terms = unroll(s);
  const auto oracle = brute_force_terms(s);
  REQUIRE(terms.size() == oracle.size());
  for (const auto& t : terms) {
    REQUIRE(oracle.count(t.path) == 1);
    CHECK_THAT(t.coeff, WithinAbs(oracle.at(t.path), 1e-15));
    CHECK(t.coeff >= 0.0);
  }
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_vector(rng, 4);
    const Matrix e = evaluate_terms(terms, column(x));
    const auto mf = molex_stack_forward(s, x);
    const Matrix sf = stack_forward(s, column(x));
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK_THAT(e[i], WithinAbs(mf[i], 1e-10));
      CHECK_THAT(sf[i], WithinAbs(mf[i], 1e-10));
    }
  }
}

TEST_CASE("unrolled ensemble equals the MoLEx forward for T up to 4", "[ensemble][property]") {
  Rng rng(3);
  for (int layers = 1; layers <= 4; ++layers) {
    for (double alpha : {0.0, 0.3, 0.95, 1.0}) {
      const LinearStack s = random_stack(rng, layers, 3, alpha);
      const auto terms = unroll(s);
      CHECK(term_bound_check(terms, layers - 1));
      for (int trial = 0; trial < 50; ++trial) {
        const auto x = random_vector(rng, 3);
        const Matrix e = evaluate_terms(terms, column(x));
        const auto mf = molex_stack_forward(s, x);
        for (std::size_t i = 0; i < 3; ++i) CHECK_THAT(e[i], WithinAbs(mf[i], 1e-10));
      }
    }
  }
}

TEST_CASE("term bound examples", "[ensemble]") {
  Rng rng(4);
  LinearStack t0 = random_stack(rng, 1, 3, 0.5);
  const auto merged = unroll(t0);
  CHECK(non_identity_terms(merged) == 1);
  CHECK(term_bound_check(merged, 0));

  LinearStack t1 = random_stack(rng, 2, 3, 0.5);
  t1.route = {1, 0};
  const auto terms = unroll(t1);
  CHECK(non_identity_terms(terms) <= 8);
  CHECK(term_bound_check(terms, 1));

  for (int trial = 0; trial < 100; ++trial) {
    const LinearStack s = random_stack(rng, 4, 2, rng.uniform());
    const auto u = unroll(s);
    CHECK(term_bound_check(u, 3));
    CHECK(non_identity_terms(u) == brute_force_terms(s).size() - 1);
  }
}

TEST_CASE("each expansion level reconstructs the recursion", "[ensemble][property]") {
  Rng rng(5);
  const LinearStack s = random_stack(rng, 4, 3, 0.7);
  for (int level = 1; level <= 4; ++level) {
    LinearStack prefix = s;
    prefix.w.resize(level);
    prefix.route.resize(level);
    bool ok = true;
    for (int r : prefix.route) ok = ok && r < level;
    if (!ok) continue;
    const auto terms = unroll(prefix);
    const auto x = random_vector(rng, 3);
    const Matrix e = evaluate_terms(terms, column(x));
    const Matrix f = stack_forward(prefix, column(x));
    for (std::size_t i = 0; i < 3; ++i) CHECK_THAT(e[i], WithinAbs(f[i], 1e-10));
  }
}

TEST_CASE("unroll rejects nonlinear models", "[ensemble]") {
  BackboneConfig c;
  c.num_layers = 2;
  c.model_dim = 3;
  c.hidden_dim = 4;
  Rng rng(6);
  const Backbone bb = init_backbone(c, rng);
  const std::vector<int> route{1, 0};
  CHECK_THROWS_AS(unroll(bb, route, 0.9), UnsupportedModelError);
}

TEST_CASE("two-layer decomposition", "[ensemble]") {
  Rng rng(7);
  SECTION("self routing has no remainder") {
    LinearStack s = random_stack(rng, 2, 3, 0.6);
    s.route = {0, 1};
    const auto d = decompose_two_layer(s);
    for (double v : d.remainder.data()) CHECK(v == 0.0);
    for (std::size_t i = 0; i < d.f0.size(); ++i) CHECK_THAT(d.upcycled[i], WithinAbs(d.f0[i], 1e-15));
  }
  SECTION("alpha = 1 reduces to the backbone") {
    LinearStack s = random_stack(rng, 2, 3, 1.0);
    s.route = {1, 0};
    const auto d = decompose_two_layer(s);
    for (std::size_t i = 0; i < d.f0.size(); ++i) CHECK_THAT(d.molex[i], WithinAbs(d.f0[i], 1e-15));
  }
  SECTION("route (1,0) identity and closed-form remainder") {
    for (int inst = 0; inst < 20; ++inst) {
      LinearStack s = random_stack(rng, 2, 4, rng.uniform());
      s.route = {1, 0};
      const double a = s.alpha;
      const auto d = decompose_two_layer(s);
      const auto x = random_vector(rng, 4);
      const Matrix xc = column(x);
      const auto mf = molex_stack_forward(s, x);
      const Matrix f0 = matmul(d.f0, xc);
      const Matrix fu = matmul(d.upcycled, xc);
      const Matrix r = matmul(d.remainder, xc);
      // R = (1−α)α·W_1(v_0(z_0) − W_0 z_0) with v_0 = W_{i_0}
      const Matrix v0 = matmul(s.w[1], xc);
      const Matrix u0 = matmul(s.w[0], xc);
      const Matrix r_closed = scaled(matmul(s.w[1], add(v0, scaled(u0, -1.0))), (1.0 - a) * a);
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK_THAT(a * f0[i] + (1.0 - a) * fu[i] + r[i], WithinAbs(mf[i], 1e-10));
        CHECK_THAT(r[i], WithinAbs(r_closed[i], 1e-10));
      }
    }
  }
  LinearStack three = random_stack(rng, 3, 2, 0.5);
  CHECK_THROWS_AS(decompose_two_layer(three), UnsupportedModelError);
}

TEST_CASE("certify_single examples", "[ensemble][certificate]") {
  const Matrix eye = Matrix::identity(2);
  const std::vector<double> x{3.0, 1.0};
  const Certificate c = certify_single(eye, x, 0);
  REQUIRE(c.per_rival.size() == 1);
  CHECK(c.per_rival[0].margin == 2.0);
  CHECK_THAT(c.per_rival[0].sensitivity, WithinAbs(std::numbers::sqrt2, 1e-15));
  CHECK_THAT(c.eps_star, WithinAbs(std::numbers::sqrt2, 1e-9));
  CHECK(c.correct);
  CHECK(c.binding_rival == 1);

  const Certificate edge = certify_single(eye, std::vector<double>{1.0, 1.0}, 0);
  CHECK(edge.eps_star == 0.0);
  CHECK(edge.correct);

  const Certificate wrong = certify_single(eye, std::vector<double>{1.0, 3.0}, 0);
  CHECK_FALSE(wrong.correct);
  CHECK(wrong.eps_star == 0.0);

  CHECK_THROWS_AS(certify_single(eye, std::vector<double>{1.0}, 0), ShapeError);
  CHECK_THROWS_AS(certify_single(eye, x, 2), ConfigError);
}

TEST_CASE("certificates are tight for linear models", "[ensemble][certificate][property]") {
  Rng rng(8);
  int checked = 0;
  while (checked < 20) {
    const Matrix w = gaussian_matrix(4, 3, 1.0, rng);
    const auto x = random_vector(rng, 4);
    const Matrix f = matmul_at(w, column(x));
    const int y = argmax_lowest(f.data());
    const Certificate c = certify_single(w, x, y);
    if (!(c.eps_star > 1e-3)) continue;
    ++checked;
    CHECK(c.ball_min(c.eps_star * (1.0 - 1e-9)) >= 0.0);
    CHECK(c.ball_min(c.eps_star * (1.0 + 1e-9)) <= 0.0);
    CHECK(std::abs(c.ball_min(c.eps_star)) <= 1e-9 * std::max(1.0, c.eps_star));

    for (int k = 0; k < 1000; ++k) {
      auto d = random_vector(rng, 4);
      const double n = norm2(d);
      const double r = 0.999 * c.eps_star * std::pow(rng.uniform(), 0.25);
      std::vector<double> xp = x;
      for (std::size_t i = 0; i < 4; ++i) xp[i] += r * d[i] / n;
      const Matrix fp = matmul_at(w, column(xp));
      CHECK(argmax_lowest(fp.data()) == y);
    }
    const auto s = sensitivity_vector(w, y, c.binding_rival);
    const double sn = norm2(s);
    std::vector<double> xw = x;
    for (std::size_t i = 0; i < 4; ++i) xw[i] -= (c.eps_star + 1e-6) * s[i] / sn;
    const Matrix fw = matmul_at(w, column(xw));
    CHECK(fw(y, 0) <= fw(c.binding_rival, 0));
  }
}

TEST_CASE("certify_ensemble assumption flags", "[ensemble][certificate]") {
  Rng rng(9);
  const std::vector<double> x{2.0, -0.5, 0.3};
  const Matrix w = gaussian_matrix(3, 3, 1.0, rng);
  const int y = argmax_lowest(matmul_at(w, column(x)).data());

  SECTION("colinear bases") {
    const std::vector<Matrix> bases{w, scaled(w, 2.0)};
    const std::vector<double> coeffs{0.5, 0.5};
    const Certificate c = certify_ensemble(bases, coeffs, x, y, 0.01);
    CHECK(c.colinearity == Colinearity::kColinear);
    CHECK_FALSE(c.noncolinear());
    CHECK_FALSE(c.theorem_applicable);
    CHECK_FALSE(c.violation);
  }
  SECTION("one model reduces to certify_single") {
    const std::vector<Matrix> bases{w};
    const std::vector<double> coeffs{1.0};
    const Certificate e = certify_ensemble(bases, coeffs, x, y, 0.0);
    const Certificate s = certify_single(w, x, y);
    CHECK(e.eps_star == s.eps_star);
    CHECK(e.binding_rival == s.binding_rival);
    REQUIRE(e.per_rival.size() == s.per_rival.size());
    for (std::size_t i = 0; i < s.per_rival.size(); ++i) {
      CHECK(e.per_rival[i].margin == s.per_rival[i].margin);
      CHECK(e.per_rival[i].sensitivity == s.per_rival[i].sensitivity);
    }
    CHECK_FALSE(e.theorem_applicable);
  }
  SECTION("tolerance bands") {
    CHECK(classify_colinearity(2, 5e-10) == Colinearity::kColinear);
    CHECK(classify_colinearity(2, 5e-8) == Colinearity::kInconclusive);
    CHECK(classify_colinearity(2, 1e-6) == Colinearity::kNonColinear);
    CHECK(classify_colinearity(1, 1.0) == Colinearity::kColinear);
  }
  CHECK_THROWS_AS(certify_ensemble({w}, std::vector<double>{1.0, 2.0}, x, y, 0.1), ShapeError);
}

TEST_CASE("two-model ensemble has a strictly larger radius", "[ensemble][certificate]") {
  // sensitivity directions (1,−1)/√2 and (1,0), both unit length; x puts
  // both margins at exactly ε = 1
  const double r2 = std::numbers::sqrt2;
  const Matrix w0{{1.0 / r2, 0.0}, {-1.0 / r2, 0.0}};
  const Matrix w1{{1.0, 0.0}, {0.0, 0.0}};
  const std::vector<double> x{1.0, 1.0 - r2};
  const std::vector<double> coeffs{0.5, 0.5};
  const Certificate c = certify_ensemble({w0, w1}, coeffs, x, 0, 1.0);
  CHECK(c.cond1 == std::vector<bool>{true, true});
  CHECK(c.noncolinear());
  CHECK(c.theorem_applicable);
  // margin 1, sensitivity ½‖(1+1/√2, −1/√2)‖ = ½√(2+√2)
  const double closed = 2.0 / std::sqrt(2.0 + r2);
  CHECK_THAT(c.eps_star, WithinAbs(closed, 1e-12));
  CHECK(c.eps_star > 1.0);
  CHECK(c.strict);
  CHECK_FALSE(c.violation);
  CHECK_THAT(c.strict_gap, WithinAbs(closed - 1.0, 1e-12));
}

TEST_CASE("random ensembles satisfying the assumptions are strictly more robust", "[ensemble][property]") {
  Rng rng(10);
  int found = 0, violations = 0;
  while (found < 100) {
    EnsembleInstance inst;
    if (!sample_ensemble_instance(rng, inst)) continue;
    ++found;
    const Certificate c = certify_ensemble(inst.bases, inst.coeffs, inst.x, inst.y, inst.epsilon);
    violations += c.violation;
    CHECK(c.eps_star - inst.epsilon > 1e-9);
  }
  CHECK(violations == 0);
}

TEST_CASE("MoLEx versus sequential certificates", "[ensemble][certificate]") {
  Rng rng(11);
  SECTION("alpha = 1 collapses to the residual baseline") {
    for (int trial = 0; trial < 10; ++trial) {
      LinearStack s = random_stack(rng, 2, 3, 1.0);
      const auto x = random_vector(rng, 3);
      const Matrix head = Matrix::identity(3);
      Matrix residual = Matrix::identity(3);
      for (const auto& w : s.w) residual = matmul(add(Matrix::identity(3), w), residual);
      const int y = argmax_lowest(matmul(residual, column(x)).data());
      const auto r = molex_vs_sequential(s, head, x, y);
      CHECK_THAT(r.eps_molex, WithinAbs(r.eps_baseline, 1e-9 * std::max(1.0, r.eps_baseline)));
    }
  }
  SECTION("random assumption-satisfying stacks never violate the inequality") {
    int found = 0, violations = 0;
    while (found < 100) {
      StackInstance inst;
      if (!sample_stack_instance(rng, inst)) continue;
      ++found;
      const auto r = molex_vs_sequential(inst.stack, inst.head, inst.x, inst.y);
      REQUIRE(r.applicable);
      violations += !(r.strict_gap > 1e-9);
    }
    CHECK(violations == 0);
  }
  SECTION("the sequential composition is one of the base models") {
    StackInstance inst;
    while (!sample_stack_instance(rng, inst)) {
    }
    const auto terms = unroll(inst.stack);
    std::vector<int> seq(inst.stack.num_layers());
    for (int t = 0; t < inst.stack.num_layers(); ++t) seq[t] = t;
    bool present = false;
    for (const auto& t : terms) present = present || t.path == seq;
    CHECK(present);
  }
}

TEST_CASE("argmax is invariant to simplex normalization", "[ensemble]") {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix f = gaussian_matrix(1, 5, 2.0, rng);
    CHECK(argmax_lowest(row_softmax(f).data()) == argmax_lowest(f.data()));
  }
}

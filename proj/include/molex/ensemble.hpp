// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Linear MoLEx stacks as ensembles of layer compositions, and ℓ2 robustness
// certificates for linear classifiers and their ensembles.
//
// Vectors are columns here: a linear layer maps x to W·x, and a classifier
// with weight W (D×C) predicts f(x) = Wᵀx. Routes are fixed schedules.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "molex/backbone.hpp"
#include "molex/numerics.hpp"
#include "molex/rng.hpp"

namespace molex {

class UnsupportedModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LinearStack {
  std::vector<Matrix> w;   // W_0 … W_{T−1}, each D×D
  std::vector<int> route;  // i_t per layer
  double alpha = 0.95;

  int num_layers() const { return static_cast<int>(w.size()); }
  std::size_t dim() const { return w.empty() ? 0 : w.front().rows(); }

  void validate() const {
    if (w.size() != route.size()) throw ShapeError("linear stack: one route entry per layer required");
    for (const auto& m : w) {
      if (m.rows() != dim() || m.cols() != dim()) throw ShapeError("linear stack: layers must be square and equal size");
    }
    for (int r : route) {
      if (r < 0 || r >= num_layers()) throw ConfigError("linear stack: route index out of range");
    }
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("linear stack: alpha must lie in [0, 1]");
  }
};

// Column-vector helpers.
inline Matrix column(std::span<const double> v) {
  Matrix m(v.size(), 1);
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

// One layer of the recursion: z + α·W_t z + (1−α)·W_{i_t} z.
inline Matrix stack_layer(const LinearStack& s, int t, const Matrix& z) {
  const Matrix u = matmul(s.w[t], z);
  const Matrix v = matmul(s.w[s.route[t]], z);
  Matrix out = z;
  add_inplace(out, u, s.alpha);
  add_inplace(out, v, 1.0 - s.alpha);
  return out;
}

inline Matrix stack_forward(const LinearStack& s, const Matrix& x) {
  s.validate();
  Matrix z = x;
  for (int t = 0; t < s.num_layers(); ++t) z = stack_layer(s, t, z);
  return z;
}

// Residual backbone equivalent of the stack, for comparison with the
// MoLEx forward.
inline Backbone stack_backbone(const LinearStack& s, int num_classes = 2) {
  s.validate();
  Backbone bb;
  bb.config.num_layers = s.num_layers();
  bb.config.model_dim = static_cast<int>(s.dim());
  bb.config.block = BlockKind::kLinear;
  bb.config.activation = ActivationKind::kIdentity;
  bb.config.hidden_dim = 0;
  bb.config.num_classes = num_classes;
  for (const auto& m : s.w) bb.layers.push_back(LayerParams{m, Matrix()});
  bb.head.weight = Matrix(num_classes, s.dim());
  bb.head.bias = Matrix(1, num_classes);
  return bb;
}

// Ensemble term c·(W_{p_k}···W_{p_1}); the empty path is the identity.
struct EnsembleTerm {
  std::vector<int> path;  // layer indices in application order
  double coeff = 0.0;
  Matrix composed;
};

inline Matrix compose_path(const LinearStack& s, const std::vector<int>& path) {
  Matrix m = Matrix::identity(s.dim());
  for (int j : path) m = matmul(s.w[j], m);
  return m;
}

// Expands the recursion into x + Σ c_j f_j(x). Each layer multiplies every
// existing term by (I + α·W_t + (1−α)·W_{i_t}); identical paths are merged and
// zero coefficients dropped. The identity term comes first.
inline std::vector<EnsembleTerm> unroll(const LinearStack& s) {
  s.validate();
  std::map<std::vector<int>, double> acc{{{}, 1.0}};
  for (int t = 0; t < s.num_layers(); ++t) {
    std::map<std::vector<int>, double> next;
    for (const auto& [path, c] : acc) {
      next[path] += c;
      auto with = [&](int j, double w) {
        if (w == 0.0) return;
        auto p = path;
        p.push_back(j);
        next[p] += c * w;
      };
      with(t, s.alpha);
      with(s.route[t], 1.0 - s.alpha);
    }
    acc = std::move(next);
  }
  std::vector<EnsembleTerm> terms;
  for (const auto& [path, c] : acc) {
    if (c == 0.0) continue;
    terms.push_back(EnsembleTerm{path, c, compose_path(s, path)});
  }
  return terms;
}

// Unroll of a stack given as a BackboneConfig-style nonlinear model.
inline std::vector<EnsembleTerm> unroll(const Backbone& bb, std::span<const int> route, double alpha) {
  if (bb.config.block != BlockKind::kLinear || bb.config.activation != ActivationKind::kIdentity) {
    throw UnsupportedModelError("certification requires linear blocks");
  }
  LinearStack s;
  for (const auto& l : bb.layers) s.w.push_back(l.w1);
  s.route.assign(route.begin(), route.end());
  s.alpha = alpha;
  return unroll(s);
}

inline Matrix ensemble_matrix(const std::vector<EnsembleTerm>& terms) {
  Matrix m(terms.front().composed.rows(), terms.front().composed.cols());
  for (const auto& t : terms) add_inplace(m, t.composed, t.coeff);
  return m;
}

inline Matrix evaluate_terms(const std::vector<EnsembleTerm>& terms, const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (const auto& t : terms) add_inplace(out, matmul(t.composed, x), t.coeff);
  return out;
}

inline std::size_t non_identity_terms(const std::vector<EnsembleTerm>& terms) {
  return static_cast<std::size_t>(std::count_if(terms.begin(), terms.end(), [](const auto& t) { return !t.path.empty(); }));
}

// True iff the expansion of a (t+1)-layer stack has at most 3^{t+1} − 1
// non-identity terms.
inline bool term_bound_check(const std::vector<EnsembleTerm>& terms, int t) {
  std::size_t bound = 1;
  for (int i = 0; i <= t; ++i) bound *= 3;
  return non_identity_terms(terms) <= bound - 1;
}

// α·f⁽⁰⁾ + (1−α)·f_up + R for T = 2, as matrices acting on x. f_up applies
// the selected experts, with the second evaluated at the MoLEx intermediate
// z_1, so that R = α(1−α)·W_1·(W_{i_0} − W_0).
struct TwoLayerDecomposition {
  Matrix f0;
  Matrix upcycled;
  Matrix remainder;
  Matrix molex;
};

inline TwoLayerDecomposition decompose_two_layer(const LinearStack& s) {
  s.validate();
  if (s.num_layers() != 2) throw UnsupportedModelError("decomposition is defined for two-layer stacks");
  const std::size_t d = s.dim();
  const double a = s.alpha;
  const Matrix eye = Matrix::identity(d);
  const Matrix& w0 = s.w[0];
  const Matrix& w1 = s.w[1];
  const Matrix& wi0 = s.w[s.route[0]];
  const Matrix& wi1 = s.w[s.route[1]];
  TwoLayerDecomposition dec;
  dec.f0 = matmul(add(eye, w1), add(eye, w0));
  Matrix z1 = eye;
  add_inplace(z1, w0, a);
  add_inplace(z1, wi0, 1.0 - a);
  dec.upcycled = add(add(eye, wi0), matmul(wi1, z1));
  Matrix diff = wi0;
  add_inplace(diff, w0, -1.0);
  dec.remainder = scaled(matmul(w1, diff), a * (1.0 - a));
  Matrix l1 = eye;
  add_inplace(l1, w1, a);
  add_inplace(l1, wi1, 1.0 - a);
  dec.molex = matmul(l1, z1);
  return dec;
}

// ---------------------------------------------------------------------------
// Certificates

struct RivalMargin {
  int rival = 0;
  double margin = 0.0;       // (e_y − e_r)ᵀ f(x)
  double sensitivity = 0.0;  // ‖W(e_y − e_r)‖₂
  double radius = 0.0;       // margin / sensitivity (+inf when sensitivity is 0)
};

enum class Colinearity { kNonColinear, kColinear, kInconclusive };

inline const char* colinearity_name(Colinearity c) {
  switch (c) {
    case Colinearity::kNonColinear: return "noncolinear";
    case Colinearity::kColinear: return "colinear";
    case Colinearity::kInconclusive: return "inconclusive";
  }
  return "?";
}

struct Certificate {
  int y = 0;
  bool correct = false;  // every margin ≥ 0
  std::vector<RivalMargin> per_rival;
  double eps_star = 0.0;
  int binding_rival = -1;
  // Ensemble fields.
  double epsilon = 0.0;
  std::vector<bool> cond1;
  Colinearity colinearity = Colinearity::kColinear;
  double min_sine = 0.0;
  bool theorem_applicable = false;
  double strict_gap = 0.0;  // eps_star − epsilon
  bool strict = false;
  bool violation = false;   // assumptions hold but no strict gain

  bool noncolinear() const { return colinearity == Colinearity::kNonColinear; }

  // Ball minimum of the binding margin at radius eps.
  double ball_min(double eps) const {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& r : per_rival) m = std::min(m, r.margin - eps * r.sensitivity);
    return m;
  }
};

// Colinearity tolerance on |sin θ| between normalized sensitivity vectors;
// values in [kColinearTol, kInconclusiveTol) are reported as inconclusive.
inline constexpr double kColinearTol = 1e-9;
inline constexpr double kInconclusiveTol = 1e-7;

// d = W(e_y − e_r): column y minus column r of W.
inline std::vector<double> sensitivity_vector(const Matrix& w, int y, int r) {
  std::vector<double> v(w.rows());
  for (std::size_t i = 0; i < w.rows(); ++i) v[i] = w(i, y) - w(i, r);
  return v;
}

inline Certificate certify_single(const Matrix& w, std::span<const double> x, int y, double epsilon = 0.0) {
  if (w.rows() != x.size()) throw ShapeError("certify: W must be D×C with D = |x|");
  const int c = static_cast<int>(w.cols());
  if (y < 0 || y >= c) throw ConfigError("certify: label out of range");
  const Matrix f = matmul_at(w, column(x));  // C×1
  Certificate cert;
  cert.y = y;
  cert.epsilon = epsilon;
  cert.correct = true;
  cert.eps_star = std::numeric_limits<double>::infinity();
  for (int r = 0; r < c; ++r) {
    if (r == y) continue;
    RivalMargin rm;
    rm.rival = r;
    rm.margin = f(y, 0) - f(r, 0);
    rm.sensitivity = norm2(sensitivity_vector(w, y, r));
    if (rm.margin < 0.0) cert.correct = false;
    rm.radius = rm.sensitivity > 0.0 ? rm.margin / rm.sensitivity
                                     : (rm.margin >= 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    if (rm.radius < cert.eps_star) {
      cert.eps_star = rm.radius;
      cert.binding_rival = r;
    }
    cert.per_rival.push_back(rm);
  }
  if (!cert.correct) {
    cert.eps_star = 0.0;
  } else if (cert.binding_rival < 0 && !cert.per_rival.empty()) {
    cert.binding_rival = cert.per_rival.front().rival;
  }
  cert.strict_gap = cert.eps_star - epsilon;
  return cert;
}

// Relative slack on condition 1, so that a model evaluated at its own
// certified radius passes despite rounding in margin/sensitivity.
inline constexpr double kCondition1Slack = 1e-12;

// Condition 1 for one base model: margin ≥ ε·sensitivity for every rival.
inline bool condition1(const Matrix& w, std::span<const double> x, int y, double epsilon) {
  const Certificate c = certify_single(w, x, y);
  if (!c.correct) return false;
  for (const auto& r : c.per_rival) {
    if (r.margin - epsilon * r.sensitivity < -kCondition1Slack * std::max(1.0, std::abs(r.margin))) return false;
  }
  return true;
}

// Smallest pairwise |sin θ| between W_j(e_y − e_r) across base models, over
// all rivals. Zero vectors count as colinear.
inline double min_pairwise_sine(const std::vector<Matrix>& bases, int y) {
  double worst = 1.0;
  const int c = static_cast<int>(bases.front().cols());
  for (int r = 0; r < c; ++r) {
    if (r == y) continue;
    std::vector<std::vector<double>> vs;
    for (const auto& w : bases) vs.push_back(sensitivity_vector(w, y, r));
    for (std::size_t a = 0; a < vs.size(); ++a) {
      for (std::size_t b = a + 1; b < vs.size(); ++b) {
        const double na = norm2(vs[a]);
        const double nb = norm2(vs[b]);
        if (na == 0.0 || nb == 0.0) return 0.0;
        const double cosv = std::clamp(dot(vs[a], vs[b]) / (na * nb), -1.0, 1.0);
        worst = std::min(worst, std::sqrt(std::max(0.0, 1.0 - cosv * cosv)));
      }
    }
  }
  return worst;
}

inline Colinearity classify_colinearity(std::size_t models, double min_sine) {
  if (models < 2 || min_sine < kColinearTol) return Colinearity::kColinear;
  if (min_sine < kInconclusiveTol) return Colinearity::kInconclusive;
  return Colinearity::kNonColinear;
}

// Certificate of Σ c_j W_j with the assumption checks of the ensemble
// theorem evaluated at radius ε.
inline Certificate certify_ensemble(const std::vector<Matrix>& bases, std::span<const double> coeffs,
                                    std::span<const double> x, int y, double epsilon) {
  if (bases.empty() || bases.size() != coeffs.size()) throw ShapeError("certify: one coefficient per base model");
  Matrix wbar(bases.front().rows(), bases.front().cols());
  for (std::size_t j = 0; j < bases.size(); ++j) add_inplace(wbar, bases[j], coeffs[j]);
  Certificate cert = certify_single(wbar, x, y, epsilon);
  bool all_cond1 = epsilon > 0.0;
  for (const auto& w : bases) {
    const bool ok = epsilon > 0.0 && condition1(w, x, y, epsilon);
    cert.cond1.push_back(ok);
    all_cond1 = all_cond1 && ok;
  }
  bool positive = true;
  for (double c : coeffs) positive = positive && c > 0.0;
  cert.min_sine = bases.size() >= 2 ? min_pairwise_sine(bases, y) : 0.0;
  cert.colinearity = classify_colinearity(bases.size(), cert.min_sine);
  cert.theorem_applicable = all_cond1 && positive && cert.noncolinear();
  cert.strict = cert.strict_gap > 0.0;
  cert.violation = cert.theorem_applicable && !cert.strict;
  return cert;
}

// Base classifiers (D×C) of an unrolled stack under head H (C×D): (H·P_j)ᵀ.
inline std::vector<Matrix> base_classifiers(const std::vector<EnsembleTerm>& terms, const Matrix& head) {
  std::vector<Matrix> out;
  for (const auto& t : terms) out.push_back(transpose(matmul(head, t.composed)));
  return out;
}

struct MolexVsSequential {
  double eps_molex = 0.0;
  double eps_sequential = 0.0;  // pure composition W_{T−1}···W_0
  double eps_baseline = 0.0;    // residual model Π(I + W_t)
  Certificate molex;            // with assumption checks at ε = eps_sequential
  Certificate sequential;
  Certificate baseline;
  bool applicable = false;
  bool strict = false;
  double strict_gap = 0.0;  // eps_molex − eps_sequential
};

inline MolexVsSequential molex_vs_sequential(const LinearStack& s, const Matrix& head, std::span<const double> x,
                                             int y) {
  s.validate();
  if (head.cols() != s.dim()) throw ShapeError("certify: head must be C×D");
  const auto terms = unroll(s);
  std::vector<int> seq_path(s.num_layers());
  for (int t = 0; t < s.num_layers(); ++t) seq_path[t] = t;
  Matrix residual = Matrix::identity(s.dim());
  for (const auto& w : s.w) residual = matmul(add(Matrix::identity(s.dim()), w), residual);

  MolexVsSequential out;
  out.sequential = certify_single(transpose(matmul(head, compose_path(s, seq_path))), x, y);
  out.baseline = certify_single(transpose(matmul(head, residual)), x, y);
  out.eps_sequential = out.sequential.eps_star;
  out.eps_baseline = out.baseline.eps_star;
  std::vector<double> coeffs;
  for (const auto& t : terms) coeffs.push_back(t.coeff);
  out.molex = certify_ensemble(base_classifiers(terms, head), coeffs, x, y, out.eps_sequential);
  out.eps_molex = out.molex.eps_star;
  out.applicable = out.molex.theorem_applicable && std::isfinite(out.eps_sequential);
  out.strict_gap = out.eps_molex - out.eps_sequential;
  out.strict = out.strict_gap > 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Instance generators for randomized checks.

struct EnsembleInstance {
  std::vector<Matrix> bases;  // D×C
  std::vector<double> coeffs;
  std::vector<double> x;
  int y = 0;
  double epsilon = 0.0;
};

// Random base models that all satisfy condition 1 at ε and are pairwise
// non-colinear. Returns false when the draw fails the checks.
inline bool sample_ensemble_instance(Rng& rng, EnsembleInstance& inst, int dim = 3, int classes = 3,
                                     int models = 3) {
  inst = {};
  inst.y = static_cast<int>(rng.uniform_int(classes));
  inst.x.resize(dim);
  for (double& v : inst.x) v = rng.gaussian();
  double min_radius = std::numeric_limits<double>::infinity();
  for (int j = 0; j < models; ++j) {
    Matrix w = gaussian_matrix(dim, classes, 1.0, rng);
    const Certificate c = certify_single(w, inst.x, inst.y);
    if (!c.correct || !(c.eps_star > 0.0) || !std::isfinite(c.eps_star)) return false;
    min_radius = std::min(min_radius, c.eps_star);
    inst.bases.push_back(std::move(w));
    inst.coeffs.push_back(rng.uniform(0.1, 1.0));
  }
  inst.epsilon = min_radius * rng.uniform(0.5, 1.0);
  const Certificate e = certify_ensemble(inst.bases, inst.coeffs, inst.x, inst.y, inst.epsilon);
  return e.theorem_applicable;
}

struct StackInstance {
  LinearStack stack;
  Matrix head;
  std::vector<double> x;
  int y = 0;
};

// Random near-identity stacks with an identity head; kept only when every
// unrolled base model satisfies condition 1 at the sequential radius and the
// sensitivity vectors are pairwise non-colinear.
inline bool sample_stack_instance(Rng& rng, StackInstance& inst, int dim = 3) {
  inst = {};
  const int layers = 1 + static_cast<int>(rng.uniform_int(2));
  inst.stack.alpha = rng.uniform(0.5, 0.99);
  for (int t = 0; t < layers; ++t) {
    Matrix w = Matrix::identity(dim);
    add_inplace(w, gaussian_matrix(dim, dim, 0.3, rng));
    inst.stack.w.push_back(std::move(w));
    inst.stack.route.push_back(static_cast<int>(rng.uniform_int(layers)));
  }
  inst.head = Matrix::identity(dim);
  inst.y = static_cast<int>(rng.uniform_int(dim));
  inst.x.assign(dim, 0.0);
  for (double& v : inst.x) v = 0.3 * rng.gaussian();
  inst.x[inst.y] += 2.0;
  const auto r = molex_vs_sequential(inst.stack, inst.head, inst.x, inst.y);
  return r.applicable && r.eps_sequential > 0.0;
}

}  // namespace molex

// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer-expert routing: gate scores, Top-K masking, softmax gate weights,
// batch aggregation, the switch-style balancing loss and selection counters.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "molex/backbone.hpp"
#include "molex/numerics.hpp"
#include "molex/rng.hpp"

namespace molex {

enum class GateKind { kLinear, kCosine };
enum class BatchAgg { kMode, kMean, kPerToken };
enum class AlphaMode { kFixed, kLearned };
enum class GradMode { kOneHot, kProbWeighted };

struct GateConfig {
  GateKind kind = GateKind::kLinear;
  int proj_dim = 8;
  double temperature = 0.5;
  bool sigmoid_scores = false;
  bool shared = true;
  BatchAgg batch_agg = BatchAgg::kMode;
  // Aggregate mode/mean decisions over the whole minibatch instead of per sequence.
  bool whole_batch = false;
  int top_k = 1;
  AlphaMode alpha_mode = AlphaMode::kFixed;
  double alpha = 0.95;
  double load_balance = 0.0;
  GradMode grad_mode = GradMode::kOneHot;
  double init_std = 0.02;

  void validate(int num_layers) const {
    if (top_k < 1 || top_k > num_layers) {
      throw ConfigError("molex.top_k must lie in [1, " + std::to_string(num_layers) + "]");
    }
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("molex.alpha must lie in [0, 1]");
    if (load_balance < 0.0) throw ConfigError("molex.load_balance must be >= 0");
    if (kind == GateKind::kCosine) {
      if (proj_dim < 1) throw ConfigError("molex.proj_dim must be >= 1");
      if (!(temperature > 0.0)) throw ConfigError("molex.temperature must be > 0");
    }
  }
};

struct Router {
  GateKind kind = GateKind::kLinear;
  double temperature = 1.0;
  Matrix weight;   // linear: T × D
  Matrix bias;     // linear: 1 × T
  Matrix proj;     // cosine: p × D
  Matrix experts;  // cosine: T × p
  // Learned mixing weight α = sigmoid(alpha_logit).
  double alpha_logit = 0.0;

  int num_experts() const {
    return static_cast<int>(kind == GateKind::kLinear ? weight.rows() : experts.rows());
  }
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline Router init_router(const GateConfig& cfg, int num_layers, int dim, Rng& rng) {
  Router r;
  r.kind = cfg.kind;
  r.temperature = cfg.temperature;
  if (cfg.kind == GateKind::kLinear) {
    r.weight = gaussian_matrix(num_layers, dim, cfg.init_std, rng);
    r.bias = Matrix(1, num_layers);
  } else {
    r.proj = gaussian_matrix(cfg.proj_dim, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
    r.experts = gaussian_matrix(num_layers, cfg.proj_dim, 1.0, rng);
  }
  r.alpha_logit = logit(std::clamp(cfg.alpha, 1e-6, 1.0 - 1e-6));
  return r;
}

inline double router_alpha(const Router& r, const GateConfig& cfg) {
  return cfg.alpha_mode == AlphaMode::kFixed ? cfg.alpha : sigmoid(r.alpha_logit);
}

// Gate parameters plus the mixing weight α, which is counted in either mode.
inline std::size_t router_param_count(const Router& r) {
  return r.weight.size() + r.bias.size() + r.proj.size() + r.experts.size() + 1;
}

struct GateForward {
  Matrix raw;     // rows × T before the optional sigmoid
  Matrix scores;  // rows × T
  // cosine only
  Matrix projected;                // rows × p
  std::vector<double> proj_norms;  // per row
  std::vector<double> expert_norms;
};

inline constexpr double kNormFloor = 1e-12;

inline GateForward gate_forward(const Matrix& z, const Router& r, bool sigmoid_scores) {
  GateForward g;
  if (r.kind == GateKind::kLinear) {
    if (z.cols() != r.weight.cols()) throw ShapeError("gate_scores: activation width mismatch");
    g.raw = matmul_bt(z, r.weight);
    for (std::size_t n = 0; n < g.raw.rows(); ++n)
      for (std::size_t j = 0; j < g.raw.cols(); ++j) g.raw(n, j) += r.bias(0, j);
  } else {
    if (z.cols() != r.proj.cols()) throw ShapeError("gate_scores: activation width mismatch");
    g.projected = matmul_bt(z, r.proj);
    const std::size_t t_count = r.experts.rows();
    g.expert_norms.resize(t_count);
    for (std::size_t j = 0; j < t_count; ++j)
      g.expert_norms[j] = std::max(norm2(r.experts.row(j)), kNormFloor);
    g.raw = Matrix(z.rows(), t_count);
    g.proj_norms.resize(z.rows());
    for (std::size_t n = 0; n < z.rows(); ++n) {
      const auto q = g.projected.row(n);
      g.proj_norms[n] = std::max(norm2(q), kNormFloor);
      for (std::size_t j = 0; j < t_count; ++j) {
        const double cosv = dot(q, r.experts.row(j)) / (g.proj_norms[n] * g.expert_norms[j]);
        g.raw(n, j) = cosv / r.temperature;
      }
    }
  }
  g.scores = g.raw;
  if (sigmoid_scores) {
    for (double& v : g.scores.data()) v = sigmoid(v);
  }
  return g;
}

// Per-token affinity scores, N × T.
inline Matrix gate_scores(const Matrix& z, const Router& r, bool sigmoid_scores = false) {
  return gate_forward(z, r, sigmoid_scores).scores;
}

struct RouterGrad {
  Matrix weight, bias, proj, experts;
  double alpha_logit = 0.0;

  static RouterGrad zeros_like(const Router& r) {
    RouterGrad g;
    g.weight = Matrix(r.weight.rows(), r.weight.cols());
    g.bias = Matrix(r.bias.rows(), r.bias.cols());
    g.proj = Matrix(r.proj.rows(), r.proj.cols());
    g.experts = Matrix(r.experts.rows(), r.experts.cols());
    return g;
  }
};

// Backward from dL/dscores. Accumulates parameter gradients, returns dL/dz.
inline Matrix gate_backward(const Matrix& z, const Router& r, const GateForward& g,
                            bool sigmoid_scores, const Matrix& dscores, RouterGrad& grad) {
  Matrix draw = dscores;
  if (sigmoid_scores) {
    for (std::size_t i = 0; i < draw.size(); ++i) draw[i] *= g.scores[i] * (1.0 - g.scores[i]);
  }
  if (r.kind == GateKind::kLinear) {
    add_inplace(grad.weight, matmul_at(draw, z));
    for (std::size_t n = 0; n < draw.rows(); ++n)
      for (std::size_t j = 0; j < draw.cols(); ++j) grad.bias(0, j) += draw(n, j);
    return matmul(draw, r.weight);
  }
  const std::size_t p = r.proj.rows();
  Matrix dq(z.rows(), p);
  for (std::size_t n = 0; n < z.rows(); ++n) {
    const auto q = g.projected.row(n);
    const double qn = g.proj_norms[n];
    for (std::size_t j = 0; j < r.experts.rows(); ++j) {
      const double d = draw(n, j) / r.temperature;
      if (d == 0.0) continue;
      const auto e = r.experts.row(j);
      const double en = g.expert_norms[j];
      const double c = g.raw(n, j) * r.temperature;
      for (std::size_t k = 0; k < p; ++k) {
        dq(n, k) += d * (e[k] / (qn * en) - c * q[k] / (qn * qn));
        grad.experts(j, k) += d * (q[k] / (qn * en) - c * e[k] / (en * en));
      }
    }
  }
  add_inplace(grad.proj, matmul_at(dq, z));
  return matmul(dq, r.proj);
}

// Indices of the K largest scores, descending; ties go to the lower index.
inline std::vector<int> topk_indices(std::span<const double> scores, int k) {
  if (k < 1 || k > static_cast<int>(scores.size())) {
    throw ConfigError("topk: K=" + std::to_string(k) + " outside [1, " +
                      std::to_string(scores.size()) + "]");
  }
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

// Keeps the K largest entries and replaces the rest with -inf.
inline std::vector<double> topk(std::span<const double> scores, int k) {
  for (double v : scores)
    if (!std::isfinite(v)) throw NumericError("topk: non-finite score");
  std::vector<double> out(scores.size(), kNegInf);
  for (int i : topk_indices(scores, k)) out[i] = scores[i];
  return out;
}

inline std::vector<double> gate_weights(std::span<const double> masked) {
  std::vector<double> out(masked.size());
  softmax_row(masked, out);
  return out;
}

inline int argmax_lowest(std::span<const double> v) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(v.size()); ++j)
    if (v[j] > v[best]) best = j;
  return best;
}

// Mean of the per-token softmax probability vectors.
inline std::vector<double> mean_probabilities(const Matrix& per_token_scores) {
  const Matrix probs = row_softmax(per_token_scores);
  const Matrix m = mean_rows(probs);
  return m.data();
}

// Per-token argmax votes, counted per expert.
inline std::vector<double> vote_counts(const Matrix& per_token_scores) {
  std::vector<double> votes(per_token_scores.cols(), 0.0);
  for (std::size_t n = 0; n < per_token_scores.rows(); ++n)
    votes[argmax_lowest(per_token_scores.row(n))] += 1.0;
  return votes;
}

// Collapses N per-token decisions into K experts for the whole group.
inline std::vector<int> aggregate_topk(const Matrix& per_token_scores, BatchAgg agg, int k) {
  if (per_token_scores.rows() == 0) throw InputError("aggregate_batch: empty group");
  if (agg == BatchAgg::kMode) return topk_indices(vote_counts(per_token_scores), k);
  return topk_indices(mean_probabilities(per_token_scores), k);
}

inline int aggregate_batch(const Matrix& per_token_scores, BatchAgg agg) {
  return aggregate_topk(per_token_scores, agg, 1).front();
}

// ---------------------------------------------------------------------------

// counts[t][j]: routing decisions at sequential layer t that selected expert j.
struct SelectionStats {
  std::vector<std::vector<std::uint64_t>> counts;
  std::vector<std::uint64_t> total_routed;

  SelectionStats() = default;
  explicit SelectionStats(int num_layers)
      : counts(num_layers, std::vector<std::uint64_t>(num_layers, 0)), total_routed(num_layers, 0) {}

  int num_layers() const { return static_cast<int>(counts.size()); }

  void record(int layer, int expert, std::uint64_t n = 1) {
    counts.at(layer).at(expert) += n;
    total_routed.at(layer) += n;
  }

  void merge(const SelectionStats& o) {
    for (int t = 0; t < num_layers(); ++t) {
      for (int j = 0; j < num_layers(); ++j) counts[t][j] += o.counts[t][j];
      total_routed[t] += o.total_routed[t];
    }
  }
};

// Apportions one row of counts into millionths that sum to exactly 10^6
// (largest remainder, ties to the lower index).
inline std::vector<std::int64_t> apportion_millionths(const std::vector<std::uint64_t>& row) {
  std::vector<std::int64_t> units(row.size(), 0);
  std::uint64_t total = 0;
  for (auto c : row) total += c;
  if (total == 0) return units;
  constexpr std::uint64_t kScale = 1000000;
  std::vector<std::pair<std::uint64_t, int>> rema;
  std::int64_t assigned = 0;
  for (std::size_t j = 0; j < row.size(); ++j) {
    const unsigned __int128 num = static_cast<unsigned __int128>(row[j]) * kScale;
    units[j] = static_cast<std::int64_t>(num / total);
    rema.emplace_back(static_cast<std::uint64_t>(num % total), static_cast<int>(j));
    assigned += units[j];
  }
  std::stable_sort(rema.begin(), rema.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::int64_t i = 0; assigned + i < static_cast<std::int64_t>(kScale); ++i)
    units[rema[static_cast<std::size_t>(i)].second] += 1;
  return units;
}

inline std::string csv_header(int num_experts) {
  std::string s = "layer";
  for (int j = 0; j < num_experts; ++j) s += ",expert_" + std::to_string(j);
  return s + "\n";
}

// Row-normalized heat map, 6 decimals per fraction; printed rows sum to 1.
inline std::string heatmap_csv(const std::vector<std::vector<std::uint64_t>>& counts) {
  const int t_count = static_cast<int>(counts.size());
  const int e_count = t_count == 0 ? 0 : static_cast<int>(counts.front().size());
  std::string out = csv_header(e_count);
  for (int t = 0; t < t_count; ++t) {
    out += std::to_string(t);
    for (auto u : apportion_millionths(counts[t])) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), ",%lld.%06lld", static_cast<long long>(u / 1000000),
                    static_cast<long long>(u % 1000000));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline std::string export_selection_stats(const SelectionStats& stats) {
  return heatmap_csv(stats.counts);
}

// Raw counts in the same layout; this is what fine-tuning writes as its
// selection log and what the heatmap command consumes.
inline std::string selection_counts_csv(const SelectionStats& stats) {
  std::string out = csv_header(stats.num_layers());
  for (int t = 0; t < stats.num_layers(); ++t) {
    out += std::to_string(t);
    for (auto c : stats.counts[t]) out += "," + std::to_string(c);
    out += "\n";
  }
  return out;
}

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Parses a counts CSV. Non-integer cells are accepted if they are
// non-negative numbers; rows are then normalized by the caller.
inline std::vector<std::vector<double>> parse_selection_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw CsvError("empty selection CSV");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 2 || header[0] != "layer") throw CsvError("bad header: '" + line + "'");
  for (std::size_t j = 1; j < header.size(); ++j) {
    if (header[j] != "expert_" + std::to_string(j - 1)) throw CsvError("bad header column '" + header[j] + "'");
  }
  std::vector<std::vector<double>> rows;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) {
      throw CsvError("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                     " cells");
    }
    if (cells[0] != std::to_string(rows.size())) {
      throw CsvError("line " + std::to_string(lineno) + ": expected layer " + std::to_string(rows.size()));
    }
    std::vector<double> row;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cells[j], &used);
      } catch (const std::logic_error&) {
        used = 0;
      }
      if (used != cells[j].size() || !std::isfinite(v) || v < 0.0) {
        throw CsvError("line " + std::to_string(lineno) + ": bad cell '" + cells[j] + "'");
      }
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------

// coeff · T · Σ_j f_j · P_j with f_j the fraction of decisions choosing j and
// P_j the mean probability mass on j.
inline double load_balance_loss(const Matrix& per_token_probs, std::span<const int> selections,
                                double coeff) {
  if (coeff == 0.0) return 0.0;
  const std::size_t t_count = per_token_probs.cols();
  if (selections.empty() || per_token_probs.rows() == 0) return 0.0;
  std::vector<double> f(t_count, 0.0);
  for (int s : selections) f.at(static_cast<std::size_t>(s)) += 1.0;
  const Matrix p = mean_rows(per_token_probs);
  double acc = 0.0;
  for (std::size_t j = 0; j < t_count; ++j)
    acc += f[j] / static_cast<double>(selections.size()) * p(0, j);
  return coeff * static_cast<double>(t_count) * acc;
}

}  // namespace molex

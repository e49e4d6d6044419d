// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-layer-experts forward and backward over a batch of sequences.
//
// Layer t computes z_{t+1} = z_t + α·u_t(z_t) + (1−α)·v_t(z_t) where v_t mixes
// the gate-selected layer experts with Top-K softmax weights. When a row's
// only selected expert is t itself, or α == 1, the row is computed as the
// plain residual z_t + u_t(z_t) so that these cases match the baseline
// bitwise.
//
// Gradients are hand-derived. Routing decisions are discrete; a RoutingPlan
// captured from one forward pass can be replayed so that perturbed forwards
// keep the same experts (and, in prob_weighted mode, the same detached
// normalizer), which is what the finite-difference checks rely on.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "molex/backbone.hpp"
#include "molex/numerics.hpp"
#include "molex/parallel.hpp"
#include "molex/routing.hpp"

namespace molex {

// A routing decision shared by a group of tokens: one token (per_token), one
// sequence (mode/mean) or the whole batch.
struct Decision {
  std::vector<int> experts;     // K selected, best first
  std::vector<double> weights;  // mixing weights, aligned with experts
  std::vector<double> q;        // probability vector the weights derive from
  double norm = 1.0;            // Σ_selected q; detached in prob_weighted mode
  int seq_begin = 0;
  int seq_end = 0;
  int row = -1;  // -1: every row of the member sequences
  std::size_t member_tokens = 0;
};

struct LayerRouting {
  std::vector<Decision> decisions;
  std::vector<std::vector<int>> decision_of;  // [seq][row] -> decision index
};

struct RoutingPlan {
  std::vector<LayerRouting> layers;
};

// One fine-tunable model: frozen backbone plus trainable pieces.
struct ModelRef {
  const Backbone* backbone = nullptr;
  const std::vector<LayerAdapters>* adapters = nullptr;  // null or empty: none
  const Head* head = nullptr;
  const std::vector<Router>* routers = nullptr;  // null or empty: MoLEx disabled
  const GateConfig* gate = nullptr;

  bool molex_enabled() const { return routers != nullptr && !routers->empty() && gate != nullptr; }
  const Router& router_for(int t) const {
    return (*routers)[gate->shared ? 0 : static_cast<std::size_t>(t)];
  }
};

struct ForwardOptions {
  const RoutingPlan* replay = nullptr;
  SelectionStats* stats = nullptr;
  PairExecutor* executor = nullptr;  // evaluate u_t and u_{i_t} concurrently
  bool keep_trace = true;            // needed for backward
};

struct SeqLayerTrace {
  Matrix input;
  ExpertCache self;
  GateForward gate;
  Matrix probs;
  std::vector<int> other_experts;               // distinct experts != t used by some row
  std::vector<std::vector<int>> other_rows;     // rows routed to each of them
  std::vector<ExpertCache> other_caches;
  Matrix v;                                     // mixed selected-expert output
  std::vector<char> self_only;                  // row computed as z + u_t
};

struct BatchTrace {
  std::vector<std::vector<SeqLayerTrace>> layers;  // [t][s]
  std::vector<LayerRouting> routing;
  std::vector<std::vector<double>> selection_fraction;  // [t][j], for balancing
  std::vector<double> alphas;                           // α per layer
  std::vector<Matrix> features;                         // z_T per sequence
  std::vector<Matrix> logits;                           // 1 × C per sequence
  double balance_loss = 0.0;

  RoutingPlan plan() const { return RoutingPlan{routing}; }
};

namespace detail {

inline std::vector<double> mean_prob(const std::vector<Matrix>& probs, int sb, int se, std::size_t& tokens) {
  const std::size_t t_count = probs[sb].cols();
  std::vector<double> q(t_count, 0.0);
  tokens = 0;
  for (int s = sb; s < se; ++s) {
    for (std::size_t n = 0; n < probs[s].rows(); ++n) {
      for (std::size_t j = 0; j < t_count; ++j) q[j] += probs[s](n, j);
      ++tokens;
    }
  }
  for (double& v : q) v /= static_cast<double>(tokens);
  return q;
}

inline void fill_weights(Decision& d, const GateConfig& gate, const Decision* frozen) {
  double sum = 0.0;
  for (int j : d.experts) sum += d.q[j];
  if (gate.grad_mode == GradMode::kProbWeighted) {
    d.norm = frozen ? frozen->norm : sum;
  } else {
    d.norm = sum;
  }
  d.weights.resize(d.experts.size());
  if (d.experts.size() == 1 && gate.grad_mode == GradMode::kOneHot) {
    d.weights[0] = 1.0;
    return;
  }
  for (std::size_t k = 0; k < d.experts.size(); ++k) d.weights[k] = d.q[d.experts[k]] / d.norm;
}

inline Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

inline std::vector<EffectiveLayer> effective_layers(const ModelRef& m) {
  std::vector<EffectiveLayer> eff;
  const auto& bb = *m.backbone;
  const bool has_adapters = m.adapters != nullptr && !m.adapters->empty();
  for (std::size_t t = 0; t < bb.layers.size(); ++t)
    eff.push_back(effective_layer(bb.layers[t], has_adapters ? &(*m.adapters)[t] : nullptr));
  return eff;
}

// Builds the routing decisions of one layer from per-sequence gate outputs.
inline LayerRouting decide_layer(const std::vector<GateForward>& gates, const std::vector<Matrix>& probs,
                                 const GateConfig& gate, const LayerRouting* frozen) {
  LayerRouting lr;
  const int seqs = static_cast<int>(gates.size());
  lr.decision_of.resize(seqs);
  for (int s = 0; s < seqs; ++s) lr.decision_of[s].assign(gates[s].scores.rows(), -1);

  auto finish = [&](Decision d) {
    const Decision* fz = frozen ? &frozen->decisions.at(lr.decisions.size()) : nullptr;
    if (fz) {
      if (fz->seq_begin != d.seq_begin || fz->seq_end != d.seq_end || fz->row != d.row) {
        throw InputError("routing replay: batch layout differs from the captured plan");
      }
      d.experts = fz->experts;
    }
    detail::fill_weights(d, gate, fz);
    const int idx = static_cast<int>(lr.decisions.size());
    for (int s = d.seq_begin; s < d.seq_end; ++s) {
      if (d.row >= 0) {
        lr.decision_of[s][d.row] = idx;
      } else {
        std::fill(lr.decision_of[s].begin(), lr.decision_of[s].end(), idx);
      }
    }
    lr.decisions.push_back(std::move(d));
  };

  if (gate.batch_agg == BatchAgg::kPerToken) {
    for (int s = 0; s < seqs; ++s) {
      for (std::size_t n = 0; n < gates[s].scores.rows(); ++n) {
        Decision d;
        d.seq_begin = s;
        d.seq_end = s + 1;
        d.row = static_cast<int>(n);
        d.member_tokens = 1;
        const auto pr = probs[s].row(n);
        d.q.assign(pr.begin(), pr.end());
        if (!frozen) d.experts = topk_indices(gates[s].scores.row(n), gate.top_k);
        finish(std::move(d));
      }
    }
    return lr;
  }

  auto group = [&](int sb, int se) {
    Decision d;
    d.seq_begin = sb;
    d.seq_end = se;
    d.q = detail::mean_prob(probs, sb, se, d.member_tokens);
    if (!frozen) {
      if (gate.batch_agg == BatchAgg::kMode) {
        std::vector<double> votes(d.q.size(), 0.0);
        for (int s = sb; s < se; ++s) {
          const auto v = vote_counts(gates[s].scores);
          for (std::size_t j = 0; j < votes.size(); ++j) votes[j] += v[j];
        }
        d.experts = topk_indices(votes, gate.top_k);
      } else {
        d.experts = topk_indices(d.q, gate.top_k);
      }
    }
    finish(std::move(d));
  };
  if (gate.whole_batch) {
    group(0, seqs);
  } else {
    for (int s = 0; s < seqs; ++s) group(s, s + 1);
  }
  return lr;
}

// Applies layer t to every sequence of the batch. Returns z_{t+1}.
inline std::vector<Matrix> layer_step(const ModelRef& m, const std::vector<EffectiveLayer>& eff, int t,
                                      const std::vector<Matrix>& z, const ForwardOptions& opt,
                                      BatchTrace* trace) {
  const auto& cfg = m.backbone->config;
  const int seqs = static_cast<int>(z.size());
  std::vector<Matrix> next(seqs);
  std::vector<SeqLayerTrace> local(seqs);

  if (!m.molex_enabled()) {
    for (int s = 0; s < seqs; ++s) {
      auto& tr = local[s];
      tr.self = expert_forward(eff[t], cfg.block, cfg.activation, z[s]);
      next[s] = z[s];
      add_inplace(next[s], tr.self.out);
      tr.self_only.assign(z[s].rows(), 1);
      if (trace) tr.input = z[s];
    }
    if (trace) trace->layers.push_back(std::move(local));
    return next;
  }

  const GateConfig& gate = *m.gate;
  const Router& router = m.router_for(t);
  const double alpha = router_alpha(router, gate);

  std::vector<GateForward> gates(seqs);
  std::vector<Matrix> probs(seqs);
  for (int s = 0; s < seqs; ++s) {
    gates[s] = gate_forward(z[s], router, gate.sigmoid_scores);
    probs[s] = row_softmax(gates[s].scores);
  }
  const LayerRouting* frozen = opt.replay ? &opt.replay->layers.at(t) : nullptr;
  LayerRouting routing = decide_layer(gates, probs, gate, frozen);

  const int t_count = cfg.num_layers;
  std::vector<double> frac(t_count, 0.0);
  double selections = 0.0;
  for (const auto& d : routing.decisions) {
    for (int j : d.experts) {
      frac[j] += 1.0;
      selections += 1.0;
      if (opt.stats) opt.stats->record(t, j);
    }
  }
  for (double& f : frac) f /= selections;

  for (int s = 0; s < seqs; ++s) {
    auto& tr = local[s];
    const std::size_t rows = z[s].rows();
    tr.self_only.assign(rows, 0);
    for (std::size_t n = 0; n < rows; ++n) {
      const auto& d = routing.decisions[routing.decision_of[s][n]];
      tr.self_only[n] = alpha == 1.0 || (d.experts.size() == 1 && d.experts[0] == t);
      if (tr.self_only[n]) continue;
      for (int j : d.experts) {
        if (j == t) continue;
        auto it = std::find(tr.other_experts.begin(), tr.other_experts.end(), j);
        if (it == tr.other_experts.end()) {
          tr.other_experts.push_back(j);
          tr.other_rows.emplace_back();
          it = tr.other_experts.end() - 1;
        }
        tr.other_rows[it - tr.other_experts.begin()].push_back(static_cast<int>(n));
      }
    }
    tr.other_caches.resize(tr.other_experts.size());
  }

  // u_t on the caller, the selected experts on the helper; each writes only
  // its own caches.
  auto eval_self = [&] {
    for (int s = 0; s < seqs; ++s) local[s].self = expert_forward(eff[t], cfg.block, cfg.activation, z[s]);
  };
  bool any_other = false;
  for (const auto& tr : local) any_other = any_other || !tr.other_experts.empty();
  auto eval_others = [&] {
    for (int s = 0; s < seqs; ++s) {
      auto& tr = local[s];
      for (std::size_t e = 0; e < tr.other_experts.size(); ++e) {
        tr.other_caches[e] = expert_forward(eff[tr.other_experts[e]], cfg.block, cfg.activation,
                                            detail::gather_rows(z[s], tr.other_rows[e]));
      }
    }
  };
  if (opt.executor != nullptr && any_other) {
    opt.executor->run_pair(eval_others, eval_self);
  } else {
    eval_self();
    eval_others();
  }

  for (int s = 0; s < seqs; ++s) {
    auto& tr = local[s];
    const std::size_t rows = z[s].rows();
    const std::size_t dim = z[s].cols();
    tr.v = Matrix(rows, dim);
    for (std::size_t e = 0; e < tr.other_experts.size(); ++e) {
      const int j = tr.other_experts[e];
      const auto& rws = tr.other_rows[e];
      for (std::size_t i = 0; i < rws.size(); ++i) {
        const auto& d = routing.decisions[routing.decision_of[s][rws[i]]];
        const std::size_t k = std::find(d.experts.begin(), d.experts.end(), j) - d.experts.begin();
        const double w = d.weights[k];
        auto vr = tr.v.row(rws[i]);
        const auto ur = tr.other_caches[e].out.row(i);
        for (std::size_t c = 0; c < dim; ++c) vr[c] += w * ur[c];
      }
    }
    // Top-K sets that contain t itself reuse u_t.
    for (std::size_t n = 0; n < rows; ++n) {
      if (tr.self_only[n]) continue;
      const auto& d = routing.decisions[routing.decision_of[s][n]];
      for (std::size_t k = 0; k < d.experts.size(); ++k) {
        if (d.experts[k] != t) continue;
        auto vr = tr.v.row(n);
        const auto ur = tr.self.out.row(n);
        for (std::size_t c = 0; c < dim; ++c) vr[c] += d.weights[k] * ur[c];
      }
    }

    next[s] = Matrix(rows, dim);
    for (std::size_t n = 0; n < rows; ++n) {
      const auto zr = z[s].row(n);
      const auto ur = tr.self.out.row(n);
      const auto vr = tr.v.row(n);
      auto out = next[s].row(n);
      if (tr.self_only[n]) {
        for (std::size_t c = 0; c < dim; ++c) out[c] = zr[c] + ur[c];
      } else {
        for (std::size_t c = 0; c < dim; ++c) out[c] = zr[c] + alpha * ur[c] + (1.0 - alpha) * vr[c];
      }
    }
    if (trace) {
      tr.input = z[s];
      tr.gate = std::move(gates[s]);
      tr.probs = std::move(probs[s]);
    }
  }

  if (trace) {
    trace->layers.push_back(std::move(local));
    trace->routing.push_back(std::move(routing));
    trace->selection_fraction.push_back(std::move(frac));
    trace->alphas.push_back(alpha);
  }
  return next;
}

inline double balance_loss_from_trace(const BatchTrace& tr, const GateConfig& gate) {
  if (gate.load_balance == 0.0 || tr.selection_fraction.empty()) return 0.0;
  double total = 0.0;
  const std::size_t layers = tr.selection_fraction.size();
  for (std::size_t t = 0; t < layers; ++t) {
    const auto& f = tr.selection_fraction[t];
    std::vector<double> p(f.size(), 0.0);
    std::size_t tokens = 0;
    for (const auto& st : tr.layers[t]) {
      for (std::size_t n = 0; n < st.probs.rows(); ++n) {
        for (std::size_t j = 0; j < f.size(); ++j) p[j] += st.probs(n, j);
        ++tokens;
      }
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) acc += f[j] * p[j] / static_cast<double>(tokens);
    total += gate.load_balance * static_cast<double>(f.size()) * acc;
  }
  return total / static_cast<double>(layers);
}

inline BatchTrace forward_batch(const ModelRef& m, const std::vector<Matrix>& z0, const ForwardOptions& opt = {}) {
  const auto eff = effective_layers(m);
  BatchTrace tr;
  std::vector<Matrix> z = z0;
  for (int t = 0; t < m.backbone->num_layers(); ++t) {
    z = layer_step(m, eff, t, z, opt, opt.keep_trace ? &tr : nullptr);
  }
  tr.features = std::move(z);
  for (const auto& f : tr.features) tr.logits.push_back(head_logits(f, *m.head));
  if (m.molex_enabled() && opt.keep_trace) tr.balance_loss = balance_loss_from_trace(tr, *m.gate);
  return tr;
}

// Convenience for a single sequence: z_T only.
inline Matrix forward_features(const ModelRef& m, const Matrix& z0, const ForwardOptions& opt = {}) {
  ForwardOptions o = opt;
  o.keep_trace = false;
  return forward_batch(m, {z0}, o).features.front();
}

// Single MoLEx layer on one sequence. `replay`, when given, fixes the
// decision for this layer.
inline Matrix molex_forward(const Matrix& z, int t, const ModelRef& m, SelectionStats* stats = nullptr,
                            const LayerRouting* replay = nullptr) {
  if (t < 0 || t >= m.backbone->num_layers()) throw InputError("molex_forward: layer index out of range");
  const auto eff = effective_layers(m);
  ForwardOptions opt;
  opt.stats = stats;
  RoutingPlan plan;
  if (replay) {
    plan.layers.resize(static_cast<std::size_t>(t) + 1);
    plan.layers[t] = *replay;
    opt.replay = &plan;
  }
  return layer_step(m, eff, t, {z}, opt, nullptr).front();
}

// Plan that forces expert `route[t]` at every layer for one sequence-level
// decision per sequence.
inline RoutingPlan fixed_route_plan(std::span<const int> route, int num_seqs, std::size_t rows_per_seq) {
  RoutingPlan plan;
  for (int e : route) {
    LayerRouting lr;
    for (int s = 0; s < num_seqs; ++s) {
      Decision d;
      d.experts = {e};
      d.seq_begin = s;
      d.seq_end = s + 1;
      d.row = -1;
      d.member_tokens = rows_per_seq;
      lr.decisions.push_back(d);
      lr.decision_of.push_back(std::vector<int>(rows_per_seq, s));
    }
    plan.layers.push_back(std::move(lr));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Backward

struct BatchGrads {
  std::vector<EffectiveLayer> layers;  // dL/dW_eff per layer
  std::vector<RouterGrad> routers;
  Head head;
  std::vector<Matrix> dz0;  // per sequence
};

inline double cross_entropy(const Matrix& logits, int label, Matrix* dlogits) {
  Matrix p = row_softmax(logits);
  const double loss = -std::log(std::max(p(0, label), 1e-300));
  if (dlogits) {
    p(0, label) -= 1.0;
    *dlogits = std::move(p);
  }
  return loss;
}

// Mean cross-entropy over the batch plus the balancing loss; fills grads.
inline double backward_batch(const ModelRef& m, const BatchTrace& tr, std::span<const int> labels,
                             BatchGrads& g) {
  const auto& bb = *m.backbone;
  const auto& cfg = bb.config;
  const int seqs = static_cast<int>(tr.features.size());
  const int layers = bb.num_layers();
  const auto eff = effective_layers(m);

  g.layers.clear();
  for (const auto& e : eff) g.layers.push_back({Matrix(e.w1.rows(), e.w1.cols()), Matrix(e.w2.rows(), e.w2.cols())});
  g.routers.clear();
  if (m.molex_enabled())
    for (const auto& r : *m.routers) g.routers.push_back(RouterGrad::zeros_like(r));
  g.head = {Matrix(m.head->weight.rows(), m.head->weight.cols()), Matrix(1, m.head->bias.cols())};

  double loss = 0.0;
  std::vector<Matrix> dz(seqs);
  const double inv_b = 1.0 / static_cast<double>(seqs);
  for (int s = 0; s < seqs; ++s) {
    Matrix dlog;
    loss += inv_b * cross_entropy(tr.logits[s], labels[s], &dlog);
    for (double& v : dlog.data()) v *= inv_b;
    const Matrix pooled = mean_rows(tr.features[s]);
    add_inplace(g.head.weight, matmul_at(dlog, pooled));
    add_inplace(g.head.bias, dlog);
    const Matrix dpooled = matmul(dlog, m.head->weight);
    const std::size_t rows = tr.features[s].rows();
    dz[s] = Matrix(rows, pooled.cols());
    for (std::size_t n = 0; n < rows; ++n)
      for (std::size_t c = 0; c < pooled.cols(); ++c) dz[s](n, c) = dpooled(0, c) / static_cast<double>(rows);
  }

  const bool molex = m.molex_enabled();
  if (molex) loss += tr.balance_loss;

  for (int t = layers - 1; t >= 0; --t) {
    const auto& lt = tr.layers[t];
    std::vector<Matrix> dz_prev(seqs);
    if (!molex) {
      for (int s = 0; s < seqs; ++s) {
        dz_prev[s] = dz[s];
        add_inplace(dz_prev[s], expert_backward(lt[s].self, dz[s], eff[t], cfg.block, cfg.activation,
                                                g.layers[t].w1, g.layers[t].w2));
      }
      dz = std::move(dz_prev);
      continue;
    }

    const GateConfig& gate = *m.gate;
    const int ridx = gate.shared ? 0 : t;
    const Router& router = (*m.routers)[ridx];
    const double alpha = tr.alphas[t];
    const auto& routing = tr.routing[t];
    std::vector<std::vector<double>> dweights(routing.decisions.size());
    for (std::size_t d = 0; d < routing.decisions.size(); ++d)
      dweights[d].assign(routing.decisions[d].experts.size(), 0.0);
    double dalpha = 0.0;

    for (int s = 0; s < seqs; ++s) {
      const auto& st = lt[s];
      const std::size_t rows = st.input.rows();
      const std::size_t dim = st.input.cols();
      Matrix du_self(rows, dim);
      Matrix dv(rows, dim);
      for (std::size_t n = 0; n < rows; ++n) {
        const auto g_out = dz[s].row(n);
        auto ds = du_self.row(n);
        if (st.self_only[n]) {
          for (std::size_t c = 0; c < dim; ++c) ds[c] = g_out[c];
          continue;
        }
        auto dvr = dv.row(n);
        const auto ur = st.self.out.row(n);
        const auto vr = st.v.row(n);
        for (std::size_t c = 0; c < dim; ++c) {
          ds[c] = alpha * g_out[c];
          dvr[c] = (1.0 - alpha) * g_out[c];
          dalpha += g_out[c] * (ur[c] - vr[c]);
        }
        // Selected experts equal to t feed back into u_t.
        const int di = routing.decision_of[s][n];
        const auto& d = routing.decisions[di];
        for (std::size_t k = 0; k < d.experts.size(); ++k) {
          if (d.experts[k] != t) continue;
          for (std::size_t c = 0; c < dim; ++c) ds[c] += d.weights[k] * dvr[c];
          dweights[di][k] += dot(dvr, ur);
        }
      }
      dz_prev[s] = dz[s];
      for (std::size_t e = 0; e < st.other_experts.size(); ++e) {
        const int j = st.other_experts[e];
        const auto& rws = st.other_rows[e];
        Matrix dout(rws.size(), dim);
        for (std::size_t i = 0; i < rws.size(); ++i) {
          const int di = routing.decision_of[s][rws[i]];
          const auto& d = routing.decisions[di];
          const std::size_t k = std::find(d.experts.begin(), d.experts.end(), j) - d.experts.begin();
          const auto dvr = dv.row(rws[i]);
          auto o = dout.row(i);
          for (std::size_t c = 0; c < dim; ++c) o[c] = d.weights[k] * dvr[c];
          dweights[di][k] += dot(dvr, st.other_caches[e].out.row(i));
        }
        const Matrix dzin = expert_backward(st.other_caches[e], dout, eff[j], cfg.block, cfg.activation,
                                            g.layers[j].w1, g.layers[j].w2);
        for (std::size_t i = 0; i < rws.size(); ++i) {
          auto dst = dz_prev[s].row(rws[i]);
          const auto src = dzin.row(i);
          for (std::size_t c = 0; c < dim; ++c) dst[c] += src[c];
        }
      }
      add_inplace(dz_prev[s], expert_backward(st.self, du_self, eff[t], cfg.block, cfg.activation,
                                              g.layers[t].w1, g.layers[t].w2));
    }

    if (gate.alpha_mode == AlphaMode::kLearned) g.routers[ridx].alpha_logit += dalpha * alpha * (1.0 - alpha);

    // Mixing weights -> decision probability vector -> token probabilities.
    std::vector<Matrix> dprobs(seqs);
    bool any = false;
    for (int s = 0; s < seqs; ++s) dprobs[s] = Matrix(lt[s].probs.rows(), lt[s].probs.cols());
    for (std::size_t di = 0; di < routing.decisions.size(); ++di) {
      const auto& d = routing.decisions[di];
      const bool constant = d.experts.size() == 1 && gate.grad_mode == GradMode::kOneHot;
      if (constant) continue;
      std::vector<double> dq(d.q.size(), 0.0);
      if (gate.grad_mode == GradMode::kProbWeighted) {
        for (std::size_t k = 0; k < d.experts.size(); ++k) dq[d.experts[k]] += dweights[di][k] / d.norm;
      } else {
        double wsum = 0.0;
        for (std::size_t k = 0; k < d.experts.size(); ++k) wsum += dweights[di][k] * d.q[d.experts[k]];
        for (std::size_t k = 0; k < d.experts.size(); ++k)
          dq[d.experts[k]] += dweights[di][k] / d.norm - wsum / (d.norm * d.norm);
      }
      const double share = 1.0 / static_cast<double>(d.member_tokens);
      for (int s = d.seq_begin; s < d.seq_end; ++s) {
        const std::size_t r0 = d.row < 0 ? 0 : static_cast<std::size_t>(d.row);
        const std::size_t r1 = d.row < 0 ? dprobs[s].rows() : r0 + 1;
        for (std::size_t n = r0; n < r1; ++n)
          for (std::size_t j = 0; j < dq.size(); ++j) dprobs[s](n, j) += dq[j] * share;
      }
      any = true;
    }
    if (gate.load_balance != 0.0) {
      std::size_t tokens = 0;
      for (int s = 0; s < seqs; ++s) tokens += lt[s].probs.rows();
      const auto& f = tr.selection_fraction[t];
      const double c = gate.load_balance * static_cast<double>(f.size()) /
                       (static_cast<double>(layers) * static_cast<double>(tokens));
      for (int s = 0; s < seqs; ++s)
        for (std::size_t n = 0; n < dprobs[s].rows(); ++n)
          for (std::size_t j = 0; j < f.size(); ++j) dprobs[s](n, j) += c * f[j];
      any = true;
    }
    if (any) {
      for (int s = 0; s < seqs; ++s) {
        const auto& st = lt[s];
        Matrix dscores(st.probs.rows(), st.probs.cols());
        for (std::size_t n = 0; n < st.probs.rows(); ++n) {
          const auto p = st.probs.row(n);
          const auto dp = dprobs[s].row(n);
          const double inner = dot(p, dp);
          for (std::size_t j = 0; j < p.size(); ++j) dscores(n, j) = p[j] * (dp[j] - inner);
        }
        add_inplace(dz_prev[s], gate_backward(st.input, router, st.gate, gate.sigmoid_scores, dscores,
                                              g.routers[ridx]));
      }
    }
    dz = std::move(dz_prev);
  }
  g.dz0 = std::move(dz);
  return loss;
}

// dL/dA and dL/dB from dL/dW_eff for W_eff = W + scale·B·A.
inline void adapter_grads(const LoraAdapter& ad, const Matrix& dw, Matrix& da, Matrix& db) {
  da = scaled(matmul_at(ad.b, dw), ad.scale);   // Bᵀ·dW
  db = scaled(matmul_bt(dw, ad.a), ad.scale);   // dW·Aᵀ
}

}  // namespace molex

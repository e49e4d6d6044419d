// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Layer-wise probing: one-hidden-layer sigmoid MLPs trained on mean-pooled
// z_t of a frozen model, over a small hidden-size × dropout grid.

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "molex/backbone.hpp"
#include "molex/optim.hpp"
#include "molex/rng.hpp"
#include "molex/routing.hpp"
#include "molex/tasks.hpp"

namespace molex {

enum class ProbeProperty { kLengthBin, kTokenPresence, kPairOrder, kRandomControl };

inline const char* property_name(ProbeProperty p) {
  switch (p) {
    case ProbeProperty::kLengthBin: return "length_bin";
    case ProbeProperty::kTokenPresence: return "token_presence";
    case ProbeProperty::kPairOrder: return "pair_order";
    case ProbeProperty::kRandomControl: return "random_control";
  }
  return "?";
}

inline int property_classes(ProbeProperty p) { return p == ProbeProperty::kLengthBin ? 4 : 2; }

struct ProbeConfig {
  std::vector<int> hidden = {50, 100, 200};
  std::vector<double> dropout = {0.0, 0.1, 0.2};
  int train_size = 1000;
  int val_size = 500;
  int test_size = 500;
  int epochs = 10;
  int batch_size = 32;
  double lr = 1e-2;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  int probe_token = 1;  // token_presence target
};

struct LabeledTokens {
  std::vector<std::vector<int>> tokens;
  std::vector<int> labels;
};

// Probe inputs for one property. Sequences use uniform content tokens; a
// pair task's sequences come from its generator. Labels are balanced by
// round-robin assignment.
inline LabeledTokens probe_dataset(ProbeProperty prop, const TaskSpec& task, std::size_t n, Rng rng,
                                   int probe_token) {
  LabeledTokens out;
  const int classes = property_classes(prop);
  const int len = task.seq_len;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  rng.shuffle(labels);
  std::vector<Example> pairs;
  if (prop == ProbeProperty::kPairOrder) {
    TaskSpec ps = task;
    ps.seed = rng.next_u64();
    pairs = make_split(ps, Split::kTrain, n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    std::vector<int> toks;
    switch (prop) {
      case ProbeProperty::kLengthBin: {
        // bin b covers lengths in (b·N/4, (b+1)·N/4]
        const int lo = y * len / 4 + 1;
        const int hi = std::max(lo, (y + 1) * len / 4);
        const int l = lo + static_cast<int>(rng.uniform_int(static_cast<std::size_t>(hi - lo + 1)));
        for (int k = 0; k < len; ++k) toks.push_back(k < l ? random_content(rng, task.vocab_size) : kPadToken);
        break;
      }
      case ProbeProperty::kTokenPresence: {
        for (int k = 0; k < len; ++k) {
          int t = random_content(rng, task.vocab_size);
          while (t == probe_token) t = random_content(rng, task.vocab_size);
          toks.push_back(t);
        }
        if (y == 1) toks[rng.uniform_int(static_cast<std::size_t>(len))] = probe_token;
        break;
      }
      case ProbeProperty::kPairOrder: {
        toks = pairs[i].tokens;
        if (y == 1) std::rotate(toks.begin(), toks.begin() + len / 2, toks.end());
        break;
      }
      case ProbeProperty::kRandomControl: {
        for (int k = 0; k < len; ++k) toks.push_back(random_content(rng, task.vocab_size));
        break;
      }
    }
    out.tokens.push_back(std::move(toks));
    out.labels.push_back(y);
  }
  return out;
}

// Mean-pooled z_t for t = 0..T, one row per sequence: result[t] is n×D.
inline std::vector<Matrix> layer_features(const Backbone& bb, const LabeledTokens& data) {
  const std::size_t layers = bb.layers.size() + 1;
  std::vector<Matrix> feats(layers, Matrix(data.tokens.size(), bb.embedding.cols()));
  for (std::size_t i = 0; i < data.tokens.size(); ++i) {
    const ResidualTrace tr = forward_residual(data.tokens[i], bb);
    for (std::size_t t = 0; t < layers; ++t) {
      const Matrix pooled = mean_rows(tr.activations[t]);
      const auto src = pooled.row(0);
      std::copy(src.begin(), src.end(), feats[t].row(i).begin());
    }
  }
  return feats;
}

// ---------------------------------------------------------------------------
// Probe classifier

struct ProbeMlp {
  Matrix w1;  // H×D
  Matrix b1;  // 1×H
  Matrix w2;  // C×H
  Matrix b2;  // 1×C
};

struct ProbeGrads {
  Matrix w1, b1, w2, b2;
};

inline ProbeMlp init_probe(int dim, int hidden, int classes, Rng& rng) {
  return ProbeMlp{gaussian_matrix(hidden, dim, 1.0 / std::sqrt(static_cast<double>(dim)), rng), Matrix(1, hidden),
                  gaussian_matrix(classes, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)), rng),
                  Matrix(1, classes)};
}

inline Matrix add_bias(Matrix m, const Matrix& b) {
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) += b(0, j);
  return m;
}

// Mean cross-entropy of the probe on x (n×D). `mask`, when non-empty, is the
// inverted-dropout multiplier on the hidden units (n×H).
inline double probe_loss(const ProbeMlp& p, const Matrix& x, std::span<const int> y, const Matrix& mask,
                         ProbeGrads* g) {
  const Matrix pre = add_bias(matmul_bt(x, p.w1), p.b1);
  Matrix h = activation(pre, ActivationKind::kSigmoid);
  if (!mask.empty()) {
    for (std::size_t i = 0; i < h.size(); ++i) h[i] *= mask[i];
  }
  const Matrix logits = add_bias(matmul_bt(h, p.w2), p.b2);
  Matrix prob = row_softmax(logits);
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) loss -= inv_n * std::log(std::max(prob(i, y[i]), 1e-300));
  if (g == nullptr) return loss;
  Matrix dlog = prob;
  for (std::size_t i = 0; i < x.rows(); ++i) dlog(i, y[i]) -= 1.0;
  for (double& v : dlog.data()) v *= inv_n;
  g->w2 = matmul_at(dlog, h);
  g->b2 = Matrix(1, dlog.cols());
  for (std::size_t i = 0; i < dlog.rows(); ++i)
    for (std::size_t j = 0; j < dlog.cols(); ++j) g->b2(0, j) += dlog(i, j);
  Matrix dh = matmul(dlog, p.w2);
  for (std::size_t i = 0; i < dh.size(); ++i) {
    const double s = sigmoid(pre[i]);
    dh[i] *= s * (1.0 - s) * (mask.empty() ? 1.0 : mask[i]);
  }
  g->w1 = matmul_at(dh, x);
  g->b1 = Matrix(1, dh.cols());
  for (std::size_t i = 0; i < dh.rows(); ++i)
    for (std::size_t j = 0; j < dh.cols(); ++j) g->b1(0, j) += dh(i, j);
  return loss;
}

inline double probe_accuracy(const ProbeMlp& p, const Matrix& x, std::span<const int> y) {
  const Matrix h = activation(add_bias(matmul_bt(x, p.w1), p.b1), ActivationKind::kSigmoid);
  const Matrix logits = add_bias(matmul_bt(h, p.w2), p.b2);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) correct += argmax_lowest(logits.row(i)) == y[i];
  return static_cast<double>(correct) / static_cast<double>(x.rows());
}

inline Matrix gather(const Matrix& x, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = x.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline ProbeMlp train_probe(const Matrix& x, std::span<const int> y, int classes, int hidden, double dropout,
                            const ProbeConfig& pc, Rng rng) {
  Rng init = rng.fork(1);
  Rng order_rng = rng.fork(2);
  Rng drop_rng = rng.fork(3);
  ProbeMlp p = init_probe(static_cast<int>(x.cols()), hidden, classes, init);
  AdamW opt;
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), 0);
  const std::vector<AdamW::Group> groups(4, AdamW::Group{pc.lr, pc.weight_decay});
  for (int e = 0; e < pc.epochs; ++e) {
    order_rng.shuffle(order);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += pc.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b0,
                                             std::min<std::size_t>(pc.batch_size, order.size() - b0));
      const Matrix xb = gather(x, idx);
      std::vector<int> yb;
      for (auto i : idx) yb.push_back(y[i]);
      Matrix mask;
      if (dropout > 0.0) {
        mask = Matrix(xb.rows(), static_cast<std::size_t>(hidden));
        for (double& m : mask.data()) m = drop_rng.uniform() < dropout ? 0.0 : 1.0 / (1.0 - dropout);
      }
      ProbeGrads g;
      probe_loss(p, xb, yb, mask, &g);
      opt.step({&p.w1, &p.b1, &p.w2, &p.b2}, {&g.w1, &g.b1, &g.w2, &g.b2}, groups);
    }
  }
  return p;
}

// Column standardization from training statistics.
inline void standardize(std::vector<Matrix*> sets) {
  Matrix& train = *sets.front();
  const std::size_t d = train.cols();
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < train.rows(); ++i) mean += train(i, j);
    mean /= static_cast<double>(train.rows());
    double var = 0.0;
    for (std::size_t i = 0; i < train.rows(); ++i) var += (train(i, j) - mean) * (train(i, j) - mean);
    const double sd = std::sqrt(var / static_cast<double>(train.rows()));
    const double inv = sd > 1e-12 ? 1.0 / sd : 1.0;
    for (Matrix* m : sets)
      for (std::size_t i = 0; i < m->rows(); ++i) (*m)(i, j) = ((*m)(i, j) - mean) * inv;
  }
}

struct ProbeCell {
  int layer = 0;
  std::string property;
  std::vector<double> grid_val_acc;  // per (hidden, dropout), hidden-major
  double best_val_acc = 0.0;         // max over the grid
  double test_acc = 0.0;             // held-out accuracy of the best config
  int best_hidden = 0;
  double best_dropout = 0.0;
};

struct ProbeReport {
  std::vector<ProbeCell> cells;
  std::vector<std::string> skipped;  // properties undefined for the task
};

inline std::vector<ProbeProperty> probe_properties(const TaskSpec& task, std::vector<std::string>* skipped) {
  std::vector<ProbeProperty> props{ProbeProperty::kLengthBin, ProbeProperty::kTokenPresence};
  if (task.kind() == TaskKind::kPairClassification) {
    props.push_back(ProbeProperty::kPairOrder);
  } else if (skipped) {
    skipped->push_back(property_name(ProbeProperty::kPairOrder));
  }
  props.push_back(ProbeProperty::kRandomControl);
  return props;
}

inline ProbeCell probe_cell(int layer, ProbeProperty prop, Matrix xtr, std::span<const int> ytr, Matrix xva,
                            std::span<const int> yva, Matrix xte, std::span<const int> yte, const ProbeConfig& pc,
                            Rng rng) {
  standardize({&xtr, &xva, &xte});
  ProbeCell cell;
  cell.layer = layer;
  cell.property = property_name(prop);
  cell.best_val_acc = -1.0;
  std::uint64_t k = 0;
  for (int h : pc.hidden) {
    for (double d : pc.dropout) {
      const ProbeMlp p = train_probe(xtr, ytr, property_classes(prop), h, d, pc, rng.fork(k++));
      const double acc = probe_accuracy(p, xva, yva);
      cell.grid_val_acc.push_back(acc);
      if (acc > cell.best_val_acc) {
        cell.best_val_acc = acc;
        cell.best_hidden = h;
        cell.best_dropout = d;
        cell.test_acc = probe_accuracy(p, xte, yte);
      }
    }
  }
  return cell;
}

// Probes z_0 … z_T of the frozen backbone for every property defined on
// the task.
inline ProbeReport run_probe(const Backbone& bb, const TaskSpec& task, const ProbeConfig& pc) {
  ProbeReport rep;
  const Rng root(pc.seed);
  const auto props = probe_properties(task, &rep.skipped);
  for (std::size_t pi = 0; pi < props.size(); ++pi) {
    const ProbeProperty prop = props[pi];
    const Rng prng = root.fork(static_cast<std::uint64_t>(prop) + 1);
    const auto tr = probe_dataset(prop, task, pc.train_size, prng.fork(1), pc.probe_token);
    const auto va = probe_dataset(prop, task, pc.val_size, prng.fork(2), pc.probe_token);
    const auto te = probe_dataset(prop, task, pc.test_size, prng.fork(3), pc.probe_token);
    const auto ftr = layer_features(bb, tr);
    const auto fva = layer_features(bb, va);
    const auto fte = layer_features(bb, te);
    for (std::size_t t = 0; t < ftr.size(); ++t) {
      rep.cells.push_back(probe_cell(static_cast<int>(t), prop, ftr[t], tr.labels, fva[t], va.labels, fte[t],
                                     te.labels, pc, prng.fork(100 + t)));
    }
  }
  return rep;
}

}  // namespace molex

// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Pretraining, fine-tuning and evaluation protocols.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "molex/backbone.hpp"
#include "molex/molex.hpp"
#include "molex/optim.hpp"
#include "molex/parallel.hpp"
#include "molex/routing.hpp"
#include "molex/tasks.hpp"

namespace molex {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Batching helpers

inline std::vector<Matrix> embed_batch(const Backbone& bb, const std::vector<Example>& data,
                                       std::span<const std::size_t> idx) {
  std::vector<Matrix> z0;
  z0.reserve(idx.size());
  for (std::size_t i : idx) z0.push_back(embed(data[i].tokens, bb));
  return z0;
}

inline std::vector<int> batch_labels(const std::vector<Example>& data, std::span<const std::size_t> idx) {
  std::vector<int> y;
  for (std::size_t i : idx) y.push_back(data[i].label);
  return y;
}

inline int argmax_row(const Matrix& logits) { return argmax_lowest(logits.row(0)); }

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  int steps = 2000;
  int batch_size = 16;
  double lr = 3e-3;
  double weight_decay = 0.0;
  int train_size = 4000;
  int test_size = 1000;
};

struct PretrainResult {
  Backbone backbone;
  double accuracy = 0.0;  // base-task test accuracy
  double final_loss = 0.0;
};

inline TaskSpec base_task(const BackboneConfig& cfg, std::uint64_t seed, const PretrainConfig& pc) {
  TaskSpec spec;
  spec.name = "group_majority";
  spec.seed = seed;
  spec.num_classes = cfg.num_classes;
  spec.seq_len = cfg.seq_len;
  spec.vocab_size = cfg.vocab_size;
  spec.train_size = pc.train_size;
  spec.val_size = 1;
  spec.test_size = pc.test_size;
  return spec;
}

inline double baseline_accuracy(const Backbone& bb, const Head& head, const std::vector<Example>& data) {
  ModelRef m{&bb, nullptr, &head, nullptr, nullptr};
  std::size_t correct = 0;
  for (const auto& ex : data) {
    const Matrix f = forward_features(m, embed(ex.tokens, bb));
    correct += argmax_row(head_logits(f, head)) == ex.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Trains every backbone parameter on the base task for a fixed number of
// steps. Deterministic given `seed`.
inline PretrainResult pretrain(const BackboneConfig& cfg, std::uint64_t seed, const PretrainConfig& pc = {}) {
  cfg.validate();
  if (pc.steps < 1 || pc.batch_size < 1) throw ConfigError("pretrain steps and batch size must be >= 1");
  Rng root(seed);
  Rng init_rng = root.fork(1);
  Rng order_rng = root.fork(2);
  PretrainResult res;
  Backbone& bb = res.backbone;
  bb = init_backbone(cfg, init_rng);
  const TaskSpec spec = base_task(cfg, seed, pc);
  const auto train = make_split(spec, Split::kTrain, spec.train_size);
  const auto test = make_split(spec, Split::kTest, spec.test_size);

  std::vector<Matrix*> params{&bb.embedding, &bb.positional};
  for (auto& l : bb.layers) {
    params.push_back(&l.w1);
    if (cfg.block == BlockKind::kMlp) params.push_back(&l.w2);
  }
  params.push_back(&bb.head.weight);
  params.push_back(&bb.head.bias);
  const std::vector<AdamW::Group> groups(params.size(), AdamW::Group{pc.lr, pc.weight_decay});
  AdamW opt;
  LinearSchedule sched{pc.steps, 0.06};

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (int step = 1; step <= pc.steps; ++step) {
    std::vector<std::size_t> idx;
    while (static_cast<int>(idx.size()) < pc.batch_size) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const auto z0 = embed_batch(bb, train, idx);
    const auto labels = batch_labels(train, idx);
    ModelRef m{&bb, nullptr, &bb.head, nullptr, nullptr};
    const BatchTrace tr = forward_batch(m, z0);
    BatchGrads g;
    const double loss = backward_batch(m, tr, labels, g);
    if (!std::isfinite(loss)) throw TrainingError("pretraining diverged at step " + std::to_string(step));
    res.final_loss = loss;

    Matrix d_emb(bb.embedding.rows(), bb.embedding.cols());
    Matrix d_pos(bb.positional.rows(), bb.positional.cols());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& toks = train[idx[b]].tokens;
      for (std::size_t n = 0; n < toks.size(); ++n) {
        const auto src = g.dz0[b].row(n);
        auto de = d_emb.row(static_cast<std::size_t>(toks[n]));
        for (std::size_t c = 0; c < src.size(); ++c) de[c] += src[c];
        if (toks[n] == kPadToken) continue;
        auto dp = d_pos.row(n);
        for (std::size_t c = 0; c < src.size(); ++c) dp[c] += src[c];
      }
    }
    std::vector<const Matrix*> grads{&d_emb, &d_pos};
    for (auto& l : g.layers) {
      grads.push_back(&l.w1);
      if (cfg.block == BlockKind::kMlp) grads.push_back(&l.w2);
    }
    grads.push_back(&g.head.weight);
    grads.push_back(&g.head.bias);
    std::vector<AdamW::Group> scaled_groups = groups;
    for (auto& gr : scaled_groups) gr.lr *= sched.factor(step);
    opt.step(params, grads, scaled_groups);
  }
  res.accuracy = baseline_accuracy(bb, bb.head, test);
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct TrainConfig {
  int epochs = 4;
  int batch_size = 16;
  double lr = 5e-3;  // LoRA and head
  double weight_decay = 0.0;
  double gate_lr = 0.1;
  double gate_weight_decay = 0.01;
  double warmup_ratio = 0.06;
  double noise_sigma = 1.0;
  std::uint64_t eval_seed = 1234;
  int eval_batch = 64;
};

struct Variant {
  std::string name = "lora";
  bool molex = false;
  GateConfig gate;
};

// Trainable state of one fine-tuning run.
struct FinetuneState {
  std::vector<LayerAdapters> adapters;
  Head head;
  std::vector<Router> routers;  // empty for the LoRA baseline
};

struct FinetuneModel {
  const Backbone* backbone = nullptr;
  const FinetuneState* state = nullptr;
  const Variant* variant = nullptr;

  ModelRef ref() const {
    return ModelRef{backbone, &state->adapters, &state->head, variant->molex ? &state->routers : nullptr,
                    variant->molex ? &variant->gate : nullptr};
  }
};

inline FinetuneState init_finetune_state(const Backbone& bb, const Variant& v, const LoraConfig& lora,
                                         int num_classes, std::uint64_t seed) {
  Rng root(seed);
  Rng ad_rng = root.fork(11);
  Rng head_rng = root.fork(12);
  Rng gate_rng = root.fork(13);
  FinetuneState st;
  st.adapters = init_adapters(bb, lora, ad_rng);
  st.head.weight = gaussian_matrix(num_classes, bb.dim(), 0.1, head_rng);
  st.head.bias = Matrix(1, num_classes);
  if (v.molex) {
    v.gate.validate(bb.num_layers());
    const int count = v.gate.shared ? 1 : bb.num_layers();
    for (int i = 0; i < count; ++i) st.routers.push_back(init_router(v.gate, bb.num_layers(), bb.dim(), gate_rng));
  }
  return st;
}

// Trainable parameter count: LoRA + router + α + head. With `trainable_only`
// false the frozen backbone is added.
inline std::size_t param_count(const Backbone& bb, const FinetuneState& st, bool trainable_only) {
  std::size_t n = adapter_param_count(st.adapters) + st.head.weight.size() + st.head.bias.size();
  for (const auto& r : st.routers) n += router_param_count(r);
  if (!trainable_only) n += frozen_param_count(bb);
  return n;
}

struct EvalOptions {
  double sigma = 0.0;
  std::uint64_t noise_seed = 0;
  SelectionStats* stats = nullptr;
  PairExecutor* executor = nullptr;
  int batch = 64;
};

// Per-example predictions. Noise N(0, σ²) is added to the embedded input of
// example i from stream i of `noise_seed`, independent of batching.
inline std::vector<int> predict(const FinetuneModel& fm, const std::vector<Example>& data, const EvalOptions& eo = {}) {
  const ModelRef m = fm.ref();
  std::vector<int> pred(data.size());
  const Rng noise_root(eo.noise_seed);
  const std::size_t bs = static_cast<std::size_t>(std::max(1, eo.batch));
  for (std::size_t b0 = 0; b0 < data.size(); b0 += bs) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b0; i < std::min(data.size(), b0 + bs); ++i) idx.push_back(i);
    auto z0 = embed_batch(*fm.backbone, data, idx);
    if (eo.sigma > 0.0) {
      for (std::size_t k = 0; k < idx.size(); ++k) {
        Rng r = noise_root.fork(idx[k]);
        for (double& v : z0[k].data()) v += eo.sigma * r.gaussian();
      }
    }
    ForwardOptions fo;
    fo.stats = eo.stats;
    fo.executor = eo.executor;
    fo.keep_trace = false;
    const BatchTrace tr = forward_batch(m, z0, fo);
    for (std::size_t k = 0; k < idx.size(); ++k) pred[idx[k]] = argmax_row(tr.logits[k]);
  }
  return pred;
}

inline double accuracy_of(const std::vector<int>& pred, const std::vector<Example>& data, bool flip = false) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int y = flip ? 1 - data[i].label : data[i].label;
    correct += pred[i] == y;
  }
  return data.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(data.size());
}

inline double evaluate(const FinetuneModel& fm, const std::vector<Example>& data, const EvalOptions& eo = {}) {
  return accuracy_of(predict(fm, data, eo), data);
}

// Accuracy with i.i.d. Gaussian noise on the embedded input.
inline double evaluate_noisy(const FinetuneModel& fm, const std::vector<Example>& data, double sigma,
                             std::uint64_t eval_seed) {
  if (sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  EvalOptions eo;
  eo.sigma = sigma;
  eo.noise_seed = eval_seed;
  return evaluate(fm, data, eo);
}

// Evaluates a binary model on another binary task without training and
// reports the better of the direct and label-reversed accuracies.
inline double zero_shot_transfer(const FinetuneModel& fm, const std::vector<Example>& target) {
  if (fm.state->head.weight.rows() != 2) throw ProtocolError("zero-shot transfer requires a binary source model");
  for (const auto& ex : target) {
    if (ex.label < 0 || ex.label > 1) throw ProtocolError("zero-shot transfer requires a binary target task");
  }
  const auto pred = predict(fm, target);
  return std::max(accuracy_of(pred, target), accuracy_of(pred, target, true));
}

struct RunResult {
  std::uint64_t seed = 0;
  std::string task;
  std::string variant;
  bool ok = true;
  std::string error;
  std::vector<double> epoch_metrics;  // validation accuracy per epoch
  int best_epoch = -1;
  double best_metric = 0.0;
  double clean_acc = 0.0;
  double noisy_acc = 0.0;
  SelectionStats stats;  // routing on the clean test pass
  FinetuneState best_state;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
};

namespace detail {

struct ParamSlots {
  std::vector<Matrix*> params;
  std::vector<AdamW::Group> groups;
  std::vector<Matrix> alpha_bufs;
};

inline void lora_slots(LayerAdapters& la, std::vector<Matrix*>& out) {
  for (auto* ad : {&la.w1, &la.w2}) {
    if (!ad->has_value()) continue;
    out.push_back(&(*ad)->a);
    out.push_back(&(*ad)->b);
  }
}

}  // namespace detail

// One fine-tuning run. Only LoRA, head and (for MoLEx) routers and α are
// updated; the backbone is read-only.
inline RunResult finetune_run(const Backbone& bb, const Variant& variant, const LoraConfig& lora,
                              const TrainConfig& tc, const TaskSpec& task, const Dataset& data, std::uint64_t seed) {
  RunResult res;
  res.seed = seed;
  res.task = task.name;
  res.variant = variant.name;
  res.frozen_hash_before = frozen_hash(bb);
  res.stats = SelectionStats(bb.num_layers());
  try {
    if (tc.epochs < 1 || tc.batch_size < 1) throw ConfigError("train.epochs and train.batch_size must be >= 1");
    FinetuneState st = init_finetune_state(bb, variant, lora, task.num_classes, seed);
    const FinetuneModel fm{&bb, &st, &variant};

    std::vector<Matrix*> params;
    std::vector<AdamW::Group> groups;
    const AdamW::Group base{tc.lr, tc.weight_decay};
    const AdamW::Group gate{tc.gate_lr, tc.gate_weight_decay};
    for (auto& la : st.adapters) detail::lora_slots(la, params);
    params.push_back(&st.head.weight);
    params.push_back(&st.head.bias);
    groups.assign(params.size(), base);
    std::vector<Matrix> alpha_bufs(st.routers.size(), Matrix(1, 1));
    const bool learned_alpha = variant.molex && variant.gate.alpha_mode == AlphaMode::kLearned;
    for (std::size_t r = 0; r < st.routers.size(); ++r) {
      auto& rt = st.routers[r];
      for (Matrix* p : {&rt.weight, &rt.bias, &rt.proj, &rt.experts}) {
        if (p->empty()) continue;
        params.push_back(p);
        groups.push_back(gate);
      }
      if (learned_alpha) {
        params.push_back(&alpha_bufs[r]);
        groups.push_back(gate);
      }
    }

    AdamW opt;
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(data.train.size()) + tc.batch_size - 1) / tc.batch_size;
    const LinearSchedule sched{steps_per_epoch * tc.epochs, tc.warmup_ratio};
    Rng order_rng = Rng(seed).fork(21);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    const ModelRef m = fm.ref();
    std::int64_t step = 0;
    double best = -1.0;

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
      order_rng.shuffle(order);
      for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size) {
        ++step;
        const std::span<const std::size_t> idx(order.data() + b0,
                                               std::min<std::size_t>(tc.batch_size, order.size() - b0));
        const auto z0 = embed_batch(bb, data.train, idx);
        const auto labels = batch_labels(data.train, idx);
        const BatchTrace tr = forward_batch(m, z0);
        BatchGrads g;
        const double loss = backward_batch(m, tr, labels, g);
        if (!std::isfinite(loss)) throw TrainingError("non-finite loss at step " + std::to_string(step));

        std::vector<Matrix> owned;
        owned.reserve(4 * st.adapters.size() + 2);
        std::vector<const Matrix*> grads;
        for (std::size_t t = 0; t < st.adapters.size(); ++t) {
          const auto& la = st.adapters[t];
          const Matrix* dws[2] = {&g.layers[t].w1, &g.layers[t].w2};
          const std::optional<LoraAdapter>* ads[2] = {&la.w1, &la.w2};
          for (int w = 0; w < 2; ++w) {
            if (!ads[w]->has_value()) continue;
            Matrix da, db;
            adapter_grads(**ads[w], *dws[w], da, db);
            owned.push_back(std::move(da));
            owned.push_back(std::move(db));
          }
        }
        for (const auto& o : owned) grads.push_back(&o);
        grads.push_back(&g.head.weight);
        grads.push_back(&g.head.bias);
        std::vector<Matrix> alpha_grads;
        alpha_grads.reserve(st.routers.size());
        for (std::size_t r = 0; r < st.routers.size(); ++r) {
          auto& rg = g.routers[r];
          for (const Matrix* p : {&rg.weight, &rg.bias, &rg.proj, &rg.experts}) {
            if (!p->empty()) grads.push_back(p);
          }
          if (learned_alpha) {
            alpha_grads.push_back(Matrix(1, 1, rg.alpha_logit));
            grads.push_back(&alpha_grads.back());
            alpha_bufs[r](0, 0) = st.routers[r].alpha_logit;
          }
        }
        std::vector<AdamW::Group> scaled = groups;
        const double f = sched.factor(step);
        for (auto& gr : scaled) gr.lr *= f;
        opt.step(params, grads, scaled);
        if (learned_alpha) {
          for (std::size_t r = 0; r < st.routers.size(); ++r) st.routers[r].alpha_logit = alpha_bufs[r](0, 0);
        }
      }
      EvalOptions eo;
      eo.batch = tc.eval_batch;
      const double val = evaluate(fm, data.val, eo);
      res.epoch_metrics.push_back(val);
      if (val > best) {
        best = val;
        res.best_epoch = epoch;
        res.best_state = st;
      }
    }
    res.best_metric = best;
    const FinetuneModel best_model{&bb, &res.best_state, &variant};
    EvalOptions clean;
    clean.batch = tc.eval_batch;
    clean.stats = &res.stats;
    res.clean_acc = evaluate(best_model, data.test, clean);
    res.noisy_acc = evaluate_noisy(best_model, data.test, tc.noise_sigma, tc.eval_seed);
  } catch (const TrainingError& e) {
    res.ok = false;
    res.error = e.what();
  } catch (const NumericError& e) {
    res.ok = false;
    res.error = e.what();
  }
  res.frozen_hash_after = frozen_hash(bb);
  if (res.frozen_hash_after != res.frozen_hash_before) {
    throw TrainingError("frozen backbone changed during fine-tuning");
  }
  return res;
}

struct SummaryStat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n − 1)
  std::size_t n = 0;
};

// Order-independent: values are sorted before reduction.
inline SummaryStat summarize(std::vector<double> v) {
  SummaryStat s;
  s.n = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct SweepResult {
  std::vector<RunResult> runs;
  SummaryStat best_metric;
  SummaryStat clean_acc;
  SummaryStat noisy_acc;
};

inline SweepResult finetune(const Backbone& bb, const Variant& variant, const LoraConfig& lora,
                            const TrainConfig& tc, const TaskSpec& task, std::span<const std::uint64_t> seeds) {
  const Dataset data = make_dataset(task);
  SweepResult sw;
  std::vector<double> best, clean, noisy;
  for (auto seed : seeds) {
    sw.runs.push_back(finetune_run(bb, variant, lora, tc, task, data, seed));
    const auto& r = sw.runs.back();
    if (!r.ok) continue;
    best.push_back(r.best_metric);
    clean.push_back(r.clean_acc);
    noisy.push_back(r.noisy_acc);
  }
  sw.best_metric = summarize(best);
  sw.clean_acc = summarize(clean);
  sw.noisy_acc = summarize(noisy);
  return sw;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingReport {
  std::size_t samples = 0;
  double baseline_s = 0.0;      // per sample
  double molex_seq_s = 0.0;     // per sample, sequential experts
  double molex_par_s = 0.0;     // per sample, paired-expert executor
  double ratio_seq = 0.0;
  double ratio_par = 0.0;
  std::size_t baseline_params = 0;
  std::size_t molex_params = 0;
  std::size_t overhead = 0;
};

// Per-sample inference time of the LoRA baseline and MoLEx, measured in
// `rounds` interleaved rounds over `samples` inputs each; the median round
// is reported per variant.
inline TimingReport timing_report(const Backbone& bb, const FinetuneState& baseline, const FinetuneState& molex,
                                  const Variant& molex_variant, const std::vector<Example>& data,
                                  std::size_t samples = 1000, int rounds = 5, int batch = 64) {
  if (data.empty()) throw ConfigError("timing needs at least one example");
  std::vector<Example> inputs;
  for (std::size_t i = 0; i < samples; ++i) inputs.push_back(data[i % data.size()]);
  const Variant base_variant{"lora", false, {}};
  const FinetuneModel fb{&bb, &baseline, &base_variant};
  const FinetuneModel fm{&bb, &molex, &molex_variant};
  PairExecutor exec;

  auto time_once = [&](const FinetuneModel& model, PairExecutor* ex) {
    EvalOptions eo;
    eo.executor = ex;
    eo.batch = batch;
    const auto t0 = std::chrono::steady_clock::now();
    const auto pred = predict(model, inputs, eo);
    const auto t1 = std::chrono::steady_clock::now();
    volatile int sink = pred.empty() ? 0 : pred.front();
    (void)sink;
    return std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(inputs.size());
  };
  // Warm-up.
  time_once(fb, nullptr);
  time_once(fm, nullptr);
  time_once(fm, &exec);

  std::vector<double> tb, ts, tp;
  for (int r = 0; r < rounds; ++r) {
    tb.push_back(time_once(fb, nullptr));
    ts.push_back(time_once(fm, nullptr));
    tp.push_back(time_once(fm, &exec));
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  TimingReport rep;
  rep.samples = inputs.size();
  rep.baseline_s = median(tb);
  rep.molex_seq_s = median(ts);
  rep.molex_par_s = median(tp);
  rep.ratio_seq = rep.molex_seq_s / rep.baseline_s;
  rep.ratio_par = rep.molex_par_s / rep.baseline_s;
  rep.baseline_params = param_count(bb, baseline, true);
  rep.molex_params = param_count(bb, molex, true);
  rep.overhead = rep.molex_params - rep.baseline_params;
  return rep;
}

}  // namespace molex

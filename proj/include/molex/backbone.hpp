// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Residual backbone z_{t+1} = z_t + u_t(z_t) with tokens as rows, low-rank
// adapters over the frozen block weights, and checkpoint I/O.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "molex/matrix_io.hpp"
#include "molex/numerics.hpp"
#include "molex/rng.hpp"

namespace molex {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kPadToken = 0;

enum class BlockKind { kLinear, kMlp };

struct BackboneConfig {
  int num_layers = 4;
  int model_dim = 16;
  BlockKind block = BlockKind::kMlp;
  int hidden_dim = 32;
  ActivationKind activation = ActivationKind::kGelu;
  int num_classes = 4;
  int seq_len = 16;
  int vocab_size = 33;

  void validate() const {
    if (num_layers < 1) throw ConfigError("backbone.num_layers must be >= 1");
    if (model_dim < 1) throw ConfigError("backbone.model_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("backbone.num_classes must be >= 2");
    if (seq_len < 1) throw ConfigError("backbone.seq_len must be >= 1");
    if (vocab_size < 2) throw ConfigError("backbone.vocab_size must be >= 2");
    if (block == BlockKind::kMlp && hidden_dim < 1) {
      throw ConfigError("backbone.hidden_dim must be >= 1");
    }
    if (block == BlockKind::kLinear && activation != ActivationKind::kIdentity) {
      throw ConfigError("linear blocks require activation = identity");
    }
  }
};

// Frozen weights of one residual block. Linear blocks use w1 only (D×D);
// MLP blocks compute u(z) = act(z·w1ᵀ)·w2ᵀ with w1: H×D and w2: D×H.
struct LayerParams {
  Matrix w1;
  Matrix w2;
};

struct LoraAdapter {
  Matrix a;  // r × in
  Matrix b;  // out × r
  int rank = 0;
  double scale = 1.0;

  Matrix delta() const { return scaled(matmul(b, a), scale); }
};

struct LayerAdapters {
  std::optional<LoraAdapter> w1;
  std::optional<LoraAdapter> w2;
};

struct Head {
  Matrix weight;  // C × D
  Matrix bias;    // 1 × C
};

// θ^(0): everything the fine-tuning stage must leave untouched.
struct Backbone {
  BackboneConfig config;
  Matrix embedding;   // V × D
  Matrix positional;  // N × D
  std::vector<LayerParams> layers;
  Head head;  // base-task head from pretraining

  int num_layers() const { return static_cast<int>(layers.size()); }
  int dim() const { return static_cast<int>(embedding.cols()); }
};

inline Backbone init_backbone(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  Backbone bb;
  bb.config = cfg;
  const auto d = static_cast<std::size_t>(cfg.model_dim);
  const auto h = static_cast<std::size_t>(cfg.hidden_dim);
  bb.embedding = gaussian_matrix(cfg.vocab_size, d, 1.0, rng);
  bb.positional = gaussian_matrix(cfg.seq_len, d, 0.5, rng);
  for (int t = 0; t < cfg.num_layers; ++t) {
    LayerParams lp;
    if (cfg.block == BlockKind::kLinear) {
      lp.w1 = gaussian_matrix(d, d, 0.5 / std::sqrt(static_cast<double>(d)), rng);
    } else {
      lp.w1 = gaussian_matrix(h, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
      lp.w2 = gaussian_matrix(d, h, 0.5 / std::sqrt(static_cast<double>(h)), rng);
    }
    bb.layers.push_back(std::move(lp));
  }
  bb.head.weight = gaussian_matrix(cfg.num_classes, d, 0.1, rng);
  bb.head.bias = Matrix(1, cfg.num_classes);
  return bb;
}

// Block weights with any adapter folded in: W + scale·B·A.
struct EffectiveLayer {
  Matrix w1;
  Matrix w2;
};

inline EffectiveLayer effective_layer(const LayerParams& layer, const LayerAdapters* adapters) {
  EffectiveLayer eff{layer.w1, layer.w2};
  if (adapters != nullptr) {
    if (adapters->w1) add_inplace(eff.w1, adapters->w1->delta());
    if (adapters->w2) add_inplace(eff.w2, adapters->w2->delta());
  }
  return eff;
}

struct ExpertCache {
  Matrix input;  // rows × D
  Matrix pre;    // rows × H (MLP only)
  Matrix act;    // rows × H (MLP only)
  Matrix out;    // rows × D
};

inline ExpertCache expert_forward(const EffectiveLayer& layer, BlockKind kind,
                                  ActivationKind act, const Matrix& z) {
  ExpertCache c;
  c.input = z;
  if (kind == BlockKind::kLinear) {
    c.out = matmul_bt(z, layer.w1);
  } else {
    c.pre = matmul_bt(z, layer.w1);
    c.act = activation(c.pre, act);
    c.out = matmul_bt(c.act, layer.w2);
  }
  return c;
}

// Accumulates weight gradients into dw1/dw2 and returns dL/dz.
inline Matrix expert_backward(const ExpertCache& c, const Matrix& dout, const EffectiveLayer& layer,
                              BlockKind kind, ActivationKind act, Matrix& dw1, Matrix& dw2) {
  if (kind == BlockKind::kLinear) {
    add_inplace(dw1, matmul_at(dout, c.input));
    return matmul(dout, layer.w1);
  }
  add_inplace(dw2, matmul_at(dout, c.act));
  Matrix dh = matmul(dout, layer.w2);
  for (std::size_t i = 0; i < dh.size(); ++i) dh[i] *= activate_grad(c.pre[i], act);
  add_inplace(dw1, matmul_at(dh, c.input));
  return matmul(dh, layer.w1);
}

// Residual branch u_t(z) of one layer; the caller adds the skip connection.
inline Matrix layer_forward(const Matrix& z, const LayerParams& layer, BlockKind kind,
                            ActivationKind act, const LayerAdapters* adapters = nullptr) {
  if (z.cols() != layer.w1.cols()) {
    throw ShapeError("layer_forward: activation has " + std::to_string(z.cols()) +
                     " columns, layer expects " + std::to_string(layer.w1.cols()));
  }
  return expert_forward(effective_layer(layer, adapters), kind, act, z).out;
}

// Token embedding plus positional embedding; PAD tokens carry no position.
inline Matrix embed(std::span<const int> tokens, const Backbone& bb) {
  if (tokens.size() > bb.positional.rows()) {
    throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds seq_len " +
                     std::to_string(bb.positional.rows()));
  }
  const auto d = static_cast<std::size_t>(bb.dim());
  Matrix z(tokens.size(), d);
  for (std::size_t n = 0; n < tokens.size(); ++n) {
    const int tok = tokens[n];
    if (tok < 0 || tok >= static_cast<int>(bb.embedding.rows())) {
      throw InputError("token " + std::to_string(tok) + " outside vocabulary of size " +
                       std::to_string(bb.embedding.rows()));
    }
    for (std::size_t j = 0; j < d; ++j) {
      z(n, j) = bb.embedding(tok, j) + (tok == kPadToken ? 0.0 : bb.positional(n, j));
    }
  }
  return z;
}

struct ResidualTrace {
  Matrix features;                  // z_T
  std::vector<Matrix> activations;  // z_0 … z_T
};

inline ResidualTrace forward_residual_from(const Matrix& z0, const Backbone& bb,
                                           const std::vector<LayerAdapters>* adapters = nullptr) {
  ResidualTrace tr;
  tr.activations.push_back(z0);
  Matrix z = z0;
  for (std::size_t t = 0; t < bb.layers.size(); ++t) {
    const LayerAdapters* ad = adapters ? &(*adapters)[t] : nullptr;
    add_inplace(z, layer_forward(z, bb.layers[t], bb.config.block, bb.config.activation, ad));
    tr.activations.push_back(z);
  }
  tr.features = z;
  return tr;
}

inline ResidualTrace forward_residual(std::span<const int> tokens, const Backbone& bb,
                                      const std::vector<LayerAdapters>* adapters = nullptr) {
  return forward_residual_from(embed(tokens, bb), bb, adapters);
}

inline Matrix head_logits(const Matrix& features, const Head& head) {
  Matrix logits = matmul_bt(mean_rows(features), head.weight);
  add_inplace(logits, head.bias);
  return logits;
}

// ---------------------------------------------------------------------------
// Adapters

struct LoraConfig {
  int rank = 8;
  double alpha = 8.0;  // scale = alpha / rank
  bool target_w1 = true;
  bool target_w2 = true;
  double init_std = 0.02;
};

inline LoraAdapter make_adapter(std::size_t out, std::size_t in, const LoraConfig& cfg, Rng& rng) {
  LoraAdapter ad;
  ad.rank = cfg.rank;
  ad.scale = cfg.alpha / static_cast<double>(cfg.rank);
  ad.a = gaussian_matrix(cfg.rank, in, cfg.init_std, rng);
  ad.b = Matrix(out, cfg.rank);
  return ad;
}

inline std::vector<LayerAdapters> init_adapters(const Backbone& bb, const LoraConfig& cfg, Rng& rng) {
  if (cfg.rank < 1) throw ConfigError("lora.rank must be >= 1");
  std::vector<LayerAdapters> out(bb.layers.size());
  for (std::size_t t = 0; t < bb.layers.size(); ++t) {
    const auto& lp = bb.layers[t];
    if (cfg.target_w1) out[t].w1 = make_adapter(lp.w1.rows(), lp.w1.cols(), cfg, rng);
    if (cfg.target_w2 && !lp.w2.empty()) out[t].w2 = make_adapter(lp.w2.rows(), lp.w2.cols(), cfg, rng);
  }
  return out;
}

inline std::size_t adapter_param_count(const std::vector<LayerAdapters>& adapters) {
  std::size_t n = 0;
  for (const auto& la : adapters) {
    if (la.w1) n += la.w1->a.size() + la.w1->b.size();
    if (la.w2) n += la.w2->a.size() + la.w2->b.size();
  }
  return n;
}

inline std::size_t frozen_param_count(const Backbone& bb) {
  std::size_t n = bb.embedding.size() + bb.positional.size();
  for (const auto& l : bb.layers) n += l.w1.size() + l.w2.size();
  return n;
}

// FNV-1a over the raw bytes of every frozen matrix.
inline std::uint64_t frozen_hash(const Backbone& bb) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const Matrix& m) {
    const auto* p = reinterpret_cast<const unsigned char*>(m.data().data());
    for (std::size_t i = 0; i < m.size() * sizeof(double); ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  feed(bb.embedding);
  feed(bb.positional);
  for (const auto& l : bb.layers) {
    feed(l.w1);
    feed(l.w2);
  }
  feed(bb.head.weight);
  feed(bb.head.bias);
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.txt (key=value) plus one matrix file per parameter,
// named embedding, positional, layer.{t}.W1, layer.{t}.W2, head.W, head.b and,
// when adapters are saved, layer.{t}.lora.W1.A / .B and layer.{t}.lora.W2.A / .B.

inline const char* block_name(BlockKind k) { return k == BlockKind::kLinear ? "linear" : "mlp"; }

inline BlockKind parse_block(const std::string& s) {
  if (s == "linear") return BlockKind::kLinear;
  if (s == "mlp") return BlockKind::kMlp;
  throw ConfigError("unknown block kind '" + s + "'");
}

inline std::map<std::string, std::string> config_manifest(const BackboneConfig& c) {
  return {{"num_layers", std::to_string(c.num_layers)},
          {"model_dim", std::to_string(c.model_dim)},
          {"block", block_name(c.block)},
          {"hidden_dim", std::to_string(c.hidden_dim)},
          {"activation", activation_name(c.activation)},
          {"num_classes", std::to_string(c.num_classes)},
          {"seq_len", std::to_string(c.seq_len)},
          {"vocab_size", std::to_string(c.vocab_size)}};
}

inline void save_checkpoint(const std::filesystem::path& dir, const Backbone& bb,
                            const std::vector<LayerAdapters>* adapters = nullptr) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "manifest.txt");
    if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    for (const auto& [k, v] : config_manifest(bb.config)) os << k << '=' << v << '\n';
    os << "adapters=" << (adapters ? "true" : "false") << '\n';
  }
  save_matrix(dir / "embedding.mat", bb.embedding);
  save_matrix(dir / "positional.mat", bb.positional);
  for (std::size_t t = 0; t < bb.layers.size(); ++t) {
    const std::string p = "layer." + std::to_string(t);
    save_matrix(dir / (p + ".W1.mat"), bb.layers[t].w1);
    if (!bb.layers[t].w2.empty()) save_matrix(dir / (p + ".W2.mat"), bb.layers[t].w2);
    if (adapters) {
      const auto& la = (*adapters)[t];
      for (auto [name, ad] : {std::pair{"W1", &la.w1}, std::pair{"W2", &la.w2}}) {
        if (!*ad) continue;
        save_matrix(dir / (p + ".lora." + name + ".A.mat"), (*ad)->a);
        save_matrix(dir / (p + ".lora." + name + ".B.mat"), (*ad)->b);
      }
    }
  }
  save_matrix(dir / "head.W.mat", bb.head.weight);
  save_matrix(dir / "head.b.mat", bb.head.bias);
}

inline std::map<std::string, std::string> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("manifest: malformed line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

inline Backbone load_checkpoint(const std::filesystem::path& dir) {
  auto kv = read_manifest(dir / "manifest.txt");
  auto need = [&kv](const std::string& k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("manifest: missing key '" + k + "'");
    return it->second;
  };
  Backbone bb;
  bb.config.num_layers = std::stoi(need("num_layers"));
  bb.config.model_dim = std::stoi(need("model_dim"));
  bb.config.block = parse_block(need("block"));
  bb.config.hidden_dim = std::stoi(need("hidden_dim"));
  bb.config.activation = parse_activation(need("activation"));
  bb.config.num_classes = std::stoi(need("num_classes"));
  bb.config.seq_len = std::stoi(need("seq_len"));
  bb.config.vocab_size = std::stoi(need("vocab_size"));
  bb.config.validate();
  bb.embedding = load_matrix(dir / "embedding.mat");
  bb.positional = load_matrix(dir / "positional.mat");
  for (int t = 0; t < bb.config.num_layers; ++t) {
    const std::string p = "layer." + std::to_string(t);
    LayerParams lp;
    lp.w1 = load_matrix(dir / (p + ".W1.mat"));
    if (bb.config.block == BlockKind::kMlp) lp.w2 = load_matrix(dir / (p + ".W2.mat"));
    bb.layers.push_back(std::move(lp));
  }
  bb.head.weight = load_matrix(dir / "head.W.mat");
  bb.head.bias = load_matrix(dir / "head.b.mat");
  return bb;
}

}  // namespace molex

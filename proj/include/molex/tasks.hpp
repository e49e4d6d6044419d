// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tasks. Content tokens are 1..V-1 (V-1 must be even); token 0 is
// padding. Every content token has a synonym half a vocabulary away, and the
// base task groups tokens by (tok-1) mod C so synonyms share a group.
//
//   group_majority        C-way: which token group occurs most often
//   majority_token        binary: do upper-half tokens outnumber lower-half ones
//   pattern_pair          binary: the sequence is two segments, each a
//                         paraphrase of a template. Same-pattern pairs repeat
//                         the first segment's template; different-pattern
//                         pairs take the second template from a disjoint
//                         family.
//   pattern_pair_shifted  pattern_pair with most tokens swapped for synonyms
//   random_labels         uniform tokens, labels independent of the input

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "molex/backbone.hpp"
#include "molex/rng.hpp"

namespace molex {

enum class TaskKind { kClassification, kPairClassification };

struct TaskSpec {
  std::string name = "majority_token";
  std::uint64_t seed = 0;
  int num_classes = 2;
  int seq_len = 16;
  int vocab_size = 33;
  int train_size = 2000;
  int val_size = 500;
  int test_size = 1000;
  double paraphrase_rate = 0.2;  // synonym substitution probability (pair tasks)
  double corruption_rate = 0.1;  // random-token substitution probability (pair tasks)
  int patterns_per_family = 4;
  std::uint64_t pattern_seed = 7;  // shared by pattern_pair and its shifted variant

  TaskKind kind() const {
    return name.rfind("pattern_pair", 0) == 0 ? TaskKind::kPairClassification : TaskKind::kClassification;
  }

  void validate() const {
    static const char* known[] = {"group_majority", "majority_token", "pattern_pair", "pattern_pair_shifted",
                                  "random_labels"};
    bool ok = false;
    for (const char* k : known) ok = ok || name == k;
    if (!ok) throw ConfigError("task.name: unknown task '" + name + "'");
    if (num_classes < 2) throw ConfigError("task.num_classes must be >= 2");
    if (vocab_size < 5 || (vocab_size - 1) % 2 != 0) {
      throw ConfigError("task.vocab_size must be odd and >= 5 (an even number of content tokens)");
    }
    if (kind() == TaskKind::kPairClassification) {
      if (num_classes != 2) throw ConfigError("pair tasks are binary");
      if (seq_len < 2 || seq_len % 2 != 0) throw ConfigError("pair tasks need an even seq_len");
    }
    if (name == "majority_token" && num_classes != 2) throw ConfigError("majority_token is binary");
    if (train_size < 1 || val_size < 1 || test_size < 1) throw ConfigError("task split sizes must be >= 1");
  }
};

struct Example {
  std::vector<int> tokens;
  int label = 0;
};

struct Dataset {
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

enum class Split : std::uint64_t { kTrain = 1, kVal = 2, kTest = 3 };

inline int content_tokens(int vocab) { return vocab - 1; }

inline int synonym(int tok, int vocab) {
  const int m = content_tokens(vocab);
  return ((tok - 1 + m / 2) % m) + 1;
}

inline int random_content(Rng& rng, int vocab) {
  return 1 + static_cast<int>(rng.uniform_int(static_cast<std::size_t>(content_tokens(vocab))));
}

namespace detail {

inline Example group_majority_example(int label, const TaskSpec& spec, Rng& rng) {
  const int c = spec.num_classes;
  const int m = content_tokens(spec.vocab_size);
  while (true) {
    Example ex;
    ex.label = label;
    std::vector<int> count(c, 0);
    for (int n = 0; n < spec.seq_len; ++n) {
      const int g = rng.uniform() < 0.5 ? label : static_cast<int>(rng.uniform_int(c));
      // tokens with (tok-1) mod c == g
      const int per_group = (m - g + c - 1) / c;
      const int tok = 1 + g + c * static_cast<int>(rng.uniform_int(per_group));
      ex.tokens.push_back(tok);
      ++count[g];
    }
    bool strict = true;
    for (int g = 0; g < c; ++g) strict = strict && (g == label || count[g] < count[label]);
    if (strict) return ex;
  }
}

inline bool is_upper(int tok, int vocab) { return tok - 1 >= content_tokens(vocab) / 2; }

inline Example majority_token_example(int label, const TaskSpec& spec, Rng& rng) {
  const int half = content_tokens(spec.vocab_size) / 2;
  while (true) {
    Example ex;
    ex.label = label;
    int upper = 0;
    for (int n = 0; n < spec.seq_len; ++n) {
      const bool up = rng.uniform() < (label == 1 ? 0.6 : 0.4);
      const int tok = 1 + static_cast<int>(rng.uniform_int(half)) + (up ? half : 0);
      ex.tokens.push_back(tok);
      upper += up;
    }
    const int lower = spec.seq_len - upper;
    if ((label == 1 && upper > lower) || (label == 0 && lower > upper)) return ex;
  }
}

struct PatternBank {
  std::vector<std::vector<int>> same_family;   // templates for the first segment
  std::vector<std::vector<int>> other_family;  // templates for different-pattern second segments
};

inline PatternBank make_patterns(const TaskSpec& spec) {
  Rng rng(spec.pattern_seed);
  const int len = spec.seq_len / 2;
  PatternBank bank;
  for (int f = 0; f < 2; ++f) {
    auto& fam = f == 0 ? bank.same_family : bank.other_family;
    for (int p = 0; p < spec.patterns_per_family; ++p) {
      std::vector<int> tpl;
      for (int n = 0; n < len; ++n) tpl.push_back(random_content(rng, spec.vocab_size));
      fam.push_back(std::move(tpl));
    }
  }
  return bank;
}

inline void paraphrase_into(const std::vector<int>& tpl, const TaskSpec& spec, Rng& rng, std::vector<int>& out) {
  for (int tok : tpl) {
    int t = tok;
    if (rng.uniform() < spec.paraphrase_rate) t = synonym(t, spec.vocab_size);
    if (rng.uniform() < spec.corruption_rate) t = random_content(rng, spec.vocab_size);
    out.push_back(t);
  }
}

inline Example pattern_pair_example(int label, const TaskSpec& spec, const PatternBank& bank, Rng& rng) {
  Example ex;
  ex.label = label;
  const auto& first = bank.same_family[rng.uniform_int(bank.same_family.size())];
  paraphrase_into(first, spec, rng, ex.tokens);
  const auto& second = label == 1 ? first : bank.other_family[rng.uniform_int(bank.other_family.size())];
  paraphrase_into(second, spec, rng, ex.tokens);
  return ex;
}

}  // namespace detail

inline std::vector<Example> make_split(const TaskSpec& spec, Split split, std::size_t n) {
  spec.validate();
  Rng rng = Rng(spec.seed).fork(static_cast<std::uint64_t>(split));
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
  rng.shuffle(labels);

  TaskSpec eff = spec;
  if (spec.name == "pattern_pair_shifted") eff.paraphrase_rate = std::max(spec.paraphrase_rate, 0.8);
  const auto bank = eff.kind() == TaskKind::kPairClassification ? detail::make_patterns(eff) : detail::PatternBank{};

  std::vector<Example> out;
  out.reserve(n);
  for (int label : labels) {
    if (spec.name == "group_majority") {
      out.push_back(detail::group_majority_example(label, eff, rng));
    } else if (spec.name == "majority_token") {
      out.push_back(detail::majority_token_example(label, eff, rng));
    } else if (eff.kind() == TaskKind::kPairClassification) {
      out.push_back(detail::pattern_pair_example(label, eff, bank, rng));
    } else {
      Example ex;
      ex.label = label;
      for (int k = 0; k < spec.seq_len; ++k) ex.tokens.push_back(random_content(rng, spec.vocab_size));
      out.push_back(std::move(ex));
    }
  }
  return out;
}

inline Dataset make_dataset(const TaskSpec& spec) {
  return Dataset{make_split(spec, Split::kTrain, spec.train_size), make_split(spec, Split::kVal, spec.val_size),
                 make_split(spec, Split::kTest, spec.test_size)};
}

}  // namespace molex

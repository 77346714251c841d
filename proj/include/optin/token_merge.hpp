#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "optin/tensor.hpp"

namespace optin {

/// Per-sample token reduction plan: for every surviving output token, the list
/// of input tokens averaged into it. Applying one plan to several tensors that
/// share the [B,T,*] token layout keeps them aligned.
struct MergePlan {
  std::size_t batch = 0;
  std::size_t tokens_in = 0;
  std::size_t tokens_out = 0;
  // groups[b][o] = input token indices averaged into output token o.
  std::vector<std::vector<std::vector<std::size_t>>> groups;
};

inline Tensor apply_merge(const MergePlan& plan, const Tensor& f) {
  require(f.rank() == 3 && f.dim(0) == plan.batch && f.dim(1) == plan.tokens_in,
          ErrorCode::shape_mismatch,
          "merge plan does not fit tensor " + shape_str(f.shape()));
  const std::size_t d = f.dim(2);
  Tensor out({plan.batch, plan.tokens_out, d});
  for (std::size_t b = 0; b < plan.batch; ++b) {
    for (std::size_t o = 0; o < plan.tokens_out; ++o) {
      const auto& src = plan.groups[b][o];
      for (std::size_t k = 0; k < d; ++k) {
        double s = 0.0;
        for (auto t : src) s += f.at(b, t, k);
        out.at(b, o, k) = s / static_cast<double>(src.size());
      }
    }
  }
  return out;
}

inline std::size_t max_bipartite_merge(std::size_t tokens) {
  return tokens == 0 ? 0 : (tokens - 1) / 2;
}

/// ToMe-style bipartite soft matching. Token 0 is the class token and is never
/// merged. The remaining tokens alternate into set A (positions 1,3,5,...) and
/// set B (2,4,6,...). Every A token is scored by its best cosine similarity to
/// B; the r best-scoring A tokens are averaged into their B match.
inline MergePlan bipartite_merge_plan(const Tensor& f, std::size_t r) {
  require(f.rank() == 3, ErrorCode::shape_mismatch,
          "bipartite_merge expects [B,T,D]");
  const std::size_t batch = f.dim(0), tokens = f.dim(1), d = f.dim(2);
  require(r <= max_bipartite_merge(tokens), ErrorCode::invalid_parameter,
          "merge count " + std::to_string(r) + " exceeds (T-1)/2 for T=" +
              std::to_string(tokens));
  MergePlan plan{batch, tokens, tokens - r, {}};
  plan.groups.resize(batch);

  std::vector<std::size_t> set_a, set_b;
  for (std::size_t t = 1; t < tokens; ++t) (t % 2 == 1 ? set_a : set_b).push_back(t);

  std::vector<double> norms(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < tokens; ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) s += double(f.at(b, t, k)) * f.at(b, t, k);
      norms[t] = std::sqrt(s);
    }
    // Best B partner and its similarity for every A token.
    std::vector<std::size_t> partner(set_a.size(), 0);
    std::vector<double> score(set_a.size(), -INFINITY);
    for (std::size_t ai = 0; ai < set_a.size(); ++ai) {
      for (std::size_t bi = 0; bi < set_b.size(); ++bi) {
        const std::size_t ta = set_a[ai], tb = set_b[bi];
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += double(f.at(b, ta, k)) * f.at(b, tb, k);
        const double denom = norms[ta] * norms[tb];
        const double cos = denom > 0.0 ? dot / denom : 0.0;
        if (cos > score[ai]) {
          score[ai] = cos;
          partner[ai] = bi;
        }
      }
    }
    std::vector<std::size_t> order(set_a.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });

    std::vector<char> merged(tokens, 0);
    std::vector<std::vector<std::size_t>> extra(tokens);
    for (std::size_t k = 0; k < r; ++k) {
      const std::size_t ai = order[k];
      merged[set_a[ai]] = 1;
      extra[set_b[partner[ai]]].push_back(set_a[ai]);
    }
    auto& groups = plan.groups[b];
    for (std::size_t t = 0; t < tokens; ++t) {
      if (merged[t]) continue;
      std::vector<std::size_t> g{t};
      g.insert(g.end(), extra[t].begin(), extra[t].end());
      groups.push_back(std::move(g));
    }
  }
  return plan;
}

inline Tensor bipartite_merge(const Tensor& f, std::size_t r) {
  if (r == 0) {
    require(f.rank() == 3, ErrorCode::shape_mismatch,
            "bipartite_merge expects [B,T,D]");
    return f;
  }
  return apply_merge(bipartite_merge_plan(f, r), f);
}

/// Drops r non-class tokens chosen uniformly per sample from a seeded stream.
inline MergePlan random_prune_plan(const Tensor& f, std::size_t r,
                                   std::uint64_t seed) {
  require(f.rank() == 3, ErrorCode::shape_mismatch,
          "random_prune_tokens expects [B,T,D]");
  const std::size_t batch = f.dim(0), tokens = f.dim(1);
  require(r < tokens, ErrorCode::invalid_parameter,
          "cannot drop " + std::to_string(r) + " of " + std::to_string(tokens) +
              " tokens (class token is kept)");
  MergePlan plan{batch, tokens, tokens - r, {}};
  plan.groups.resize(batch);
  std::mt19937_64 rng(seed);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<std::size_t> pool(tokens - 1);
    std::iota(pool.begin(), pool.end(), 1);
    // Partial Fisher-Yates: the first r entries are the dropped tokens.
    for (std::size_t k = 0; k < r; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng() % (pool.size() - k));
      std::swap(pool[k], pool[j]);
    }
    std::vector<char> dropped(tokens, 0);
    for (std::size_t k = 0; k < r; ++k) dropped[pool[k]] = 1;
    for (std::size_t t = 0; t < tokens; ++t)
      if (!dropped[t]) plan.groups[b].push_back({t});
  }
  return plan;
}

inline Tensor random_prune_tokens(const Tensor& f, std::size_t r,
                                  std::uint64_t seed) {
  return apply_merge(random_prune_plan(f, r, seed), f);
}

}  // namespace optin

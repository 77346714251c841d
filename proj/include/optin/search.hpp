#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <tuple>
#include <vector>

#include "optin/cnn.hpp"
#include "optin/cost.hpp"
#include "optin/importance.hpp"

namespace optin {

struct SearchStep {
  std::size_t heads = 0;    // heads kept at this step
  std::size_t neurons = 0;  // neurons that fit after those heads
  double cumulative = 0.0;
};

struct SearchResult {
  PruneMask mask;
  double cumulative_importance = 0.0;
  Flops achieved_flops = 0;
  std::size_t best_step = 0;  // index into step_log
  std::vector<SearchStep> step_log;
};

struct UnitRef {
  std::size_t block;
  std::size_t index;
  double score;
};

namespace detail {

inline void check_table(const ImportanceTable& t, const CostModel& cost) {
  require(t.heads.size() == cost.n_blocks() && t.neurons.size() == cost.n_blocks(),
          ErrorCode::shape_mismatch, "importance table block count differs from model");
  for (std::size_t i = 0; i < cost.n_blocks(); ++i) {
    require(t.heads[i].size() == cost.n_heads() && t.neurons[i].size() == cost.ffn_dim(i),
            ErrorCode::shape_mismatch, "importance table shape differs from model");
    for (double v : t.heads[i])
      require(std::isfinite(v) && v >= 0.0, ErrorCode::invalid_parameter,
              "importance scores must be finite and non-negative");
    for (double v : t.neurons[i])
      require(std::isfinite(v) && v >= 0.0, ErrorCode::invalid_parameter,
              "importance scores must be finite and non-negative");
  }
}

inline bool ranks_before(const UnitRef& a, const UnitRef& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.block, a.index) < std::tie(b.block, b.index);
}

inline void sort_mask(PruneMask& mask) {
  for (auto& h : mask.heads) std::sort(h.begin(), h.end());
  for (auto& n : mask.neurons) std::sort(n.begin(), n.end());
}

}  // namespace detail

/// Head admission order: the best head of every block first (the one-head
/// floor), then all remaining heads by descending score. Ties rank by
/// (block, index).
inline std::vector<UnitRef> head_order(const ImportanceTable& t) {
  std::vector<UnitRef> floor, rest;
  for (std::size_t i = 0; i < t.heads.size(); ++i) {
    std::vector<UnitRef> block;
    for (std::size_t h = 0; h < t.heads[i].size(); ++h) block.push_back({i, h, t.heads[i][h]});
    std::sort(block.begin(), block.end(), detail::ranks_before);
    floor.push_back(block.front());
    rest.insert(rest.end(), block.begin() + 1, block.end());
  }
  std::sort(floor.begin(), floor.end(), detail::ranks_before);
  std::sort(rest.begin(), rest.end(), detail::ranks_before);
  floor.insert(floor.end(), rest.begin(), rest.end());
  return floor;
}

inline std::vector<UnitRef> neuron_order(const ImportanceTable& t) {
  std::vector<UnitRef> all;
  for (std::size_t i = 0; i < t.neurons.size(); ++i)
    for (std::size_t n = 0; n < t.neurons[i].size(); ++n) all.push_back({i, n, t.neurons[i][n]});
  std::sort(all.begin(), all.end(), detail::ranks_before);
  return all;
}

/// Partitioned greedy mask search. For every head count k from one-per-block
/// up to all heads, keep the first k heads of head_order(), then admit
/// neurons in descending score order until the next one would overshoot the
/// budget. The step with the largest cumulative importance wins; ties go to
/// the smaller k.
inline SearchResult mask_search(const ImportanceTable& table, const CostModel& cost, Flops budget) {
  detail::check_table(table, cost);
  require(budget >= cost.minimal_cost(), ErrorCode::infeasible_budget,
          "budget " + std::to_string(budget) + " is below the minimal legal mask cost " +
              std::to_string(cost.minimal_cost()));
  const std::size_t t = cost.seq_len();
  const auto heads = head_order(table);
  const auto neurons = neuron_order(table);

  // Prefix sums of neuron cost and score in admission order.
  std::vector<Flops> ncost(neurons.size() + 1, 0);
  std::vector<double> nscore(neurons.size() + 1, 0.0);
  for (std::size_t k = 0; k < neurons.size(); ++k) {
    ncost[k + 1] = ncost[k] + cost.neuron_cost(t);
    nscore[k + 1] = nscore[k] + neurons[k].score;
  }

  SearchResult res;
  Flops used = cost.fixed_total();
  double head_score = 0.0;
  std::optional<std::size_t> best;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    used += cost.head_cost(t);
    head_score += heads[k].score;
    if (k + 1 < cost.n_blocks()) continue;
    if (used > budget) break;
    const Flops room = budget - used;
    const std::size_t fill =
        static_cast<std::size_t>(std::upper_bound(ncost.begin(), ncost.end(), room) - ncost.begin()) - 1;
    res.step_log.push_back({k + 1, fill, head_score + nscore[fill]});
    if (!best || res.step_log.back().cumulative > res.step_log[*best].cumulative)
      best = res.step_log.size() - 1;
  }
  res.best_step = *best;
  const auto& step = res.step_log[*best];
  res.mask.heads.assign(cost.n_blocks(), {});
  res.mask.neurons.assign(cost.n_blocks(), {});
  for (std::size_t k = 0; k < step.heads; ++k) res.mask.heads[heads[k].block].push_back(heads[k].index);
  for (std::size_t k = 0; k < step.neurons; ++k)
    res.mask.neurons[neurons[k].block].push_back(neurons[k].index);
  detail::sort_mask(res.mask);
  res.cumulative_importance = step.cumulative;
  res.achieved_flops = cost.flops(res.mask);
  return res;
}

struct TokenRemoval {
  std::size_t block;
  std::size_t token;
};

/// Derives per-block token counts by removing (block, token) units in
/// ascending score order until flops(mask) <= budget. Removing token j at
/// block i drops it from every later block. Equal scores remove at the
/// deepest block first. Removals that save no FLOPs are skipped. When
/// `removals` is given it receives the accepted (block, token) removals in
/// order.
inline std::vector<std::size_t> token_schedule(const std::vector<std::vector<double>>& token_scores,
                                               const CostModel& cost, const PruneMask& mask,
                                               Flops budget,
                                               std::vector<TokenRemoval>* removals = nullptr) {
  const std::size_t n = cost.n_blocks(), tokens = cost.seq_len();
  require(token_scores.size() == n, ErrorCode::shape_mismatch,
          "token score table must have one row per block");
  for (const auto& row : token_scores)
    require(row.size() == tokens, ErrorCode::shape_mismatch,
            "token score rows must cover the sequence length");

  if (removals) removals->clear();
  PruneMask work = mask;
  work.token_counts = std::vector<std::size_t>(n, tokens);
  if (cost.flops(work) <= budget) return *work.token_counts;

  struct Cand {
    std::size_t block, token;
    double score;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 1; j < tokens; ++j) cands.push_back({i, j, token_scores[i][j]});
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.block != b.block) return a.block > b.block;
    return a.token < b.token;
  });

  std::vector<std::size_t> removed_at(tokens, n);  // n = never removed
  auto counts_of = [&] {
    std::vector<std::size_t> c(n, tokens);
    for (std::size_t j = 1; j < tokens; ++j)
      for (std::size_t i = removed_at[j]; i < n; ++i) --c[i];
    return c;
  };
  Flops current = cost.flops(work);
  for (const auto& c : cands) {
    if (c.score == kProtectedScore || removed_at[c.token] <= c.block) continue;
    const std::size_t before = removed_at[c.token];
    removed_at[c.token] = c.block;
    work.token_counts = counts_of();
    const Flops next = cost.flops(work);
    if (next >= current) {
      removed_at[c.token] = before;
      continue;
    }
    current = next;
    if (removals) removals->push_back({c.block, c.token});
    if (current <= budget) return *work.token_counts;
  }
  fail(ErrorCode::infeasible_budget, "budget " + std::to_string(budget) +
                                         " unreachable even with one token per block");
}

/// CNN channel selection: keeps the ceil(keep_ratio * C) highest-scoring
/// output channels of every conv layer, at least one per layer. Equal scores
/// keep the lower index.
inline ChannelMask channel_keep(const std::vector<std::vector<double>>& scores, const CnnGraph& g,
                                double keep_ratio) {
  require(keep_ratio > 0.0 && keep_ratio <= 1.0, ErrorCode::invalid_parameter,
          "keep ratio must lie in (0, 1]");
  require(scores.size() == g.n_layers(), ErrorCode::shape_mismatch,
          "channel score table layer count differs from model");
  ChannelMask mask;
  for (std::size_t i = 0; i < g.n_layers(); ++i) {
    const std::size_t c = g.layers[i].out_channels();
    require(scores[i].size() == c, ErrorCode::shape_mismatch,
            "channel score row " + std::to_string(i) + " has the wrong length");
    const auto keep = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(keep_ratio * static_cast<double>(c) - 1e-9)));
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[i][a] > scores[i][b]; });
    order.resize(keep);
    std::sort(order.begin(), order.end());
    mask.channels.push_back(std::move(order));
  }
  return mask;
}

}  // namespace optin

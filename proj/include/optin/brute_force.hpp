#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "optin/search.hpp"

namespace optin {

enum class OracleMode {
  partitioned,  // every (head prefix, neuron prefix) step of the partitioned space
  all_subsets,  // every legal subset of heads and neurons; tiny instances only
};

inline constexpr std::size_t kMaxSubsetUnits = 24;

/// Exhaustive reference for mask_search.
///
/// Partitioned mode scores every pair (k heads, p neurons) with k >= one per
/// block, independent of any greedy stopping rule, and keeps the best
/// feasible pair (ties: smaller k, then larger p). All-subsets mode walks every
/// legal head/neuron subset to find the true optimum of the relaxed problem.
inline SearchResult brute_force_oracle(const ImportanceTable& table, const CostModel& cost,
                                       Flops budget, OracleMode mode) {
  detail::check_table(table, cost);
  const std::size_t n = cost.n_blocks(), t = cost.seq_len();
  require(budget >= cost.minimal_cost(), ErrorCode::infeasible_budget,
          "budget below the minimal legal mask cost");
  SearchResult res;
  res.mask.heads.assign(n, {});
  res.mask.neurons.assign(n, {});

  if (mode == OracleMode::partitioned) {
    const auto heads = head_order(table);
    const auto neurons = neuron_order(table);
    bool found = false;
    std::size_t best_k = 0, best_p = 0;
    double best = 0.0;
    for (std::size_t k = n; k <= heads.size(); ++k) {
      for (std::size_t p = 0; p <= neurons.size(); ++p) {
        PruneMask m;
        m.heads.assign(n, {});
        m.neurons.assign(n, {});
        double head_sum = 0.0, neuron_sum = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
          m.heads[heads[a].block].push_back(heads[a].index);
          head_sum += heads[a].score;
        }
        for (std::size_t b = 0; b < p; ++b) {
          m.neurons[neurons[b].block].push_back(neurons[b].index);
          neuron_sum += neurons[b].score;
        }
        const double score = head_sum + neuron_sum;
        if (cost.flops(m) > budget) continue;
        const bool better = !found || score > best || (score == best && k == best_k && p > best_p);
        if (better) {
          found = true;
          best = score;
          best_k = k;
          best_p = p;
          res.mask = m;
        }
      }
    }
    res.cumulative_importance = best;
    res.step_log.push_back({best_k, best_p, best});
  } else {
    std::size_t units = n * cost.n_heads();
    for (std::size_t i = 0; i < n; ++i) units += cost.ffn_dim(i);
    require(units <= kMaxSubsetUnits, ErrorCode::instance_too_large,
            "all-subsets oracle limited to " + std::to_string(kMaxSubsetUnits) + " units");
    struct Item {
      std::size_t block, index;
      bool head;
      double score;
      Flops cost;
    };
    std::vector<Item> items;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t h = 0; h < cost.n_heads(); ++h)
        items.push_back({i, h, true, table.heads[i][h], cost.head_cost(t)});
      for (std::size_t j = 0; j < cost.ffn_dim(i); ++j)
        items.push_back({i, j, false, table.neurons[i][j], cost.neuron_cost(t)});
    }
    const Flops fixed = cost.fixed_total();
    double best = -1.0;
    std::uint32_t best_set = 0;
    std::vector<std::size_t> heads_in(n);
    for (std::uint32_t set = 0; set < (1u << items.size()); ++set) {
      std::fill(heads_in.begin(), heads_in.end(), 0);
      Flops used = fixed;
      double score = 0.0;
      for (std::size_t b = 0; b < items.size(); ++b) {
        if (!(set >> b & 1u)) continue;
        used += items[b].cost;
        score += items[b].score;
        if (items[b].head) ++heads_in[items[b].block];
      }
      if (used > budget) continue;
      if (std::any_of(heads_in.begin(), heads_in.end(), [](std::size_t c) { return c == 0; }))
        continue;
      if (score > best) {
        best = score;
        best_set = set;
      }
    }
    for (std::size_t b = 0; b < items.size(); ++b) {
      if (!(best_set >> b & 1u)) continue;
      auto& dst = items[b].head ? res.mask.heads[items[b].block] : res.mask.neurons[items[b].block];
      dst.push_back(items[b].index);
    }
    res.cumulative_importance = best;
  }
  detail::sort_mask(res.mask);
  res.achieved_flops = cost.flops(res.mask);
  return res;
}

}  // namespace optin

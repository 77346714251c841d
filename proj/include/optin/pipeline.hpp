#pragma once

#include <vector>

#include "optin/config.hpp"
#include "optin/cost.hpp"
#include "optin/search.hpp"

namespace optin {

struct Plan {
  SearchResult search;  // mask carries token_counts in tau modes
  Flops budget = 0;
  Flops head_neuron_budget = 0;  // budget handed to mask_search (tau splits it)
  std::vector<TokenRemoval> removals;
};

/// Turns a scored table into a mask for the configured mode.
///   beta    : mask_search at the full budget.
///   tau     : mask_search at budget + token_share * (baseline - budget),
///             then a token schedule closes the remaining gap.
///   tau_inf : all heads and neurons kept; the token schedule does everything.
inline Plan make_plan(const ImportanceTable& table, const CostModel& cost, const RunConfig& cfg) {
  cfg.validate();
  Plan p;
  p.budget = budget_from_ratio(cost, cfg.keep_ratio);
  const bool tokens = cfg.mode != PruneMode::beta;
  if (tokens)
    require(!table.tokens.empty(), ErrorCode::invalid_parameter,
            std::string(to_string(cfg.mode)) + " mode needs token scores");

  if (cfg.mode == PruneMode::tau_inf) {
    p.head_neuron_budget = cost.baseline();
    detail::check_table(table, cost);
    auto& r = p.search;
    r.mask.heads.resize(cost.n_blocks());
    r.mask.neurons.resize(cost.n_blocks());
    for (std::size_t i = 0; i < cost.n_blocks(); ++i) {
      for (std::size_t h = 0; h < cost.n_heads(); ++h) r.mask.heads[i].push_back(h);
      for (std::size_t k = 0; k < cost.ffn_dim(i); ++k) r.mask.neurons[i].push_back(k);
      for (double s : table.heads[i]) r.cumulative_importance += s;
      for (double s : table.neurons[i]) r.cumulative_importance += s;
    }
  } else {
    p.head_neuron_budget = p.budget;
    if (cfg.mode == PruneMode::tau)
      p.head_neuron_budget += static_cast<Flops>(
          cfg.token_share * static_cast<double>(cost.baseline() - p.budget));
    p.search = mask_search(table, cost, p.head_neuron_budget);
  }
  if (tokens)
    p.search.mask.token_counts =
        token_schedule(table.tokens, cost, p.search.mask, p.budget, &p.removals);
  p.search.achieved_flops = cost.flops(p.search.mask);
  return p;
}

}  // namespace optin

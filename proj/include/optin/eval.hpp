#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "optin/cost.hpp"
#include "optin/importance.hpp"
#include "optin/search.hpp"

namespace optin {

struct EvalReport {
  double logit_kl = 0.0;   // mean KL(softmax(base) || softmax(pruned)) at T = 1
  double agreement = 0.0;  // fraction of rows whose argmax matches the base model
  std::optional<double> base_accuracy, pruned_accuracy;  // when labels are present
  Flops baseline_flops = 0, pruned_flops = 0;
  double flops_ratio = 1.0;
};

namespace detail {

inline std::size_t argmax_row(const Tensor& logits, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.dim(1); ++c)
    if (logits.at(r, c) > logits.at(r, best)) best = c;
  return best;
}

}  // namespace detail

inline double agreement(const Tensor& base, const Tensor& pruned) {
  require_same_shape(base, pruned, "agreement");
  std::size_t same = 0;
  for (std::size_t r = 0; r < base.dim(0); ++r)
    same += detail::argmax_row(base, r) == detail::argmax_row(pruned, r);
  return static_cast<double>(same) / static_cast<double>(base.dim(0));
}

inline double accuracy(const Tensor& logits, const std::vector<std::int32_t>& labels) {
  require(labels.size() == logits.dim(0), ErrorCode::shape_mismatch,
          "label count differs from batch size");
  std::size_t hit = 0;
  for (std::size_t r = 0; r < labels.size(); ++r)
    hit += static_cast<std::int32_t>(detail::argmax_row(logits, r)) == labels[r];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline EvalReport compare_logits(const Tensor& base, const Tensor& pruned,
                                 const std::vector<std::int32_t>& labels) {
  EvalReport r;
  r.logit_kl = kd_loss(base, pruned, 1.0);
  r.agreement = agreement(base, pruned);
  if (!labels.empty()) {
    r.base_accuracy = accuracy(base, labels);
    r.pruned_accuracy = accuracy(pruned, labels);
  }
  return r;
}

/// Base model versus the same model under `mask`.
inline EvalReport evaluate(const ModelGraph& m, const CalibrationBatch& batch,
                           const PruneMask& mask) {
  PruneMask full = PruneMask::full(m);
  full.token_counts.reset();
  const Tensor base = forward(m, batch, full).logits;
  EvalReport r = compare_logits(base, forward(m, batch, mask).logits, batch.labels);
  const CostModel cost(m, batch.seq_len());
  r.baseline_flops = cost.baseline();
  r.pruned_flops = cost.flops(mask);
  r.flops_ratio = static_cast<double>(r.pruned_flops) / static_cast<double>(r.baseline_flops);
  return r;
}

/// Random head/neuron mask under `budget`: one random head per block, then
/// the remaining units in random order, each admitted if it still fits.
inline PruneMask random_feasible_mask(const CostModel& cost, Flops budget, std::uint64_t seed) {
  require(budget >= cost.minimal_cost(), ErrorCode::infeasible_budget,
          "budget below the minimal legal mask cost");
  std::mt19937_64 rng(seed);
  const std::size_t n = cost.n_blocks(), t = cost.seq_len();
  PruneMask mask;
  mask.heads.assign(n, {});
  mask.neurons.assign(n, {});
  std::vector<std::tuple<bool, std::size_t, std::size_t>> rest;  // (is_head, block, index)
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t first = std::uniform_int_distribution<std::size_t>(0, cost.n_heads() - 1)(rng);
    mask.heads[i].push_back(first);
    for (std::size_t h = 0; h < cost.n_heads(); ++h)
      if (h != first) rest.emplace_back(true, i, h);
    for (std::size_t k = 0; k < cost.ffn_dim(i); ++k) rest.emplace_back(false, i, k);
  }
  std::shuffle(rest.begin(), rest.end(), rng);
  Flops used = cost.flops(mask);
  for (const auto& [is_head, block, index] : rest) {
    const Flops unit = is_head ? cost.head_cost(t) : cost.neuron_cost(t);
    if (used + unit > budget) continue;
    used += unit;
    (is_head ? mask.heads : mask.neurons)[block].push_back(index);
  }
  detail::sort_mask(mask);
  return mask;
}

}  // namespace optin

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "optin/model.hpp"

namespace optin {

using Flops = std::uint64_t;

/// FLOPs of one sequence through a (masked) encoder.
///
/// A multiply-accumulate counts 2 FLOPs. Per block and input token count T:
///   head   = 2*T*D*d_h*4 + 2*T^2*d_h*2   (Q/K/V/output projections, QK^T, AV)
///   neuron = 4*T*D                       (one W1 column and one W2 row)
///   fixed  = 5*(2*T*D + H*T^2 + T*d_f) + 2*T*D
/// where the fixed part charges 5 FLOPs per element of both LayerNorms, the
/// softmax over every head and GELU over every hidden unit, and 1 FLOP per
/// element of the two residual adds. The tail adds mean pooling (T*D) and the
/// classifier (2*D*C). Embedding lookups and token-merge matching are not
/// counted.
class CostModel {
 public:
  CostModel(const ModelGraph& m, std::size_t seq_len)
      : d_(m.d_model), heads_(m.n_heads), head_dim_(m.head_dim()), classes_(m.n_classes),
        seq_len_(seq_len), pooling_(m.pooling) {
    require(seq_len >= 1, ErrorCode::invalid_parameter, "sequence length must be >= 1");
    for (std::size_t i = 0; i < m.n_blocks(); ++i) ffn_.push_back(m.ffn_dim(i));
    PruneMask full = PruneMask::full(m);
    full.token_counts.reset();
    baseline_ = flops(full);
  }

  std::size_t n_blocks() const { return ffn_.size(); }
  std::size_t n_heads() const { return heads_; }
  std::size_t ffn_dim(std::size_t block) const { return ffn_.at(block); }
  std::size_t seq_len() const { return seq_len_; }
  Flops baseline() const { return baseline_; }

  Flops head_cost(std::size_t tokens) const {
    const Flops t = tokens;
    return 2 * t * d_ * head_dim_ * 4 + 2 * t * t * head_dim_ * 2;
  }
  Flops neuron_cost(std::size_t tokens) const { return 4 * Flops(tokens) * d_; }
  Flops fixed_cost(std::size_t block, std::size_t tokens) const {
    const Flops t = tokens;
    return 5 * (2 * t * d_ + heads_ * t * t + t * ffn_.at(block)) + 2 * t * d_;
  }
  Flops tail_cost(std::size_t tokens_out) const {
    return (pooling_ == Pooling::mean ? Flops(tokens_out) * d_ : 0) + 2 * Flops(d_) * classes_;
  }

  /// Tokens entering each block, followed by the count reaching the pooler.
  std::vector<std::size_t> token_flow(const PruneMask& mask) const {
    std::vector<std::size_t> flow(n_blocks() + 1, seq_len_);
    if (mask.token_counts) {
      require(mask.token_counts->size() == n_blocks(), ErrorCode::mask_mismatch,
              "token_counts length must equal block count");
      for (std::size_t i = 0; i < n_blocks(); ++i) flow[i + 1] = (*mask.token_counts)[i];
    }
    return flow;
  }

  Flops flops(const PruneMask& mask) const {
    require(mask.heads.size() == n_blocks() && mask.neurons.size() == n_blocks(),
            ErrorCode::mask_mismatch, "mask block count differs from cost model");
    const auto flow = token_flow(mask);
    Flops total = 0;
    for (std::size_t i = 0; i < n_blocks(); ++i) {
      require(mask.heads[i].size() <= heads_ && mask.neurons[i].size() <= ffn_[i],
              ErrorCode::mask_mismatch, "mask keeps more units than the model has");
      const std::size_t t = flow[i];
      total += mask.heads[i].size() * head_cost(t) + mask.neurons[i].size() * neuron_cost(t) +
               fixed_cost(i, t);
    }
    return total + tail_cost(flow.back());
  }

  /// Cost of the smallest legal mask: one head per block, no neurons.
  Flops minimal_cost() const {
    Flops total = 0;
    for (std::size_t i = 0; i < n_blocks(); ++i)
      total += head_cost(seq_len_) + fixed_cost(i, seq_len_);
    return total + tail_cost(seq_len_);
  }

  /// Cost of everything a head/neuron mask cannot remove (fixed + tail).
  Flops fixed_total() const {
    Flops total = 0;
    for (std::size_t i = 0; i < n_blocks(); ++i) total += fixed_cost(i, seq_len_);
    return total + tail_cost(seq_len_);
  }

 private:
  std::size_t d_, heads_, head_dim_, classes_, seq_len_;
  Pooling pooling_;
  std::vector<std::size_t> ffn_;
  Flops baseline_ = 0;
};

inline Flops flops(const ModelGraph& m, const PruneMask& mask, std::size_t seq_len) {
  validate_mask(m, mask);
  return CostModel(m, seq_len).flops(mask);
}

/// floor(keep_ratio * baseline) for keep_ratio in (0, 1].
inline Flops budget_from_ratio(Flops baseline, double keep_ratio) {
  require(keep_ratio > 0.0 && keep_ratio <= 1.0, ErrorCode::invalid_parameter,
          "keep ratio must lie in (0, 1]");
  return static_cast<Flops>(std::floor(keep_ratio * static_cast<double>(baseline)));
}

inline Flops budget_from_ratio(const CostModel& cost, double keep_ratio) {
  return budget_from_ratio(cost.baseline(), keep_ratio);
}

}  // namespace optin

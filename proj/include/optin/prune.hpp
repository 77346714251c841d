#pragma once

#include "optin/model.hpp"

namespace optin {

/// Bakes a mask into a standalone model. Removed neurons are dropped from
/// W1/W2 (a block left with none keeps a single all-zero neuron); removed
/// heads keep their slots with zeroed Q/K/V columns and Wo rows. The token
/// counts become the model's token schedule. Running the result with its
/// full mask reproduces forward(m, batch, mask).
inline ModelGraph bake_mask(const ModelGraph& m, const PruneMask& mask) {
  validate_mask(m, mask);
  PruneMask heads_only = PruneMask::full(m);
  heads_only.heads = mask.heads;
  ModelGraph out = zero_masked_weights(m, heads_only);
  const std::size_t d = m.d_model;
  for (std::size_t i = 0; i < m.n_blocks(); ++i) {
    const auto& keep = mask.neurons[i];
    const std::size_t kept = std::max<std::size_t>(keep.size(), 1);
    const auto& src = m.blocks[i];
    Tensor w1({d, kept}), w2({kept, d});
    for (std::size_t c = 0; c < keep.size(); ++c)
      for (std::size_t r = 0; r < d; ++r) {
        w1.at(r, c) = src.w1.at(r, keep[c]);
        w2.at(c, r) = src.w2.at(keep[c], r);
      }
    out.blocks[i].w1 = std::move(w1);
    out.blocks[i].w2 = std::move(w2);
  }
  out.token_schedule = mask.token_counts;
  out.validate();
  return out;
}

}  // namespace optin

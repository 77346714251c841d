#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "optin/tensor.hpp"
#include "optin/token_merge.hpp"

namespace optin {

/// Where a block's feature F_i is captured.
///   ffn      - output of the block's W2 projection, before the residual add
///   l_norm   - block output after the residual, before the next LayerNorm
///   im_dense - hidden activation after W1 + GELU, [B,T,d_f]
enum class TapPoint { l_norm, ffn, im_dense };

enum class Pooling { first_token, mean };

inline const char* to_string(TapPoint t) {
  switch (t) {
    case TapPoint::l_norm: return "l_norm";
    case TapPoint::ffn: return "ffn";
    case TapPoint::im_dense: return "im_dense";
  }
  return "?";
}

inline TapPoint parse_tap(const std::string& s) {
  if (s == "l_norm" || s == "L_NORM" || s == "lnorm") return TapPoint::l_norm;
  if (s == "ffn" || s == "FFN") return TapPoint::ffn;
  if (s == "im_dense" || s == "IM_DENSE") return TapPoint::im_dense;
  fail(ErrorCode::invalid_parameter, "unknown tap point '" + s + "'");
}

inline const char* to_string(Pooling p) {
  return p == Pooling::first_token ? "first_token" : "mean";
}

inline Pooling parse_pooling(const std::string& s) {
  if (s == "first_token" || s == "first" || s == "cls") return Pooling::first_token;
  if (s == "mean") return Pooling::mean;
  fail(ErrorCode::invalid_parameter, "unknown pooling '" + s + "'");
}

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;  // [D]
  Tensor wq, wk, wv, wo;       // [D,D]
  Tensor ln2_gamma, ln2_beta;  // [D]
  Tensor w1;                   // [D,d_f]
  Tensor w2;                   // [d_f,D]

  std::size_t ffn_dim() const { return w1.dim(1); }
};

/// Pre-LN transformer encoder with a linear classifier on the pooled state.
struct ModelGraph {
  std::size_t d_model = 0;
  std::size_t n_heads = 0;
  std::size_t n_classes = 0;
  Pooling pooling = Pooling::first_token;
  std::vector<BlockWeights> blocks;
  Tensor classifier;                // [D, n_classes]
  std::optional<Tensor> embedding;  // [V, D]
  std::optional<Tensor> positional; // [T_max, D]
  // Token counts surviving each block, baked in by `prune`.
  std::optional<std::vector<std::size_t>> token_schedule;

  std::size_t n_blocks() const { return blocks.size(); }
  std::size_t head_dim() const { return n_heads ? d_model / n_heads : 0; }
  std::size_t ffn_dim(std::size_t block) const { return blocks.at(block).ffn_dim(); }
  std::size_t max_tokens() const { return positional ? positional->dim(0) : 0; }

  void validate() const {
    require(!blocks.empty(), ErrorCode::shape_mismatch, "model has no blocks");
    require(n_heads > 0 && d_model % n_heads == 0, ErrorCode::shape_mismatch,
            "d_model must be divisible by n_heads");
    const Shape vec{d_model}, sq{d_model, d_model};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const auto& b = blocks[i];
      const std::string at = "block " + std::to_string(i) + ": ";
      for (const Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.ln2_gamma, &b.ln2_beta})
        require(t->shape() == vec, ErrorCode::shape_mismatch, at + "layer-norm shape");
      for (const Tensor* t : {&b.wq, &b.wk, &b.wv, &b.wo})
        require(t->shape() == sq, ErrorCode::shape_mismatch, at + "attention weight shape");
      require(b.w1.rank() == 2 && b.w1.dim(0) == d_model, ErrorCode::shape_mismatch,
              at + "w1 shape " + shape_str(b.w1.shape()));
      require(b.w2.shape() == Shape{b.w1.dim(1), d_model}, ErrorCode::shape_mismatch,
              at + "w2 shape " + shape_str(b.w2.shape()));
      for (const Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.wk, &b.wv, &b.wo,
                              &b.ln2_gamma, &b.ln2_beta, &b.w1, &b.w2})
        require(t->all_finite(), ErrorCode::non_finite, at + "non-finite weight");
    }
    require(classifier.shape() == Shape{d_model, n_classes}, ErrorCode::shape_mismatch,
            "classifier shape " + shape_str(classifier.shape()));
    require(classifier.all_finite(), ErrorCode::non_finite, "non-finite classifier");
    if (embedding) {
      require(embedding->rank() == 2 && embedding->dim(1) == d_model,
              ErrorCode::shape_mismatch, "embedding shape");
      require(embedding->all_finite(), ErrorCode::non_finite, "non-finite embedding");
    }
    if (positional) {
      require(positional->rank() == 2 && positional->dim(1) == d_model,
              ErrorCode::shape_mismatch, "positional shape");
      require(positional->all_finite(), ErrorCode::non_finite, "non-finite positional table");
    }
    if (token_schedule)
      require(token_schedule->size() == blocks.size(), ErrorCode::shape_mismatch,
              "token schedule length must equal block count");
  }
};

/// Calibration inputs: token ids [B,T] (needs an embedding table) or
/// pre-embedded features. Features are [B,T,D] for transformers and
/// [B,C,H,W] for CNNs.
struct CalibrationBatch {
  std::vector<std::int32_t> tokens;
  Shape token_shape;
  Tensor features;
  std::vector<std::int32_t> labels;

  static CalibrationBatch from_tokens(std::vector<std::int32_t> ids, std::size_t batch,
                                      std::size_t seq_len) {
    require(batch > 0 && seq_len > 0 && ids.size() == batch * seq_len,
            ErrorCode::shape_mismatch, "token batch must be [B,T] with B,T >= 1");
    CalibrationBatch b;
    b.tokens = std::move(ids);
    b.token_shape = {batch, seq_len};
    return b;
  }

  static CalibrationBatch from_features(Tensor f) {
    require(f.rank() >= 3, ErrorCode::shape_mismatch,
            "feature batch must be [B,T,D] or [B,C,H,W]");
    CalibrationBatch b;
    b.features = std::move(f);
    return b;
  }

  bool has_tokens() const { return !tokens.empty(); }
  std::size_t batch_size() const { return has_tokens() ? token_shape[0] : features.dim(0); }
  std::size_t seq_len() const { return has_tokens() ? token_shape[1] : features.dim(1); }
};

/// Per-block head and neuron keep-sets (sorted indices) plus an optional
/// per-block token schedule (tokens surviving after each block).
struct PruneMask {
  std::vector<std::vector<std::size_t>> heads;
  std::vector<std::vector<std::size_t>> neurons;
  std::optional<std::vector<std::size_t>> token_counts;

  static PruneMask full(const ModelGraph& m) {
    PruneMask mask;
    for (std::size_t i = 0; i < m.n_blocks(); ++i) {
      std::vector<std::size_t> h(m.n_heads), n(m.ffn_dim(i));
      std::iota(h.begin(), h.end(), 0);
      std::iota(n.begin(), n.end(), 0);
      mask.heads.push_back(std::move(h));
      mask.neurons.push_back(std::move(n));
    }
    mask.token_counts = m.token_schedule;
    return mask;
  }

  std::size_t kept_heads() const {
    std::size_t s = 0;
    for (const auto& h : heads) s += h.size();
    return s;
  }
  std::size_t kept_neurons() const {
    std::size_t s = 0;
    for (const auto& n : neurons) s += n.size();
    return s;
  }

  friend bool operator==(const PruneMask&, const PruneMask&) = default;
};

inline void validate_mask(const ModelGraph& m, const PruneMask& mask) {
  require(mask.heads.size() == m.n_blocks() && mask.neurons.size() == m.n_blocks(),
          ErrorCode::mask_mismatch, "mask block count differs from model");
  for (std::size_t i = 0; i < m.n_blocks(); ++i) {
    auto check = [&](const std::vector<std::size_t>& keep, std::size_t limit, const char* what) {
      for (std::size_t k = 0; k < keep.size(); ++k) {
        if (keep[k] >= limit)
          fail(ErrorCode::mask_mismatch,
               std::string(what) + " index out of range in block " + std::to_string(i));
        if (k > 0 && keep[k - 1] >= keep[k])
          fail(ErrorCode::mask_mismatch, std::string(what) + " keep-set must be sorted and unique");
      }
    };
    check(mask.heads[i], m.n_heads, "head");
    check(mask.neurons[i], m.ffn_dim(i), "neuron");
  }
  if (mask.token_counts) {
    const auto& c = *mask.token_counts;
    require(c.size() == m.n_blocks(), ErrorCode::mask_mismatch,
            "token_counts length must equal block count");
    for (std::size_t i = 0; i < c.size(); ++i) {
      require(c[i] >= 1, ErrorCode::mask_mismatch, "token count must be >= 1");
      require(i == 0 || c[i] <= c[i - 1], ErrorCode::mask_mismatch,
              "token counts must be non-increasing");
    }
  }
}

/// Runtime used to realize a token schedule.
enum class TokenReducer { bipartite_merge, random_prune };

/// Token removal used while scoring tokens: token `token` is zeroed at the
/// input of every block after `after_block`, and before pooling.
struct TokenKnockout {
  std::size_t after_block = 0;
  std::size_t token = 0;
};

struct ForwardOptions {
  TokenReducer reducer = TokenReducer::bipartite_merge;
  std::uint64_t reducer_seed = 0;
  std::optional<TokenKnockout> knockout;
};

struct ActivationTrace {
  TapPoint tap = TapPoint::ffn;
  std::vector<Tensor> features;      // F_0..F_{N-1}
  Tensor logits;                     // [B, n_classes]
  std::vector<Tensor> block_inputs;  // state entering block i; [N] = final state
  std::uint64_t input_digest = 0;
};

namespace detail {

inline std::uint64_t digest(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t e : t.shape()) h = (h ^ e) * 1099511628211ull;
  for (double v : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = (h ^ bits) * 1099511628211ull;
  }
  return h;
}

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline std::vector<char> keep_flags(const std::vector<std::size_t>& keep, std::size_t n) {
  std::vector<char> flags(n, 0);
  for (auto k : keep) flags[k] = 1;
  return flags;
}

struct BlockResult {
  Tensor hidden;   // [B,T,D] block output after both residual adds
  Tensor feature;  // tap feature
};

inline BlockResult run_block(const ModelGraph& m, const BlockWeights& w, const Tensor& x,
                             const std::vector<char>& head_keep,
                             const std::vector<char>& neuron_keep, TapPoint tap) {
  const std::size_t batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  const std::size_t rows = batch * tokens, dh = m.head_dim(), df = w.ffn_dim();

  const Tensor h = layer_norm(x, w.ln1_gamma, w.ln1_beta).reshaped({rows, d});
  const Tensor q = matmul(h, w.wq), k = matmul(h, w.wk), v = matmul(h, w.wv);
  Tensor concat({rows, d});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> att(tokens);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < m.n_heads; ++hd) {
      if (!head_keep[hd]) continue;
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < tokens; ++i) {
        const double* qi = q.raw() + (b * tokens + i) * d + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < tokens; ++j) {
          const double* kj = k.raw() + (b * tokens + j) * d + off;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += double(qi[e]) * kj[e];
          att[j] = s * scale;
          mx = std::max(mx, att[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) sum += (att[j] = std::exp(att[j] - mx));
        double* out = concat.raw() + (b * tokens + i) * d + off;
        for (std::size_t e = 0; e < dh; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < tokens; ++j)
            acc += att[j] * v.raw()[(b * tokens + j) * d + off + e];
          out[e] = acc / sum;
        }
      }
    }
  }
  const Tensor attn = matmul(concat, w.wo);
  Tensor mid({batch, tokens, d});
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] = x[i] + attn[i];

  const Tensor h2 = layer_norm(mid, w.ln2_gamma, w.ln2_beta).reshaped({rows, d});
  Tensor act = matmul(h2, w.w1);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t n = 0; n < df; ++n)
      act.at(r, n) = neuron_keep[n] ? gelu(act.at(r, n)) : 0.0;
  const Tensor ffn = matmul(act, w.w2);

  BlockResult res{Tensor({batch, tokens, d}), Tensor()};
  for (std::size_t i = 0; i < mid.size(); ++i) res.hidden[i] = mid[i] + ffn[i];
  switch (tap) {
    case TapPoint::ffn: res.feature = ffn.reshaped({batch, tokens, d}); break;
    case TapPoint::l_norm: res.feature = res.hidden; break;
    case TapPoint::im_dense: res.feature = act.reshaped({batch, tokens, df}); break;
  }
  return res;
}

inline void zero_token(Tensor& x, std::size_t token) {
  const std::size_t batch = x.dim(0), d = x.dim(2);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t k = 0; k < d; ++k) x.at(b, token, k) = 0.0;
}

inline Tensor classify(const ModelGraph& m, const Tensor& x) {
  const std::size_t batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  Tensor pooled({batch, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t k = 0; k < d; ++k) {
      if (m.pooling == Pooling::first_token) {
        pooled.at(b, k) = x.at(b, 0, k);
      } else {
        double s = 0.0;
        for (std::size_t t = 0; t < tokens; ++t) s += x.at(b, t, k);
        pooled.at(b, k) = s / static_cast<double>(tokens);
      }
    }
  }
  return matmul(pooled, m.classifier);
}

// Reduces x (and the tap feature) to `target` tokens.
inline void reduce_tokens(Tensor& x, Tensor& feature, std::size_t target,
                          const ForwardOptions& opt, std::size_t block) {
  while (x.dim(1) > target) {
    const std::size_t cur = x.dim(1);
    MergePlan plan;
    if (opt.reducer == TokenReducer::random_prune) {
      plan = random_prune_plan(x, cur - target,
                               opt.reducer_seed ^ (0x9e3779b97f4a7c15ull * (block + 1)));
    } else if (max_bipartite_merge(cur) > 0) {
      plan = bipartite_merge_plan(x, std::min(cur - target, max_bipartite_merge(cur)));
    } else {
      // T=2 -> 1: no B partner exists; drop the trailing token.
      plan = MergePlan{x.dim(0), cur, 1, {}};
      plan.groups.assign(x.dim(0), {{0}});
    }
    x = apply_merge(plan, x);
    feature = apply_merge(plan, feature);
  }
}

}  // namespace detail

/// Embeds a calibration batch into the [B,T,D] state entering block 0.
inline Tensor embed(const ModelGraph& m, const CalibrationBatch& batch) {
  const std::size_t b = batch.batch_size(), t = batch.seq_len(), d = m.d_model;
  if (m.positional)
    require(t <= m.max_tokens(), ErrorCode::token_overflow,
            "sequence length " + std::to_string(t) + " exceeds positional table " +
                std::to_string(m.max_tokens()));
  Tensor x;
  if (batch.has_tokens()) {
    require(m.embedding.has_value(), ErrorCode::shape_mismatch,
            "token batch requires an embedding table");
    const std::size_t vocab = m.embedding->dim(0);
    x = Tensor({b, t, d});
    for (std::size_t i = 0; i < b * t; ++i) {
      const auto id = batch.tokens[i];
      require(id >= 0 && static_cast<std::size_t>(id) < vocab, ErrorCode::index_out_of_range,
              "token id " + std::to_string(id) + " outside vocabulary");
      std::copy_n(m.embedding->raw() + static_cast<std::size_t>(id) * d, d, x.raw() + i * d);
    }
  } else {
    require(batch.features.rank() == 3 && batch.features.dim(2) == d, ErrorCode::shape_mismatch,
            "feature batch must be [B,T,D] with D=" + std::to_string(d));
    x = batch.features;
  }
  if (m.positional)
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t k = 0; k < d; ++k) x.at(i, j, k) += m.positional->at(j, k);
  return x;
}

namespace detail {

inline ActivationTrace run_from(const ModelGraph& m, const PruneMask& mask, TapPoint tap,
                                std::size_t start, Tensor x, ActivationTrace trace,
                                const ForwardOptions& opt) {
  const std::size_t n = m.n_blocks();
  trace.tap = tap;
  trace.features.resize(n);
  trace.block_inputs.resize(n + 1);
  for (std::size_t i = start; i < n; ++i) {
    if (opt.knockout && i > opt.knockout->after_block) zero_token(x, opt.knockout->token);
    trace.block_inputs[i] = x;
    auto res = run_block(m, m.blocks[i], x, keep_flags(mask.heads[i], m.n_heads),
                         keep_flags(mask.neurons[i], m.ffn_dim(i)), tap);
    x = std::move(res.hidden);
    if (mask.token_counts) {
      const std::size_t target = (*mask.token_counts)[i];
      require(target <= x.dim(1), ErrorCode::token_overflow,
              "token schedule asks for " + std::to_string(target) + " tokens after block " +
                  std::to_string(i) + " but only " + std::to_string(x.dim(1)) + " exist");
      reduce_tokens(x, res.feature, target, opt, i);
    }
    trace.features[i] = std::move(res.feature);
  }
  if (opt.knockout) zero_token(x, opt.knockout->token);
  trace.block_inputs[n] = x;
  trace.logits = classify(m, x);
  return trace;
}

}  // namespace detail

/// Masked forward pass capturing every block's tap feature and the logits.
inline ActivationTrace forward(const ModelGraph& m, const CalibrationBatch& batch,
                               const PruneMask& mask, TapPoint tap = TapPoint::ffn,
                               const ForwardOptions& opt = {}) {
  validate_mask(m, mask);
  require(!(opt.knockout && mask.token_counts), ErrorCode::invalid_parameter,
          "token knockout cannot be combined with a token schedule");
  if (opt.knockout)
    require(opt.knockout->after_block < m.n_blocks() && opt.knockout->token < batch.seq_len(),
            ErrorCode::index_out_of_range, "token knockout out of range");
  Tensor x = embed(m, batch);
  ActivationTrace trace;
  trace.input_digest = detail::digest(x);
  return detail::run_from(m, mask, tap, 0, std::move(x), std::move(trace), opt);
}

/// Re-runs blocks start_block..N-1 from a cached full-mask trace. The mask
/// may differ from the full mask only at or after start_block; features of
/// earlier blocks are copied from the cache. start_block == N recomputes only
/// the pooled logits.
inline ActivationTrace forward_from(const ModelGraph& m, const CalibrationBatch& batch,
                                    const PruneMask& mask, TapPoint tap, std::size_t start_block,
                                    const ActivationTrace& cached,
                                    const ForwardOptions& opt = {}) {
  validate_mask(m, mask);
  const std::size_t n = m.n_blocks();
  require(start_block <= n, ErrorCode::index_out_of_range, "start_block beyond last block");
  require(cached.features.size() == n && cached.block_inputs.size() == n + 1,
          ErrorCode::cache_mismatch, "cached trace has wrong block count");
  require(cached.tap == tap, ErrorCode::cache_mismatch, "cached trace uses a different tap");
  require(cached.block_inputs[0].rank() == 3 &&
              cached.block_inputs[0].dim(0) == batch.batch_size() &&
              cached.block_inputs[0].dim(1) == batch.seq_len(),
          ErrorCode::cache_mismatch, "cached trace was computed on a different batch shape");
  require(detail::digest(cached.block_inputs[0]) == cached.input_digest,
          ErrorCode::cache_mismatch, "cached trace is corrupt");
  if (opt.knockout)
    require(!mask.token_counts && opt.knockout->after_block < n &&
                opt.knockout->token < batch.seq_len() && start_block > opt.knockout->after_block,
            ErrorCode::invalid_parameter, "knockout must lie before start_block");
  if (mask.token_counts)
    for (std::size_t i = 0; i < start_block; ++i)
      require((*mask.token_counts)[i] == cached.features[i].dim(1), ErrorCode::cache_mismatch,
              "token schedule differs from cache before start_block");

  ActivationTrace trace;
  trace.input_digest = cached.input_digest;
  trace.features.assign(cached.features.begin(), cached.features.begin() + start_block);
  trace.block_inputs.assign(cached.block_inputs.begin(), cached.block_inputs.begin() + start_block);
  return detail::run_from(m, mask, tap, start_block, cached.block_inputs[start_block],
                          std::move(trace), opt);
}

/// Copy of the model with every masked head's Wq/Wk/Wv columns and Wo rows,
/// and every masked neuron's W1 column and W2 row, set to zero.
inline ModelGraph zero_masked_weights(const ModelGraph& m, const PruneMask& mask) {
  validate_mask(m, mask);
  ModelGraph out = m;
  const std::size_t d = m.d_model, dh = m.head_dim();
  for (std::size_t i = 0; i < m.n_blocks(); ++i) {
    auto& w = out.blocks[i];
    const auto hk = detail::keep_flags(mask.heads[i], m.n_heads);
    for (std::size_t h = 0; h < m.n_heads; ++h) {
      if (hk[h]) continue;
      for (std::size_t r = 0; r < d; ++r)
        for (std::size_t e = h * dh; e < (h + 1) * dh; ++e) {
          w.wq.at(r, e) = w.wk.at(r, e) = w.wv.at(r, e) = 0.0;
          w.wo.at(e, r) = 0.0;
        }
    }
    const auto nk = detail::keep_flags(mask.neurons[i], m.ffn_dim(i));
    for (std::size_t n = 0; n < m.ffn_dim(i); ++n) {
      if (nk[n]) continue;
      for (std::size_t r = 0; r < d; ++r) w.w1.at(r, n) = w.w2.at(n, r) = 0.0;
    }
  }
  out.token_schedule = mask.token_counts;
  return out;
}

}  // namespace optin

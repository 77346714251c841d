#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "optin/tensor.hpp"

namespace optin {

enum class PoolKind { none, max2, avg2 };

inline const char* to_string(PoolKind p) {
  switch (p) {
    case PoolKind::none: return "none";
    case PoolKind::max2: return "max2";
    case PoolKind::avg2: return "avg2";
  }
  return "?";
}

inline PoolKind parse_pool_kind(const std::string& s) {
  if (s == "none") return PoolKind::none;
  if (s == "max2") return PoolKind::max2;
  if (s == "avg2") return PoolKind::avg2;
  fail(ErrorCode::invalid_parameter, "unknown pool kind '" + s + "'");
}

// Convolution with batch-norm folded into a per-channel affine, then ReLU and
// an optional 2x2 pool.
struct ConvLayer {
  Tensor filters;  // [C_out, C_in, k, k]
  Tensor scale;    // [C_out]
  Tensor shift;    // [C_out]
  std::size_t stride = 1;
  std::size_t pad = 0;
  PoolKind pool = PoolKind::none;

  std::size_t out_channels() const { return filters.dim(0); }
  std::size_t in_channels() const { return filters.dim(1); }
  std::size_t kernel() const { return filters.dim(2); }
};

struct CnnGraph {
  std::vector<ConvLayer> layers;
  Tensor classifier;  // [C_last, n_classes], applied to the global average pool

  std::size_t n_layers() const { return layers.size(); }
  std::size_t n_classes() const { return classifier.dim(1); }
  std::size_t in_channels() const { return layers.front().in_channels(); }

  void validate() const {
    require(!layers.empty(), ErrorCode::shape_mismatch, "cnn has no conv layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string at = "conv " + std::to_string(i) + ": ";
      require(l.filters.rank() == 4 && l.filters.dim(2) == l.filters.dim(3),
              ErrorCode::shape_mismatch, at + "filters must be [C_out,C_in,k,k]");
      require(l.scale.shape() == Shape{l.out_channels()} &&
                  l.shift.shape() == Shape{l.out_channels()},
              ErrorCode::shape_mismatch, at + "affine must be [C_out]");
      require(l.stride >= 1, ErrorCode::shape_mismatch, at + "stride must be >= 1");
      require(i == 0 || layers[i - 1].out_channels() == l.in_channels(),
              ErrorCode::shape_mismatch, at + "input channels do not chain");
      require(l.filters.all_finite() && l.scale.all_finite() && l.shift.all_finite(),
              ErrorCode::non_finite, at + "non-finite weight");
    }
    require(classifier.rank() == 2 && classifier.dim(0) == layers.back().out_channels(),
            ErrorCode::shape_mismatch, "classifier must be [C_last, n_classes]");
    require(classifier.all_finite(), ErrorCode::non_finite, "non-finite classifier");
  }
};

/// Per-layer output-channel keep-sets (sorted).
struct ChannelMask {
  std::vector<std::vector<std::size_t>> channels;

  static ChannelMask full(const CnnGraph& g) {
    ChannelMask m;
    for (const auto& l : g.layers) {
      std::vector<std::size_t> c(l.out_channels());
      std::iota(c.begin(), c.end(), 0);
      m.channels.push_back(std::move(c));
    }
    return m;
  }

  friend bool operator==(const ChannelMask&, const ChannelMask&) = default;
};

inline void validate_mask(const CnnGraph& g, const ChannelMask& mask) {
  require(mask.channels.size() == g.n_layers(), ErrorCode::mask_mismatch,
          "channel mask layer count differs from model");
  for (std::size_t i = 0; i < g.n_layers(); ++i) {
    const auto& keep = mask.channels[i];
    for (std::size_t k = 0; k < keep.size(); ++k)
      if (keep[k] >= g.layers[i].out_channels() || (k > 0 && keep[k - 1] >= keep[k]))
        fail(ErrorCode::mask_mismatch,
             "channel keep-set invalid in layer " + std::to_string(i));
  }
}

struct CnnTrace {
  std::vector<Tensor> features;      // post-ReLU map of each conv layer
  Tensor logits;                     // [B, n_classes]
  std::vector<Tensor> layer_inputs;  // input to layer i; [N] = final pooled map input
};

namespace detail {

inline Tensor conv_layer(const ConvLayer& l, const Tensor& x, const std::vector<char>& keep) {
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(cin == l.in_channels(), ErrorCode::shape_mismatch,
          "conv input has " + std::to_string(cin) + " channels, expected " +
              std::to_string(l.in_channels()));
  const std::size_t k = l.kernel(), s = l.stride, p = l.pad;
  require(h + 2 * p >= k && w + 2 * p >= k, ErrorCode::shape_mismatch,
          "conv kernel larger than padded input");
  const std::size_t oh = (h + 2 * p - k) / s + 1, ow = (w + 2 * p - k) / s + 1;
  const std::size_t cout = l.out_channels();
  Tensor out({batch, cout, oh, ow});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t co = 0; co < cout; ++co) {
      if (!keep[co]) continue;
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const std::ptrdiff_t iy = std::ptrdiff_t(y * s + ky) - std::ptrdiff_t(p);
              if (iy < 0 || iy >= std::ptrdiff_t(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const std::ptrdiff_t ix = std::ptrdiff_t(xo * s + kx) - std::ptrdiff_t(p);
                if (ix < 0 || ix >= std::ptrdiff_t(w)) continue;
                acc += double(x[((b * cin + ci) * h + iy) * w + ix]) *
                       l.filters[((co * cin + ci) * k + ky) * k + kx];
              }
            }
          const double v = acc * l.scale[co] + l.shift[co];
          out[((b * cout + co) * oh + y) * ow + xo] = v > 0.0 ? v : 0.0;
        }
    }
  return out;
}

inline Tensor pool2(const Tensor& x, PoolKind kind) {
  if (kind == PoolKind::none) return x;
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= 2 && w >= 2, ErrorCode::shape_mismatch, "2x2 pool on map smaller than 2x2");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out({batch, c, oh, ow});
  for (std::size_t bc = 0; bc < batch * c; ++bc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        const double* base = x.raw() + bc * h * w;
        const double a = base[(2 * y) * w + 2 * xo], b = base[(2 * y) * w + 2 * xo + 1];
        const double cc = base[(2 * y + 1) * w + 2 * xo], d = base[(2 * y + 1) * w + 2 * xo + 1];
        out[(bc * oh + y) * ow + xo] =
            kind == PoolKind::max2 ? std::max({a, b, cc, d})
                                   : (a + b + cc + d) / 4.0;
      }
  return out;
}

inline Tensor global_avg_classify(const CnnGraph& g, const Tensor& x) {
  const std::size_t batch = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor pooled({batch, c});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += x[(b * c + ch) * hw + i];
      pooled.at(b, ch) = s / static_cast<double>(hw);
    }
  return matmul(pooled, g.classifier);
}

}  // namespace detail

/// Masked CNN forward from layer `start` using cached layer inputs (pass an
/// empty cache with start == 0 for a fresh run). Masked output channels
/// produce all-zero maps.
inline CnnTrace cnn_forward_from(const CnnGraph& g, const Tensor& input, const ChannelMask& mask,
                                 std::size_t start, const CnnTrace* cached) {
  validate_mask(g, mask);
  const std::size_t n = g.n_layers();
  require(start <= n, ErrorCode::index_out_of_range, "start layer beyond last layer");
  CnnTrace trace;
  trace.features.resize(n);
  trace.layer_inputs.resize(n + 1);
  Tensor x;
  if (start == 0) {
    require(input.rank() == 4 && input.dim(1) == g.in_channels(), ErrorCode::shape_mismatch,
            "cnn batch must be [B,C,H,W] with C=" + std::to_string(g.in_channels()));
    x = input;
  } else {
    require(cached && cached->features.size() == n && cached->layer_inputs.size() == n + 1,
            ErrorCode::cache_mismatch, "cnn cache has wrong layer count");
    require(cached->layer_inputs[0].shape() == input.shape(), ErrorCode::cache_mismatch,
            "cnn cache was computed on a different batch");
    for (std::size_t i = 0; i < start; ++i) {
      trace.features[i] = cached->features[i];
      trace.layer_inputs[i] = cached->layer_inputs[i];
    }
    x = cached->layer_inputs[start];
  }
  for (std::size_t i = start; i < n; ++i) {
    trace.layer_inputs[i] = x;
    std::vector<char> keep(g.layers[i].out_channels(), 0);
    for (auto c : mask.channels[i]) keep[c] = 1;
    Tensor act = detail::conv_layer(g.layers[i], x, keep);
    x = detail::pool2(act, g.layers[i].pool);
    trace.features[i] = std::move(act);
  }
  trace.layer_inputs[n] = x;
  trace.logits = detail::global_avg_classify(g, x);
  return trace;
}

inline CnnTrace cnn_forward(const CnnGraph& g, const Tensor& input, const ChannelMask& mask) {
  return cnn_forward_from(g, input, mask, 0, nullptr);
}

/// Physically removes masked channels: the producing filter and affine entry,
/// the consumer's matching input slice, and classifier rows after the last
/// layer. A layer keeps at least one channel; an all-masked layer retains a
/// single channel with zero filter and zero affine.
inline CnnGraph bake_channel_mask(const CnnGraph& g, const ChannelMask& mask) {
  validate_mask(g, mask);
  CnnGraph out;
  std::vector<std::size_t> prev_keep(g.in_channels());
  std::iota(prev_keep.begin(), prev_keep.end(), 0);
  for (std::size_t i = 0; i < g.n_layers(); ++i) {
    const auto& l = g.layers[i];
    const bool dead = mask.channels[i].empty();
    const std::vector<std::size_t> keep = dead ? std::vector<std::size_t>{0} : mask.channels[i];
    const std::size_t k = l.kernel(), cin = prev_keep.size(), cin_old = l.in_channels();
    ConvLayer nl{Tensor({keep.size(), cin, k, k}), Tensor({keep.size()}), Tensor({keep.size()}),
                 l.stride, l.pad, l.pool};
    for (std::size_t o = 0; o < keep.size(); ++o) {
      if (dead) break;
      nl.scale[o] = l.scale[keep[o]];
      nl.shift[o] = l.shift[keep[o]];
      for (std::size_t ci = 0; ci < cin; ++ci)
        std::copy_n(l.filters.raw() + ((keep[o] * cin_old + prev_keep[ci]) * k * k), k * k,
                    nl.filters.raw() + (o * cin + ci) * k * k);
    }
    out.layers.push_back(std::move(nl));
    prev_keep = keep;
  }
  const bool last_dead = mask.channels.back().empty();
  out.classifier = Tensor({prev_keep.size(), g.n_classes()});
  if (!last_dead)
    for (std::size_t r = 0; r < prev_keep.size(); ++r)
      std::copy_n(g.classifier.raw() + prev_keep[r] * g.n_classes(), g.n_classes(),
                  out.classifier.raw() + r * g.n_classes());
  return out;
}

}  // namespace optin

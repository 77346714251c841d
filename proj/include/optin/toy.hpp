#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "optin/cnn.hpp"
#include "optin/model.hpp"

namespace optin {

// Randomly initialized encoders for tests, demos and the acceptance suite.
// Every head and FFN neuron gets its own log-normal gain so that units differ
// in how much they matter, as they do in trained models.
struct ToyTransformerSpec {
  std::size_t blocks = 2;
  std::size_t d_model = 16;
  std::size_t heads = 4;
  std::size_t ffn = 32;
  std::size_t classes = 4;
  std::size_t max_tokens = 16;
  std::size_t vocab = 0;  // 0: the model expects pre-embedded features
  Pooling pooling = Pooling::first_token;
  double unit_spread = 0.75;  // stddev of log unit gain
};

struct ToyCnnSpec {
  std::size_t in_channels = 3;
  std::vector<std::size_t> channels{4, 6};
  std::size_t kernel = 3;
  std::size_t classes = 4;
  double unit_spread = 0.75;
};

namespace detail {

// Draws are rounded to f32 so toy models survive a container round trip.
class ToyRng {
 public:
  explicit ToyRng(std::uint64_t seed) : rng_(seed) {}
  double normal() { return dist_(rng_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_); }
  Tensor normal_tensor(Shape shape, double stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(normal() * stddev);
    return t;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> dist_{0.0, 1.0};
};

}  // namespace detail

inline ModelGraph make_toy_transformer(const ToyTransformerSpec& s, std::uint64_t seed) {
  require(s.heads > 0 && s.d_model % s.heads == 0, ErrorCode::invalid_parameter,
          "toy d_model must be divisible by heads");
  detail::ToyRng rng(seed);
  ModelGraph m;
  m.d_model = s.d_model;
  m.n_heads = s.heads;
  m.n_classes = s.classes;
  m.pooling = s.pooling;
  const double wstd = 1.0 / std::sqrt(double(s.d_model));
  const std::size_t dh = s.d_model / s.heads;
  for (std::size_t i = 0; i < s.blocks; ++i) {
    BlockWeights b;
    b.ln1_gamma = Tensor({s.d_model});
    b.ln2_gamma = Tensor({s.d_model});
    for (std::size_t k = 0; k < s.d_model; ++k) {
      b.ln1_gamma[k] = static_cast<float>(1.0 + 0.1 * rng.normal());
      b.ln2_gamma[k] = static_cast<float>(1.0 + 0.1 * rng.normal());
    }
    b.ln1_beta = rng.normal_tensor({s.d_model}, 0.05);
    b.ln2_beta = rng.normal_tensor({s.d_model}, 0.05);
    b.wq = rng.normal_tensor({s.d_model, s.d_model}, wstd);
    b.wk = rng.normal_tensor({s.d_model, s.d_model}, wstd);
    b.wv = rng.normal_tensor({s.d_model, s.d_model}, wstd);
    b.wo = rng.normal_tensor({s.d_model, s.d_model}, wstd);
    for (std::size_t h = 0; h < s.heads; ++h) {
      const float gain = static_cast<float>(std::exp(s.unit_spread * rng.normal()));
      for (std::size_t e = h * dh; e < (h + 1) * dh; ++e)
        for (std::size_t r = 0; r < s.d_model; ++r) b.wo.at(e, r) = static_cast<float>(b.wo.at(e, r) * gain);
    }
    b.w1 = rng.normal_tensor({s.d_model, s.ffn}, wstd);
    b.w2 = rng.normal_tensor({s.ffn, s.d_model}, 1.0 / std::sqrt(double(s.ffn)));
    for (std::size_t n = 0; n < s.ffn; ++n) {
      const float gain = static_cast<float>(std::exp(s.unit_spread * rng.normal()));
      for (std::size_t r = 0; r < s.d_model; ++r) b.w2.at(n, r) = static_cast<float>(b.w2.at(n, r) * gain);
    }
    m.blocks.push_back(std::move(b));
  }
  m.classifier = rng.normal_tensor({s.d_model, s.classes}, wstd);
  if (s.vocab) m.embedding = rng.normal_tensor({s.vocab, s.d_model}, 1.0);
  m.positional = rng.normal_tensor({s.max_tokens, s.d_model}, 0.5);
  m.validate();
  return m;
}

/// Random calibration batch matching the model's input kind.
inline CalibrationBatch make_toy_batch(const ModelGraph& m, std::size_t batch, std::size_t seq_len,
                                       std::uint64_t seed) {
  detail::ToyRng rng(seed);
  CalibrationBatch b;
  if (m.embedding) {
    std::vector<std::int32_t> ids(batch * seq_len);
    for (auto& id : ids)
      id = static_cast<std::int32_t>(rng.uniform() * static_cast<double>(m.embedding->dim(0)));
    for (auto& id : ids) id = std::min<std::int32_t>(id, std::int32_t(m.embedding->dim(0) - 1));
    b = CalibrationBatch::from_tokens(std::move(ids), batch, seq_len);
  } else {
    b = CalibrationBatch::from_features(rng.normal_tensor({batch, seq_len, m.d_model}, 1.0));
  }
  for (std::size_t i = 0; i < batch; ++i)
    b.labels.push_back(static_cast<std::int32_t>(rng.uniform() * double(m.n_classes)) %
                       std::int32_t(m.n_classes));
  return b;
}

inline CnnGraph make_toy_cnn(const ToyCnnSpec& s, std::uint64_t seed) {
  detail::ToyRng rng(seed);
  CnnGraph g;
  std::size_t cin = s.in_channels;
  for (std::size_t i = 0; i < s.channels.size(); ++i) {
    const std::size_t cout = s.channels[i];
    ConvLayer l;
    l.filters = rng.normal_tensor({cout, cin, s.kernel, s.kernel},
                                  1.0 / std::sqrt(double(cin * s.kernel * s.kernel)));
    l.scale = Tensor({cout});
    for (std::size_t c = 0; c < cout; ++c)
      l.scale[c] = static_cast<float>(std::exp(s.unit_spread * rng.normal()));
    l.shift = rng.normal_tensor({cout}, 0.1);
    l.stride = 1;
    l.pad = s.kernel / 2;
    l.pool = i + 1 < s.channels.size() ? PoolKind::max2 : PoolKind::none;
    g.layers.push_back(std::move(l));
    cin = cout;
  }
  g.classifier = rng.normal_tensor({cin, s.classes}, 1.0 / std::sqrt(double(cin)));
  g.validate();
  return g;
}

inline Tensor make_toy_images(std::size_t batch, std::size_t channels, std::size_t side,
                              std::uint64_t seed) {
  detail::ToyRng rng(seed);
  return rng.normal_tensor({batch, channels, side, side}, 1.0);
}

}  // namespace optin

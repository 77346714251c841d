#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "optin/optin.hpp"

// Asserts that `stmt` throws optin::Error with the given code.
#define EXPECT_CODE(stmt, want)              \
  try {                                      \
    stmt;                                    \
    ADD_FAILURE() << "no error from " #stmt; \
  } catch (const ::optin::Error& e) {        \
    EXPECT_EQ(e.code(), want) << e.what();   \
  }

namespace optin::test {

using nlohmann::json;

inline std::string data_path(const std::string& name) { return std::string(OPTIN_TEST_DATA) + "/" + name; }

inline const json& goldens() {
  static const json j = [] {
    std::ifstream in(data_path("goldens.json"));
    std::stringstream ss;
    ss << in.rdbuf();
    return json::parse(ss.str());
  }();
  return j;
}

// ---------------------------------------------------------------- golden loading

inline Tensor tensor_from_json(const json& j) {
  Shape shape;
  const json* cur = &j;
  while (cur->is_array()) {
    shape.push_back(cur->size());
    cur = &(*cur)[0];
  }
  Tensor t(shape);
  std::size_t k = 0;
  auto walk = [&](auto&& self, const json& node) -> void {
    if (node.is_array())
      for (const auto& c : node) self(self, c);
    else
      t[k++] = node.get<double>();
  };
  walk(walk, j);
  return t;
}

inline ModelGraph model_from_golden(const json& j) {
  ModelGraph m;
  m.d_model = j.at("d_model");
  m.n_heads = j.at("n_heads");
  m.n_classes = j.at("n_classes");
  m.pooling = parse_pooling(j.at("pooling"));
  for (const auto& b : j.at("blocks")) {
    BlockWeights w;
    w.ln1_gamma = tensor_from_json(b.at("ln1_gamma"));
    w.ln1_beta = tensor_from_json(b.at("ln1_beta"));
    w.wq = tensor_from_json(b.at("wq"));
    w.wk = tensor_from_json(b.at("wk"));
    w.wv = tensor_from_json(b.at("wv"));
    w.wo = tensor_from_json(b.at("wo"));
    w.ln2_gamma = tensor_from_json(b.at("ln2_gamma"));
    w.ln2_beta = tensor_from_json(b.at("ln2_beta"));
    w.w1 = tensor_from_json(b.at("w1"));
    w.w2 = tensor_from_json(b.at("w2"));
    m.blocks.push_back(std::move(w));
  }
  m.classifier = tensor_from_json(j.at("classifier"));
  if (j.contains("positional")) m.positional = tensor_from_json(j.at("positional"));
  if (j.contains("embedding")) m.embedding = tensor_from_json(j.at("embedding"));
  m.validate();
  return m;
}

inline CalibrationBatch batch_from_golden(const json& j) {
  if (j.contains("tokens")) {
    const auto& rows = j.at("tokens");
    std::vector<std::int32_t> ids;
    for (const auto& r : rows)
      for (const auto& v : r) ids.push_back(v.get<std::int32_t>());
    return CalibrationBatch::from_tokens(ids, rows.size(), rows[0].size());
  }
  return CalibrationBatch::from_features(tensor_from_json(j.at("features")));
}

inline PruneMask mask_from_golden(const json& j) {
  PruneMask m;
  m.heads = j.at("heads").get<std::vector<std::vector<std::size_t>>>();
  m.neurons = j.at("neurons").get<std::vector<std::vector<std::size_t>>>();
  return m;
}

inline ScoreConfig config_from_golden(const json& j) {
  ScoreConfig c;
  c.lambda = j.at("lambda");
  c.temperature = j.at("temperature");
  c.aggregation = parse_aggregation(j.at("aggregation"));
  c.range = parse_trajectory_range(j.at("depth"));
  c.tap = parse_tap(j.at("tap"));
  return c;
}

inline CnnGraph cnn_from_golden(const json& j) {
  CnnGraph g;
  for (const auto& l : j.at("layers")) {
    ConvLayer c;
    c.filters = tensor_from_json(l.at("filters"));
    c.scale = tensor_from_json(l.at("scale"));
    c.shift = tensor_from_json(l.at("shift"));
    c.stride = l.at("stride");
    c.pad = l.at("pad");
    c.pool = parse_pool_kind(l.at("pool"));
    g.layers.push_back(std::move(c));
  }
  g.classifier = tensor_from_json(j.at("classifier"));
  g.validate();
  return g;
}

inline double max_abs_diff(const Tensor& a, const json& ref) {
  const Tensor b = tensor_from_json(ref);
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - b[i]));
  return m;
}

inline double rel_err(double got, double want) {
  const double scale = std::max(std::abs(want), 1e-300);
  return std::abs(got - want) / scale;
}

// ---------------------------------------------------------------- random helpers

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline ImportanceTable random_table(std::size_t blocks, std::size_t heads, std::size_t neurons,
                                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImportanceTable t;
  for (std::size_t i = 0; i < blocks; ++i) {
    t.heads.emplace_back();
    t.neurons.emplace_back();
    for (std::size_t h = 0; h < heads; ++h) t.heads[i].push_back(u(rng) * 10.0);
    for (std::size_t n = 0; n < neurons; ++n) t.neurons[i].push_back(u(rng));
  }
  return t;
}

/// Cost model for a table-only instance: builds a throwaway model of the right shape.
inline ModelGraph shape_model(std::size_t blocks, std::size_t d, std::size_t heads, std::size_t ffn,
                              std::size_t classes = 2) {
  ToyTransformerSpec s;
  s.blocks = blocks;
  s.d_model = d;
  s.heads = heads;
  s.ffn = ffn;
  s.classes = classes;
  return make_toy_transformer(s, 1);
}

// ---------------------------------------------------------------- naive oracles

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      long double s = 0;
      for (std::size_t k = 0; k < a.dim(1); ++k) s += (long double)a.at(i, k) * b.at(k, j);
      c.at(i, j) = double(s);
    }
  return c;
}

/// ||XX^T - YY^T||_F^2 with the BT x BT maps built explicitly in long double.
inline long double materialized_gram_diff(const Tensor& fp, const Tensor& f) {
  const std::size_t d = f.shape().back(), rows = f.size() / d;
  long double total = 0;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < rows; ++j) {
      long double a = 0, b = 0;
      for (std::size_t k = 0; k < d; ++k) {
        a += (long double)fp[i * d + k] * fp[j * d + k];
        b += (long double)f[i * d + k] * f[j * d + k];
      }
      total += (a - b) * (a - b);
    }
  return total;
}

// ---------------------------------------------------------------- instrumented counter

/// Straightforward masked encoder forward that counts every multiply-accumulate
/// it executes. Elementwise work is charged per element processed: 5 for
/// LayerNorm, softmax and GELU, 1 for residual adds and mean pooling. Token
/// reduction keeps the leading tokens (the count, not the choice, matters here).
struct CountingForward {
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;

  std::uint64_t flops() const { return 2 * macs + elementwise; }

  double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      s += a[i] * b[i];
      ++macs;
    }
    return s;
  }

  using Mat = std::vector<std::vector<double>>;

  Mat layer_norm(const Mat& x, const Tensor& g, const Tensor& b) {
    Mat out = x;
    for (auto& row : out) {
      double mu = 0, var = 0;
      for (double v : row) mu += v;
      mu /= row.size();
      for (double v : row) var += (v - mu) * (v - mu);
      var /= row.size();
      for (std::size_t k = 0; k < row.size(); ++k) row[k] = (row[k] - mu) / std::sqrt(var + 1e-5) * g[k] + b[k];
      elementwise += 5 * row.size();
    }
    return out;
  }

  std::vector<double> column(const Tensor& w, std::size_t c) {
    std::vector<double> v(w.dim(0));
    for (std::size_t r = 0; r < w.dim(0); ++r) v[r] = w.at(r, c);
    return v;
  }

  // Runs one sequence (T x D) and returns the logits.
  std::vector<double> run(const ModelGraph& m, Mat x, const PruneMask& mask) {
    const std::size_t d = m.d_model, dh = m.head_dim();
    for (std::size_t i = 0; i < m.n_blocks(); ++i) {
      const auto& w = m.blocks[i];
      const std::size_t t = x.size();
      Mat h = layer_norm(x, w.ln1_gamma, w.ln1_beta);
      Mat concat(t, std::vector<double>(d, 0.0));
      for (std::size_t hd : mask.heads[i]) {
        Mat q(t), k(t), v(t);
        for (std::size_t r = 0; r < t; ++r)
          for (std::size_t e = hd * dh; e < (hd + 1) * dh; ++e) {
            q[r].push_back(dot(h[r], column(w.wq, e)));
            k[r].push_back(dot(h[r], column(w.wk, e)));
            v[r].push_back(dot(h[r], column(w.wv, e)));
          }
        for (std::size_t r = 0; r < t; ++r) {
          std::vector<double> s(t);
          for (std::size_t c = 0; c < t; ++c) s[c] = dot(q[r], k[c]) / std::sqrt(double(dh));
          double mx = s[0], z = 0;
          for (double a : s) mx = std::max(mx, a);
          for (double& a : s) z += (a = std::exp(a - mx));
          for (double& a : s) a /= z;
          for (std::size_t e = 0; e < dh; ++e) {
            std::vector<double> ve(t);
            for (std::size_t c = 0; c < t; ++c) ve[c] = v[c][e];
            concat[r][hd * dh + e] = dot(s, ve);
          }
        }
      }
      // Softmax runs for every head slot in the dense kernel.
      elementwise += 5 * m.n_heads * t * t;
      Mat mid = x;
      for (std::size_t r = 0; r < t; ++r) {
        for (std::size_t c = 0; c < d; ++c) {
          double s = 0;
          for (std::size_t hd : mask.heads[i])
            for (std::size_t e = hd * dh; e < (hd + 1) * dh; ++e) {
              s += concat[r][e] * w.wo.at(e, c);
              ++macs;
            }
          mid[r][c] += s;
        }
        elementwise += d;
      }
      Mat h2 = layer_norm(mid, w.ln2_gamma, w.ln2_beta);
      Mat out = mid;
      for (std::size_t r = 0; r < t; ++r) {
        std::vector<double> ffn(d, 0.0);
        for (std::size_t n : mask.neurons[i]) {
          const double a = detail::gelu(dot(h2[r], column(w.w1, n)));
          for (std::size_t c = 0; c < d; ++c) {
            ffn[c] += a * w.w2.at(n, c);
            ++macs;
          }
        }
        elementwise += 5 * w.ffn_dim();  // GELU over the whole hidden layer
        for (std::size_t c = 0; c < d; ++c) out[r][c] += ffn[c];
        elementwise += d;
      }
      if (mask.token_counts) out.resize((*mask.token_counts)[i]);
      x = std::move(out);
    }
    std::vector<double> pooled(d, 0.0);
    if (m.pooling == Pooling::first_token) {
      pooled = x[0];
    } else {
      for (const auto& row : x)
        for (std::size_t c = 0; c < d; ++c) pooled[c] += row[c] / x.size();
      elementwise += x.size() * d;
    }
    std::vector<double> logits;
    for (std::size_t c = 0; c < m.n_classes; ++c) logits.push_back(dot(pooled, column(m.classifier, c)));
    return logits;
  }
};

/// Counted FLOPs for one sequence of `tokens` random input vectors.
inline std::uint64_t instrumented_flops(const ModelGraph& m, const PruneMask& mask, std::size_t tokens,
                                        std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  CountingForward::Mat x(tokens, std::vector<double>(m.d_model));
  for (auto& r : x)
    for (auto& v : r) v = n(rng);
  CountingForward c;
  c.run(m, x, mask);
  return c.flops();
}

inline PruneMask random_mask(const ModelGraph& m, std::mt19937_64& rng, bool allow_empty_heads = false) {
  PruneMask mask;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < m.n_blocks(); ++i) {
    std::vector<std::size_t> h, n;
    for (std::size_t k = 0; k < m.n_heads; ++k)
      if (coin(rng)) h.push_back(k);
    if (h.empty() && !allow_empty_heads) h.push_back(rng() % m.n_heads);
    for (std::size_t k = 0; k < m.ffn_dim(i); ++k)
      if (coin(rng)) n.push_back(k);
    mask.heads.push_back(h);
    mask.neurons.push_back(n);
  }
  return mask;
}

}  // namespace optin::test

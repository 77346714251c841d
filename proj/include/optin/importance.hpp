#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "optin/cnn.hpp"
#include "optin/model.hpp"
#include "optin/tensor.hpp"

namespace optin {

enum class Aggregation { sum, mean };

// Which blocks' L_MD terms are accumulated for a unit in block i.
enum class TrajectoryRange {
  self,         // [i]
  next,         // [i+1]
  self_to_end,  // [i, N]
  next_to_end,  // [i+1, N]
};

enum class TaskDomain { language, vision };

inline const char* to_string(Aggregation a) { return a == Aggregation::sum ? "sum" : "mean"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "sum") return Aggregation::sum;
  if (s == "mean") return Aggregation::mean;
  fail(ErrorCode::invalid_parameter, "unknown aggregation '" + s + "'");
}

inline const char* to_string(TrajectoryRange r) {
  switch (r) {
    case TrajectoryRange::self: return "[i]";
    case TrajectoryRange::next: return "[i+1]";
    case TrajectoryRange::self_to_end: return "[i,N]";
    case TrajectoryRange::next_to_end: return "[i+1,N]";
  }
  return "?";
}

inline TrajectoryRange parse_trajectory_range(const std::string& s) {
  if (s == "[i]" || s == "self") return TrajectoryRange::self;
  if (s == "[i+1]" || s == "next") return TrajectoryRange::next;
  if (s == "[i,N]" || s == "self_to_end") return TrajectoryRange::self_to_end;
  if (s == "[i+1,N]" || s == "next_to_end") return TrajectoryRange::next_to_end;
  fail(ErrorCode::invalid_parameter, "unknown trajectory depth '" + s + "'");
}

inline TaskDomain parse_domain(const std::string& s) {
  if (s == "language") return TaskDomain::language;
  if (s == "vision") return TaskDomain::vision;
  fail(ErrorCode::invalid_parameter, "unknown task domain '" + s + "'");
}

struct ScoreConfig {
  double lambda = 0.1;
  double temperature = 4.0;
  Aggregation aggregation = Aggregation::sum;
  TrajectoryRange range = TrajectoryRange::next_to_end;
  TapPoint tap = TapPoint::ffn;
  std::size_t batch_size = 32;

  static ScoreConfig defaults(TaskDomain domain) {
    ScoreConfig cfg;
    cfg.lambda = domain == TaskDomain::language ? 0.1 : 0.01;
    return cfg;
  }

  void validate() const {
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorCode::invalid_parameter,
            "lambda must be a finite non-negative number");
    require(std::isfinite(temperature) && temperature > 0.0, ErrorCode::invalid_parameter,
            "temperature must be positive");
    require(batch_size >= 1, ErrorCode::invalid_parameter, "batch size must be >= 1");
  }
};

/// Half-open block range [first, last) accumulated for a unit in `block`.
inline std::pair<std::size_t, std::size_t> trajectory_blocks(TrajectoryRange r, std::size_t block,
                                                             std::size_t n_blocks) {
  auto clamp = [&](std::size_t v) { return std::min(v, n_blocks); };
  switch (r) {
    case TrajectoryRange::self: return {clamp(block), clamp(block + 1)};
    case TrajectoryRange::next: return {clamp(block + 1), clamp(block + 2)};
    case TrajectoryRange::self_to_end: return {clamp(block), n_blocks};
    case TrajectoryRange::next_to_end: return {clamp(block + 1), n_blocks};
  }
  return {0, 0};
}

// Score given to the class token so the schedule never removes it.
inline constexpr double kProtectedScore = std::numeric_limits<double>::max();

struct ImportanceTable {
  std::vector<std::vector<double>> heads;     // [block][head]
  std::vector<std::vector<double>> neurons;   // [block][neuron]
  std::vector<std::vector<double>> tokens;    // [block][token], optional
  std::vector<std::vector<double>> channels;  // [conv layer][channel], optional
  // Mean aggregated L_MD and mean L_KD over every scored unit (before lambda).
  double mean_md = 0.0;
  double mean_kd = 0.0;
};

struct UnitScore {
  double md = 0.0;  // aggregated manifold term
  double kd = 0.0;  // logit term, before lambda
  double total(const ScoreConfig& cfg) const { return md + cfg.lambda * kd; }
};

/// Manifold distillation loss between masked and base features.
inline double md_loss(const Tensor& fp, const Tensor& f) { return gram_diff_sq(fp, f); }

/// Hinton distillation loss T^2 * mean_b KL(softmax(base/T) || softmax(masked/T)).
inline double kd_loss(const Tensor& base_logits, const Tensor& masked_logits, double temperature) {
  require_same_shape(base_logits, masked_logits, "kd_loss");
  require(base_logits.rank() == 2, ErrorCode::shape_mismatch, "kd_loss expects [B,C]");
  require(temperature > 0.0, ErrorCode::invalid_parameter, "kd temperature must be positive");
  const std::size_t rows = base_logits.dim(0), cols = base_logits.dim(1);
  auto log_softmax = [&](const Tensor& t, std::size_t r, std::vector<double>& out) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, double(t.at(r, c)) / temperature);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(double(t.at(r, c)) / temperature - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t c = 0; c < cols; ++c) out[c] = double(t.at(r, c)) / temperature - lse;
  };
  std::vector<double> lp(cols), lq(cols);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    log_softmax(base_logits, r, lp);
    log_softmax(masked_logits, r, lq);
    double kl = 0.0;
    for (std::size_t c = 0; c < cols; ++c) kl += std::exp(lp[c]) * (lp[c] - lq[c]);
    total += std::max(kl, 0.0);
  }
  return temperature * temperature * total / static_cast<double>(rows);
}

/// Per-token inter-sample loss: mean over token positions j of
/// ||M(F'[:,j,:]) - M(F[:,j,:])||_F^2 with B x B relational maps.
inline double token_md_loss(const Tensor& fp, const Tensor& f) {
  require_same_shape(fp, f, "token_md_loss");
  require(f.rank() == 3, ErrorCode::shape_mismatch, "token_md_loss expects [B,T,D]");
  const std::size_t batch = f.dim(0), tokens = f.dim(1), d = f.dim(2);
  Tensor sp({batch, 1, d}), s({batch, 1, d});
  double total = 0.0;
  for (std::size_t j = 0; j < tokens; ++j) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t k = 0; k < d; ++k) {
        sp.at(b, 0, k) = fp.at(b, j, k);
        s.at(b, 0, k) = f.at(b, j, k);
      }
    total += gram_diff_sq(sp, s);
  }
  return total / static_cast<double>(tokens);
}

/// CNN channel loss: (1/B) ||sum_b F'_b - sum_b F_b||_F^2.
inline double channel_md_loss(const Tensor& fp, const Tensor& f) {
  require_same_shape(fp, f, "channel_md_loss");
  const std::size_t batch = f.dim(0), per = f.size() / batch;
  double total = 0.0;
  for (std::size_t i = 0; i < per; ++i) {
    double diff = 0.0;
    for (std::size_t b = 0; b < batch; ++b) diff += double(fp[b * per + i]) - f[b * per + i];
    total += diff * diff;
  }
  return total / static_cast<double>(batch);
}

namespace detail {

template <class Loss>
double aggregate_md(const std::vector<Tensor>& masked, const std::vector<Tensor>& base,
                    std::size_t block, const ScoreConfig& cfg, Loss loss) {
  const auto [first, last] = trajectory_blocks(cfg.range, block, base.size());
  double total = 0.0;
  for (std::size_t z = first; z < last; ++z) total += loss(masked[z], base[z]);
  if (cfg.aggregation == Aggregation::mean && last > first)
    total /= static_cast<double>(last - first);
  return total;
}

// Runs fn(0..count-1) on `workers` threads; each index is visited once.
template <class Fn>
void parallel_for(std::size_t count, std::size_t workers, Fn fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; !failed && (i = next++) < count;) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace detail

/// Worker count from OPTIN_WORKERS, defaulting to 1.
inline std::size_t workers_from_env() {
  if (const char* v = std::getenv("OPTIN_WORKERS")) {
    char* end = nullptr;
    const long n = std::strtol(v, &end, 10);
    if (end != v && n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

enum class UnitKind { head, neuron };

inline UnitScore unit_score(const ModelGraph& m, const CalibrationBatch& batch,
                            const ActivationTrace& cache, std::size_t block, std::size_t unit,
                            UnitKind kind, const ScoreConfig& cfg) {
  require(block < m.n_blocks(), ErrorCode::index_out_of_range, "block index out of range");
  const std::size_t limit = kind == UnitKind::head ? m.n_heads : m.ffn_dim(block);
  require(unit < limit, ErrorCode::index_out_of_range, "unit index out of range");
  PruneMask mask = PruneMask::full(m);
  mask.token_counts.reset();
  auto& keep = kind == UnitKind::head ? mask.heads[block] : mask.neurons[block];
  keep.erase(keep.begin() + static_cast<std::ptrdiff_t>(unit));
  const ActivationTrace masked = forward_from(m, batch, mask, cfg.tap, block, cache);
  UnitScore s;
  s.md = detail::aggregate_md(masked.features, cache.features, block, cfg, md_loss);
  s.kd = kd_loss(cache.logits, masked.logits, cfg.temperature);
  return s;
}

/// Trajectory importance of one head or FFN neuron: accumulated L_MD over the
/// configured downstream blocks plus lambda * L_KD on the logits.
inline double unit_importance(const ModelGraph& m, const CalibrationBatch& batch,
                              const ActivationTrace& cache, std::size_t block, std::size_t unit,
                              UnitKind kind, const ScoreConfig& cfg) {
  cfg.validate();
  return unit_score(m, batch, cache, block, unit, kind, cfg).total(cfg);
}

/// Baseline trace used by every scoring pass: full mask, no token schedule.
inline ActivationTrace baseline_trace(const ModelGraph& m, const CalibrationBatch& batch,
                                      TapPoint tap) {
  PruneMask full = PruneMask::full(m);
  full.token_counts.reset();
  return forward(m, batch, full, tap);
}

/// Scores every head and FFN neuron of every block.
inline ImportanceTable score_all(const ModelGraph& m, const CalibrationBatch& batch,
                                 const ScoreConfig& cfg, std::size_t workers = 1) {
  cfg.validate();
  m.validate();
  const ActivationTrace cache = baseline_trace(m, batch, cfg.tap);

  struct Unit {
    std::size_t block, index;
    UnitKind kind;
  };
  std::vector<Unit> units;
  ImportanceTable table;
  for (std::size_t i = 0; i < m.n_blocks(); ++i) {
    table.heads.emplace_back(m.n_heads, 0.0);
    table.neurons.emplace_back(m.ffn_dim(i), 0.0);
    for (std::size_t h = 0; h < m.n_heads; ++h) units.push_back({i, h, UnitKind::head});
    for (std::size_t n = 0; n < m.ffn_dim(i); ++n) units.push_back({i, n, UnitKind::neuron});
  }
  std::vector<UnitScore> scores(units.size());
  detail::parallel_for(units.size(), workers, [&](std::size_t k) {
    scores[k] = unit_score(m, batch, cache, units[k].block, units[k].index, units[k].kind, cfg);
  });
  for (std::size_t k = 0; k < units.size(); ++k) {
    const auto& u = units[k];
    auto& row = u.kind == UnitKind::head ? table.heads[u.block] : table.neurons[u.block];
    row[u.index] = scores[k].total(cfg);
    table.mean_md += scores[k].md;
    table.mean_kd += scores[k].kd;
  }
  table.mean_md /= static_cast<double>(units.size());
  table.mean_kd /= static_cast<double>(units.size());
  return table;
}

/// Per-block token scores. Token j at block i is removed after block i (zeroed
/// at every later block input and before pooling); the per-token inter-sample
/// loss is accumulated over the trajectory plus lambda * L_KD. The class
/// token (position 0) gets kProtectedScore.
inline std::vector<std::vector<double>> token_importance(const ModelGraph& m,
                                                         const CalibrationBatch& batch,
                                                         const ScoreConfig& cfg,
                                                         std::size_t workers = 1) {
  cfg.validate();
  m.validate();
  const ActivationTrace cache = baseline_trace(m, batch, cfg.tap);
  const std::size_t n = m.n_blocks(), tokens = batch.seq_len();
  require(tokens >= 2, ErrorCode::wrong_architecture, "token scoring needs at least 2 tokens");
  std::vector<std::vector<double>> out(n, std::vector<double>(tokens, 0.0));
  PruneMask full = PruneMask::full(m);
  full.token_counts.reset();
  detail::parallel_for(n * (tokens - 1), workers, [&](std::size_t k) {
    const std::size_t i = k / (tokens - 1), j = 1 + k % (tokens - 1);
    ForwardOptions opt;
    opt.knockout = TokenKnockout{i, j};
    const ActivationTrace masked = forward_from(m, batch, full, cfg.tap, i + 1, cache, opt);
    const double md = detail::aggregate_md(masked.features, cache.features, i, cfg, token_md_loss);
    out[i][j] = md + cfg.lambda * kd_loss(cache.logits, masked.logits, cfg.temperature);
  });
  for (auto& row : out) row[0] = kProtectedScore;
  return out;
}

/// Per-layer output-channel scores for a CNN.
inline std::vector<std::vector<double>> channel_importance(const CnnGraph& g, const Tensor& input,
                                                           const ScoreConfig& cfg,
                                                           std::size_t workers = 1) {
  cfg.validate();
  g.validate();
  const ChannelMask full = ChannelMask::full(g);
  const CnnTrace cache = cnn_forward(g, input, full);
  std::vector<std::pair<std::size_t, std::size_t>> units;
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < g.n_layers(); ++i) {
    out.emplace_back(g.layers[i].out_channels(), 0.0);
    for (std::size_t c = 0; c < g.layers[i].out_channels(); ++c) units.emplace_back(i, c);
  }
  detail::parallel_for(units.size(), workers, [&](std::size_t k) {
    const auto [i, c] = units[k];
    ChannelMask mask = full;
    mask.channels[i].erase(mask.channels[i].begin() + static_cast<std::ptrdiff_t>(c));
    const CnnTrace masked = cnn_forward_from(g, input, mask, i, &cache);
    const double md = detail::aggregate_md(masked.features, cache.features, i, cfg, channel_md_loss);
    out[i][c] = md + cfg.lambda * kd_loss(cache.logits, masked.logits, cfg.temperature);
  });
  return out;
}

/// The L_MD / L_KD magnitude rule: the order of magnitude of L_MD should sit
/// 1-2 decades above that of L_KD. Returns a warning message when it does not.
inline std::optional<std::string> lambda_magnitude_warning(const ImportanceTable& t) {
  if (!(t.mean_md > 0.0) || !(t.mean_kd > 0.0)) return std::nullopt;
  const int gap = static_cast<int>(std::floor(std::log10(t.mean_md))) -
                  static_cast<int>(std::floor(std::log10(t.mean_kd)));
  if (gap >= 1 && gap <= 2) return std::nullopt;
  return "L_MD/L_KD magnitude gap is " + std::to_string(gap) +
         " decades (mean L_MD " + std::to_string(t.mean_md) + ", mean L_KD " +
         std::to_string(t.mean_kd) + "); expected 1-2, consider retuning lambda";
}

}  // namespace optin

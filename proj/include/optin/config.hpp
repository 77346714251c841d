#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "optin/importance.hpp"

namespace optin {

/// beta: heads + neurons; tau: heads + neurons, then a token schedule for part
/// of the reduction; tau_inf: token schedule only.
enum class PruneMode { beta, tau, tau_inf };

inline const char* to_string(PruneMode m) {
  switch (m) {
    case PruneMode::beta: return "beta";
    case PruneMode::tau: return "tau";
    case PruneMode::tau_inf: return "tau_inf";
  }
  return "?";
}

inline PruneMode parse_mode(const std::string& s) {
  if (s == "beta" || s == "β") return PruneMode::beta;
  if (s == "tau" || s == "τ") return PruneMode::tau;
  if (s == "tau_inf" || s == "tau-inf" || s == "τ∞" || s == "τ(∞)") return PruneMode::tau_inf;
  fail(ErrorCode::invalid_parameter, "unknown mode '" + s + "'");
}

struct RunConfig {
  ScoreConfig score;
  double keep_ratio = 0.6;
  PruneMode mode = PruneMode::beta;
  // Fraction of the FLOP reduction left to the token schedule in tau mode.
  double token_share = 0.5;
  std::uint64_t seed = 0;
  std::string model_path, batch_path, scores_path, mask_path, out_path, report_path;

  void set(const std::string& key, const std::string& value) {
    auto number = [&] {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      require(used == value.size() && !value.empty(), ErrorCode::bad_config,
              "config key '" + key + "' expects a number, got '" + value + "'");
      return v;
    };
    auto integer = [&]() -> std::uint64_t {
      const double v = number();
      require(v >= 0 && v == static_cast<double>(static_cast<std::uint64_t>(v)),
              ErrorCode::bad_config, "config key '" + key + "' expects a non-negative integer");
      return static_cast<std::uint64_t>(v);
    };
    if (key == "lambda") score.lambda = number();
    else if (key == "temperature") score.temperature = number();
    else if (key == "aggregation") score.aggregation = parse_aggregation(value);
    else if (key == "depth") score.range = parse_trajectory_range(value);
    else if (key == "tap") score.tap = parse_tap(value);
    else if (key == "batch_size") score.batch_size = integer();
    else if (key == "domain") score.lambda = ScoreConfig::defaults(parse_domain(value)).lambda;
    else if (key == "keep_ratio") keep_ratio = number();
    else if (key == "mode") mode = parse_mode(value);
    else if (key == "token_share") token_share = number();
    else if (key == "seed") seed = integer();
    else if (key == "model") model_path = value;
    else if (key == "batch") batch_path = value;
    else if (key == "scores") scores_path = value;
    else if (key == "mask") mask_path = value;
    else if (key == "out") out_path = value;
    else if (key == "report") report_path = value;
    else fail(ErrorCode::bad_config, "unknown config key '" + key + "'");
  }

  void validate() const {
    score.validate();
    require(keep_ratio > 0.0 && keep_ratio <= 1.0, ErrorCode::bad_config,
            "keep_ratio must lie in (0, 1]");
    if (mode == PruneMode::tau)
      require(token_share > 0.0 && token_share < 1.0, ErrorCode::bad_config,
              "tau mode needs token_share in (0, 1)");
  }
};

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

/// Applies a flat `key = value` file (# comments, blank lines allowed).
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::bad_config,
            "config line " + std::to_string(lineno) + " is not key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::io_failure, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(cfg, ss.str());
}

inline std::string config_to_text(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "lambda = " << c.score.lambda << "\n"
     << "temperature = " << c.score.temperature << "\n"
     << "aggregation = " << to_string(c.score.aggregation) << "\n"
     << "depth = " << to_string(c.score.range) << "\n"
     << "tap = " << to_string(c.score.tap) << "\n"
     << "batch_size = " << c.score.batch_size << "\n"
     << "keep_ratio = " << c.keep_ratio << "\n"
     << "mode = " << to_string(c.mode) << "\n"
     << "token_share = " << c.token_share << "\n"
     << "seed = " << c.seed << "\n";
  return os.str();
}

}  // namespace optin

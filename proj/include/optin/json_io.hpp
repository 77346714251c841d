#pragma once

// Versioned JSON documents emitted and consumed by the CLI.
//
//   optin.importance_table v1
//     {schema, version, arch, config{lambda,temperature,aggregation,depth,tap,batch_size},
//      heads[[..]], neurons[[..]], tokens[[..]]?, channels[[..]]?, mean_md, mean_kd}
//   optin.prune_mask v1
//     {schema, version, arch:"transformer", heads[[..]], neurons[[..]], token_counts[..]|null}
//     {schema, version, arch:"cnn", channels[[..]]}
//   optin.search_report v1
//     {schema, version, mode, keep_ratio, baseline_flops, budget, achieved_flops,
//      achieved_ratio, cumulative_importance, best_step, steps[{heads,neurons,cumulative}]}

#include <string>
#include <vector>

#include "json.hpp"
#include "optin/cnn.hpp"
#include "optin/importance.hpp"
#include "optin/search.hpp"

namespace optin {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

namespace detail {

inline void check_schema(const json& j, const char* schema) {
  require(j.is_object() && j.value("schema", std::string()) == schema, ErrorCode::malformed_header,
          std::string("expected a ") + schema + " document");
  require(j.value("version", 0) == kSchemaVersion, ErrorCode::version_mismatch,
          std::string("unsupported ") + schema + " version");
}

}  // namespace detail

inline json config_to_json(const ScoreConfig& c) {
  return {{"lambda", c.lambda},
          {"temperature", c.temperature},
          {"aggregation", to_string(c.aggregation)},
          {"depth", to_string(c.range)},
          {"tap", to_string(c.tap)},
          {"batch_size", c.batch_size}};
}

inline json table_to_json(const ImportanceTable& t, const std::string& arch, const ScoreConfig& c) {
  json j = {{"schema", "optin.importance_table"}, {"version", kSchemaVersion}, {"arch", arch},
            {"config", config_to_json(c)}};
  if (arch == "cnn") {
    j["channels"] = t.channels;
  } else {
    j["heads"] = t.heads;
    j["neurons"] = t.neurons;
    if (!t.tokens.empty()) j["tokens"] = t.tokens;
    j["mean_md"] = t.mean_md;
    j["mean_kd"] = t.mean_kd;
  }
  return j;
}

inline ImportanceTable table_from_json(const json& j) {
  detail::check_schema(j, "optin.importance_table");
  ImportanceTable t;
  try {
    if (j.contains("heads")) t.heads = j.at("heads").get<std::vector<std::vector<double>>>();
    if (j.contains("neurons")) t.neurons = j.at("neurons").get<std::vector<std::vector<double>>>();
    if (j.contains("tokens")) t.tokens = j.at("tokens").get<std::vector<std::vector<double>>>();
    if (j.contains("channels")) t.channels = j.at("channels").get<std::vector<std::vector<double>>>();
    t.mean_md = j.value("mean_md", 0.0);
    t.mean_kd = j.value("mean_kd", 0.0);
  } catch (const json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("importance table: ") + e.what());
  }
  return t;
}

inline json mask_to_json(const PruneMask& m) {
  json j = {{"schema", "optin.prune_mask"}, {"version", kSchemaVersion}, {"arch", "transformer"},
            {"heads", m.heads}, {"neurons", m.neurons}};
  j["token_counts"] = m.token_counts ? json(*m.token_counts) : json(nullptr);
  return j;
}

inline json mask_to_json(const ChannelMask& m) {
  return {{"schema", "optin.prune_mask"}, {"version", kSchemaVersion}, {"arch", "cnn"},
          {"channels", m.channels}};
}

inline PruneMask mask_from_json(const json& j) {
  detail::check_schema(j, "optin.prune_mask");
  require(j.value("arch", std::string()) == "transformer", ErrorCode::wrong_architecture,
          "mask is not a transformer mask");
  PruneMask m;
  try {
    m.heads = j.at("heads").get<std::vector<std::vector<std::size_t>>>();
    m.neurons = j.at("neurons").get<std::vector<std::vector<std::size_t>>>();
    if (j.contains("token_counts") && !j.at("token_counts").is_null())
      m.token_counts = j.at("token_counts").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("prune mask: ") + e.what());
  }
  return m;
}

inline ChannelMask channel_mask_from_json(const json& j) {
  detail::check_schema(j, "optin.prune_mask");
  require(j.value("arch", std::string()) == "cnn", ErrorCode::wrong_architecture,
          "mask is not a cnn mask");
  ChannelMask m;
  try {
    m.channels = j.at("channels").get<std::vector<std::vector<std::size_t>>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::malformed_header, std::string("prune mask: ") + e.what());
  }
  return m;
}

inline json search_report_to_json(const SearchResult& r, const std::string& mode, double keep_ratio,
                                  Flops baseline, Flops budget) {
  json steps = json::array();
  for (const auto& s : r.step_log)
    steps.push_back({{"heads", s.heads}, {"neurons", s.neurons}, {"cumulative", s.cumulative}});
  return {{"schema", "optin.search_report"},
          {"version", kSchemaVersion},
          {"mode", mode},
          {"keep_ratio", keep_ratio},
          {"baseline_flops", baseline},
          {"budget", budget},
          {"achieved_flops", r.achieved_flops},
          {"achieved_ratio", static_cast<double>(r.achieved_flops) / static_cast<double>(baseline)},
          {"cumulative_importance", r.cumulative_importance},
          {"best_step", r.best_step},
          {"steps", steps}};
}

}  // namespace optin

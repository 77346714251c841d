#pragma once

// Command-line front end. `run` takes the streams explicitly so tests can
// drive it in-process.

#include <algorithm>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "optin/config.hpp"
#include "optin/container.hpp"
#include "optin/eval.hpp"
#include "optin/json_io.hpp"
#include "optin/pipeline.hpp"
#include "optin/prune.hpp"
#include "optin/toy.hpp"

namespace optin::cli {

namespace detail {

/// Rows of `b` used for scoring: all of them when B <= n, otherwise n rows
/// drawn without replacement under `seed`, kept in their original order.
inline CalibrationBatch take_rows(const CalibrationBatch& b, std::size_t n, std::uint64_t seed) {
  const std::size_t total = b.batch_size();
  if (total <= n) return b;
  std::vector<std::size_t> rows(total);
  std::iota(rows.begin(), rows.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(n);
  std::sort(rows.begin(), rows.end());
  CalibrationBatch out;
  if (b.has_tokens()) {
    const std::size_t t = b.seq_len();
    std::vector<std::int32_t> ids;
    for (std::size_t r : rows) ids.insert(ids.end(), b.tokens.begin() + r * t, b.tokens.begin() + (r + 1) * t);
    out = CalibrationBatch::from_tokens(std::move(ids), n, t);
  } else {
    Shape shape = b.features.shape();
    const std::size_t stride = b.features.size() / total;
    shape[0] = n;
    Tensor f(shape);
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(b.features.raw() + rows[k] * stride, stride, f.raw() + k * stride);
    out = CalibrationBatch::from_features(std::move(f));
  }
  if (!b.labels.empty())
    for (std::size_t r : rows) out.labels.push_back(b.labels[r]);
  return out;
}

inline json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::malformed_header, "'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) out << text;
  else write_file(path, text);
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline const ModelGraph& transformer(const AnyModel& m, const char* command) {
  if (const auto* g = std::get_if<ModelGraph>(&m)) return *g;
  fail(ErrorCode::wrong_architecture, std::string(command) + " needs a transformer model");
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"One-shot trajectory-based pruning for transformer encoders and small CNNs", "optin"};
  app.require_subcommand(1);

  // Run-config flags stay strings and go through RunConfig::set, so the
  // config file and the command line share one parser.
  std::string config_path;
  std::map<std::string, std::string> flags;
  std::vector<std::pair<std::string, CLI::Option*>> flag_opts;
  auto config_flags = [&](CLI::App* sub, std::initializer_list<const char*> keys) {
    sub->add_option("--config", config_path, "key = value run config applied before flags");
    for (const char* key : keys) {
      std::string name = key;
      std::replace(name.begin(), name.end(), '_', '-');
      flag_opts.emplace_back(key, sub->add_option("--" + name, flags[key]));
    }
  };
  auto build_config = [&] {
    RunConfig cfg;
    if (!config_path.empty()) apply_config_file(cfg, config_path);
    for (const auto& [key, opt] : flag_opts)
      if (opt->count() > 0) cfg.set(key, flags[key]);
    cfg.validate();
    return cfg;
  };

  std::string model_path, batch_path, scores_path, mask_path, out_path, report_path;

  // init
  auto* init = app.add_subcommand("init", "write a randomly initialized toy model and batch");
  std::string kind = "transformer", pooling = "first_token";
  ToyTransformerSpec tspec;
  ToyCnnSpec cspec;
  std::size_t init_batch = 32, init_seq = 8, image_side = 8;
  std::uint64_t init_seed = 0;
  init->add_option("--kind", kind, "transformer | cnn")->check(CLI::IsMember({"transformer", "cnn"}));
  init->add_option("--out", out_path, "model container")->required();
  init->add_option("--batch-out", batch_path, "calibration batch container");
  init->add_option("--blocks", tspec.blocks);
  init->add_option("--d-model", tspec.d_model);
  init->add_option("--heads", tspec.heads);
  init->add_option("--ffn", tspec.ffn);
  init->add_option("--classes", tspec.classes);
  init->add_option("--max-tokens", tspec.max_tokens);
  init->add_option("--vocab", tspec.vocab, "0: batches carry pre-embedded features");
  init->add_option("--pooling", pooling)->check(CLI::IsMember({"first_token", "mean"}));
  init->add_option("--channels", cspec.channels, "cnn output channels per layer");
  init->add_option("--in-channels", cspec.in_channels);
  init->add_option("--image-side", image_side);
  init->add_option("--batch-size", init_batch);
  init->add_option("--seq-len", init_seq);
  init->add_option("--seed", init_seed);

  // score
  auto* score = app.add_subcommand("score", "compute the importance table");
  score->add_option("--model", model_path)->required();
  score->add_option("--batch", batch_path)->required();
  score->add_option("--out", out_path, "table JSON (stdout if omitted)");
  bool with_tokens = false;
  score->add_flag("--tokens", with_tokens, "also score token positions");
  config_flags(score, {"lambda", "temperature", "aggregation", "depth", "tap", "batch_size",
                       "domain", "seed"});

  // search
  auto* search = app.add_subcommand("search", "select a mask under a FLOPs budget");
  search->add_option("--scores", scores_path)->required();
  search->add_option("--model", model_path)->required();
  search->add_option("--batch", batch_path, "batch whose sequence length sets the cost model");
  std::size_t seq_len = 0;
  search->add_option("--seq-len", seq_len, "sequence length when no batch is given");
  search->add_option("--out", out_path, "mask JSON (stdout if omitted)");
  search->add_option("--report", report_path, "search report JSON");
  config_flags(search, {"keep_ratio", "mode", "token_share"});

  // schedule
  auto* schedule = app.add_subcommand("schedule", "add a token schedule to an existing mask");
  schedule->add_option("--scores", scores_path)->required();
  schedule->add_option("--model", model_path)->required();
  schedule->add_option("--mask", mask_path, "head/neuron mask (full mask if omitted)");
  schedule->add_option("--batch", batch_path);
  schedule->add_option("--seq-len", seq_len);
  schedule->add_option("--out", out_path);
  config_flags(schedule, {"keep_ratio"});

  // prune
  auto* prune = app.add_subcommand("prune", "bake a mask into a new model container");
  prune->add_option("--model", model_path)->required();
  prune->add_option("--mask", mask_path)->required();
  prune->add_option("--out", out_path)->required();

  // eval
  auto* eval = app.add_subcommand("eval", "compare the base model with a masked one");
  eval->add_option("--model", model_path)->required();
  eval->add_option("--batch", batch_path)->required();
  eval->add_option("--mask", mask_path)->required();
  eval->add_option("--out", out_path);
  std::size_t random_masks = 0;
  eval->add_option("--random-masks", random_masks, "also score N random masks of equal budget");
  config_flags(eval, {"seed", "keep_ratio"});

  // report
  auto* report = app.add_subcommand("report", "CSV sweep over keep ratios");
  report->add_option("--model", model_path)->required();
  report->add_option("--batch", batch_path)->required();
  report->add_option("--scores", scores_path)->required();
  std::vector<double> ratios{0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  report->add_option("--ratios", ratios)->delimiter(',');
  report->add_option("--out", out_path);
  config_flags(report, {"mode", "token_share"});

  auto error_json = [&](const std::string& code, const std::string& message) {
    err << json{{"error", code}, {"message", message}}.dump() << "\n";
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    error_json("usage", e.what());
    return 2;
  }

  auto seq_len_of = [&](const ModelGraph& m) -> std::size_t {
    if (!batch_path.empty()) return load_batch(batch_path).seq_len();
    require(seq_len > 0, ErrorCode::invalid_parameter, "give --batch or --seq-len");
    if (m.positional)
      require(seq_len <= m.max_tokens(), ErrorCode::token_overflow, "sequence longer than the model allows");
    return seq_len;
  };

  try {
    if (*init) {
      if (kind == "transformer") {
        tspec.pooling = parse_pooling(pooling);
        const ModelGraph m = make_toy_transformer(tspec, init_seed);
        save_container(out_path, to_container(m));
        if (!batch_path.empty())
          save_container(batch_path, to_container(make_toy_batch(m, init_batch, init_seq, init_seed + 1)));
      } else {
        const CnnGraph g = make_toy_cnn(cspec, init_seed);
        save_container(out_path, to_container(g));
        if (!batch_path.empty()) {
          auto b = CalibrationBatch::from_features(
              make_toy_images(init_batch, cspec.in_channels, image_side, init_seed + 1));
          std::mt19937_64 rng(init_seed + 2);
          for (std::size_t i = 0; i < init_batch; ++i)
            b.labels.push_back(static_cast<std::int32_t>(rng() % cspec.classes));
          save_container(batch_path, to_container(b));
        }
      }
    } else if (*score) {
      const RunConfig cfg = build_config();
      const AnyModel model = load_container(model_path);
      const CalibrationBatch batch =
          detail::take_rows(load_batch(batch_path), cfg.score.batch_size, cfg.seed);
      const std::size_t workers = workers_from_env();
      json j;
      if (const auto* m = std::get_if<ModelGraph>(&model)) {
        ImportanceTable t = score_all(*m, batch, cfg.score, workers);
        if (with_tokens) t.tokens = token_importance(*m, batch, cfg.score, workers);
        if (auto warn = lambda_magnitude_warning(t))
          err << json{{"warning", "lambda_magnitude"}, {"message", *warn}}.dump() << "\n";
        j = table_to_json(t, "transformer", cfg.score);
      } else {
        ImportanceTable t;
        t.channels = channel_importance(std::get<CnnGraph>(model), batch.features, cfg.score, workers);
        j = table_to_json(t, "cnn", cfg.score);
      }
      detail::emit(detail::dump(j), out_path, out);
    } else if (*search) {
      const RunConfig cfg = build_config();
      const AnyModel model = load_container(model_path);
      const ImportanceTable table = table_from_json(detail::read_json(scores_path));
      if (const auto* g = std::get_if<CnnGraph>(&model)) {
        require(!table.channels.empty(), ErrorCode::wrong_architecture, "scores are not cnn scores");
        const ChannelMask mask = channel_keep(table.channels, *g, cfg.keep_ratio);
        detail::emit(detail::dump(mask_to_json(mask)), out_path, out);
        if (!report_path.empty()) {
          std::vector<std::size_t> kept;
          for (const auto& c : mask.channels) kept.push_back(c.size());
          write_file(report_path, detail::dump({{"schema", "optin.search_report"},
                                                {"version", kSchemaVersion},
                                                {"mode", "channels"},
                                                {"keep_ratio", cfg.keep_ratio},
                                                {"kept_channels", kept}}));
        }
        return 0;
      }
      const ModelGraph& m = std::get<ModelGraph>(model);
      const CostModel cost(m, seq_len_of(m));
      const Plan plan = make_plan(table, cost, cfg);
      detail::emit(detail::dump(mask_to_json(plan.search.mask)), out_path, out);
      if (!report_path.empty()) {
        json r = search_report_to_json(plan.search, to_string(cfg.mode), cfg.keep_ratio,
                                       cost.baseline(), plan.budget);
        r["head_neuron_budget"] = plan.head_neuron_budget;
        write_file(report_path, detail::dump(r));
      }
    } else if (*schedule) {
      const RunConfig cfg = build_config();
      const ModelGraph m = detail::transformer(load_container(model_path), "schedule");
      const ImportanceTable table = table_from_json(detail::read_json(scores_path));
      require(!table.tokens.empty(), ErrorCode::invalid_parameter,
              "scores carry no token table; rerun score with --tokens");
      PruneMask mask = PruneMask::full(m);
      if (!mask_path.empty()) mask = mask_from_json(detail::read_json(mask_path));
      validate_mask(m, mask);
      mask.token_counts.reset();
      const CostModel cost(m, seq_len_of(m));
      mask.token_counts = token_schedule(table.tokens, cost, mask, budget_from_ratio(cost, cfg.keep_ratio));
      detail::emit(detail::dump(mask_to_json(mask)), out_path, out);
    } else if (*prune) {
      const AnyModel model = load_container(model_path);
      const json mj = detail::read_json(mask_path);
      if (const auto* m = std::get_if<ModelGraph>(&model))
        save_container(out_path, to_container(bake_mask(*m, mask_from_json(mj))));
      else
        save_container(out_path,
                       to_container(bake_channel_mask(std::get<CnnGraph>(model), channel_mask_from_json(mj))));
    } else if (*eval) {
      const RunConfig cfg = build_config();
      const AnyModel model = load_container(model_path);
      const CalibrationBatch batch = load_batch(batch_path);
      const json mj = detail::read_json(mask_path);
      json j = {{"schema", "optin.eval_report"}, {"version", kSchemaVersion}};
      if (const auto* m = std::get_if<ModelGraph>(&model)) {
        const PruneMask mask = mask_from_json(mj);
        const EvalReport r = evaluate(*m, batch, mask);
        j["logit_kl"] = r.logit_kl;
        j["agreement"] = r.agreement;
        j["base_accuracy"] = r.base_accuracy ? json(*r.base_accuracy) : json(nullptr);
        j["pruned_accuracy"] = r.pruned_accuracy ? json(*r.pruned_accuracy) : json(nullptr);
        j["baseline_flops"] = r.baseline_flops;
        j["pruned_flops"] = r.pruned_flops;
        j["flops_ratio"] = r.flops_ratio;
        if (random_masks > 0) {
          // Random masks share the searched mask's budget (or --keep-ratio when given).
          const CostModel cost(*m, batch.seq_len());
          PruneMask plain = mask;
          plain.token_counts.reset();
          const Flops budget = flags["keep_ratio"].empty()
                                   ? cost.flops(plain)
                                   : budget_from_ratio(cost, cfg.keep_ratio);
          double kl = 0.0, agree = 0.0;
          std::size_t beaten = 0;
          for (std::size_t k = 0; k < random_masks; ++k) {
            const EvalReport rr = evaluate(*m, batch, random_feasible_mask(cost, budget, cfg.seed + k));
            kl += rr.logit_kl;
            agree += rr.agreement;
            beaten += r.logit_kl < rr.logit_kl;
          }
          j["random"] = {{"count", random_masks},
                         {"budget", budget},
                         {"mean_logit_kl", kl / double(random_masks)},
                         {"mean_agreement", agree / double(random_masks)},
                         {"masks_beaten", beaten}};
        }
      } else {
        const auto& g = std::get<CnnGraph>(model);
        const ChannelMask mask = channel_mask_from_json(mj);
        const Tensor base = cnn_forward(g, batch.features, ChannelMask::full(g)).logits;
        const EvalReport r =
            compare_logits(base, cnn_forward(g, batch.features, mask).logits, batch.labels);
        j["logit_kl"] = r.logit_kl;
        j["agreement"] = r.agreement;
        j["base_accuracy"] = r.base_accuracy ? json(*r.base_accuracy) : json(nullptr);
        j["pruned_accuracy"] = r.pruned_accuracy ? json(*r.pruned_accuracy) : json(nullptr);
      }
      detail::emit(detail::dump(j), out_path, out);
    } else if (*report) {
      RunConfig cfg = build_config();
      const ModelGraph m = detail::transformer(load_container(model_path), "report");
      const CalibrationBatch batch = load_batch(batch_path);
      const ImportanceTable table = table_from_json(detail::read_json(scores_path));
      const CostModel cost(m, batch.seq_len());
      std::ostringstream csv;
      csv << std::setprecision(10);
      csv << "budget_ratio,achieved_ratio,agreement,logit_kl,cum_importance\n";
      for (double ratio : ratios) {
        cfg.keep_ratio = ratio;
        const Plan plan = make_plan(table, cost, cfg);
        const EvalReport r = evaluate(m, batch, plan.search.mask);
        csv << ratio << "," << r.flops_ratio << "," << r.agreement << "," << r.logit_kl << ","
            << plan.search.cumulative_importance << "\n";
      }
      detail::emit(csv.str(), out_path, out);
    }
  } catch (const Error& e) {
    error_json(to_string(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    error_json("internal", e.what());
    return 1;
  }
  return 0;
}

}  // namespace optin::cli

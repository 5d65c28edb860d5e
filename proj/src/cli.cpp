#include "perft/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <thread>

#include "perft/analysis.hpp"
#include "perft/checkpoint.hpp"
#include "perft/errors.hpp"
#include "perft/run_config.hpp"

namespace perft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> sets;
  std::string output;
  std::optional<std::uint64_t> seed;
  std::string backbone;
};

json raw_config(const CommonArgs& a) {
  json j = a.config.empty() ? json::object() : load_json_file(a.config);
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  for (const auto& s : a.sets) apply_override(j, s);
  if (!a.output.empty()) j["output_dir"] = a.output;
  if (a.seed) j["seed"] = *a.seed;
  if (!a.backbone.empty()) j["backbone"] = a.backbone;
  return j;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

json metrics_json(const EvalMetrics& m) {
  return {{"token_accuracy", m.token_accuracy},
          {"exact_match", m.exact_match},
          {"ce", m.ce},
          {"tokens", m.tokens},
          {"samples", m.samples}};
}

std::string variant_label(const PerftConfig& c) {
  switch (c.variant) {
    case Variant::routed:
      return "PERFT-R (Top" + std::to_string(c.top_k) + "/" + std::to_string(c.num_experts) + ")";
    case Variant::embedded:
      return "PERFT-E (Top" + std::to_string(c.top_k) + "/" + std::to_string(c.num_experts) + ")";
    case Variant::dense: return "PERFT-D (" + std::to_string(c.num_experts) + ")";
    case Variant::single: return "PERFT-S";
    case Variant::qv_lora: return "qv-LoRA";
    case Variant::gate_lora: return "gate-LoRA";
  }
  return "";
}

BackboneDims dims_for(const RunConfig& cfg, const ModelConfig& model) {
  return cfg.dims ? *cfg.dims : backbone_dims(model);
}

SweepRow account_row(const PerftConfig& perft, const BackboneDims& dims, const std::string& task) {
  const PerftConfig r = perft.resolved(dims.experts, dims.top_k);
  const ParamAccount a = count_activated(r, dims);
  SweepRow row;
  row.variant = std::string(variant_name(r.variant));
  row.adapters = r.num_experts;
  row.peft_top_k = r.variant == Variant::routed ? r.top_k : (r.variant == Variant::embedded ? dims.top_k : 0);
  row.bottleneck = r.bottleneck;
  row.activated_params = a.activated_trainable;
  row.activated_ratio_percent = a.ratio_percent;
  row.task = task;
  return row;
}

struct RunOutcome {
  EvalMetrics metrics;
  SweepRow row;
};

EvalMetrics run_pretrain(const RunConfig& cfg) {
  LanguageModel model(cfg.model, cfg.seed);
  const auto train = cfg.task.train_set();
  const auto eval = cfg.task.eval_set();
  ensure_dir(cfg.output_dir);
  write_text(cfg.output_dir / "config.json", to_json(cfg).dump(2) + "\n");
  TrainHooks hooks;
  hooks.metrics_csv = cfg.output_dir / "metrics.csv";
  hooks.on_divergence = [&](const LanguageModel& good) {
    save_checkpoint(good, cfg.output_dir / "last_good", cfg.storage);
  };
  const TrainResult r = train_loop(model, train, eval, cfg.train, hooks);
  save_checkpoint(model, cfg.output_dir / "checkpoint", cfg.storage);
  write_text(cfg.output_dir / "eval.json", metrics_json(r.final_eval).dump(2) + "\n");
  return r.final_eval;
}

RunOutcome run_finetune(const RunConfig& cfg) {
  if (!cfg.backbone) throw ConfigError("finetune needs a backbone checkpoint (config 'backbone' or --backbone)");
  if (!cfg.perft) throw ConfigError("finetune needs a 'perft' section");
  LanguageModel model = load_checkpoint(*cfg.backbone);
  if (model.perft()) throw ConfigError("backbone " + cfg.backbone->string() + " already carries adapters");
  model.attach(*cfg.perft, cfg.seed);
  const auto train = cfg.task.train_set();
  const auto eval = cfg.task.eval_set();
  ensure_dir(cfg.output_dir);
  write_text(cfg.output_dir / "config.json", to_json(cfg).dump(2) + "\n");
  TrainHooks hooks;
  hooks.metrics_csv = cfg.output_dir / "metrics.csv";
  hooks.on_divergence = [&](const LanguageModel& good) {
    save_checkpoint(good, cfg.output_dir / "last_good", cfg.storage);
  };
  const TrainResult r = train_loop(model, train, eval, cfg.train, hooks);
  save_checkpoint(model, cfg.output_dir / "checkpoint", cfg.storage);
  write_text(cfg.output_dir / "eval.json", metrics_json(r.final_eval).dump(2) + "\n");
  RunOutcome out;
  out.metrics = r.final_eval;
  out.row = account_row(*model.perft(), dims_for(cfg, model.config()), cfg.task.label());
  out.row.metric = r.final_eval.token_accuracy;
  return out;
}

fs::path checkpoint_arg(const RunConfig& cfg, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (cfg.backbone) return *cfg.backbone;
  throw ConfigError("no checkpoint given (--checkpoint or config 'backbone')");
}

int cmd_count_params(const RunConfig& cfg, bool as_json, std::ostream& out) {
  if (!cfg.perft) throw ConfigError("count-params needs a 'perft' section");
  const BackboneDims dims = dims_for(cfg, cfg.model);
  const PerftConfig r = cfg.perft->resolved(dims.experts, dims.top_k);
  const ParamAccount a = count_activated(r, dims);
  if (as_json) {
    out << json{{"variant", std::string(variant_name(r.variant))},
                {"label", variant_label(r)},
                {"bottleneck", r.bottleneck},
                {"activated_trainable", a.activated_trainable},
                {"total_trainable", a.total_trainable},
                {"activated_total_model", a.activated_total_model},
                {"activated_ratio_percent", a.ratio_percent}}
               .dump(2)
        << "\n";
    return kExitOk;
  }
  char ratio[32];
  std::snprintf(ratio, sizeof ratio, "%.3f%%", a.ratio_percent);
  out << variant_label(r) << " D_B=" << r.bottleneck << ": " << format_millions(a.activated_trainable) << " / "
      << ratio << "\n";
  char line[128];
  std::snprintf(line, sizeof line, "  %-22s %llu (%s)\n", "activated trainable",
                static_cast<unsigned long long>(a.activated_trainable), format_millions(a.activated_trainable).c_str());
  out << line;
  std::snprintf(line, sizeof line, "  %-22s %llu (%s)\n", "total trainable",
                static_cast<unsigned long long>(a.total_trainable), format_millions(a.total_trainable).c_str());
  out << line;
  std::snprintf(line, sizeof line, "  %-22s %llu\n", "activated model", static_cast<unsigned long long>(a.activated_total_model));
  out << line;
  std::snprintf(line, sizeof line, "  %-22s %.6f%%\n", "activated ratio", a.ratio_percent);
  out << line;
  return kExitOk;
}

struct AnalyzeArgs {
  std::string checkpoint;
  std::string sweep_dir;
  std::optional<std::size_t> layer;
  double epsilon = 0.05;
  double gamma = 1.0;
  std::size_t routing_samples = 64;
};

int cmd_analyze(const RunConfig& cfg, const AnalyzeArgs& a, std::ostream& out) {
  if (!a.sweep_dir.empty()) {
    sweep_report(a.sweep_dir);
    out << sweep_csv(collect_sweep(a.sweep_dir));
    return kExitOk;
  }
  const LanguageModel model = load_checkpoint(checkpoint_arg(cfg, a.checkpoint));
  ensure_dir(cfg.output_dir);
  std::vector<std::size_t> layers;
  if (a.layer) {
    layers.push_back(*a.layer);
  } else {
    for (std::size_t l = 0; l < model.blocks.size(); ++l) layers.push_back(l);
  }
  json summary;
  summary["layers"] = json::array();
  for (std::size_t l : layers) {
    const VectorAtlas atlas = extract_atlas(model, l);
    const AtlasProjection proj = project_atlas(atlas);
    const std::string stem = "atlas_layer" + std::to_string(l);
    write_text(cfg.output_dir / (stem + ".csv"), atlas_csv(atlas, proj));
    write_text(cfg.output_dir / (stem + ".svg"), atlas_svg(atlas, proj));
    json entry = {{"layer", l},
                  {"ffn_keys", atlas.count(VectorKind::ffn_key)},
                  {"effective_ffn_keys", effective_count(atlas.matrix(VectorKind::ffn_key), a.epsilon)},
                  {"pca_explained_ratio", proj.pca.explained_ratio()}};
    const std::size_t peft_keys = atlas.count(VectorKind::peft_key);
    if (peft_keys > 0 && model.perft()) {
      const std::size_t effective = effective_count(atlas.matrix(VectorKind::peft_key), a.epsilon);
      entry["peft_keys"] = peft_keys;
      entry["effective_peft_keys"] = effective;
      RedundancyModel rm{model.perft()->num_experts, model.perft()->bottleneck, a.epsilon, a.gamma};
      const RedundancyEstimate est = redundancy_estimate(rm);
      entry["redundancy"] = {{"gamma", a.gamma},
                             {"p0", est.p0},
                             {"pT", est.pT},
                             {"eta", est.eta},
                             {"expected_effective", est.expected_effective}};
      const double md = static_cast<double>(rm.adapters * rm.bottleneck);
      if (static_cast<double>(effective) < md && est.p0 > 0.0) {
        entry["redundancy"]["gamma_matching_observed"] = gamma_for_observed(rm, static_cast<double>(effective));
      }
    }
    summary["layers"].push_back(entry);
  }
  auto samples = cfg.task.eval_set();
  if (samples.size() > a.routing_samples) samples.resize(a.routing_samples);
  const EncodedBatch enc = encode_batch(samples);
  const TokenBatch batch{enc.batch, enc.seq, enc.inputs};
  const auto stats = routing_stats(model, batch);
  write_text(cfg.output_dir / "routing.json", routing_stats_json(stats) + "\n");
  write_text(cfg.output_dir / "analysis.json", summary.dump(2) + "\n");
  out << summary.dump(2) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- sweep

struct Axis {
  std::vector<std::string> path;
  json values;
};

std::string dotted(const std::vector<std::string>& path) {
  std::string s;
  for (const auto& p : path) s += (s.empty() ? "" : ".") + p;
  return s;
}

void find_axes(const json& j, std::vector<std::string>& prefix, std::vector<Axis>& axes) {
  for (const auto& [key, value] : j.items()) {
    if (prefix.empty() && key == "sweep") continue;
    prefix.push_back(key);
    if (value.is_array()) {
      if (value.empty()) throw ConfigError("sweep axis " + dotted(prefix) + " has no values");
      axes.push_back({prefix, value});
    } else if (value.is_object()) {
      find_axes(value, prefix, axes);
    }
    prefix.pop_back();
  }
}

std::string slug(const json& v) {
  std::string s = v.is_string() ? v.get<std::string>() : v.dump();
  for (auto& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-') c = '_';
  }
  return s;
}

std::size_t worker_count(std::size_t points) {
  std::size_t n = 1;
  if (const char* env = std::getenv("PERFT_LAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("PERFT_LAB_THREADS must be a positive integer");
    n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, points));
}

int cmd_sweep(const json& base, std::ostream& out, std::ostream& err) {
  std::string mode = "finetune";
  if (base.contains("sweep")) {
    const json& s = base["sweep"];
    if (!s.is_object()) throw ConfigError("sweep must be an object");
    for (const auto& [k, v] : s.items()) {
      if (k != "mode") throw ConfigError("unknown field sweep." + k);
      if (!v.is_string()) throw ConfigError("sweep.mode must be a string");
      mode = v.get<std::string>();
    }
    if (mode != "finetune" && mode != "count") throw ConfigError("sweep.mode must be 'finetune' or 'count'");
  }
  std::vector<Axis> axes;
  std::vector<std::string> prefix;
  find_axes(base, prefix, axes);
  if (axes.empty()) throw ConfigError("sweep config has no list-valued fields to expand");

  std::size_t points = 1;
  for (const auto& a : axes) points *= a.values.size();
  // Every point is parsed and validated before any compute starts.
  std::vector<RunConfig> configs;
  std::vector<std::string> names;
  fs::path root_dir;
  for (std::size_t idx = 0; idx < points; ++idx) {
    json j = base;
    j.erase("sweep");
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%03zu", idx);
    std::string name = buf;
    std::size_t rest = idx;
    for (std::size_t ai = axes.size(); ai-- > 0;) {
      const auto& a = axes[ai];
      const json& v = a.values[rest % a.values.size()];
      rest /= a.values.size();
      json* node = &j;
      for (std::size_t k = 0; k + 1 < a.path.size(); ++k) node = &(*node)[a.path[k]];
      (*node)[a.path.back()] = v;
    }
    rest = idx;
    std::vector<std::string> parts(axes.size());
    for (std::size_t ai = axes.size(); ai-- > 0;) {
      const auto& a = axes[ai];
      parts[ai] = a.path.back() + "-" + slug(a.values[rest % a.values.size()]);
      rest /= a.values.size();
    }
    for (const auto& p : parts) name += "_" + p;
    RunConfig c;
    try {
      c = parse_run_config(j);
    } catch (const ConfigError& e) {
      throw ConfigError("sweep point " + name + ": " + e.what());
    }
    if (idx == 0) root_dir = c.output_dir;
    c.output_dir = root_dir / name;
    if (mode == "count" && !c.perft) throw ConfigError("sweep point " + name + ": count mode needs a 'perft' section");
    configs.push_back(std::move(c));
    names.push_back(name);
  }
  ensure_dir(root_dir);

  std::vector<std::exception_ptr> failures(points);
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < points; i = next++) {
      try {
        SweepRow row;
        if (mode == "count") {
          ensure_dir(configs[i].output_dir);
          row = account_row(*configs[i].perft, dims_for(configs[i], configs[i].model), configs[i].task.label());
        } else {
          row = run_finetune(configs[i]).row;
        }
        row.point = names[i];
        write_point_result(configs[i].output_dir, row);
        std::lock_guard lock(log_mutex);
        err << "[sweep] " << names[i] << " done\n";
      } catch (...) {
        failures[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = worker_count(points);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (std::size_t i = 0; i < points; ++i) {
    if (failures[i]) std::rethrow_exception(failures[i]);
  }
  out << sweep_csv(sweep_report(root_dir));
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"parameter-efficient fine-tuning strategies on desk-scale MoE transformers", "perft_lab"};
  app.require_subcommand(1);
  CommonArgs common;
  AnalyzeArgs analyze;
  std::string eval_checkpoint;
  bool count_json = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config,-c", common.config, "JSON run configuration");
    sub->add_option("--set", common.sets, "dotted-path override, e.g. train.lr=0.01")->allow_extra_args(false);
    sub->add_option("--output,-o", common.output, "output directory (overrides output_dir)");
    sub->add_option("--seed", common.seed, "run seed (overrides seed)");
  };
  auto* pretrain = app.add_subcommand("pretrain", "train every weight on the task and save a backbone checkpoint");
  add_common(pretrain);
  auto* finetune = app.add_subcommand("finetune", "attach a PERFT variant to a frozen backbone and train it");
  add_common(finetune);
  finetune->add_option("--backbone", common.backbone, "backbone checkpoint directory");
  auto* eval = app.add_subcommand("eval", "print evaluation metrics of a checkpoint as JSON");
  add_common(eval);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint directory");
  auto* an = app.add_subcommand("analyze", "vector atlas CSV/SVG, routing statistics and redundancy estimates");
  add_common(an);
  an->add_option("--checkpoint", analyze.checkpoint, "checkpoint directory");
  an->add_option("--layer", analyze.layer, "single layer to analyze (default: all)");
  an->add_option("--epsilon", analyze.epsilon, "distance threshold for effective vectors")->check(CLI::PositiveNumber);
  an->add_option("--gamma", analyze.gamma, "convergence factor for the redundancy estimate")->check(CLI::NonNegativeNumber);
  an->add_option("--routing-samples", analyze.routing_samples, "eval samples used for routing statistics");
  an->add_option("--sweep", analyze.sweep_dir, "rebuild sweep.csv from a sweep run directory");
  auto* count = app.add_subcommand("count-params", "print the activated-parameter account of a PERFT config");
  add_common(count);
  count->add_flag("--json", count_json, "machine-readable output");
  auto* sweep = app.add_subcommand("sweep", "expand list-valued config fields into a grid and run every point");
  add_common(sweep);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      for (auto* sub : app.get_subcommands()) out << sub->help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    const json raw = raw_config(common);
    if (sweep->parsed()) return cmd_sweep(raw, out, err);
    const RunConfig cfg = parse_run_config(raw);
    if (pretrain->parsed()) {
      out << metrics_json(run_pretrain(cfg)).dump(2) << "\n";
    } else if (finetune->parsed()) {
      out << metrics_json(run_finetune(cfg).metrics).dump(2) << "\n";
    } else if (eval->parsed()) {
      const LanguageModel model = load_checkpoint(checkpoint_arg(cfg, eval_checkpoint));
      const auto data = cfg.task.eval_set();
      out << metrics_json(evaluate(model, data)).dump(2) << "\n";
    } else if (an->parsed()) {
      return cmd_analyze(cfg, analyze, out);
    } else if (count->parsed()) {
      return cmd_count_params(cfg, count_json, out);
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace perft

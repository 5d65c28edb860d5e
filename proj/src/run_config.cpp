#include "perft/run_config.hpp"

#include <fstream>
#include <set>
#include <unordered_set>

#include "perft/errors.hpp"

namespace perft {

using nlohmann::json;

namespace {

class FieldReader {
 public:
  FieldReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  void mark(const char* key) { seen_.insert(key); }
  std::string field(const char* key) const { return path_ + "." + key; }

  void get(const char* key, std::size_t& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError(field(key) + " must be a non-negative integer");
    }
    out = v.get<std::size_t>();
  }
  void get(const char* key, double& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(field(key) + " must be a number");
    out = v.get<double>();
  }
  void get(const char* key, bool& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(field(key) + " must be true or false");
    out = v.get<bool>();
  }
  void get(const char* key, std::string& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(field(key) + " must be a string");
    out = v.get<std::string>();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown field " + path_ + "." + k);
    }
  }

  // Re-throws validation errors from a struct with this reader's path prefix.
  template <typename F>
  void validated(F&& f) const {
    try {
      f();
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      throw ConfigError(msg.rfind(path_ + ".", 0) == 0 ? msg : path_ + ": " + msg);
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

std::string TaskSource::label() const {
  if (train_jsonl) return train_jsonl->filename().string();
  return std::string(task_kind_name(spec.kind));
}

std::vector<Sample> TaskSource::train_set() const {
  if (train_jsonl) return load_jsonl(*train_jsonl);
  return generate(spec, train_samples);
}

std::vector<Sample> TaskSource::eval_set() const {
  if (eval_jsonl) return load_jsonl(*eval_jsonl);
  if (train_jsonl) return load_jsonl(*train_jsonl);
  std::unordered_set<std::string> seen;
  auto key = [](const Sample& x) { return x.instruction + '\x1f' + x.answer; };
  for (const auto& x : train_set()) seen.insert(key(x));
  std::vector<Sample> out;
  TaskSpec s = spec;
  for (std::uint64_t round = 0; round < 8 && out.size() < eval_samples; ++round) {
    s.seed = (spec.seed ^ 0x9e3779b97f4a7c15ULL) + round;
    for (auto& x : generate(s, eval_samples)) {
      if (out.size() < eval_samples && seen.insert(key(x)).second) out.push_back(std::move(x));
    }
  }
  if (out.empty()) throw ConfigError("task: every generated eval sample also occurs in the training set");
  return out;
}

json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"layers", c.layers},
          {"heads", c.heads},
          {"expert_width", c.expert_width},
          {"experts", c.experts},
          {"top_k", c.top_k},
          {"vocab", c.vocab},
          {"max_seq", c.max_seq},
          {"dropout", c.dropout},
          {"renormalize_topk", c.renormalize_topk},
          {"expert_activation", std::string(activation_name(c.expert_act))},
          {"gated_experts", c.gated_experts},
          {"init_std", c.init_std}};
}

json to_json(const PerftConfig& c) {
  json j = {{"variant", std::string(variant_name(c.variant))},
            {"experts", c.num_experts},
            {"top_k", c.top_k},
            {"bottleneck", c.bottleneck},
            {"activation", std::string(activation_name(c.act))},
            {"renormalize_topk", c.renormalize},
            {"peft_z_loss", c.peft_z_loss}};
  j["alpha"] = c.alpha ? json(*c.alpha) : json(nullptr);
  return j;
}

json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"steps", c.steps},
          {"aux_coef", c.aux_coef},
          {"z_loss", c.z_loss},
          {"peft_balance", c.peft_balance},
          {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"eval_every", c.eval_every}};
}

json to_json(const TaskSpec& c) {
  return {{"kind", std::string(task_kind_name(c.kind))},
          {"min_len", c.min_len},
          {"max_len", c.max_len},
          {"alphabet", c.alphabet},
          {"modulus", c.modulus},
          {"order", c.order},
          {"seed", c.seed}};
}

json to_json(const BackboneDims& d) {
  return {{"d_model", d.d_model},
          {"layers", d.layers},
          {"experts", d.experts},
          {"top_k", d.top_k},
          {"expert_width", d.expert_width},
          {"activated_total_model", d.activated_total_model}};
}

json to_json(const RunConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["perft"] = c.perft ? to_json(*c.perft) : json(nullptr);
  j["train"] = to_json(c.train);
  json task = to_json(c.task.spec);
  task["train_samples"] = c.task.train_samples;
  task["eval_samples"] = c.task.eval_samples;
  if (c.task.train_jsonl) task["train_jsonl"] = c.task.train_jsonl->string();
  if (c.task.eval_jsonl) task["eval_jsonl"] = c.task.eval_jsonl->string();
  j["task"] = task;
  j["output_dir"] = c.output_dir.string();
  j["seed"] = c.seed;
  if (c.backbone) j["backbone"] = c.backbone->string();
  if (c.dims) j["dims"] = to_json(*c.dims);
  j["storage_dtype"] = storage_dtype_name(c.storage);
  return j;
}

ModelConfig parse_model_config(const json& j, const std::string& path) {
  ModelConfig c;
  FieldReader r(j, path);
  r.get("d_model", c.d_model);
  r.get("layers", c.layers);
  r.get("heads", c.heads);
  r.get("expert_width", c.expert_width);
  r.get("experts", c.experts);
  r.get("top_k", c.top_k);
  r.get("vocab", c.vocab);
  r.get("max_seq", c.max_seq);
  r.get("dropout", c.dropout);
  r.get("renormalize_topk", c.renormalize_topk);
  std::string act(activation_name(c.expert_act));
  r.get("expert_activation", act);
  r.validated([&] { c.expert_act = parse_activation(act); });
  r.get("gated_experts", c.gated_experts);
  r.get("init_std", c.init_std);
  r.finish();
  r.validated([&] { c.validate(); });
  return c;
}

PerftConfig parse_perft_config(const json& j, const std::string& path) {
  PerftConfig c;
  FieldReader r(j, path);
  std::string variant(variant_name(c.variant));
  r.get("variant", variant);
  r.validated([&] { c.variant = parse_variant(variant); });
  r.get("experts", c.num_experts);
  r.get("top_k", c.top_k);
  r.get("bottleneck", c.bottleneck);
  std::string act = "identity";
  r.get("activation", act);
  r.validated([&] { c.act = parse_activation(act); });
  if (r.has("alpha")) {
    double a = 0.0;
    r.get("alpha", a);
    c.alpha = a;
  } else {
    r.mark("alpha");
  }
  r.get("renormalize_topk", c.renormalize);
  r.get("peft_z_loss", c.peft_z_loss);
  r.finish();
  r.validated([&] { c.validate(); });
  return c;
}

TrainConfig parse_train_config(const json& j, const std::string& path) {
  TrainConfig c;
  FieldReader r(j, path);
  r.get("lr", c.lr);
  r.get("warmup_steps", c.warmup_steps);
  r.get("batch", c.batch);
  r.get("epochs", c.epochs);
  r.get("steps", c.steps);
  r.get("aux_coef", c.aux_coef);
  r.get("z_loss", c.z_loss);
  r.get("peft_balance", c.peft_balance);
  r.get("weight_decay", c.weight_decay);
  r.get("grad_clip", c.grad_clip);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("adam_eps", c.adam_eps);
  r.get("eval_every", c.eval_every);
  r.finish();
  r.validated([&] { c.validate(); });
  return c;
}

TaskSpec parse_task_spec(const json& j, const std::string& path) {
  TaskSpec c;
  FieldReader r(j, path);
  std::string kind(task_kind_name(c.kind));
  r.get("kind", kind);
  r.validated([&] { c.kind = parse_task_kind(kind); });
  r.get("min_len", c.min_len);
  r.get("max_len", c.max_len);
  r.get("alphabet", c.alphabet);
  std::size_t modulus = c.modulus;
  r.get("modulus", modulus);
  c.modulus = modulus;
  r.get("order", c.order);
  std::size_t seed = c.seed;
  r.get("seed", seed);
  c.seed = seed;
  // Fields owned by TaskSource.
  for (const char* k : {"train_samples", "eval_samples", "train_jsonl", "eval_jsonl"}) {
    r.mark(k);
  }
  r.finish();
  r.validated([&] { c.validate(); });
  return c;
}

BackboneDims parse_dims(const json& j, const std::string& path) {
  FieldReader r(j, path);
  BackboneDims d;
  if (r.has("preset")) {
    std::string preset;
    r.get("preset", preset);
    if (preset != "olmoe-1b-7b") throw ConfigError(r.field("preset") + ": unknown preset '" + preset + "'");
    d = olmoe_1b_7b_dims();
  }
  r.get("d_model", d.d_model);
  r.get("layers", d.layers);
  r.get("experts", d.experts);
  r.get("top_k", d.top_k);
  r.get("expert_width", d.expert_width);
  std::size_t total = d.activated_total_model;
  r.get("activated_total_model", total);
  d.activated_total_model = total;
  r.finish();
  if (d.d_model == 0 || d.layers == 0 || d.experts == 0 || d.top_k == 0 || d.activated_total_model == 0) {
    throw ConfigError(path + ": d_model, layers, experts, top_k and activated_total_model must be positive");
  }
  if (d.top_k > d.experts) throw ConfigError(path + ".top_k must not exceed " + path + ".experts");
  return d;
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  FieldReader r(j, "config");
  if (r.has("model")) c.model = parse_model_config(r.raw("model"));
  if (r.has("perft")) {
    c.perft = parse_perft_config(r.raw("perft"));
  } else {
    r.mark("perft");
  }
  if (r.has("train")) c.train = parse_train_config(r.raw("train"));
  if (r.has("task")) {
    const json& t = r.raw("task");
    c.task.spec = parse_task_spec(t);
    FieldReader tr(t, "task");
    tr.get("train_samples", c.task.train_samples);
    tr.get("eval_samples", c.task.eval_samples);
    std::string p;
    if (tr.has("train_jsonl")) {
      tr.get("train_jsonl", p);
      c.task.train_jsonl = p;
    }
    if (tr.has("eval_jsonl")) {
      tr.get("eval_jsonl", p);
      c.task.eval_jsonl = p;
    }
    if (c.task.train_samples == 0) throw ConfigError("task.train_samples must be positive");
    if (c.task.eval_samples == 0) throw ConfigError("task.eval_samples must be positive");
  }
  std::string out = c.output_dir.string();
  r.get("output_dir", out);
  c.output_dir = out;
  std::size_t seed = 0;
  r.get("seed", seed);
  c.seed = seed;
  c.train.seed = seed;
  if (r.has("backbone")) {
    std::string b;
    r.get("backbone", b);
    c.backbone = b;
  }
  if (r.has("dims")) c.dims = parse_dims(r.raw("dims"));
  std::string storage(storage_dtype_name(c.storage));
  r.get("storage_dtype", storage);
  try {
    c.storage = parse_storage_dtype(storage);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("storage_dtype: ") + e.what());
  }
  r.mark("sweep");  // consumed by the sweep command
  r.finish();
  if (c.perft) {
    const PerftConfig resolved = c.perft->resolved(c.model.experts, c.model.top_k);
    try {
      resolved.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("perft: ") + e.what());
    }
  }
  return c;
}

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
    if (!node->is_object()) {
      if (node->is_null()) {
        *node = json::object();
      } else {
        throw ConfigError("override key '" + key + "' descends into a non-object");
      }
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace perft

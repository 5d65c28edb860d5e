// Acceptance harness: one PASS/FAIL line per criterion.
//   acceptance [--workdir DIR] [--only N[,N...]]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "helpers.hpp"
#include "perft/analysis.hpp"
#include "perft/checkpoint.hpp"
#include "perft/cli.hpp"
#include "perft/perft.hpp"
#include "perft/run_config.hpp"
#include "perft/training.hpp"

using namespace perft;
using namespace perft::testing;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  if (out) *out = o.str();
  if (code != kExitOk) std::cerr << "perft_lab " << args.front() << " failed: " << e.str();
  return code;
}

PerftConfig variant_config(Variant v, std::size_t m, std::size_t k, std::size_t rank) {
  PerftConfig p;
  p.variant = v;
  p.num_experts = m;
  p.top_k = k;
  p.bottleneck = rank;
  return p;
}

const Variant kAll[] = {Variant::routed, Variant::embedded, Variant::dense,
                        Variant::single, Variant::qv_lora,  Variant::gate_lora};

ModelConfig toy_model(std::size_t vocab) {
  ModelConfig c;
  c.d_model = 8;
  c.layers = 2;
  c.heads = 2;
  c.expert_width = 6;
  c.experts = 4;
  c.top_k = 2;
  c.vocab = vocab;
  c.max_seq = 8;
  c.dropout = 0.0;
  c.init_std = 0.4;
  return c;
}

Outcome accounting() {
  struct Anchor {
    PerftConfig cfg;
    std::uint64_t params;
    const char* shown;
  };
  const Anchor anchors[] = {
      {variant_config(Variant::qv_lora, 1, 1, 4), 524288, "0.52M / 0.041%"},
      {variant_config(Variant::single, 1, 1, 4), 262144, "0.26M / 0.020%"},
      {variant_config(Variant::dense, 2, 2, 4), 524288, "0.52M / 0.041%"},
      {variant_config(Variant::embedded, 64, 8, 4), 2097152, "2.10M / 0.164%"},
      {variant_config(Variant::routed, 4, 1, 32), 2228224, "2.23M / 0.174%"},
  };
  const BackboneDims dims = olmoe_1b_7b_dims();
  std::size_t ok = 0;
  for (const auto& a : anchors) {
    const ParamAccount acc = count_activated(a.cfg, dims);
    const std::string shown = format_millions(acc.activated_trainable) + " / " + fmt("%.3f%%", acc.ratio_percent);
    ok += acc.activated_trainable == a.params && shown == a.shown;
  }
  return {ok == std::size(anchors), std::to_string(ok) + "/5 anchors exact"};
}

Outcome embedded_equivalence() {
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(5000 + trial);
    const MoeLayer m = make_layer(rng, 16, 8, 4, 2, trial % 2 == 1);
    MoeAdapters e = make_moe_adapters(variant_config(Variant::embedded, 4, 2, 4), 16, "peft", rng);
    for (auto& a : e.experts) {
      a.w_down.value = random_tensor(rng, 16, 4, 0.5);
      a.w_up.value = random_tensor(rng, 4, 16, 0.5);
    }
    PeftRouter shared = m.router;
    shared.weight.trainable = false;
    const Tensor h = random_tensor(rng, 8, 16);
    worst = std::max(worst, max_abs_diff(perft_e_forward(m, e.experts, h).output,
                                         perft_r_forward(m, shared, e.experts, h).output));
  }
  return {worst < 1e-12, fmt("max discrepancy %.3g", worst)};
}

Outcome transparency() {
  Rng rng(31);
  const LanguageModel base(toy_model(11), 32);
  TokenBatch b{3, 6, {}};
  for (std::size_t i = 0; i < 18; ++i) b.tokens.push_back(static_cast<int>(rng.below(11)));
  const Tensor expect = lm_forward(base, b).logits;
  std::size_t ok = 0;
  for (Variant v : kAll) {
    LanguageModel m = base;
    m.attach(variant_config(v, 3, 2, 2), 33);
    ok += lm_forward(m, b).logits == expect;
  }
  return {ok == 6, std::to_string(ok) + "/6 variants bitwise equal"};
}

struct LmBatch {
  TokenBatch inputs;
  std::vector<int> targets;
};

double model_loss(const LanguageModel& m, const LmBatch& b, const TrainConfig& tc) {
  const ForwardResult fr = lm_forward(m, b.inputs);
  return total_loss(cross_entropy(fr.logits, b.targets).loss, fr.layers, tc, m.perft() && m.perft()->peft_z_loss)
      .total;
}

// Every parameter of the model, backbone included, against central differences.
Outcome gradient_oracle() {
  Rng rng(40);
  const std::size_t vocab = 11, batch = 2, seq = 5;
  LmBatch b{{batch, seq, {}}, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.inputs.tokens.push_back(static_cast<int>(rng.below(vocab)));
    b.targets.push_back(static_cast<int>(rng.below(vocab)));
  }
  TrainConfig tc;
  tc.aux_coef = 0.05;
  double worst = 0.0;
  for (Variant v : kAll) {
    const ModelConfig mc = toy_model(vocab);
    LanguageModel m(mc, 41);
    PerftConfig pc = variant_config(v, 3, 2, 2);
    pc.peft_z_loss = v == Variant::routed;
    m.attach(pc, 42);
    for (auto* p : m.adapter_parameters()) p->value = random_tensor(rng, p->value.rows(), p->value.cols(), 0.4);
    for (auto* p : m.parameters()) p->trainable = true;
    m.zero_grad();
    ModelCache cache;
    const ForwardResult fr = lm_forward(m, b.inputs, nullptr, &cache);
    const CrossEntropy ce = cross_entropy(fr.logits, b.targets);
    lm_backward(m, cache, ce.d_logits, aux_weights(tc, mc.layers, v == Variant::routed, pc.peft_z_loss));
    const auto params = m.parameters();
    const auto numeric = finite_diff_grad([&] { return model_loss(m, b, tc); }, params);
    worst = std::max(worst, max_grad_error(params, numeric));
  }
  return {worst < 1e-6, fmt("max relative error %.3g over all parameters", worst)};
}

Outcome frozen_invariance() {
  TaskSpec t;
  t.kind = TaskKind::copy;
  t.min_len = 2;
  t.max_len = 4;
  t.alphabet = "abcd";
  t.seed = 1;
  const auto train = generate(t, 64);
  ModelConfig mc;
  mc.d_model = 16;
  mc.layers = 2;
  mc.heads = 2;
  mc.expert_width = 16;
  mc.experts = 4;
  mc.max_seq = 24;
  const LanguageModel base(mc, 2);
  std::size_t ok = 0;
  for (Variant v : kAll) {
    LanguageModel m = base;
    m.attach(variant_config(v, 2, 1, 4), 3);
    TrainConfig tc;
    tc.steps = 100;
    tc.batch = 8;
    tc.lr = 1e-2;
    tc.warmup_steps = 10;
    train_loop(m, train, {}, tc);
    ok += backbone_checksum(m) == backbone_checksum(base);
  }
  return {ok == 6, std::to_string(ok) + "/6 variants unchanged after 100 steps"};
}

Outcome routing_contract() {
  Rng rng(60);
  std::size_t violations = 0;
  double worst_sum = 0.0;
  for (int tok = 0; tok < 1000; ++tok) {
    const std::size_t n = 2 + rng.below(7);
    const std::size_t k = 1 + rng.below(n);
    Tensor logits = random_tensor(rng, 1, n, 2.0);
    if (tok % 4 == 0)
      for (auto& x : logits.data()) x = std::round(x);
    for (bool renorm : {false, true}) {
      const RouteResult r = route_from_logits(logits, k, renorm);
      const std::vector<double> p(r.probs.row(0).begin(), r.probs.row(0).end());
      const auto expect = brute_topk(p, k);
      violations += r.topk[0] != expect;
      std::size_t nonzero = 0;
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (r.gates(0, i) == 0.0) continue;
        ++nonzero;
        s += r.gates(0, i);
        violations += std::find(expect.begin(), expect.end(), i) == expect.end();
      }
      violations += nonzero > k;
      if (renorm) worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
  }
  return {violations == 0 && worst_sum <= 1e-12,
          std::to_string(violations) + " violations, renorm sum error " + fmt("%.3g", worst_sum)};
}

Outcome aux_losses() {
  const std::size_t n = 8;
  const RouteResult uniform = route_from_logits(Tensor::zeros(16, n), 2, false);
  const double lb = load_balance_loss(uniform);
  const double z = z_loss(uniform.logits);
  const double ln_n = std::log(static_cast<double>(n));
  bool ok = std::abs(lb - 1.0) <= 1e-12 && std::abs(z - ln_n * ln_n) <= 1e-12;

  Rng rng(70);
  Parameter logits("logits", random_tensor(rng, 6, 4));
  std::vector<Parameter*> ps{&logits};
  const double z_err =
      max_relative_error(z_loss_grad(logits.value), finite_diff_grad([&] { return z_loss(logits.value); }, ps)[0]);
  const RouteResult r = route_from_logits(logits.value, 2, false);
  std::vector<double> f(4, 0.0);
  for (const auto& top : r.topk)
    for (std::size_t i : top) f[i] += 1.0 / 12.0;
  auto lb_fixed = [&] {
    const Tensor p = softmax_rows(logits.value);
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t t = 0; t < 6; ++t) s += f[i] * p(t, i) / 6.0;
    return 4.0 * s;
  };
  const Tensor d_probs = load_balance_grad(r);
  const Tensor analytic = route_backward(r, Tensor::zeros(6, 4), &d_probs, nullptr);
  const double lb_err = max_relative_error(analytic, finite_diff_grad(lb_fixed, ps)[0]);
  ok = ok && z_err < 1e-6 && lb_err < 1e-6;
  return {ok, fmt("lb %.15f", lb) + fmt(", z - (ln N)^2 %.3g", z - ln_n * ln_n) + fmt(", grad errors %.2g", z_err) +
                  fmt("/%.2g", lb_err)};
}

Outcome redundancy() {
  Rng rng(80);
  constexpr int kSamples = 1000000;
  const std::vector<double> xs{0.5, 1, 2, 5, 10};
  const std::vector<int> dofs{1, 2, 4, 8, 16};
  double worst_mc = 0.0;
  for (int k : dofs) {
    std::vector<std::size_t> below(xs.size(), 0);
    for (int s = 0; s < kSamples; ++s) {
      double q = 0.0;
      for (int i = 0; i < k; ++i) {
        const double z = rng.normal();
        q += z * z;
      }
      for (std::size_t j = 0; j < xs.size(); ++j) below[j] += q < xs[j];
    }
    for (std::size_t j = 0; j < xs.size(); ++j)
      worst_mc = std::max(worst_mc, std::abs(chi2_cdf(xs[j], k) - static_cast<double>(below[j]) / kSamples));
  }

  RedundancyModel rm;
  rm.adapters = 4;
  rm.bottleneck = 8;
  rm.epsilon = 1.0;
  rm.gamma = 0.0;
  const double p0 = redundancy_estimate(rm).p0;
  rm.gamma = std::log(2.0) / (static_cast<double>(rm.adapters * rm.bottleneck) * p0 * p0);
  const double half = redundancy_estimate(rm).eta;

  bool monotone = true;
  double prev = -1.0;
  for (int i = 0; i < 50; ++i) {
    rm.gamma = 0.02 * i;
    const double eta = redundancy_estimate(rm).eta;
    monotone = monotone && eta > prev;
    prev = eta;
  }
  return {worst_mc < 2e-3 && std::abs(half - 0.5) <= 1e-12 && monotone,
          fmt("chi2 vs MC %.2g", worst_mc) + fmt(", eta(ln2) - 0.5 = %.3g", half - 0.5) +
              (monotone ? ", eta increasing" : ", eta NOT increasing")};
}

struct DeskRun {
  fs::path config_dir;
  fs::path work;
  fs::path backbone;   // pretrained checkpoint
  fs::path tuned;      // PERFT-R checkpoint
  fs::path finetune_config;
  bool ready = false;
};

double accuracy(const fs::path& run) {
  return json::parse(slurp(run / "eval.json"))["token_accuracy"].get<double>();
}

Outcome desk_learning(DeskRun& d) {
  const fs::path pre = d.work / "pretrain";
  const fs::path pre_cfg = d.config_dir / "toy_pretrain.json";
  d.finetune_config = d.config_dir / "reverse_perft_r.json";
  d.backbone = pre / "checkpoint";
  if (cli({"pretrain", "-c", pre_cfg.string(), "-o", pre.string()}) != kExitOk) return {false, "pretrain failed"};

  const std::string cfg = d.finetune_config.string();
  std::string base_out;
  if (cli({"eval", "-c", cfg, "--checkpoint", d.backbone.string()}, &base_out) != kExitOk)
    return {false, "base eval failed"};
  const double base = json::parse(base_out)["token_accuracy"].get<double>();

  auto finetune = [&](const std::string& name, std::vector<std::string> extra) {
    std::vector<std::string> args{"finetune", "-c", cfg, "--backbone", d.backbone.string(), "-o",
                                  (d.work / name).string()};
    for (auto& s : extra) {
      args.push_back("--set");
      args.push_back(s);
    }
    return cli(args) == kExitOk;
  };
  if (!finetune("perft_r", {}) || !finetune("perft_r_repeat", {})) return {false, "PERFT-R fine-tune failed"};
  d.tuned = d.work / "perft_r" / "checkpoint";
  d.ready = true;
  const double r = accuracy(d.work / "perft_r");
  const bool same = slurp(d.work / "perft_r" / "metrics.csv") == slurp(d.work / "perft_r_repeat" / "metrics.csv") &&
                    slurp(d.work / "perft_r" / "eval.json") == slurp(d.work / "perft_r_repeat" / "eval.json");

  if (!finetune("perft_s8", {"perft.variant=S", "perft.bottleneck=8"}) ||
      !finetune("perft_s64", {"perft.variant=S", "perft.bottleneck=64"}))
    return {false, "PERFT-S fine-tune failed"};
  const double s8 = accuracy(d.work / "perft_s8");
  const double s64 = accuracy(d.work / "perft_s64");

  const bool reached = r >= 0.95, margin = r - base >= 0.20, s_flat = s64 <= s8 + 0.02;
  auto mark = [](bool b) { return b ? "ok" : "FAILED"; };
  return {reached && margin && same && s_flat,
          fmt("base %.3f", base) + fmt(", PERFT-R %.3f", r) + " [>=0.95 " + mark(reached) + ", +20pt " + mark(margin) +
              ", reproduced " + mark(same) + "]" + fmt(", PERFT-S D_B=8 %.3f", s8) + fmt(" / D_B=64 %.3f", s64) +
              " [no gain " + mark(s_flat) + "]"};
}

Outcome analysis_pipeline(DeskRun& d) {
  if (!d.ready) return {false, "needs the fine-tuned model from criterion 9"};
  const std::string cfg = d.finetune_config.string();
  for (const char* name : {"analyze_a", "analyze_b"})
    if (cli({"analyze", "-c", cfg, "--checkpoint", d.tuned.string(), "-o", (d.work / name).string()}) != kExitOk)
      return {false, "analyze failed"};
  const LanguageModel m = load_checkpoint(d.tuned);
  std::size_t identical = 0, files = 0;
  for (std::size_t l = 0; l < m.config().layers; ++l)
    for (const char* ext : {".csv", ".svg"}) {
      const std::string f = "atlas_layer" + std::to_string(l) + ext;
      ++files;
      identical += fs::exists(d.work / "analyze_a" / f) &&
                   slurp(d.work / "analyze_a" / f) == slurp(d.work / "analyze_b" / f);
    }

  std::size_t matches = 0;
  for (int fixture = 0; fixture < 10; ++fixture) {
    Rng rng(900 + fixture);
    const std::size_t n = 20 + rng.below(30);
    Tensor v = random_tensor(rng, n, 6, 1.0);
    for (std::size_t i = 1; i < n; i += 3)
      for (std::size_t c = 0; c < 6; ++c) v(i, c) = v(i - 1, c) + 0.05 * rng.normal();
    const double eps = 0.5 + 0.25 * fixture;
    std::size_t oracle = 0;
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i) {
      bool fresh = true;
      for (std::size_t j : kept) {
        double s = 0.0;
        for (std::size_t c = 0; c < 6; ++c) s += (v(i, c) - v(j, c)) * (v(i, c) - v(j, c));
        fresh = fresh && std::sqrt(s) > eps;
      }
      if (fresh) kept.push_back(i);
    }
    oracle = kept.size();
    matches += effective_count(v, eps) == oracle;
  }

  TaskSource src = parse_run_config(load_json_file(d.finetune_config)).task;
  const EncodedBatch eb = encode_batch(src.eval_set());
  double worst = 0.0;
  for (const auto& s : routing_stats(m, {eb.batch, eb.seq, eb.inputs})) {
    double f = 0.0;
    for (double x : s.dispatch_fraction) f += x;
    worst = std::max(worst, std::abs(f - 1.0));
  }
  return {identical == files && matches == 10 && worst <= 1e-12,
          std::to_string(identical) + "/" + std::to_string(files) + " atlas files deterministic, " +
              std::to_string(matches) + "/10 effective counts match, " + fmt("max |sum f - 1| %.3g", worst)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = (fs::temp_directory_path() / "perft_acceptance").string();
  std::string config_dir = PERFT_CONFIG_DIR;
  std::vector<int> only;
  app.add_option("--workdir", workdir, "scratch directory for training runs");
  app.add_option("--configs", config_dir, "directory holding the desk-scale run configs");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  DeskRun desk;
  desk.config_dir = config_dir;
  desk.work = workdir;
  fs::create_directories(desk.work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"parameter accounting anchors", accounting},
      {"PERFT-E equals PERFT-R with a shared frozen router", embedded_equivalence},
      {"zero-init transparency", transparency},
      {"full-model gradient oracle", gradient_oracle},
      {"frozen backbone invariance", frozen_invariance},
      {"routing contract", routing_contract},
      {"auxiliary losses", aux_losses},
      {"redundancy estimator", redundancy},
      {"desk-scale learning", [&] { return desk_learning(desk); }},
      {"analysis pipeline", [&] { return analysis_pipeline(desk); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id) && !(id == 9 && selected.count(10))) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!selected.empty() && !selected.count(id)) continue;
    std::printf("[%s] criterion %2d  %-52s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}

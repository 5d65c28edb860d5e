#include "perft/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "perft/errors.hpp"

namespace perft {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view vector_kind_name(VectorKind k) {
  switch (k) {
    case VectorKind::ffn_key: return "ffn_key";
    case VectorKind::expert_vector: return "expert_vector";
    case VectorKind::peft_key: return "peft_key";
    case VectorKind::peft_expert_vector: return "peft_expert_vector";
  }
  return "ffn_key";
}

std::size_t VectorAtlas::count(VectorKind k) const {
  return static_cast<std::size_t>(
      std::count_if(vectors.begin(), vectors.end(), [k](const AtlasVector& v) { return v.kind == k; }));
}

namespace {

Tensor stack(const std::vector<const AtlasVector*>& rows, std::size_t dim) {
  if (rows.empty()) return {};
  Tensor out = Tensor::zeros(rows.size(), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i]->values.begin(), rows[i]->values.end(), out.row(i).begin());
  return out;
}

void push_columns(VectorAtlas& atlas, VectorKind kind, std::size_t expert, const Tensor& w) {
  for (std::size_t c = 0; c < w.cols(); ++c) {
    AtlasVector v{kind, expert, c, std::vector<double>(w.rows())};
    for (std::size_t r = 0; r < w.rows(); ++r) v.values[r] = w(r, c);
    atlas.vectors.push_back(std::move(v));
  }
}

}  // namespace

Tensor VectorAtlas::matrix(VectorKind k) const {
  std::vector<const AtlasVector*> rows;
  for (const auto& v : vectors) {
    if (v.kind == k) rows.push_back(&v);
  }
  return stack(rows, dim);
}

Tensor VectorAtlas::matrix() const {
  std::vector<const AtlasVector*> rows;
  for (const auto& v : vectors) rows.push_back(&v);
  return stack(rows, dim);
}

VectorAtlas extract_atlas(const LanguageModel& model, std::size_t layer) {
  if (layer >= model.blocks.size()) {
    throw InputError("layer " + std::to_string(layer) + " out of range for a " +
                     std::to_string(model.blocks.size()) + "-layer model");
  }
  const auto& block = model.blocks[layer];
  VectorAtlas atlas;
  atlas.layer = layer;
  atlas.dim = model.config().d_model;
  for (std::size_t i = 0; i < block.moe.experts.size(); ++i) {
    push_columns(atlas, VectorKind::ffn_key, i, block.moe.experts[i].w_up.value);
  }
  const Tensor& wg = block.moe.router.weight.value;
  for (std::size_t i = 0; i < wg.cols(); ++i) {
    AtlasVector v{VectorKind::expert_vector, i, 0, std::vector<double>(wg.rows())};
    for (std::size_t r = 0; r < wg.rows(); ++r) v.values[r] = wg(r, i);
    atlas.vectors.push_back(std::move(v));
  }
  if (block.adapters) {
    for (std::size_t j = 0; j < block.adapters->experts.size(); ++j) {
      push_columns(atlas, VectorKind::peft_key, j, block.adapters->experts[j].w_down.value);
    }
    if (block.adapters->router) {
      const Tensor& wp = block.adapters->router->weight.value;
      for (std::size_t j = 0; j < wp.cols(); ++j) {
        AtlasVector v{VectorKind::peft_expert_vector, j, 0, std::vector<double>(wp.rows())};
        for (std::size_t r = 0; r < wp.rows(); ++r) v.values[r] = wp(r, j);
        atlas.vectors.push_back(std::move(v));
      }
    }
  }
  return atlas;
}

AtlasProjection project_atlas(const VectorAtlas& atlas, std::size_t dims) {
  const Tensor keys = atlas.matrix(VectorKind::ffn_key);
  if (keys.empty() || keys.rows() < 2) throw DegenerateInputError("project_atlas needs at least 2 FFN key vectors");
  AtlasProjection out;
  out.pca = pca_fit(keys, dims);
  out.coords = pca_project(out.pca, atlas.matrix());
  return out;
}

std::size_t effective_count(const Tensor& vectors, double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("effective_count: epsilon must be positive");
  if (vectors.empty()) return 0;
  const std::size_t d = vectors.cols();
  const double eps2 = epsilon * epsilon;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < vectors.rows(); ++i) {
    const auto vi = vectors.row(i);
    bool distinct = true;
    for (std::size_t k : kept) {
      const auto vk = vectors.row(k);
      double dist2 = 0.0;
      for (std::size_t c = 0; c < d; ++c) dist2 += (vi[c] - vk[c]) * (vi[c] - vk[c]);
      if (dist2 <= eps2) {
        distinct = false;
        break;
      }
    }
    if (distinct) kept.push_back(i);
  }
  return kept.size();
}

void RedundancyModel::validate() const {
  if (adapters < 1) throw ConfigError("redundancy: M must be >= 1");
  if (bottleneck < 1) throw ConfigError("redundancy: D_B must be >= 1");
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("redundancy: epsilon must be positive");
  if (!(gamma >= 0.0)) throw ConfigError("redundancy: gamma_T must be >= 0");
}

RedundancyEstimate redundancy_estimate(const RedundancyModel& rm) {
  rm.validate();
  const double db = static_cast<double>(rm.bottleneck);
  const double md = static_cast<double>(rm.adapters) * db;
  RedundancyEstimate e;
  e.p0 = chi2_cdf(db * rm.epsilon * rm.epsilon / 4.0, static_cast<int>(rm.bottleneck));
  e.pT = std::clamp(rm.gamma * e.p0, 0.0, 1.0);
  e.eta = std::isinf(rm.gamma) ? (e.p0 > 0.0 ? 1.0 : 0.0) : -std::expm1(-md * rm.gamma * e.p0 * e.p0);
  e.expected_effective = md * e.eta;
  return e;
}

double gamma_for_observed(const RedundancyModel& rm, double observed) {
  RedundancyModel probe = rm;
  probe.gamma = 0.0;
  const double md = static_cast<double>(rm.adapters * rm.bottleneck);
  const double p0 = redundancy_estimate(probe).p0;
  if (!(observed >= 0.0) || observed >= md) {
    throw DomainError("gamma_for_observed: observed count must lie in [0, M*D_B)");
  }
  if (p0 <= 0.0) throw DomainError("gamma_for_observed: p0 underflows to zero");
  // expected_effective is strictly increasing in gamma, so the inverse is unique.
  return -std::log1p(-observed / md) / (md * p0 * p0);
}

std::vector<RoutingStats> routing_stats(const LanguageModel& model, const TokenBatch& batch) {
  if (batch.batch == 0 || batch.seq == 0 || batch.tokens.empty()) throw InputError("routing_stats: empty batch");
  const ForwardResult fwd = lm_forward(model, batch);
  std::vector<RoutingStats> out;
  for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
    const RouteResult& r = fwd.layers[l].route;
    const std::size_t n = r.num_experts();
    const std::size_t t = r.tokens();
    RoutingStats s;
    s.layer = l;
    s.tokens = t;
    s.counts.assign(n, 0);
    s.mean_prob.assign(n, 0.0);
    s.coactivation = Tensor::zeros(n, n);
    std::size_t assignments = 0;
    for (std::size_t tok = 0; tok < t; ++tok) {
      const auto& top = r.topk[tok];
      for (std::size_t a : top) {
        ++s.counts[a];
        ++assignments;
        for (std::size_t b : top) s.coactivation(a, b) += 1.0;
      }
      for (std::size_t i = 0; i < n; ++i) s.mean_prob[i] += r.probs(tok, i);
    }
    s.dispatch_fraction.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      s.dispatch_fraction[i] = static_cast<double>(s.counts[i]) / static_cast<double>(assignments);
      s.mean_prob[i] /= static_cast<double>(t);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_point_result(const fs::path& point_dir, const SweepRow& row) {
  json j = {{"point", row.point},
            {"variant", row.variant},
            {"M", row.adapters},
            {"K_peft", row.peft_top_k},
            {"D_B", row.bottleneck},
            {"activated_params", row.activated_params},
            {"activated_ratio_percent", row.activated_ratio_percent},
            {"task", row.task}};
  j["metric"] = row.metric ? json(*row.metric) : json(nullptr);
  std::ofstream out(point_dir / kPointResultFile);
  if (!out) throw IoError("cannot write " + (point_dir / kPointResultFile).string());
  out << j.dump(2) << "\n";
}

std::vector<SweepRow> collect_sweep(const fs::path& run_dir) {
  std::error_code ec;
  if (!fs::is_directory(run_dir, ec)) throw IoError("not a run directory: " + run_dir.string());
  std::vector<fs::path> points;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / kPointResultFile)) points.push_back(entry.path());
  }
  std::sort(points.begin(), points.end());
  std::vector<SweepRow> rows;
  for (const auto& p : points) {
    std::ifstream in(p / kPointResultFile);
    try {
      const json j = json::parse(in);
      rows.push_back({j.at("point").get<std::string>(), j.at("variant").get<std::string>(),
                      j.at("M").get<std::size_t>(), j.at("K_peft").get<std::size_t>(),
                      j.at("D_B").get<std::size_t>(), j.at("activated_params").get<std::uint64_t>(),
                      j.at("activated_ratio_percent").get<double>(), j.at("task").get<std::string>(),
                      std::nullopt});
      if (!j.at("metric").is_null()) rows.back().metric = j.at("metric").get<double>();
    } catch (const json::exception& e) {
      throw IoError((p / kPointResultFile).string() + ": " + e.what());
    }
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "variant,M,K_peft,D_B,activated_params,activated_ratio_percent,task,metric\n";
  char buf[64];
  for (const auto& r : rows) {
    out << r.variant << ',' << r.adapters << ',' << r.peft_top_k << ',' << r.bottleneck << ','
        << r.activated_params << ',';
    std::snprintf(buf, sizeof buf, "%.6f", r.activated_ratio_percent);
    out << buf << ',' << r.task << ',';
    if (r.metric) {
      std::snprintf(buf, sizeof buf, "%.6f", *r.metric);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::vector<SweepRow> sweep_report(const fs::path& run_dir) {
  auto rows = collect_sweep(run_dir);
  std::ofstream out(run_dir / "sweep.csv");
  if (!out) throw IoError("cannot write " + (run_dir / "sweep.csv").string());
  out << sweep_csv(rows);
  return rows;
}

std::string atlas_csv(const VectorAtlas& atlas, const AtlasProjection& proj) {
  std::ostringstream out;
  out << "vector_id,owner_kind,expert_id,x,y\n";
  char buf[96];
  for (std::size_t i = 0; i < atlas.vectors.size(); ++i) {
    const auto& v = atlas.vectors[i];
    const double y = proj.coords.cols() > 1 ? proj.coords(i, 1) : 0.0;
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", proj.coords(i, 0), y);
    out << i << ',' << vector_kind_name(v.kind) << ',' << v.expert << ',' << buf << '\n';
  }
  return out.str();
}

namespace {

// Colour-blind friendly palette, cycled for more than eight experts.
constexpr const char* kPalette[] = {"#0072b2", "#e69f00", "#009e73", "#cc79a7",
                                    "#56b4e9", "#d55e00", "#f0e442", "#000000"};

std::string marker(VectorKind kind, double x, double y, const char* colour) {
  char buf[256];
  switch (kind) {
    case VectorKind::ffn_key:
      std::snprintf(buf, sizeof buf, "<circle cx=\"%.3f\" cy=\"%.3f\" r=\"2\" fill=\"%s\" fill-opacity=\"0.5\"/>",
                    x, y, colour);
      break;
    case VectorKind::expert_vector:
      std::snprintf(buf, sizeof buf,
                    "<path d=\"M%.3f %.3fl5 0l-5 -8l-5 8z\" fill=\"%s\" stroke=\"black\" stroke-width=\"0.8\"/>", x,
                    y + 3, colour);
      break;
    case VectorKind::peft_key:
      std::snprintf(buf, sizeof buf,
                    "<path d=\"M%.3f %.3fl6 6M%.3f %.3fl-6 6\" stroke=\"%s\" stroke-width=\"1.5\"/>", x - 3, y - 3,
                    x + 3, y - 3, colour);
      break;
    case VectorKind::peft_expert_vector:
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%.3f\" y=\"%.3f\" width=\"8\" height=\"8\" fill=\"%s\" stroke=\"black\" "
                    "stroke-width=\"0.8\"/>",
                    x - 4, y - 4, colour);
      break;
  }
  return buf;
}

}  // namespace

std::string atlas_svg(const VectorAtlas& atlas, const AtlasProjection& proj) {
  constexpr double kSize = 480.0;
  constexpr double kMargin = 24.0;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  for (std::size_t i = 0; i < proj.coords.rows(); ++i) {
    const double x = proj.coords(i, 0);
    const double y = proj.coords.cols() > 1 ? proj.coords(i, 1) : 0.0;
    if (i == 0 || x < xmin) xmin = x;
    if (i == 0 || x > xmax) xmax = x;
    if (i == 0 || y < ymin) ymin = y;
    if (i == 0 || y > ymax) ymax = y;
  }
  const double xs = xmax > xmin ? (kSize - 2 * kMargin) / (xmax - xmin) : 1.0;
  const double ys = ymax > ymin ? (kSize - 2 * kMargin) / (ymax - ymin) : 1.0;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSize << "\" height=\"" << kSize + 40
      << "\" viewBox=\"0 0 " << kSize << ' ' << kSize + 40 << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"8\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\">layer " << atlas.layer
      << " (PCA fit on FFN keys, explained " << static_cast<int>(std::lround(100 * proj.pca.explained_ratio()))
      << "%)</text>\n";
  // Keys first so the sparse expert vectors stay visible on top.
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t i = 0; i < atlas.vectors.size(); ++i) {
      const auto& v = atlas.vectors[i];
      const bool key = v.kind == VectorKind::ffn_key || v.kind == VectorKind::peft_key;
      if (key != (pass == 0)) continue;
      const double x = kMargin + (proj.coords(i, 0) - xmin) * xs;
      const double yv = proj.coords.cols() > 1 ? proj.coords(i, 1) : 0.0;
      const double y = 24 + kMargin + (ymax - yv) * ys;
      out << marker(v.kind, x, y, kPalette[v.expert % std::size(kPalette)]) << '\n';
    }
  }
  double lx = 8;
  const double ly = kSize + 28;
  for (auto kind : {VectorKind::ffn_key, VectorKind::expert_vector, VectorKind::peft_key,
                    VectorKind::peft_expert_vector}) {
    if (atlas.count(kind) == 0) continue;
    out << marker(kind, lx + 4, ly - 4, "#555555") << "<text x=\"" << lx + 12 << "\" y=\"" << ly
        << "\" font-family=\"sans-serif\" font-size=\"11\">" << vector_kind_name(kind) << "</text>\n";
    lx += 118;
  }
  out << "</svg>\n";
  return out.str();
}

std::string routing_stats_json(const std::vector<RoutingStats>& stats) {
  json arr = json::array();
  for (const auto& s : stats) {
    json co = json::array();
    for (std::size_t r = 0; r < s.coactivation.rows(); ++r) {
      co.push_back(std::vector<double>(s.coactivation.row(r).begin(), s.coactivation.row(r).end()));
    }
    arr.push_back({{"layer", s.layer},
                   {"tokens", s.tokens},
                   {"dispatch_fraction", s.dispatch_fraction},
                   {"mean_prob", s.mean_prob},
                   {"counts", s.counts},
                   {"coactivation", co}});
  }
  return arr.dump(2);
}

}  // namespace perft

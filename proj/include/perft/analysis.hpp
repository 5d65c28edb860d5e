#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "perft/model.hpp"
#include "perft/numerics.hpp"

namespace perft {

enum class VectorKind { ffn_key, expert_vector, peft_key, peft_expert_vector };
std::string_view vector_kind_name(VectorKind k);

struct AtlasVector {
  VectorKind kind = VectorKind::ffn_key;
  std::size_t expert = 0;
  std::size_t column = 0;
  std::vector<double> values;  // length D
};

// Weight columns of one layer, ordered by kind, then expert id, then column.
struct VectorAtlas {
  std::size_t layer = 0;
  std::size_t dim = 0;
  std::vector<AtlasVector> vectors;

  std::size_t count(VectorKind k) const;
  Tensor matrix(VectorKind k) const;  // one vector per row
  Tensor matrix() const;
};

// FFN keys are columns of W_up, expert vectors columns of the router weight,
// PEFT keys columns of each adapter's W_down, PEFT expert vectors columns of
// the PEFT router (routed variant only).
VectorAtlas extract_atlas(const LanguageModel& model, std::size_t layer);

struct AtlasProjection {
  PcaModel pca;   // fit on the FFN key vectors alone
  Tensor coords;  // one row per atlas vector, in atlas order
};

AtlasProjection project_atlas(const VectorAtlas& atlas, std::size_t dims = 2);

// Greedy scan in row order: a row is kept when its Euclidean distance to every
// kept row exceeds epsilon.
std::size_t effective_count(const Tensor& vectors, double epsilon);

struct RedundancyModel {
  std::size_t adapters = 1;    // M
  std::size_t bottleneck = 1;  // D_B
  double epsilon = 1.0;
  double gamma = 1.0;          // convergence factor gamma_T

  void validate() const;
};

struct RedundancyEstimate {
  double p0 = 0.0;
  double pT = 0.0;
  double eta = 0.0;
  double expected_effective = 0.0;
};

RedundancyEstimate redundancy_estimate(const RedundancyModel& rm);

// Diagnostic: the gamma that makes expected_effective equal `observed` with
// the other fields of `rm` fixed. Requires 0 <= observed < M * D_B and p0 > 0.
double gamma_for_observed(const RedundancyModel& rm, double observed);

struct RoutingStats {
  std::size_t layer = 0;
  std::vector<double> dispatch_fraction;  // f_i
  std::vector<double> mean_prob;          // P_i
  std::vector<std::size_t> counts;        // tokens whose top-K contains i
  Tensor coactivation;                    // N x N; diagonal holds counts
  std::size_t tokens = 0;
};

std::vector<RoutingStats> routing_stats(const LanguageModel& model, const TokenBatch& batch);

// One row per completed sweep point.
struct SweepRow {
  std::string point;
  std::string variant;
  std::size_t adapters = 0;
  std::size_t peft_top_k = 0;
  std::size_t bottleneck = 0;
  std::uint64_t activated_params = 0;
  double activated_ratio_percent = 0.0;
  std::string task;
  std::optional<double> metric;  // absent for count-only sweeps
};

inline constexpr const char* kPointResultFile = "result.json";

void write_point_result(const std::filesystem::path& point_dir, const SweepRow& row);
// Reads every <run>/<point>/result.json, sorted by point directory name.
std::vector<SweepRow> collect_sweep(const std::filesystem::path& run_dir);
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::vector<SweepRow> sweep_report(const std::filesystem::path& run_dir);  // also writes sweep.csv

std::string atlas_csv(const VectorAtlas& atlas, const AtlasProjection& proj);
std::string atlas_svg(const VectorAtlas& atlas, const AtlasProjection& proj);
std::string routing_stats_json(const std::vector<RoutingStats>& stats);

}  // namespace perft

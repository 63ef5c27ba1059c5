// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "sfpn/sfpn.hpp"

namespace sfpn {

struct LayerProfile {
  std::string name;
  std::int32_t stage = 0;
  std::int32_t stride = 1;
  std::size_t params = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t in_voxels = 0;
  std::size_t out_voxels = 0;

  bool operator==(const LayerProfile&) const = default;
};

struct BenchReport {
  std::string variant;
  std::array<std::int32_t, 9> channels{};
  std::size_t total_params = 0;
  double median_ms = 0.0;  // un-instrumented end-to-end forward
  double p95_ms = 0.0;
  std::int32_t threads = 1;
  std::uint64_t seed = 0;
  std::string machine;
  std::string input;
  std::vector<LayerProfile> layers;

  bool operator==(const BenchReport&) const = default;
};

/// Raw timings behind one report, in milliseconds.
struct ProfileSamples {
  std::vector<double> total;                // un-instrumented runs
  std::vector<std::vector<double>> layers;  // per layer, instrumented runs
};

struct ProfileOptions {
  std::int32_t runs = 20;
  std::int32_t warmup = 2;
  std::string variant = "custom";
  std::string input = "";
};

/// Lower median: element (n - 1) / 2 of the sorted samples.
double median_of(std::vector<double> samples);
/// Nearest-rank 95th percentile.
double p95_of(std::vector<double> samples);

/// Runs `warmup` discarded passes, then `runs` instrumented passes for the
/// per-layer table and `runs` plain passes for the end-to-end figures.
BenchReport profile(const SFPNModel& model, const SparseTensor& input, const ProfileOptions& options,
                    ProfileSamples* samples = nullptr);

/// Thread count OpenMP will use for the next parallel region.
std::int32_t active_threads();
std::string machine_descriptor();

/// Small, Base and Large with one seed on one input.
std::vector<BenchReport> bench_variants(const SparseTensor& input, std::uint64_t seed, const ProfileOptions& options);

/// Full and the three ablations with one seed on one input.
std::vector<BenchReport> ablate(const SparseTensor& input, std::uint64_t seed, const ProfileOptions& options,
                                const SFPNConfig& base = SFPNConfig::large());

/// Per-stride share of latency (sum of layer medians) and parameters.
struct StrideShare {
  std::int32_t stride = 1;
  double latency_share = 0.0;
  double param_share = 0.0;
};
std::vector<StrideShare> stride_shares(const BenchReport& report);

/// Expected layer distribution: the stride-1 and stride-2 layers together
/// take a larger latency share than any coarser stride, and the coarsest
/// stride holds the largest parameter share.
struct DistributionCheck {
  bool fine_layers_dominate_latency = false;
  bool coarsest_dominates_params = false;
  std::string detail;
};
DistributionCheck check_layer_distribution(const BenchReport& report);

/// One header line then, per report, a `report` row followed by its `layer` rows.
std::string to_csv(const std::vector<BenchReport>& reports);
std::vector<BenchReport> parse_csv(std::string_view text);

/// Columns: variant, C1..C9, params, median and p95 latency.
std::string to_table(const std::vector<BenchReport>& reports);
/// Per-layer breakdown of one report.
std::string layer_table(const BenchReport& report);

/// One JSON object per report; raw samples included when given.
std::string to_jsonl(const std::vector<BenchReport>& reports, const std::vector<ProfileSamples>* samples = nullptr);

}  // namespace sfpn

// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/profiler.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <unordered_map>

#include "json.hpp"
#include "sfpn/error.hpp"

namespace sfpn {
namespace {

using Clock = std::chrono::steady_clock;

class Recorder final : public LayerObserver {
 public:
  explicit Recorder(const std::vector<LayerInfo>& layers) : times_(layers.size()), voxels_(layers.size()) {
    for (std::size_t i = 0; i < layers.size(); ++i) index_.emplace(layers[i].name, i);
  }

  void on_layer(std::string_view name, double ms, std::size_t in_voxels, std::size_t out_voxels) override {
    const auto it = index_.find(std::string(name));
    if (it == index_.end()) fail(ErrorCode::ShapeError, "forward reported unknown layer " + std::string(name));
    if (recording_) times_[it->second].push_back(ms);
    voxels_[it->second] = {in_voxels, out_voxels};
  }

  bool recording_ = false;
  std::vector<std::vector<double>> times_;
  std::vector<std::pair<std::size_t, std::size_t>> voxels_;

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::vector<std::vector<std::string>> split_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool in_quotes = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (in_quotes) fail(ErrorCode::FormatError, "unterminated quoted CSV field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') fail(ErrorCode::FormatError, "bad number in CSV: '" + s + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& s) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0') fail(ErrorCode::FormatError, "bad integer in CSV: '" + s + "'");
  return v;
}

std::int32_t parse_i32(const std::string& s) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0') fail(ErrorCode::FormatError, "bad integer in CSV: '" + s + "'");
  return static_cast<std::int32_t>(v);
}

const char* const kCsvHeader =
    "kind,variant,name,stage,stride,params,median_ms,p95_ms,in_voxels,out_voxels,channels,threads,seed,machine,input";
constexpr std::size_t kCsvColumns = 15;

}  // namespace

double median_of(std::vector<double> samples) {
  if (samples.empty()) fail(ErrorCode::RangeError, "median of an empty sample set");
  std::sort(samples.begin(), samples.end());
  return samples[(samples.size() - 1) / 2];
}

double p95_of(std::vector<double> samples) {
  if (samples.empty()) fail(ErrorCode::RangeError, "percentile of an empty sample set");
  std::sort(samples.begin(), samples.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(samples.size())));
  return samples[std::max<std::size_t>(rank, 1) - 1];
}

std::int32_t active_threads() { return static_cast<std::int32_t>(omp_get_max_threads()); }

std::string machine_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  for (std::string line; std::getline(info, line);) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(line.find_first_not_of(' ', colon + 1));
      break;
    }
  }
  return cpu + "; " + std::to_string(omp_get_num_procs()) + " logical cores; gcc " + __VERSION__;
}

BenchReport profile(const SFPNModel& model, const SparseTensor& input, const ProfileOptions& options,
                    ProfileSamples* samples) {
  if (options.runs < 3) fail(ErrorCode::RangeError, "profiling needs at least 3 runs");
  if (options.warmup < 0) fail(ErrorCode::RangeError, "warm-up count must be non-negative");
  if (input.size() == 0) fail(ErrorCode::EmptyCloud, "profiling input is empty");

  const std::vector<LayerInfo> layers = model.layers();
  Recorder recorder(layers);
  ForwardOptions observed;
  observed.observer = &recorder;

  for (std::int32_t i = 0; i < options.warmup; ++i) (void)forward(model, input, observed);
  recorder.recording_ = true;
  for (std::int32_t i = 0; i < options.runs; ++i) (void)forward(model, input, observed);

  std::vector<double> totals;
  for (std::int32_t i = 0; i < options.runs; ++i) {
    const auto t0 = Clock::now();
    (void)forward(model, input);
    totals.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }

  BenchReport r;
  r.variant = options.variant;
  r.channels = model.config.channels;
  r.total_params = parameter_count(model);
  r.median_ms = median_of(totals);
  r.p95_ms = p95_of(totals);
  r.threads = active_threads();
  r.seed = model.seed;
  r.machine = machine_descriptor();
  r.input = options.input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerProfile p;
    p.name = layers[i].name;
    p.stage = layers[i].stage;
    p.stride = layers[i].stride;
    p.params = layers[i].params;
    p.median_ms = median_of(recorder.times_[i]);
    p.p95_ms = p95_of(recorder.times_[i]);
    p.in_voxels = recorder.voxels_[i].first;
    p.out_voxels = recorder.voxels_[i].second;
    r.layers.push_back(std::move(p));
  }
  if (samples) {
    samples->total = std::move(totals);
    samples->layers = std::move(recorder.times_);
  }
  return r;
}

std::vector<BenchReport> bench_variants(const SparseTensor& input, std::uint64_t seed, const ProfileOptions& options) {
  std::vector<BenchReport> out;
  for (const char* name : {"small", "base", "large"}) {
    ProfileOptions o = options;
    o.variant = name;
    out.push_back(profile(build_model(SFPNConfig::preset(name), seed), input, o));
  }
  return out;
}

std::vector<BenchReport> ablate(const SparseTensor& input, std::uint64_t seed, const ProfileOptions& options,
                                const SFPNConfig& base) {
  std::vector<BenchReport> out;
  for (Ablation a : {Ablation::Full, Ablation::NoUpsampledFusion, Ablation::NoPyramid, Ablation::NoSkipConnections}) {
    ProfileOptions o = options;
    o.variant = to_string(a);
    out.push_back(profile(build_model(base.with_ablation(a), seed), input, o));
  }
  return out;
}

std::vector<StrideShare> stride_shares(const BenchReport& report) {
  std::map<std::int32_t, std::pair<double, double>> sums;
  double latency = 0.0, params = 0.0;
  for (const auto& l : report.layers) {
    sums[l.stride].first += l.median_ms;
    sums[l.stride].second += static_cast<double>(l.params);
    latency += l.median_ms;
    params += static_cast<double>(l.params);
  }
  std::vector<StrideShare> out;
  for (const auto& [stride, s] : sums)
    out.push_back({stride, latency > 0.0 ? s.first / latency : 0.0, params > 0.0 ? s.second / params : 0.0});
  return out;
}

DistributionCheck check_layer_distribution(const BenchReport& report) {
  const auto shares = stride_shares(report);
  DistributionCheck c;
  double fine = 0.0, coarse_latency = 0.0, other_params = 0.0, coarsest_params = 0.0;
  const std::int32_t coarsest = shares.empty() ? 1 : shares.back().stride;
  char buf[128];
  for (const auto& s : shares) {
    if (s.stride <= 2)
      fine += s.latency_share;
    else
      coarse_latency = std::max(coarse_latency, s.latency_share);
    if (s.stride == coarsest)
      coarsest_params = s.param_share;
    else
      other_params = std::max(other_params, s.param_share);
    std::snprintf(buf, sizeof buf, "stride %d: latency %.1f%%, params %.1f%%\n", s.stride, 100.0 * s.latency_share,
                  100.0 * s.param_share);
    c.detail += buf;
  }
  c.fine_layers_dominate_latency = fine > coarse_latency;
  c.coarsest_dominates_params = coarsest_params > other_params;
  std::snprintf(buf, sizeof buf, "stride<=2 latency %.1f%% vs best coarser %.1f%%; stride %d params %.1f%% vs next %.1f%%",
                100.0 * fine, 100.0 * coarse_latency, coarsest, 100.0 * coarsest_params, 100.0 * other_params);
  c.detail += buf;
  return c;
}

std::string to_csv(const std::vector<BenchReport>& reports) {
  std::string out = kCsvHeader;
  out += '\n';
  for (const auto& r : reports) {
    std::string channels;
    for (std::size_t i = 0; i < r.channels.size(); ++i) channels += (i ? ";" : "") + std::to_string(r.channels[i]);
    out += "report," + quote(r.variant) + ",\"\",,," + std::to_string(r.total_params) + ',' + format_double(r.median_ms) +
           ',' + format_double(r.p95_ms) + ",,," + quote(channels) + ',' + std::to_string(r.threads) + ',' +
           std::to_string(r.seed) + ',' + quote(r.machine) + ',' + quote(r.input) + '\n';
    for (const auto& l : r.layers) {
      out += "layer," + quote(r.variant) + ',' + quote(l.name) + ',' + std::to_string(l.stage) + ',' +
             std::to_string(l.stride) + ',' + std::to_string(l.params) + ',' + format_double(l.median_ms) + ',' +
             format_double(l.p95_ms) + ',' + std::to_string(l.in_voxels) + ',' + std::to_string(l.out_voxels) +
             ",,,,,\n";
    }
  }
  return out;
}

std::vector<BenchReport> parse_csv(std::string_view text) {
  const auto rows = split_csv(text);
  if (rows.empty()) fail(ErrorCode::FormatError, "CSV is empty");
  std::string header;
  for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
  if (header != kCsvHeader) fail(ErrorCode::FormatError, "unexpected CSV header");

  std::vector<BenchReport> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& f = rows[i];
    if (f.size() != kCsvColumns) fail(ErrorCode::FormatError, "CSV row " + std::to_string(i) + " has wrong column count");
    if (f[0] == "report") {
      BenchReport r;
      r.variant = f[1];
      r.total_params = parse_u64(f[5]);
      r.median_ms = parse_double(f[6]);
      r.p95_ms = parse_double(f[7]);
      std::size_t pos = 0;
      for (std::size_t k = 0; k < r.channels.size(); ++k) {
        const std::size_t end = std::min(f[10].find(';', pos), f[10].size());
        r.channels[k] = parse_i32(f[10].substr(pos, end - pos));
        pos = end + 1;
      }
      r.threads = parse_i32(f[11]);
      r.seed = parse_u64(f[12]);
      r.machine = f[13];
      r.input = f[14];
      out.push_back(std::move(r));
    } else if (f[0] == "layer") {
      if (out.empty() || out.back().variant != f[1])
        fail(ErrorCode::FormatError, "layer row " + std::to_string(i) + " does not follow its report row");
      LayerProfile l;
      l.name = f[2];
      l.stage = parse_i32(f[3]);
      l.stride = parse_i32(f[4]);
      l.params = parse_u64(f[5]);
      l.median_ms = parse_double(f[6]);
      l.p95_ms = parse_double(f[7]);
      l.in_voxels = parse_u64(f[8]);
      l.out_voxels = parse_u64(f[9]);
      out.back().layers.push_back(std::move(l));
    } else {
      fail(ErrorCode::FormatError, "unknown CSV row kind '" + f[0] + "'");
    }
  }
  return out;
}

std::string to_table(const std::vector<BenchReport>& reports) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-22s", "variant");
  out += buf;
  for (int k = 1; k <= 9; ++k) {
    std::snprintf(buf, sizeof buf, " %5s", ("C" + std::to_string(k)).c_str());
    out += buf;
  }
  out += "      params   median_ms      p95_ms\n";
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%-22s", r.variant.c_str());
    out += buf;
    for (std::int32_t c : r.channels) {
      std::snprintf(buf, sizeof buf, " %5d", c);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, " %11zu %11.2f %11.2f\n", r.total_params, r.median_ms, r.p95_ms);
    out += buf;
  }
  return out;
}

std::string layer_table(const BenchReport& report) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof buf, "%-16s %5s %6s %10s %10s %10s %9s %9s\n", "layer", "stage", "stride", "params",
                "median_ms", "p95_ms", "in_vox", "out_vox");
  out += buf;
  for (const auto& l : report.layers) {
    std::snprintf(buf, sizeof buf, "%-16s %5d %6d %10zu %10.3f %10.3f %9zu %9zu\n", l.name.c_str(), l.stage, l.stride,
                  l.params, l.median_ms, l.p95_ms, l.in_voxels, l.out_voxels);
    out += buf;
  }
  return out;
}

std::string to_jsonl(const std::vector<BenchReport>& reports, const std::vector<ProfileSamples>* samples) {
  std::string out;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    nlohmann::json j;
    j["variant"] = r.variant;
    j["channels"] = r.channels;
    j["total_params"] = r.total_params;
    j["median_ms"] = r.median_ms;
    j["p95_ms"] = r.p95_ms;
    j["threads"] = r.threads;
    j["seed"] = r.seed;
    j["machine"] = r.machine;
    j["input"] = r.input;
    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t k = 0; k < r.layers.size(); ++k) {
      const auto& l = r.layers[k];
      nlohmann::json lj{{"name", l.name},           {"stage", l.stage},   {"stride", l.stride},
                        {"params", l.params},       {"median_ms", l.median_ms}, {"p95_ms", l.p95_ms},
                        {"in_voxels", l.in_voxels}, {"out_voxels", l.out_voxels}};
      if (samples && i < samples->size() && k < (*samples)[i].layers.size()) lj["samples_ms"] = (*samples)[i].layers[k];
      layers.push_back(std::move(lj));
    }
    j["layers"] = std::move(layers);
    if (samples && i < samples->size()) j["samples_ms"] = (*samples)[i].total;
    out += j.dump() + '\n';
  }
  return out;
}

}  // namespace sfpn

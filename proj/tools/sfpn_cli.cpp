// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//
// sfpn: profiling, benchmarking, ablation and sequence segmentation front end.

#include <omp.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "sfpn/error.hpp"
#include "sfpn/io.hpp"
#include "sfpn/losses.hpp"
#include "sfpn/pipeline.hpp"
#include "sfpn/profiler.hpp"
#include "sfpn/synthetic.hpp"

namespace {

using namespace sfpn;

constexpr int kAssertionFailed = 2;

struct Common {
  std::uint64_t seed = 7;
  int threads = 0;
  int runs = 20;
  int warmup = 2;
  double voxel_size = 0.02;
  std::string out;
  std::string format = "table";
  std::string input;
  std::string variant = "large";
};

bool deterministic_env() {
  const char* v = std::getenv("SFPN_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

void apply_threads(int threads) {
  if (deterministic_env())
    omp_set_num_threads(1);
  else if (threads > 0)
    omp_set_num_threads(threads);
}

void emit(const Common& c, const std::string& text) {
  if (c.out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(c.out, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot write " + c.out);
  f << text;
}

struct BenchInput {
  SparseTensor tensor;
  std::string descriptor;
};

BenchInput load_input(const Common& c) {
  std::vector<Point3> points;
  std::string what;
  if (c.input.empty()) {
    points = synthetic_room(c.seed);
    what = "synthetic-room seed=" + std::to_string(c.seed);
  } else {
    points = load_point_cloud(c.input).points;
    what = c.input;
  }
  const std::size_t n = points.size();
  VoxelizeResult v = voxelize(points, c.voxel_size);
  char buf[128];
  std::snprintf(buf, sizeof buf, " points=%zu voxel=%g voxels=%zu", n, c.voxel_size, v.tensor.size());
  return {std::move(v.tensor), what + buf};
}

ProfileOptions profile_options(const Common& c, const std::string& input) {
  ProfileOptions o;
  o.runs = c.runs;
  o.warmup = c.warmup;
  o.input = input;
  return o;
}

std::string render(const Common& c, const std::vector<BenchReport>& reports, bool layers) {
  if (c.format == "csv") return to_csv(reports);
  if (c.format == "jsonl") return to_jsonl(reports);
  std::string out = to_table(reports);
  if (layers)
    for (const auto& r : reports) out += "\n" + r.variant + "\n" + layer_table(r);
  return out;
}

void add_common(CLI::App* app, Common& c, bool profiling) {
  app->add_option("--seed", c.seed, "Seed for weights and synthetic input");
  app->add_option("--threads", c.threads, "Worker threads (default: all cores)")->check(CLI::NonNegativeNumber);
  app->add_option("--voxel-size", c.voxel_size, "Voxel edge length in meters")->check(CLI::PositiveNumber);
  app->add_option("--out", c.out, "Output path (default: stdout)");
  if (profiling) {
    app->add_option("--runs", c.runs, "Timed runs")->check(CLI::Range(3, 100000));
    app->add_option("--warmup", c.warmup, "Discarded warm-up runs")->check(CLI::NonNegativeNumber);
    app->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"table", "csv", "jsonl"}));
    app->add_option("--input", c.input, "SPC1 point cloud (default: synthetic room)");
  }
}

int cmd_bench(const Common& c) {
  const BenchInput in = load_input(c);
  const auto reports = bench_variants(in.tensor, c.seed, profile_options(c, in.descriptor));
  emit(c, render(c, reports, false));
  if (!(reports[0].median_ms < reports[1].median_ms && reports[1].median_ms < reports[2].median_ms)) {
    std::fprintf(stderr, "latency ordering small < base < large violated: %.3f, %.3f, %.3f ms\n", reports[0].median_ms,
                 reports[1].median_ms, reports[2].median_ms);
    return kAssertionFailed;
  }
  return 0;
}

int cmd_profile(const Common& c) {
  const BenchInput in = load_input(c);
  ProfileOptions o = profile_options(c, in.descriptor);
  o.variant = c.variant;
  ProfileSamples samples;
  const BenchReport r = profile(build_model(SFPNConfig::preset(c.variant), c.seed), in.tensor, o, &samples);
  const std::vector<BenchReport> reports{r};
  if (c.format == "jsonl") {
    const std::vector<ProfileSamples> all{samples};
    emit(c, to_jsonl(reports, &all));
  } else {
    emit(c, render(c, reports, true));
  }
  const DistributionCheck check = check_layer_distribution(r);
  std::fprintf(stderr, "%s\n", check.detail.c_str());
  if (!check.fine_layers_dominate_latency || !check.coarsest_dominates_params) {
    std::fprintf(stderr, "layer distribution check failed: fine-latency=%d coarse-params=%d\n",
                 check.fine_layers_dominate_latency, check.coarsest_dominates_params);
    return kAssertionFailed;
  }
  return 0;
}

int cmd_ablate(const Common& c) {
  const BenchInput in = load_input(c);
  const SFPNConfig base = SFPNConfig::preset(c.variant);
  const auto reports = ablate(in.tensor, c.seed, profile_options(c, in.descriptor), base);
  emit(c, render(c, reports, false));
  int status = 0;
  for (Ablation a : {Ablation::Full, Ablation::NoUpsampledFusion, Ablation::NoPyramid, Ablation::NoSkipConnections}) {
    const SFPNModel m = build_model(base.with_ablation(a), c.seed);
    const auto width = forward(m, in.tensor).features.channels();
    if (width != static_cast<std::size_t>(base.output_dim)) {
      std::fprintf(stderr, "%s output width %zu, expected %d\n", to_string(a), width, base.output_dim);
      status = kAssertionFailed;
    }
  }
  if (!(reports[3].total_params < reports[0].total_params)) {
    std::fprintf(stderr, "no_skip params %zu not below full params %zu\n", reports[3].total_params,
                 reports[0].total_params);
    status = kAssertionFailed;
  }
  return status;
}

int cmd_paramcount(const Common& c, const std::string& variant, bool per_layer) {
  std::ostringstream out;
  for (const char* name : {"small", "base", "large"}) {
    if (variant != "all" && variant != name) continue;
    const SFPNModel m = build_model(SFPNConfig::preset(name), c.seed);
    out << name << " " << parameter_count(m) << "\n";
    if (per_layer)
      for (const LayerInfo& l : m.layers()) out << "  " << l.name << " stride=" << l.stride << " " << l.params << "\n";
  }
  emit(c, out.str());
  return 0;
}

int cmd_losses_eval(const Common& c, const std::string& bundle_path) {
  const auto bytes = read_file(bundle_path);
  const SupervisionBundle bundle = parse_supervision_bundle(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  const LossReport r = evaluate_bundle(bundle);
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "frames %zu\ncls %.17g\nbce %.17g\ndice %.17g\niou %.17g\nsem %.17g\nL1 %.17g\nL2 %.17g\ntotal %.17g\n",
                bundle.frames.size(), r.l1.cls, r.l1.bce, r.l1.dice, r.l1.iou, r.l1.sem, r.l1.total, r.l2, r.total);
  std::string text = buf;
  if (r.degenerate_pairs) text += "warning: single-pair contrastive terms contribute zero\n";
  emit(c, text);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse feature pyramid backbone: profiling, benchmarks and online segmentation"};
  app.require_subcommand(1);
  Common c;

  auto* bench = app.add_subcommand("bench", "Latency and parameters of the small/base/large variants");
  add_common(bench, c, true);

  auto* prof = app.add_subcommand("profile", "Per-layer latency and parameter distribution of one variant");
  add_common(prof, c, true);
  prof->add_option("--variant", c.variant)->check(CLI::IsMember({"small", "base", "large"}));

  auto* abl = app.add_subcommand("ablate", "Compare the full model with its ablations");
  add_common(abl, c, true);
  abl->add_option("--variant", c.variant)->check(CLI::IsMember({"small", "base", "large"}));

  bool per_layer = false;
  auto* pc = app.add_subcommand("paramcount", "Parameter counts per variant");
  add_common(pc, c, false);
  std::string pc_variant = "all";
  pc->add_option("--variant", pc_variant)->check(CLI::IsMember({"all", "small", "base", "large"}));
  pc->add_flag("--layers", per_layer, "Include the per-layer breakdown");

  std::string bundle_path;
  auto* losses = app.add_subcommand("losses", "Loss utilities");
  losses->require_subcommand(1);
  auto* leval = losses->add_subcommand("eval", "Evaluate a supervision bundle (JSON lines)");
  leval->add_option("bundle", bundle_path)->required()->check(CLI::ExistingFile);
  leval->add_option("--out", c.out);

  std::string sequence_dir;
  SegmentOptions seg;
  std::string seg_variant = "small";
  auto* segment = app.add_subcommand("segment", "Online instance segmentation of an RGB-D sequence directory");
  add_common(segment, c, false);
  segment->add_option("sequence", sequence_dir)->required()->check(CLI::ExistingDirectory);
  segment->add_option("--variant", seg_variant)->check(CLI::IsMember({"small", "base", "large"}));
  segment->add_option("--noise", seg.noise, "Pose noise ratio in [0, 1]")->check(CLI::Range(0.0, 1.0));
  segment->add_option("--rounds", seg.rounds, "Query refinement rounds")->check(CLI::NonNegativeNumber);
  segment->add_option("--classes", seg.classes, "Class logits per query")->check(CLI::PositiveNumber);
  segment->add_option("--threshold", seg.merge.threshold, "Merge similarity threshold");
  segment->add_option("--alpha", seg.merge.alpha, "Weight of the new feature when merging")->check(CLI::Range(0.0, 1.0));
  segment->add_option("--model", c.input, "Saved model stem (<stem>.sfpw + <stem>.json)");

  std::string gen_kind;
  int frames = 2, objects = 3;
  std::size_t room_points = 20000;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic room cloud or RGB-D sequence");
  gen->add_option("kind", gen_kind)->required()->check(CLI::IsMember({"room", "sequence"}));
  gen->add_option("--seed", c.seed);
  gen->add_option("--out", c.out)->required();
  gen->add_option("--points", room_points, "Room point count")->check(CLI::PositiveNumber);
  gen->add_option("--frames", frames, "Sequence length")->check(CLI::PositiveNumber);
  gen->add_option("--objects", objects, "Boxes in the sequence scene")->check(CLI::NonNegativeNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    apply_threads(c.threads);
    if (*bench) return cmd_bench(c);
    if (*prof) return cmd_profile(c);
    if (*abl) return cmd_ablate(c);
    if (*pc) return cmd_paramcount(c, pc_variant, per_layer);
    if (*leval) return cmd_losses_eval(c, bundle_path);
    if (*segment) {
      seg.voxel_size = c.voxel_size;
      seg.seed = c.seed;
      const SFPNModel model = c.input.empty() ? build_model(SFPNConfig::preset(seg_variant), c.seed) : load_model(c.input);
      const SequenceResult r = run_sequence(sequence_dir, model, seg, c.out);
      std::printf("frames %zu, instances %zu, points %zu\n", r.timing.size(), r.store.instances.size(),
                  r.store.total_points());
      return 0;
    }
    if (*gen) {
      if (gen_kind == "room") {
        RoomOptions o;
        o.points = room_points;
        save_point_cloud(c.out, PointCloud{synthetic_room(c.seed, o), std::nullopt});
      } else {
        write_synthetic_sequence(c.out, random_sequence(c.seed, frames, objects));
      }
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", std::string(to_string(e.code())).c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

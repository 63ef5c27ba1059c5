// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/sfpn.hpp"

#include <chrono>
#include <cmath>
#include <map>

#include "json.hpp"
#include "sfpn/error.hpp"

namespace sfpn {
namespace {

using Dims = std::vector<std::uint32_t>;

std::string level_name(const char* prefix, int index) { return std::string(prefix) + std::to_string(index); }

ConvNormLayer make_conv_norm(ConvMode mode, std::int32_t k, std::int32_t cin, std::int32_t cout, Rng rng) {
  ConvNormLayer layer;
  layer.conv = make_conv(mode, k, cin, cout, false, rng);
  layer.norm = NormParams::identity(static_cast<std::size_t>(cout));
  return layer;
}


// Decoder level l (1..4) width: C8 at level 1 up to C5 at level 4.
std::int32_t decoder_width(const SFPNConfig& c, int level) { return c.c(9 - level); }

Dims conv_dims(const ConvParams& p) {
  const auto k = static_cast<std::uint32_t>(p.kernel_size);
  return {k, k, k, static_cast<std::uint32_t>(p.in_channels), static_cast<std::uint32_t>(p.out_channels)};
}

// Walks every tensor as (layer, suffix, dims, values). Works for const and
// mutable models; `Vec` resolves to the matching vector constness.
template <class Model, class Fn>
void visit_layers(Model& m, Fn&& fn) {
  auto conv = [&](const std::string& layer, const std::string& suffix, auto& p) {
    fn(layer, suffix + "weight", conv_dims(p), std::span(p.weights));
    if (!p.bias.empty()) fn(layer, suffix + "bias", Dims{static_cast<std::uint32_t>(p.out_channels)}, std::span(p.bias));
  };
  auto norm = [&](const std::string& layer, const std::string& suffix, auto& n) {
    const Dims d{static_cast<std::uint32_t>(n.channels())};
    fn(layer, suffix + "scale", d, std::span(n.scale));
    fn(layer, suffix + "shift", d, std::span(n.shift));
    fn(layer, suffix + "mean", d, std::span(n.mean));
    fn(layer, suffix + "var", d, std::span(n.var));
  };
  auto conv_norm = [&](const std::string& layer, auto& cn) {
    conv(layer, "conv.", cn.conv);
    norm(layer, "norm.", cn.norm);
  };
  auto block = [&](const std::string& layer, auto& b) {
    conv(layer, "conv1.", b.conv1);
    norm(layer, "norm1.", b.norm1);
    conv(layer, "conv2.", b.conv2);
    norm(layer, "norm2.", b.norm2);
    if (b.projection) conv(layer, "proj.", *b.projection);
  };
  auto linear = [&](const std::string& layer, const std::string& suffix, auto& l) {
    fn(layer, suffix + "weight", Dims{static_cast<std::uint32_t>(l.in), static_cast<std::uint32_t>(l.out)},
       std::span(l.weight));
    fn(layer, suffix + "bias", Dims{static_cast<std::uint32_t>(l.out)}, std::span(l.bias));
  };

  conv_norm("stem", m.stem);
  for (int s = 1; s <= 4; ++s) {
    auto& stage = m.encoder[static_cast<std::size_t>(s - 1)];
    const std::string base = level_name("enc", s);
    conv_norm(base + ".down", stage.down);
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) block(base + ".block" + std::to_string(b), stage.blocks[b]);
  }
  for (int l = 4; l >= 1; --l) {
    auto& level = m.decoder[static_cast<std::size_t>(l - 1)];
    const std::string base = level_name("dec", l);
    if (level.up) conv_norm(base + ".up", *level.up);
    for (std::size_t b = 0; b < level.blocks.size(); ++b) block(base + ".block" + std::to_string(b), level.blocks[b]);
  }
  for (int l = 1; l <= 4; ++l) {
    auto& branch = m.fusion[static_cast<std::size_t>(l - 1)];
    if (!branch) continue;
    for (std::size_t k = 0; k < branch->steps.size(); ++k) {
      conv_norm(level_name("fuse", l) + ".step" + std::to_string(k), branch->steps[k]);
    }
  }
  linear("head", "fc1.", m.head.fc1);
  linear("head", "fc2.", m.head.fc2);
}

FeatureMatrix concat_columns(const std::vector<const FeatureMatrix*>& parts) {
  const std::size_t rows = parts.front()->rows();
  std::size_t cols = 0;
  for (const FeatureMatrix* p : parts) cols += p->cols();
  FeatureMatrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    auto dst = out.row(i).begin();
    for (const FeatureMatrix* p : parts) {
      auto src = p->row(i);
      dst = std::copy(src.begin(), src.end(), dst);
    }
  }
  return out;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

Linear make_linear(std::int32_t in, std::int32_t out, Rng rng) {
  Linear l;
  l.in = in;
  l.out = out;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight.resize(static_cast<std::size_t>(in) * out);
  for (float& w : l.weight) w = static_cast<float>(rng.uniform(-bound, bound));
  l.bias.resize(static_cast<std::size_t>(out));
  for (float& b : l.bias) b = static_cast<float>(rng.uniform(-bound, bound));
  return l;
}

// ---------------------------------------------------------------------------
// Config

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::NoUpsampledFusion: return "no_upsampled_fusion";
    case Ablation::NoPyramid: return "no_pyramid";
    case Ablation::NoSkipConnections: return "no_skip_connections";
  }
  return "unknown";
}

Ablation parse_ablation(std::string_view name) {
  if (name == "full") return Ablation::Full;
  if (name == "no_upsampled_fusion") return Ablation::NoUpsampledFusion;
  if (name == "no_pyramid") return Ablation::NoPyramid;
  if (name == "no_skip_connections" || name == "no_skip") return Ablation::NoSkipConnections;
  fail(ErrorCode::ConfigError, "unknown ablation '" + std::string(name) + "'");
}

SFPNConfig SFPNConfig::small() {
  SFPNConfig c;
  c.channels = {8, 24, 48, 96, 96, 48, 24, 24, 24};
  return c;
}

SFPNConfig SFPNConfig::base() {
  SFPNConfig c;
  c.channels = {12, 32, 64, 128, 128, 96, 36, 24, 24};
  return c;
}

SFPNConfig SFPNConfig::large() {
  SFPNConfig c;
  c.channels = {16, 36, 72, 156, 156, 128, 64, 24, 24};
  return c;
}

SFPNConfig SFPNConfig::preset(std::string_view name) {
  if (name == "small") return small();
  if (name == "base") return base();
  if (name == "large") return large();
  fail(ErrorCode::ConfigError, "unknown variant '" + std::string(name) + "' (expected small|base|large)");
}

Ablation SFPNConfig::ablation() const {
  const bool f = enable_upsampled_fusion, p = enable_pyramid, s = enable_skip_connections;
  if (f && p && s) return Ablation::Full;
  if (!f && p && s) return Ablation::NoUpsampledFusion;
  if (!f && !p && s) return Ablation::NoPyramid;
  if (f && p && !s) return Ablation::NoSkipConnections;
  fail(ErrorCode::ConfigError, "unsupported ablation flag combination");
}

SFPNConfig SFPNConfig::with_ablation(Ablation a) const {
  SFPNConfig c = *this;
  c.enable_upsampled_fusion = a == Ablation::Full || a == Ablation::NoSkipConnections;
  c.enable_pyramid = a != Ablation::NoPyramid;
  c.enable_skip_connections = a != Ablation::NoSkipConnections;
  return c;
}

void SFPNConfig::validate() const {
  for (std::int32_t v : channels) {
    if (v < 1) fail(ErrorCode::ConfigError, "channel widths must be >= 1");
  }
  if (blocks_per_stage < 1) fail(ErrorCode::ConfigError, "blocks_per_stage must be >= 1");
  if (output_dim < 1) fail(ErrorCode::ConfigError, "output_dim must be >= 1");
  if (input_width < 1) fail(ErrorCode::ConfigError, "input_width must be >= 1");
  (void)ablation();
}

// ---------------------------------------------------------------------------
// Build

SFPNModel build_model(const SFPNConfig& config, std::uint64_t seed) {
  config.validate();
  const Ablation ablation = config.ablation();
  auto rng = [seed](const std::string& name) { return Rng::derive(seed, name); };

  SFPNModel m;
  m.config = config;
  m.seed = seed;
  m.stem = make_conv_norm(ConvMode::Submanifold, 3, config.input_width, config.c(1), rng("stem"));

  for (int s = 1; s <= 4; ++s) {
    auto& stage = m.encoder[static_cast<std::size_t>(s - 1)];
    const std::string base = level_name("enc", s);
    const std::int32_t cin = s == 1 ? config.c(1) : config.c(s - 1);
    stage.down = make_conv_norm(ConvMode::Strided, 2, cin, config.c(s), rng(base + ".down"));
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      Rng r = rng(base + ".block" + std::to_string(b));
      stage.blocks.push_back(make_residual_block(config.c(s), config.c(s), r));
    }
  }

  const bool pyramid = ablation != Ablation::NoPyramid;
  for (int l = 4; l >= 1; --l) {
    auto& level = m.decoder[static_cast<std::size_t>(l - 1)];
    const std::string base = level_name("dec", l);
    const std::int32_t width = decoder_width(config, l);
    const bool refine = pyramid || l == 1;
    std::int32_t in_width = config.c(4);
    if (l < 4) {
      const std::int32_t from = (pyramid || l < 3) ? decoder_width(config, l + 1) : config.c(4);
      level.up = make_conv_norm(ConvMode::Transposed, 2, from, width, rng(base + ".up"));
      level.uses_skip = config.enable_skip_connections && refine;
      in_width = width + (level.uses_skip ? config.c(l) : 0);
    }
    if (!refine) continue;
    for (int b = 0; b < config.blocks_per_stage; ++b) {
      Rng r = rng(base + ".block" + std::to_string(b));
      level.blocks.push_back(make_residual_block(b == 0 ? in_width : width, width, r));
    }
  }

  const std::int32_t c9 = config.c(9);
  const int branches = config.enable_upsampled_fusion ? 4 : 1;
  for (int l = 1; l <= branches; ++l) {
    FusionBranch branch;
    for (int k = 0; k < l; ++k) {
      const std::int32_t cin = k == 0 ? decoder_width(config, l) : c9;
      branch.steps.push_back(make_conv_norm(ConvMode::Transposed, 2, cin, c9,
                                            rng(level_name("fuse", l) + ".step" + std::to_string(k))));
    }
    m.fusion[static_cast<std::size_t>(l - 1)] = std::move(branch);
  }

  m.head.fc1 = make_linear(branches * c9, 2 * c9, rng("head.fc1"));
  m.head.fc2 = make_linear(2 * c9, config.output_dim, rng("head.fc2"));
  return m;
}

void visit_parameters(const SFPNModel& model,
                      const std::function<void(const std::string&, const Dims&, std::span<const float>)>& fn) {
  visit_layers(model, [&](const std::string& layer, const std::string& suffix, const Dims& dims,
                          std::span<const float> values) { fn(layer + "." + suffix, dims, values); });
}

void visit_parameters(SFPNModel& model,
                      const std::function<void(const std::string&, const Dims&, std::span<float>)>& fn) {
  visit_layers(model, [&](const std::string& layer, const std::string& suffix, const Dims& dims,
                          std::span<float> values) { fn(layer + "." + suffix, dims, values); });
}

std::size_t parameter_count(const SFPNModel& model) {
  std::size_t n = 0;
  visit_parameters(model, [&](const std::string&, const Dims&, std::span<const float> v) { n += v.size(); });
  return n;
}

std::vector<LayerInfo> SFPNModel::layers() const {
  std::vector<LayerInfo> out;
  auto add = [&](std::string name, std::int32_t stage, std::int32_t stride) {
    out.push_back({std::move(name), stage, stride, 0});
  };
  add("stem", 0, 1);
  for (int s = 1; s <= 4; ++s) {
    const std::string base = level_name("enc", s);
    add(base + ".down", s, 1 << s);
    for (std::size_t b = 0; b < encoder[static_cast<std::size_t>(s - 1)].blocks.size(); ++b) {
      add(base + ".block" + std::to_string(b), s, 1 << s);
    }
  }
  for (int l = 4; l >= 1; --l) {
    const auto& level = decoder[static_cast<std::size_t>(l - 1)];
    const std::string base = level_name("dec", l);
    if (level.up) add(base + ".up", l, 1 << l);
    for (std::size_t b = 0; b < level.blocks.size(); ++b) add(base + ".block" + std::to_string(b), l, 1 << l);
  }
  for (int l = 1; l <= 4; ++l) {
    const auto& branch = fusion[static_cast<std::size_t>(l - 1)];
    if (!branch) continue;
    for (std::size_t k = 0; k < branch->steps.size(); ++k) {
      add(level_name("fuse", l) + ".step" + std::to_string(k), l, 1 << (l - 1 - static_cast<int>(k)));
    }
  }
  add("head", 0, 1);

  std::map<std::string, std::size_t> counts;
  visit_layers(*this, [&](const std::string& layer, const std::string&, const Dims&, std::span<const float> v) {
    counts[layer] += v.size();
  });
  for (LayerInfo& info : out) info.params = counts[info.name];
  return out;
}

// ---------------------------------------------------------------------------
// Forward

FeatureMatrix linear_forward(const FeatureMatrix& x, const Linear& layer, bool relu) {
  if (x.cols() != static_cast<std::size_t>(layer.in)) fail(ErrorCode::ShapeError, "linear layer input width mismatch");
  const std::size_t n = x.rows();
  const std::size_t cin = static_cast<std::size_t>(layer.in);
  const std::size_t cout = static_cast<std::size_t>(layer.out);
  FeatureMatrix y(n, cout);
  const float* xs = x.data().data();
  const float* w = layer.weight.data();
  const float* b = layer.bias.data();
  float* ys = y.data().data();
#pragma omp parallel for schedule(static) if (n * cout > 16384)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
    const float* xi = xs + i * cin;
    float* __restrict yi = ys + i * cout;
    for (std::size_t c = 0; c < cout; ++c) yi[c] = b[c];
    for (std::size_t a = 0; a < cin; ++a) {
      const float v = xi[a];
      if (v == 0.0f) continue;
      const float* __restrict wa = w + a * cout;
      for (std::size_t c = 0; c < cout; ++c) yi[c] += v * wa[c];
    }
    if (relu)
      for (std::size_t c = 0; c < cout; ++c) yi[c] = yi[c] > 0.0f ? yi[c] : 0.0f;
  }
  return y;
}

ForwardResult forward(const SFPNModel& model, const SparseTensor& input, const ForwardOptions& options) {
  const SFPNConfig& cfg = model.config;
  if (input.stride() != 1) fail(ErrorCode::StrideViolation, "SFPN input must be at stride 1");
  if (input.channels() != static_cast<std::size_t>(cfg.input_width)) {
    fail(ErrorCode::ShapeError, "input width " + std::to_string(input.channels()) + " != model input width " +
                                    std::to_string(cfg.input_width));
  }
  if (input.size() == 0) fail(ErrorCode::EmptyCloud, "SFPN input has no voxels");

  RulebookCache cache;
  auto timed = [&](const std::string& name, std::size_t in_voxels, auto&& fn) -> SparseTensor {
    if (!options.observer) return fn();
    Stopwatch watch;
    SparseTensor out = fn();
    options.observer->on_layer(name, watch.ms(), in_voxels, out.size());
    return out;
  };
  auto conv_norm = [&](const SparseTensor& x, const ConvNormLayer& layer,
                       const std::shared_ptr<const CoordSet>& target) {
    const ConvMode mode = layer.conv.mode;
    const Rulebook& rb = cache.get(x.coord_set(), mode, layer.conv.kernel_size,
                                   mode == ConvMode::Transposed ? target : nullptr);
    return norm_relu_forward(conv_forward(x, layer.conv, rb), layer.norm);
  };
  auto run_blocks = [&](SparseTensor x, const std::vector<ResidualBlockParams>& blocks, const std::string& base,
                        const SparseTensor* skip) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      x = timed(base + ".block" + std::to_string(b), x.size(), [&] {
        SparseTensor in = (b == 0 && skip) ? concat_features(x, *skip) : x;
        const Rulebook& rb = cache.get(in.coord_set(), ConvMode::Submanifold, blocks[b].conv1.kernel_size);
        return residual_block_forward(in, blocks[b], &rb);
      });
    }
    return x;
  };

  ForwardResult result{input, {}, {}};
  std::vector<SparseTensor>& enc = result.encoder;
  enc.reserve(5);
  enc.push_back(timed("stem", input.size(), [&] { return conv_norm(input, model.stem, nullptr); }));

  for (int s = 1; s <= 4; ++s) {
    const auto& stage = model.encoder[static_cast<std::size_t>(s - 1)];
    const std::string base = level_name("enc", s);
    const SparseTensor& prev = enc.back();
    SparseTensor x = timed(base + ".down", prev.size(), [&] { return conv_norm(prev, stage.down, nullptr); });
    enc.push_back(run_blocks(std::move(x), stage.blocks, base, nullptr));
  }

  std::optional<SparseTensor> current = enc[4];
  for (int l = 4; l >= 1; --l) {
    const auto& level = model.decoder[static_cast<std::size_t>(l - 1)];
    const std::string base = level_name("dec", l);
    SparseTensor x = *current;
    if (level.up) {
      const auto& target = enc[static_cast<std::size_t>(l)].coord_set();
      x = timed(base + ".up", x.size(), [&] { return conv_norm(*current, *level.up, target); });
    }
    const bool has_stage = level.up.has_value() || !level.blocks.empty();
    x = run_blocks(std::move(x), level.blocks, base, level.uses_skip ? &enc[static_cast<std::size_t>(l)] : nullptr);
    if (has_stage) result.pyramid.levels[static_cast<std::size_t>(l - 1)] = x;
    current = std::move(x);
  }

  std::vector<SparseTensor> fused;
  std::vector<int> fused_levels;
  for (int l = 1; l <= 4; ++l) {
    const auto& branch = model.fusion[static_cast<std::size_t>(l - 1)];
    if (!branch) continue;
    const auto& source = result.pyramid.levels[static_cast<std::size_t>(l - 1)];
    if (!source) fail(ErrorCode::ConfigError, "fusion branch without a decoder level");
    SparseTensor y = *source;
    for (std::size_t k = 0; k < branch->steps.size(); ++k) {
      const auto& target = enc[static_cast<std::size_t>(l - 1) - k].coord_set();
      y = timed(level_name("fuse", l) + ".step" + std::to_string(k), y.size(),
                [&] { return conv_norm(y, branch->steps[k], target); });
    }
    fused.push_back(std::move(y));
    fused_levels.push_back(l);
  }

  result.features = timed("head", input.size(), [&] {
    std::vector<FeatureMatrix> zeroed;
    zeroed.reserve(fused.size());
    std::vector<const FeatureMatrix*> parts;
    for (std::size_t i = 0; i < fused.size(); ++i) {
      if (options.zero_fusion_level[static_cast<std::size_t>(fused_levels[i] - 1)]) {
        zeroed.emplace_back(fused[i].size(), fused[i].channels(), 0.0f);
        parts.push_back(&zeroed.back());
      } else {
        parts.push_back(&fused[i].features());
      }
    }
    FeatureMatrix cat = parts.size() == 1 ? *parts.front() : concat_columns(parts);
    FeatureMatrix hidden = linear_forward(cat, model.head.fc1, true);
    return enc[0].with_features(linear_forward(hidden, model.head.fc2, false));
  });
  return result;
}

SparseTensor forward_ablation(const SFPNModel& model, const SparseTensor& input) {
  (void)model.config.ablation();
  return forward(model, input).features;
}

// ---------------------------------------------------------------------------
// Persistence

WeightFile to_weight_file(const SFPNModel& model) {
  WeightFile file;
  visit_parameters(model, [&](const std::string& name, const Dims& dims, std::span<const float> v) {
    file.records.push_back({name, dims, std::vector<float>(v.begin(), v.end())});
  });
  return file;
}

SFPNModel from_weight_file(const SFPNConfig& config, std::uint64_t seed, const WeightFile& file) {
  SFPNModel model = build_model(config, seed);
  std::size_t used = 0;
  visit_parameters(model, [&](const std::string& name, const Dims& dims, std::span<float> v) {
    const WeightRecord* rec = file.find(name);
    if (!rec) fail(ErrorCode::FormatError, "weight file lacks tensor " + name);
    if (rec->dims != dims) fail(ErrorCode::ShapeError, "tensor " + name + " has unexpected dims");
    std::copy(rec->data.begin(), rec->data.end(), v.begin());
    ++used;
  });
  if (used != file.records.size()) fail(ErrorCode::FormatError, "weight file has tensors the model does not use");
  return model;
}

std::string config_to_json(const SFPNConfig& c, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["channels"] = c.channels;
  j["enable_upsampled_fusion"] = c.enable_upsampled_fusion;
  j["enable_pyramid"] = c.enable_pyramid;
  j["enable_skip_connections"] = c.enable_skip_connections;
  j["blocks_per_stage"] = c.blocks_per_stage;
  j["output_dim"] = c.output_dim;
  j["input_width"] = c.input_width;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

std::pair<SFPNConfig, std::uint64_t> config_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::json::parse(text);
    SFPNConfig c;
    const auto channels = j.at("channels").get<std::vector<std::int32_t>>();
    if (channels.size() != 9) fail(ErrorCode::ConfigError, "channels must have exactly 9 entries");
    std::copy(channels.begin(), channels.end(), c.channels.begin());
    c.enable_upsampled_fusion = j.value("enable_upsampled_fusion", true);
    c.enable_pyramid = j.value("enable_pyramid", true);
    c.enable_skip_connections = j.value("enable_skip_connections", true);
    c.blocks_per_stage = j.value("blocks_per_stage", 2);
    c.output_dim = j.value("output_dim", 96);
    c.input_width = j.value("input_width", 1);
    c.validate();
    return {c, j.value("seed", std::uint64_t{0})};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("bad model config: ") + e.what());
  }
}

void save_model(const SFPNModel& model, const std::filesystem::path& stem) {
  save_weights(std::filesystem::path(stem).concat(".sfpw"), to_weight_file(model));
  const std::string json = config_to_json(model.config, model.seed);
  write_file(std::filesystem::path(stem).concat(".json"),
             std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
}

SFPNModel load_model(const std::filesystem::path& stem) {
  const auto bytes = read_file(std::filesystem::path(stem).concat(".json"));
  const auto [config, seed] = config_from_json(std::string(bytes.begin(), bytes.end()));
  return from_weight_file(config, seed, load_weights(std::filesystem::path(stem).concat(".sfpw")));
}

}  // namespace sfpn

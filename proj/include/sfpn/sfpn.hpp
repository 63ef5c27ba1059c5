// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sfpn/io.hpp"
#include "sfpn/sparse_conv.hpp"

namespace sfpn {

inline constexpr int kPyramidLevels = 4;

enum class Ablation { Full, NoUpsampledFusion, NoPyramid, NoSkipConnections };

const char* to_string(Ablation a);
Ablation parse_ablation(std::string_view name);

/// Channel vector C1..C9: C1..C4 encoder stages, C5..C8 decoder levels from
/// coarsest to finest, C9 the width of every fusion branch.
struct SFPNConfig {
  std::array<std::int32_t, 9> channels{};
  bool enable_upsampled_fusion = true;
  bool enable_pyramid = true;
  bool enable_skip_connections = true;
  std::int32_t blocks_per_stage = 2;
  std::int32_t output_dim = 96;
  std::int32_t input_width = 1;

  static SFPNConfig small();
  static SFPNConfig base();
  static SFPNConfig large();
  /// "small" | "base" | "large"; throws ConfigError otherwise.
  static SFPNConfig preset(std::string_view name);

  std::int32_t c(int k) const { return channels[static_cast<std::size_t>(k - 1)]; }
  /// Throws ConfigError on an invalid channel vector or flag combination.
  void validate() const;
  Ablation ablation() const;
  SFPNConfig with_ablation(Ablation a) const;

  bool operator==(const SFPNConfig&) const = default;
};

struct ConvNormLayer {
  ConvParams conv;
  NormParams norm;
};

struct EncoderStage {
  ConvNormLayer down;  // k=2, stride 2
  std::vector<ResidualBlockParams> blocks;
};

/// Decoder level l (1..4) lives at stride 2^l. Level 4 has no upsampler; the
/// others upsample from level l+1 onto the encoder's stride-2^l coordinates.
struct DecoderLevel {
  std::optional<ConvNormLayer> up;
  bool uses_skip = false;
  std::vector<ResidualBlockParams> blocks;
};

/// l transposed steps carrying decoder level l down to stride 1.
struct FusionBranch {
  std::vector<ConvNormLayer> steps;
};

struct Linear {
  std::int32_t in = 0;
  std::int32_t out = 0;
  std::vector<float> weight;  // [in][out]
  std::vector<float> bias;    // [out]
};

struct HeadMLP {
  Linear fc1;
  Linear fc2;
};

struct LayerInfo {
  std::string name;
  std::int32_t stage = 0;   // 0 stem/head, 1..4 encoder stage or pyramid level
  std::int32_t stride = 1;  // output stride
  std::size_t params = 0;
};

class SFPNModel {
 public:
  SFPNConfig config;
  std::uint64_t seed = 0;
  ConvNormLayer stem;
  std::array<EncoderStage, 4> encoder;
  std::array<DecoderLevel, 4> decoder;  // index l-1
  std::array<std::optional<FusionBranch>, 4> fusion;  // index l-1
  HeadMLP head;

  /// Timed units in execution order; parameter counts sum to parameter_count().
  std::vector<LayerInfo> layers() const;
};

/// Visits every parameter tensor as (name, dims, values) in a fixed order.
void visit_parameters(const SFPNModel& model,
                      const std::function<void(const std::string&, const std::vector<std::uint32_t>&,
                                               std::span<const float>)>& fn);
void visit_parameters(SFPNModel& model, const std::function<void(const std::string&, const std::vector<std::uint32_t>&,
                                                                  std::span<float>)>& fn);

/// Deterministic for a given (config, seed). Layer weights are seeded by layer
/// name, so variants sharing a layer name share its initial weights.
SFPNModel build_model(const SFPNConfig& config, std::uint64_t seed);

std::size_t parameter_count(const SFPNModel& model);

struct FeaturePyramid {
  std::array<std::optional<SparseTensor>, 4> levels;  // index l-1, stride 2^l
};

struct ForwardResult {
  SparseTensor features;               // F_p at stride 1, output_dim wide
  FeaturePyramid pyramid;
  std::vector<SparseTensor> encoder;   // [0] stem (stride 1), [s] stage s (stride 2^s)
};

/// Receives one callback per timed layer.
class LayerObserver {
 public:
  virtual ~LayerObserver() = default;
  virtual void on_layer(std::string_view name, double ms, std::size_t in_voxels, std::size_t out_voxels) = 0;
};

struct ForwardOptions {
  LayerObserver* observer = nullptr;
  /// Zero the fused features of these levels before the head (index l-1).
  std::array<bool, 4> zero_fusion_level{false, false, false, false};
};

ForwardResult forward(const SFPNModel& model, const SparseTensor& input, const ForwardOptions& options = {});

/// Forward for a model built with one of the named ablation flag sets.
SparseTensor forward_ablation(const SFPNModel& model, const SparseTensor& input);

/// Weights and bias uniform in +-1/sqrt(in).
Linear make_linear(std::int32_t in, std::int32_t out, Rng rng);

FeatureMatrix linear_forward(const FeatureMatrix& x, const Linear& layer, bool relu);

WeightFile to_weight_file(const SFPNModel& model);
/// Rebuilds the layer graph from `config` and fills it from `file`; every
/// tensor must be present with matching dims.
SFPNModel from_weight_file(const SFPNConfig& config, std::uint64_t seed, const WeightFile& file);

std::string config_to_json(const SFPNConfig& config, std::uint64_t seed);
std::pair<SFPNConfig, std::uint64_t> config_from_json(std::string_view text);

/// Writes `<stem>.sfpw` and `<stem>.json`.
void save_model(const SFPNModel& model, const std::filesystem::path& stem);
SFPNModel load_model(const std::filesystem::path& stem);

}  // namespace sfpn

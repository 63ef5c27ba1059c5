// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "sfpn/rng.hpp"
#include "sfpn/sparse_tensor.hpp"

namespace sfpn {

enum class ConvMode : std::uint8_t { Submanifold, Strided, Transposed };

const char* to_string(ConvMode mode);

/// Kernel offsets in units of the finer lattice, ordered x-major then y then
/// z. Odd sizes are centered; even sizes start at 0 (k=2 covers {0,1}^3).
std::vector<VoxelCoord> kernel_offsets(std::int32_t kernel_size);

struct RulePair {
  std::int32_t in_row;
  std::int32_t out_row;

  bool operator==(const RulePair&) const = default;
};

/// Kernel map. `pairs[o]` lists every (input row, output row) connected by
/// kernel offset o. The output-major view (`row_ptr`/`entries`) holds the
/// same pairs grouped by output row in ascending offset order; conv_forward
/// walks it so each output row accumulates in a fixed order.
struct Rulebook {
  struct Entry {
    std::int32_t offset;
    std::int32_t in_row;
  };

  ConvMode mode = ConvMode::Submanifold;
  std::int32_t kernel_size = 3;
  std::int32_t in_stride = 1;
  std::int32_t out_stride = 1;
  std::shared_ptr<const CoordSet> in_coords;
  std::shared_ptr<const CoordSet> out_coords;
  std::vector<std::vector<RulePair>> pairs;
  std::vector<std::int32_t> row_ptr;
  std::vector<Entry> entries;

  std::size_t pair_count() const noexcept { return entries.size(); }
};

/// Builds the kernel map. Submanifold: out = in coordinates. Strided: out =
/// downsample_coords(in). Transposed: `out_coords` (the finer target
/// lattice) is required and the map is the adjoint of the strided map from
/// `out_coords` onto `in`.
Rulebook build_rulebook(const std::shared_ptr<const CoordSet>& in, ConvMode mode, std::int32_t kernel_size,
                        std::shared_ptr<const CoordSet> out_coords = nullptr);

inline Rulebook build_rulebook(const SparseTensor& in, ConvMode mode, std::int32_t kernel_size,
                               std::shared_ptr<const CoordSet> out_coords = nullptr) {
  return build_rulebook(in.coord_set(), mode, kernel_size, std::move(out_coords));
}

struct ConvParams {
  ConvMode mode = ConvMode::Submanifold;
  std::int32_t kernel_size = 3;
  std::int32_t in_channels = 0;
  std::int32_t out_channels = 0;
  std::vector<float> weights;  // [offset][c_in][c_out]
  std::vector<float> bias;     // empty or c_out

  std::size_t volume() const;
  std::size_t parameter_count() const { return weights.size() + bias.size(); }
  std::span<const float> offset_weights(std::size_t o) const {
    const std::size_t block = static_cast<std::size_t>(in_channels) * out_channels;
    return {weights.data() + o * block, block};
  }
  /// Throws ShapeError if buffers disagree with the declared shape.
  void check() const;
};

/// Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], fan_in = K^3 * C_in.
ConvParams make_conv(ConvMode mode, std::int32_t kernel_size, std::int32_t in_channels, std::int32_t out_channels,
                     bool with_bias, Rng& rng);

/// Swaps C_in/C_out, transposes every offset block and flips
/// Strided <-> Transposed. Bias is dropped.
ConvParams transpose_params(const ConvParams& p);

struct NormParams {
  std::vector<float> scale;
  std::vector<float> shift;
  std::vector<float> mean;
  std::vector<float> var;
  float eps = 1e-5f;

  std::size_t channels() const { return scale.size(); }
  std::size_t parameter_count() const { return 4 * scale.size(); }
  static NormParams identity(std::size_t channels);
  void check() const;
};

struct ResidualBlockParams {
  ConvParams conv1;
  NormParams norm1;
  ConvParams conv2;
  NormParams norm2;
  std::optional<ConvParams> projection;  // 1x1x1, required iff C_in != C_out

  std::int32_t in_channels() const { return conv1.in_channels; }
  std::int32_t out_channels() const { return conv2.out_channels; }
  std::size_t parameter_count() const;
};

ResidualBlockParams make_residual_block(std::int32_t in_channels, std::int32_t out_channels, Rng& rng);

SparseTensor conv_forward(const SparseTensor& in, const ConvParams& params, const Rulebook& rulebook);

/// y = scale * (x - mean) / sqrt(var + eps) + shift, optionally followed by ReLU.
SparseTensor norm_forward(const SparseTensor& t, const NormParams& p, bool relu);

inline SparseTensor norm_relu_forward(const SparseTensor& t, const NormParams& p) { return norm_forward(t, p, true); }

SparseTensor relu_forward(const SparseTensor& t);

/// out = ReLU(Norm2(Conv2(ReLU(Norm1(Conv1(t))))) + shortcut(t)).
/// `rulebook` must be the k=3 submanifold map of t's coordinates; it is built
/// on demand when null.
SparseTensor residual_block_forward(const SparseTensor& t, const ResidualBlockParams& p,
                                    const Rulebook* rulebook = nullptr);

/// Memoizes rulebooks for coordinate sets that stay alive for one forward
/// pass. Not thread-safe; use one cache per pass.
class RulebookCache {
 public:
  const Rulebook& get(const std::shared_ptr<const CoordSet>& in, ConvMode mode, std::int32_t kernel_size,
                      const std::shared_ptr<const CoordSet>& out = nullptr);

 private:
  using Key = std::tuple<const CoordSet*, ConvMode, std::int32_t, const CoordSet*>;
  std::map<Key, std::unique_ptr<Rulebook>> cache_;
};

}  // namespace sfpn

// Copyright Contributors to the sfpn project
// SPDX-License-Identifier: Apache-2.0
//

#include "sfpn/sparse_conv.hpp"

#include <cmath>
#include <string>

#include "sfpn/error.hpp"

namespace sfpn {
namespace {

std::int32_t offset_low(std::int32_t k) { return -((k - 1) / 2); }

void check_kernel(ConvMode mode, std::int32_t k) {
  if (k < 1) fail(ErrorCode::InvalidKernel, "kernel size must be positive");
  if (mode == ConvMode::Submanifold && k % 2 == 0) {
    fail(ErrorCode::InvalidKernel, "submanifold kernel size must be odd, got " + std::to_string(k));
  }
}

bool on_lattice(const VoxelCoord& c, std::int32_t s) { return c.x % s == 0 && c.y % s == 0 && c.z % s == 0; }

VoxelCoord add_scaled(VoxelCoord c, VoxelCoord o, std::int32_t s) {
  return {c.x + o.x * s, c.y + o.y * s, c.z + o.z * s};
}

FeatureMatrix apply_norm(const FeatureMatrix& x, const NormParams& p, bool relu) {
  const std::size_t n = x.rows();
  const std::size_t c = x.cols();
  std::vector<float> a(c), b(c);
  for (std::size_t k = 0; k < c; ++k) {
    a[k] = p.scale[k] / std::sqrt(p.var[k] + p.eps);
    b[k] = p.shift[k] - a[k] * p.mean[k];
  }
  FeatureMatrix y(n, c);
  const float* src = x.data().data();
  float* dst = y.data().data();
#pragma omp parallel for schedule(static) if (n * c > 65536)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
    const float* xi = src + i * c;
    float* yi = dst + i * c;
    for (std::size_t k = 0; k < c; ++k) {
      const float v = a[k] * xi[k] + b[k];
      yi[k] = relu ? (v > 0.0f ? v : 0.0f) : v;
    }
  }
  return y;
}

}  // namespace

const char* to_string(ConvMode mode) {
  switch (mode) {
    case ConvMode::Submanifold: return "submanifold";
    case ConvMode::Strided: return "strided";
    case ConvMode::Transposed: return "transposed";
  }
  return "unknown";
}

std::vector<VoxelCoord> kernel_offsets(std::int32_t k) {
  std::vector<VoxelCoord> out;
  out.reserve(static_cast<std::size_t>(k) * k * k);
  const std::int32_t lo = offset_low(k);
  for (std::int32_t x = lo; x < lo + k; ++x)
    for (std::int32_t y = lo; y < lo + k; ++y)
      for (std::int32_t z = lo; z < lo + k; ++z) out.push_back({x, y, z});
  return out;
}

Rulebook build_rulebook(const std::shared_ptr<const CoordSet>& in, ConvMode mode, std::int32_t kernel_size,
                        std::shared_ptr<const CoordSet> out_coords) {
  check_kernel(mode, kernel_size);
  if (!in) fail(ErrorCode::ShapeError, "null input coordinates");

  Rulebook rb;
  rb.mode = mode;
  rb.kernel_size = kernel_size;
  rb.in_stride = in->stride();
  rb.in_coords = in;

  // Spacing of kernel taps on the finer of the two lattices.
  std::int32_t tap = in->stride();
  switch (mode) {
    case ConvMode::Submanifold:
      rb.out_stride = in->stride();
      rb.out_coords = in;
      break;
    case ConvMode::Strided:
      rb.out_stride = in->stride() * 2;
      if (out_coords) {
        if (out_coords->stride() != rb.out_stride) fail(ErrorCode::StrideViolation, "strided target stride mismatch");
        rb.out_coords = std::move(out_coords);
      } else {
        rb.out_coords = CoordSet::create(downsample_coords(in->coords(), in->stride(), 2), rb.out_stride);
      }
      break;
    case ConvMode::Transposed:
      if (!out_coords) fail(ErrorCode::MissingTargetCoords, "transposed convolution needs target coordinates");
      if (in->stride() < 2 || out_coords->stride() * 2 != in->stride()) {
        fail(ErrorCode::StrideViolation, "transposed target must live on the lattice at half the input stride");
      }
      rb.out_stride = out_coords->stride();
      rb.out_coords = std::move(out_coords);
      tap = rb.out_stride;
      break;
  }

  const std::vector<VoxelCoord> offsets = kernel_offsets(kernel_size);
  const CoordSet& out = *rb.out_coords;
  const CoordIndex& index = in->index();
  rb.pairs.assign(offsets.size(), {});
  rb.row_ptr.assign(out.size() + 1, 0);
  rb.entries.reserve(out.size() * (mode == ConvMode::Submanifold ? 8 : 1));

  for (std::size_t j = 0; j < out.size(); ++j) {
    const VoxelCoord q = out[j];
    for (std::size_t o = 0; o < offsets.size(); ++o) {
      std::int32_t i = -1;
      if (mode == ConvMode::Transposed) {
        const VoxelCoord src = add_scaled(q, offsets[o], -tap);
        if (on_lattice(src, rb.in_stride)) i = index.lookup(src);
      } else {
        i = index.lookup(add_scaled(q, offsets[o], tap));
      }
      if (i < 0) continue;
      rb.pairs[o].push_back({i, static_cast<std::int32_t>(j)});
      rb.entries.push_back({static_cast<std::int32_t>(o), i});
    }
    rb.row_ptr[j + 1] = static_cast<std::int32_t>(rb.entries.size());
  }
  return rb;
}

// ---------------------------------------------------------------------------
// Parameters

std::size_t ConvParams::volume() const {
  return static_cast<std::size_t>(kernel_size) * kernel_size * kernel_size;
}

void ConvParams::check() const {
  check_kernel(mode, kernel_size);
  if (in_channels < 1 || out_channels < 1) fail(ErrorCode::ShapeError, "channel counts must be positive");
  if (weights.size() != volume() * static_cast<std::size_t>(in_channels) * out_channels) {
    fail(ErrorCode::ShapeError, "weight tensor does not match kernel and channel widths");
  }
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(out_channels)) {
    fail(ErrorCode::ShapeError, "bias length does not match output channels");
  }
}

ConvParams make_conv(ConvMode mode, std::int32_t kernel_size, std::int32_t in_channels, std::int32_t out_channels,
                     bool with_bias, Rng& rng) {
  check_kernel(mode, kernel_size);
  ConvParams p;
  p.mode = mode;
  p.kernel_size = kernel_size;
  p.in_channels = in_channels;
  p.out_channels = out_channels;
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.volume()) * in_channels);
  p.weights.resize(p.volume() * static_cast<std::size_t>(in_channels) * out_channels);
  for (float& w : p.weights) w = static_cast<float>(rng.uniform(-bound, bound));
  if (with_bias) {
    p.bias.resize(static_cast<std::size_t>(out_channels));
    for (float& b : p.bias) b = static_cast<float>(rng.uniform(-bound, bound));
  }
  return p;
}

ConvParams transpose_params(const ConvParams& p) {
  p.check();
  ConvParams t;
  t.mode = p.mode == ConvMode::Strided     ? ConvMode::Transposed
           : p.mode == ConvMode::Transposed ? ConvMode::Strided
                                            : ConvMode::Submanifold;
  t.kernel_size = p.kernel_size;
  t.in_channels = p.out_channels;
  t.out_channels = p.in_channels;
  t.weights.resize(p.weights.size());
  const std::size_t ci = static_cast<std::size_t>(p.in_channels);
  const std::size_t co = static_cast<std::size_t>(p.out_channels);
  for (std::size_t o = 0; o < p.volume(); ++o)
    for (std::size_t a = 0; a < ci; ++a)
      for (std::size_t b = 0; b < co; ++b) t.weights[(o * co + b) * ci + a] = p.weights[(o * ci + a) * co + b];
  return t;
}

NormParams NormParams::identity(std::size_t channels) {
  NormParams p;
  p.scale.assign(channels, 1.0f);
  p.shift.assign(channels, 0.0f);
  p.mean.assign(channels, 0.0f);
  p.var.assign(channels, 1.0f);
  return p;
}

void NormParams::check() const {
  const std::size_t c = scale.size();
  if (shift.size() != c || mean.size() != c || var.size() != c) fail(ErrorCode::ShapeError, "norm vectors differ in length");
  if (!(eps > 0.0f)) fail(ErrorCode::RangeError, "norm epsilon must be positive");
  for (float v : var)
    if (!(v >= 0.0f)) fail(ErrorCode::RangeError, "norm variance must be non-negative");
}

std::size_t ResidualBlockParams::parameter_count() const {
  std::size_t n = conv1.parameter_count() + norm1.parameter_count() + conv2.parameter_count() + norm2.parameter_count();
  if (projection) n += projection->parameter_count();
  return n;
}

ResidualBlockParams make_residual_block(std::int32_t in_channels, std::int32_t out_channels, Rng& rng) {
  ResidualBlockParams b;
  b.conv1 = make_conv(ConvMode::Submanifold, 3, in_channels, out_channels, false, rng);
  b.norm1 = NormParams::identity(static_cast<std::size_t>(out_channels));
  b.conv2 = make_conv(ConvMode::Submanifold, 3, out_channels, out_channels, false, rng);
  b.norm2 = NormParams::identity(static_cast<std::size_t>(out_channels));
  if (in_channels != out_channels) b.projection = make_conv(ConvMode::Submanifold, 1, in_channels, out_channels, false, rng);
  return b;
}

// ---------------------------------------------------------------------------
// Forward operations

SparseTensor conv_forward(const SparseTensor& in, const ConvParams& params, const Rulebook& rb) {
  params.check();
  if (static_cast<std::size_t>(params.in_channels) != in.channels()) {
    fail(ErrorCode::ShapeError, "input has " + std::to_string(in.channels()) + " channels, convolution expects " +
                                    std::to_string(params.in_channels));
  }
  if (rb.mode != params.mode || rb.kernel_size != params.kernel_size) {
    fail(ErrorCode::ShapeError, "rulebook mode/kernel does not match convolution parameters");
  }
  if (rb.in_coords != in.coord_set() && rb.in_coords->size() != in.size()) {
    fail(ErrorCode::ShapeError, "rulebook was built for a different input");
  }

  const std::size_t n_out = rb.out_coords->size();
  const std::size_t cin = static_cast<std::size_t>(params.in_channels);
  const std::size_t cout = static_cast<std::size_t>(params.out_channels);
  FeatureMatrix out(n_out, cout);
  const float* x = in.features().data().data();
  const float* w = params.weights.data();
  const float* bias = params.bias.empty() ? nullptr : params.bias.data();
  float* y = out.data().data();
  const std::int32_t* row_ptr = rb.row_ptr.data();
  const Rulebook::Entry* entries = rb.entries.data();

#pragma omp parallel for schedule(dynamic, 64) if (n_out * cout > 16384)
  for (std::int64_t j = 0; j < static_cast<std::int64_t>(n_out); ++j) {
    float* __restrict yj = y + j * cout;
    if (bias) {
      for (std::size_t c = 0; c < cout; ++c) yj[c] = bias[c];
    }
    for (std::int32_t e = row_ptr[j]; e < row_ptr[j + 1]; ++e) {
      const float* xi = x + static_cast<std::size_t>(entries[e].in_row) * cin;
      const float* wo = w + static_cast<std::size_t>(entries[e].offset) * cin * cout;
      for (std::size_t a = 0; a < cin; ++a) {
        const float v = xi[a];
        if (v == 0.0f) continue;
        const float* __restrict wa = wo + a * cout;
        for (std::size_t c = 0; c < cout; ++c) yj[c] += v * wa[c];
      }
    }
  }
  return SparseTensor(rb.out_coords, std::move(out), in.voxel_size());
}

SparseTensor norm_forward(const SparseTensor& t, const NormParams& p, bool relu) {
  p.check();
  if (p.channels() != t.channels()) fail(ErrorCode::ShapeError, "norm channel count does not match tensor");
  return t.with_features(apply_norm(t.features(), p, relu));
}

SparseTensor relu_forward(const SparseTensor& t) {
  FeatureMatrix y = t.features();
  for (float& v : y.data()) v = v > 0.0f ? v : 0.0f;
  return t.with_features(std::move(y));
}

SparseTensor residual_block_forward(const SparseTensor& t, const ResidualBlockParams& p, const Rulebook* rulebook) {
  if (p.conv1.mode != ConvMode::Submanifold || p.conv2.mode != ConvMode::Submanifold) {
    fail(ErrorCode::ShapeError, "residual block convolutions must be submanifold");
  }
  if (static_cast<std::size_t>(p.in_channels()) != t.channels()) {
    fail(ErrorCode::ShapeError, "residual block input width mismatch");
  }
  if (p.in_channels() != p.out_channels() && !p.projection) {
    fail(ErrorCode::ShapeError, "residual block changes width without a projection");
  }
  Rulebook local;
  if (!rulebook) {
    local = build_rulebook(t, ConvMode::Submanifold, p.conv1.kernel_size);
    rulebook = &local;
  }

  SparseTensor h = norm_forward(conv_forward(t, p.conv1, *rulebook), p.norm1, true);
  h = norm_forward(conv_forward(h, p.conv2, *rulebook), p.norm2, false);

  FeatureMatrix out = h.features();
  if (p.projection) {
    // 1x1x1 submanifold: the kernel map is the identity pairing.
    const ConvParams& proj = *p.projection;
    const std::size_t cin = static_cast<std::size_t>(proj.in_channels);
    const std::size_t cout = static_cast<std::size_t>(proj.out_channels);
    for (std::size_t i = 0; i < t.size(); ++i) {
      auto xi = t.features().row(i);
      auto yi = out.row(i);
      std::vector<float> s(cout, 0.0f);
      if (!proj.bias.empty()) std::copy(proj.bias.begin(), proj.bias.end(), s.begin());
      for (std::size_t a = 0; a < cin; ++a) {
        if (xi[a] == 0.0f) continue;
        for (std::size_t c = 0; c < cout; ++c) s[c] += xi[a] * proj.weights[a * cout + c];
      }
      for (std::size_t c = 0; c < cout; ++c) yi[c] += s[c];
    }
  } else {
    const auto& x = t.features().data();
    auto y = out.data();
    for (std::size_t k = 0; k < y.size(); ++k) y[k] += x[k];
  }
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return t.with_features(std::move(out));
}

const Rulebook& RulebookCache::get(const std::shared_ptr<const CoordSet>& in, ConvMode mode, std::int32_t kernel_size,
                                   const std::shared_ptr<const CoordSet>& out) {
  const Key key{in.get(), mode, kernel_size, out.get()};
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(key, std::make_unique<Rulebook>(build_rulebook(in, mode, kernel_size, out))).first;
  }
  return *it->second;
}

}  // namespace sfpn

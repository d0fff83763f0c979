#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "csmtl/errors.hpp"
#include "csmtl/network.hpp"
#include "csmtl/ops.hpp"
#include "csmtl/rng.hpp"
#include "csmtl/tensor.hpp"

namespace csmtl {

struct SyntheticConfig {
  std::size_t batch_size = 8;
  std::size_t channels = 3;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t num_classes = 3;
  std::size_t regions = 4;  // Voronoi cells per image
  double noise = 0.1;

  void validate() const {
    if (batch_size == 0 || channels == 0 || height == 0 || width == 0) {
      throw ConfigError("synthetic data sizes must be positive");
    }
    if (num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
    if (regions == 0) throw ConfigError("synthetic data needs at least one region");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("synthetic noise must be finite and nonnegative");
  }
};

/// Input plus two targets: a per-pixel class map [N,H,W] and a depth-like
/// field [N,1,H,W].
struct SyntheticBatch {
  Tensor input;
  std::shared_ptr<const std::vector<int>> classes;
  std::shared_ptr<const Tensor> depth;

  /// Targets ordered (segmentation, depth).
  Batch as_batch() const { return Batch{input, {Target{nullptr, classes}, Target{depth, nullptr}}}; }
  /// Only the target of one task, placed at index 0.
  Batch single_task(std::size_t task) const {
    return Batch{input, {task == 0 ? Target{nullptr, classes} : Target{depth, nullptr}}};
  }
};

/// Procedural scenes. Every image is split into Voronoi regions; each
/// region carries a class label and a depth offset. Depth is the class's
/// base depth plus the region offset plus a random plane. The input colour
/// comes from the class and its brightness from the depth, plus noise, so
/// both targets hang off the same latent layout.
class SyntheticDataset {
 public:
  SyntheticDataset(SyntheticConfig config, std::uint64_t seed) : config_(config), seed_(seed) { config_.validate(); }

  const SyntheticConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }

  /// Base depth of a class, evenly spaced in [-1, 1].
  double class_depth(std::size_t k) const {
    return -1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(config_.num_classes - 1);
  }

  /// Colour of class k on input channel c.
  double palette(std::size_t k, std::size_t c) const {
    const double phase = static_cast<double>(k) / static_cast<double>(config_.num_classes) +
                         static_cast<double>(c) / static_cast<double>(config_.channels);
    return std::cos(2.0 * std::numbers::pi * phase);
  }

  /// Batch number `index` of stream `stream`; random access and fully
  /// determined by (seed, stream, index).
  SyntheticBatch batch(std::uint64_t index, std::string_view stream = "train") const {
    Rng rng = substream(seed_ ^ splitmix64(index), stream);
    const std::size_t n = config_.batch_size, h = config_.height, w = config_.width;
    const std::size_t c = config_.channels, plane = h * w;
    Tensor input(Shape{n, c, h, w});
    auto depth = std::make_shared<Tensor>(Shape{n, 1, h, w});
    auto classes = std::make_shared<std::vector<int>>(n * plane);
    std::vector<double> cx(config_.regions), cy(config_.regions), offset(config_.regions);
    std::vector<std::size_t> label(config_.regions);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t r = 0; r < config_.regions; ++r) {
        cx[r] = rng.uniform(0.0, static_cast<double>(w));
        cy[r] = rng.uniform(0.0, static_cast<double>(h));
        label[r] = rng.below(config_.num_classes);
        offset[r] = 0.25 * rng.uniform(-1.0, 1.0);
      }
      const double tilt_x = 0.5 * rng.uniform(-1.0, 1.0) / static_cast<double>(w);
      const double tilt_y = 0.5 * rng.uniform(-1.0, 1.0) / static_cast<double>(h);
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
          std::size_t nearest = 0;
          double best = std::numeric_limits<double>::infinity();
          for (std::size_t r = 0; r < config_.regions; ++r) {
            const double d = (px - cx[r]) * (px - cx[r]) + (py - cy[r]) * (py - cy[r]);
            if (d < best) {
              best = d;
              nearest = r;
            }
          }
          const std::size_t k = label[nearest];
          const double z = class_depth(k) + offset[nearest] + tilt_x * (px - 0.5 * static_cast<double>(w)) +
                           tilt_y * (py - 0.5 * static_cast<double>(h));
          const std::size_t pix = y * w + x;
          (*classes)[b * plane + pix] = static_cast<int>(k);
          (*depth)[b * plane + pix] = z;
          const double brightness = 1.0 + 0.5 * z;
          for (std::size_t ch = 0; ch < c; ++ch) {
            input[(b * c + ch) * plane + pix] = palette(k, ch) * brightness + config_.noise * rng.normal();
          }
        }
    }
    return SyntheticBatch{std::move(input), std::move(classes), std::move(depth)};
  }

 private:
  SyntheticConfig config_;
  std::uint64_t seed_;
};

inline SyntheticDataset make_synthetic_dataset(const SyntheticConfig& config, std::uint64_t seed) {
  return SyntheticDataset(config, seed);
}

}  // namespace csmtl

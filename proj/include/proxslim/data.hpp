#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "proxslim/network.hpp"

namespace proxslim {

struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t per_class = 200;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::uint64_t seed = 1;
  double noise = 0.35;
  /// Emit every image once per class plus once more with its own class, so
  /// the loss-minimizing predictive distribution is strictly interior and
  /// the optimal logits stay bounded.
  bool interior_targets = false;
};

/// Per-class parametric patterns (blob, horizontal stripes, vertical stripes,
/// checkerboard, cycling with a coarser frequency for classes >= 4) with a
/// class colour tint, per-sample jitter and Gaussian pixel noise. Values are
/// rounded through float32 so that saving and loading is lossless.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Little-endian "PNSD" v1: magic, u16 version, u32 records, u16 classes,
/// u16 C, H, W, then per record u16 class + C*H*W float32.
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// One record per line: label followed by C*H*W pixel values (C-major order).
Dataset load_csv(const std::filesystem::path& path, InputShape shape, std::size_t classes);

/// MNIST-layout IDX pair (u8 images 0x803, u8 labels 0x801); pixels scaled to [0,1].
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes);

/// Fraction of samples whose nearest class mean (Euclidean) is their own class.
double nearest_centroid_accuracy(const Dataset& data);

}  // namespace proxslim

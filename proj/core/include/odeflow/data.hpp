#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "odeflow/tensor.hpp"

namespace odeflow {

struct LabeledImage {
  Tensor pixels;  // [H, W, C], values in [0, 1]
  int label = 0;
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

enum class SplitTag { Train, Eval };

struct DatasetSplit {
  std::vector<LabeledImage> images;
  int num_classes = 0;
  SplitTag tag = SplitTag::Train;
  ChannelStats stats;

  std::size_t size() const noexcept { return images.size(); }
  std::size_t height() const { return images.empty() ? 0 : images.front().pixels.dim(0); }
  std::size_t width() const { return images.empty() ? 0 : images.front().pixels.dim(1); }
  std::size_t channels() const { return images.empty() ? 0 : images.front().pixels.dim(2); }
};

/// Per-channel mean and standard deviation over every pixel of the split.
ChannelStats compute_stats(const DatasetSplit& split);

/// Parametric shape classes (disc, square, plus, stripes, ring, triangle, X,
/// vertical stripes, checker, dot pair) with jittered position, scale,
/// rotation and colour plus Gaussian pixel noise (sigma 0.05). Labels follow
/// i % num_classes. Stats are filled from the generated pixels.
DatasetSplit gen_synthetic(std::size_t n, int num_classes, std::size_t size, std::uint64_t seed,
                           SplitTag tag = SplitTag::Train);

inline constexpr std::size_t kCifarImageSize = 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarImageSize * kCifarImageSize;

/// CIFAR-10 binary layout: per record one label byte then the R, G and B
/// planes, each row-major. `image_size` generalizes the 32x32 plane size.
DatasetSplit decode_cifar10_binary(std::string_view bytes, std::size_t image_size = kCifarImageSize,
                                   int num_classes = 10);
DatasetSplit load_cifar10_binary(const std::filesystem::path& path,
                                 std::size_t image_size = kCifarImageSize, int num_classes = 10);
/// Pixels are quantized as round(v * 255).
std::string encode_cifar10_binary(const DatasetSplit& split);
void save_cifar10_binary(const std::filesystem::path& path, const DatasetSplit& split);

/// Index batches for one epoch. With a shuffle seed the order is a
/// deterministic permutation of (seed, epoch); the last batch may be short.
std::vector<std::vector<std::size_t>> batches(const DatasetSplit& split, std::size_t batch_size,
                                              std::optional<std::uint64_t> shuffle_seed,
                                              int epoch = 0);

}  // namespace odeflow

#include "odeflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "odeflow/container.hpp"
#include "odeflow/error.hpp"

namespace odeflow {

ChannelStats compute_stats(const DatasetSplit& split) {
  ChannelStats s;
  const std::size_t C = split.channels();
  s.mean.assign(C, 0.0);
  s.std.assign(C, 0.0);
  if (split.images.empty()) return s;
  std::vector<double> sq(C, 0.0);
  double count = 0.0;
  for (const LabeledImage& img : split.images) {
    const auto& px = img.pixels;
    for (std::size_t i = 0; i < px.numel(); ++i) {
      s.mean[i % C] += px[i];
      sq[i % C] += px[i] * px[i];
    }
    count += static_cast<double>(px.numel() / C);
  }
  for (std::size_t c = 0; c < C; ++c) {
    s.mean[c] /= count;
    const double var = sq[c] / count - s.mean[c] * s.mean[c];
    s.std[c] = std::sqrt(std::max(var, 1e-12));
  }
  return s;
}

namespace {

// Membership test for class shapes in local coordinates (unit radius).
bool inside(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (shape) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::max(au, av) <= 0.8;
    case 2: return (au <= 0.25 && av <= 1.0) || (av <= 0.25 && au <= 1.0);
    case 3: return au <= 1.1 && av <= 1.1 && std::sin(v * 2.0 * std::numbers::pi) > 0.0;
    case 4: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case 5: return v <= 0.8 && v >= -0.9 && au <= 0.55 * (v + 0.9);
    case 6: {
      const double a = (u + v) * std::numbers::sqrt2 / 2.0, b = (u - v) * std::numbers::sqrt2 / 2.0;
      return (std::abs(a) <= 0.22 && std::abs(b) <= 1.0) || (std::abs(b) <= 0.22 && std::abs(a) <= 1.0);
    }
    case 7: return au <= 1.1 && av <= 1.1 && std::sin(u * 2.0 * std::numbers::pi) > 0.0;
    case 8: {
      if (au > 1.0 || av > 1.0) return false;
      const auto cu = static_cast<long>(std::floor(u * 2.0));
      const auto cv = static_cast<long>(std::floor(v * 2.0));
      return ((cu + cv) & 1L) == 0;
    }
    default: {
      const double l = (u + 0.5) * (u + 0.5) + v * v;
      const double r = (u - 0.5) * (u - 0.5) + v * v;
      return l <= 0.16 || r <= 0.16;
    }
  }
}

}  // namespace

DatasetSplit gen_synthetic(std::size_t n, int num_classes, std::size_t size, std::uint64_t seed,
                           SplitTag tag) {
  if (num_classes < 2 || num_classes > 10) {
    throw ContractError("gen_synthetic: num_classes must be in 2..10");
  }
  if (size != 16 && size != 32) throw ContractError("gen_synthetic: size must be 16 or 32");
  constexpr std::size_t C = 3;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  const double s = static_cast<double>(size);

  DatasetSplit split;
  split.num_classes = num_classes;
  split.tag = tag;
  split.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    const double radius = s * (0.22 + 0.14 * unit(rng));
    const double cx = s / 2.0 + (unit(rng) - 0.5) * s * 0.3;
    const double cy = s / 2.0 + (unit(rng) - 0.5) * s * 0.3;
    const double theta = (unit(rng) - 0.5) * 0.6;
    const double fg_level = 0.55 + 0.45 * unit(rng);
    const double bg_level = 0.3 * unit(rng);
    double fg[C], bg[C];
    for (std::size_t c = 0; c < C; ++c) {
      fg[c] = fg_level * (0.6 + 0.4 * unit(rng));
      bg[c] = bg_level * (0.6 + 0.4 * unit(rng));
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    Tensor px({size, size, C});
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (static_cast<double>(x) + 0.5 - cx) / radius;
        const double dy = (static_cast<double>(y) + 0.5 - cy) / radius;
        const double u = ct * dx + st * dy;
        const double v = -st * dx + ct * dy;
        const bool on = inside(label, u, v);
        for (std::size_t c = 0; c < C; ++c) {
          const double value = (on ? fg[c] : bg[c]) + noise(rng);
          px[(y * size + x) * C + c] = std::clamp(value, 0.0, 1.0);
        }
      }
    }
    split.images.push_back({std::move(px), label});
  }
  split.stats = compute_stats(split);
  return split;
}

DatasetSplit decode_cifar10_binary(std::string_view bytes, std::size_t image_size, int num_classes) {
  const std::size_t plane = image_size * image_size;
  const std::size_t record = 1 + 3 * plane;
  if (bytes.size() % record != 0) {
    throw FormatError("file size " + std::to_string(bytes.size()) +
                      " is not a multiple of the record length " + std::to_string(record));
  }
  DatasetSplit split;
  split.num_classes = num_classes;
  const std::size_t count = bytes.size() / record;
  split.images.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * record);
    if (rec[0] >= num_classes) {
      throw FormatError("record " + std::to_string(r) + " has label byte " +
                        std::to_string(rec[0]));
    }
    Tensor px({image_size, image_size, 3});
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        px[i * 3 + c] = static_cast<double>(rec[1 + c * plane + i]) / 255.0;
    split.images.push_back({std::move(px), rec[0]});
  }
  split.stats = compute_stats(split);
  return split;
}

DatasetSplit load_cifar10_binary(const std::filesystem::path& path, std::size_t image_size,
                                 int num_classes) {
  return decode_cifar10_binary(read_file(path), image_size, num_classes);
}

std::string encode_cifar10_binary(const DatasetSplit& split) {
  std::string out;
  if (split.images.empty()) return out;
  const std::size_t H = split.height();
  if (split.width() != H || split.channels() != 3) {
    throw ContractError("CIFAR layout needs square 3-channel images");
  }
  const std::size_t plane = H * H;
  out.reserve(split.size() * (1 + 3 * plane));
  for (const LabeledImage& img : split.images) {
    if (img.label < 0 || img.label > 255) throw ContractError("label does not fit in a byte");
    out.push_back(static_cast<char>(img.label));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double v = std::clamp(img.pixels[i * 3 + c], 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
  }
  return out;
}

void save_cifar10_binary(const std::filesystem::path& path, const DatasetSplit& split) {
  write_file_atomic(path, encode_cifar10_binary(split));
}

std::vector<std::vector<std::size_t>> batches(const DatasetSplit& split, std::size_t batch_size,
                                              std::optional<std::uint64_t> shuffle_seed, int epoch) {
  if (batch_size < 1) throw ContractError("batches: batch_size must be >= 1");
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(*shuffle_seed),
                      static_cast<std::uint32_t>(*shuffle_seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    const std::size_t end = std::min(order.size(), i + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace odeflow

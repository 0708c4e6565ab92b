#pragma once

// CIFAR-10 binary batches: 3073-byte records (label byte, then 1024 R,
// 1024 G and 1024 B bytes, row-major). Also writes files in the same format,
// including a procedurally generated stand-in dataset for machines without
// the real data.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "rrnet/tensor.hpp"

namespace rrnet {

inline constexpr int kImageSide = 32;
inline constexpr int kImageChannels = 3;
inline constexpr int kImagePixels = kImageChannels * kImageSide * kImageSide;
inline constexpr int kRecordBytes = 1 + kImagePixels;
inline constexpr int kNumClasses = 10;

struct RawRecords {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // kImagePixels per record

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
  void append(const RawRecords& o) {
    labels.insert(labels.end(), o.labels.begin(), o.labels.end());
    pixels.insert(pixels.end(), o.pixels.begin(), o.pixels.end());
  }
};

struct LabeledBatch {
  Tensor<float> images;  // N x 3 x 32 x 32
  std::vector<int> labels;

  void check() const {
    const auto& s = images.shape();
    if (s.c != kImageChannels || s.h != kImageSide || s.w != kImageSide)
      throw ConfigError("batch images have shape " + s.str() + ", expected Nx3x32x32");
    if (static_cast<int>(labels.size()) != s.n)
      throw ConfigError("batch has " + std::to_string(s.n) + " images but " +
                        std::to_string(labels.size()) + " labels");
    for (int l : labels)
      if (l < 0 || l >= kNumClasses) throw ConfigError("label " + std::to_string(l) + " out of range");
  }
};

/// Normalized images held contiguously.
struct Dataset {
  std::vector<float> images;  // kImagePixels per record
  std::vector<int> labels;

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }

  [[nodiscard]] LabeledBatch gather(const std::vector<int>& idx) const {
    if (idx.empty()) throw ConfigError("cannot build an empty batch");
    LabeledBatch b{Tensor<float>(Shape{static_cast<int>(idx.size()), kImageChannels, kImageSide,
                                       kImageSide}),
                   {}};
    float* dst = b.images.data();
    for (int i : idx) {
      if (i < 0 || i >= size()) throw ConfigError("record index " + std::to_string(i) + " out of range");
      std::copy_n(images.begin() + static_cast<std::ptrdiff_t>(i) * kImagePixels, kImagePixels, dst);
      dst += kImagePixels;
      b.labels.push_back(labels[i]);
    }
    return b;
  }

  [[nodiscard]] Dataset head(int n) const {
    n = std::min(n, size());
    Dataset d;
    d.images.assign(images.begin(), images.begin() + static_cast<std::ptrdiff_t>(n) * kImagePixels);
    d.labels.assign(labels.begin(), labels.begin() + n);
    return d;
  }
};

struct CifarData {
  Dataset train;
  Dataset test;
  std::array<float, 3> channel_mean{};  // training-set means on the [0,1] scale
};

/// Reads every record of one batch file.
inline RawRecords read_cifar_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open CIFAR batch '" + path + "' at offset 0");
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IoError("CIFAR batch '" + path + "' is empty (offset 0)");
  const std::size_t whole = bytes.size() / kRecordBytes;
  if (bytes.size() % kRecordBytes != 0)
    throw IoError("CIFAR batch '" + path + "' is truncated: record " + std::to_string(whole) +
                  " starts at offset " + std::to_string(whole * kRecordBytes) +
                  " but the file ends at offset " + std::to_string(bytes.size()));
  RawRecords r;
  r.labels.reserve(whole);
  r.pixels.reserve(whole * kImagePixels);
  for (std::size_t i = 0; i < whole; ++i) {
    const std::size_t off = i * kRecordBytes;
    const auto label = static_cast<std::uint8_t>(bytes[off]);
    if (label >= kNumClasses)
      throw IoError("CIFAR batch '" + path + "' has label " + std::to_string(label) +
                    " at offset " + std::to_string(off));
    r.labels.push_back(label);
    r.pixels.insert(r.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                    bytes.begin() + static_cast<std::ptrdiff_t>(off + kRecordBytes));
  }
  return r;
}

inline void write_cifar_file(const std::string& path, const RawRecords& r) {
  if (r.pixels.size() != r.labels.size() * kImagePixels)
    throw ConfigError("record pixel count does not match label count");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write CIFAR batch '" + path + "'");
  for (int i = 0; i < r.size(); ++i) {
    os.put(static_cast<char>(r.labels[i]));
    os.write(reinterpret_cast<const char*>(r.pixels.data()) + static_cast<std::ptrdiff_t>(i) * kImagePixels,
             kImagePixels);
  }
  if (!os) throw IoError("failed writing CIFAR batch '" + path + "'");
}

inline std::array<float, 3> channel_means(const RawRecords& r) {
  std::array<double, 3> sum{};
  const std::size_t plane = kImageSide * kImageSide;
  for (int i = 0; i < r.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      const std::uint8_t* p = r.pixels.data() + static_cast<std::size_t>(i) * kImagePixels + c * plane;
      double s = 0;
      for (std::size_t k = 0; k < plane; ++k) s += p[k];
      sum[c] += s;
    }
  const double denom = 255.0 * plane * std::max(1, r.size());
  return {static_cast<float>(sum[0] / denom), static_cast<float>(sum[1] / denom),
          static_cast<float>(sum[2] / denom)};
}

/// Scales to [0,1] and subtracts the given per-channel means.
inline Dataset normalize(const RawRecords& r, const std::array<float, 3>& mean) {
  Dataset d;
  d.labels.assign(r.labels.begin(), r.labels.end());
  d.images.resize(r.pixels.size());
  const std::size_t plane = kImageSide * kImageSide;
  for (std::size_t i = 0; i < r.pixels.size(); ++i) {
    const int c = static_cast<int>((i % kImagePixels) / plane);
    d.images[i] = static_cast<float>(r.pixels[i]) / 255.0f - mean[c];
  }
  return d;
}

inline std::vector<std::string> cifar_train_files() {
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
          "data_batch_5.bin"};
}

/// Loads data_batch_1..5.bin and test_batch.bin from `dir`.
inline CifarData load_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  RawRecords train;
  for (const auto& f : cifar_train_files()) train.append(read_cifar_file((fs::path(dir) / f).string()));
  const RawRecords test = read_cifar_file((fs::path(dir) / "test_batch.bin").string());
  CifarData out;
  out.channel_mean = channel_means(train);
  out.train = normalize(train, out.channel_mean);
  out.test = normalize(test, out.channel_mean);
  return out;
}

/// True if `dir` holds all six batch files.
inline bool has_cifar10(const std::string& dir) {
  namespace fs = std::filesystem;
  if (dir.empty()) return false;
  for (const auto& f : cifar_train_files())
    if (!fs::exists(fs::path(dir) / f)) return false;
  return fs::exists(fs::path(dir) / "test_batch.bin");
}

// ---- augmentation ---------------------------------------------------------

struct AugmentParams {
  int dy = 4;  // crop offset into the 40x40 padded image, 0..8
  int dx = 4;
  bool flip = false;
};

template <typename Rng>
AugmentParams draw_augment(Rng& rng) {
  std::uniform_int_distribution<int> off(0, 8);
  std::bernoulli_distribution coin(0.5);
  AugmentParams p;
  p.dy = off(rng);
  p.dx = off(rng);
  p.flip = coin(rng);
  return p;
}

/// Zero-pad by 4, crop 32x32 at (dy, dx), then optionally mirror horizontally.
inline void augment_image(const float* src, float* dst, const AugmentParams& p) {
  const int s = kImageSide;
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const int sy = y + p.dy - 4;
        const int sx0 = p.flip ? s - 1 - x : x;
        const int sx = sx0 + p.dx - 4;
        float v = 0;
        if (sy >= 0 && sy < s && sx >= 0 && sx < s) v = src[(c * s + sy) * s + sx];
        dst[(c * s + y) * s + x] = v;
      }
}

inline LabeledBatch apply_augment(const LabeledBatch& b, const std::vector<AugmentParams>& params) {
  const int n = b.images.shape().n;
  if (static_cast<int>(params.size()) != n)
    throw ConfigError("augment: one parameter set per image required");
  LabeledBatch out{Tensor<float>(b.images.shape()), b.labels};
  for (int i = 0; i < n; ++i)
    augment_image(b.images.data() + static_cast<std::size_t>(i) * kImagePixels,
                  out.images.data() + static_cast<std::size_t>(i) * kImagePixels, params[i]);
  return out;
}

template <typename Rng>
LabeledBatch augment(const LabeledBatch& b, Rng& rng) {
  std::vector<AugmentParams> params;
  for (int i = 0; i < b.images.shape().n; ++i) params.push_back(draw_augment(rng));
  return apply_augment(b, params);
}

// ---- procedural stand-in data ---------------------------------------------

namespace detail {

/// One 32x32 image of shape class `label` at a random position, scale and
/// colouring, with pixel noise and a few distractor specks.
inline void draw_shape(int label, std::mt19937_64& rng, std::uint8_t* out) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 18.0);
  std::array<double, 3> bg{}, fg{};
  do {
    for (int c = 0; c < 3; ++c) {
      bg[c] = 255.0 * u01(rng);
      fg[c] = 255.0 * u01(rng);
    }
  } while (std::abs(bg[0] - fg[0]) + std::abs(bg[1] - fg[1]) + std::abs(bg[2] - fg[2]) < 180.0);
  const double cx = 10.0 + 12.0 * u01(rng), cy = 10.0 + 12.0 * u01(rng);
  const double s = 6.5 + 4.0 * u01(rng);
  auto inside = [&](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    const double r = std::sqrt(dx * dx + dy * dy);
    const double box = std::max(std::abs(dx), std::abs(dy));
    const double h = 0.8 * s;
    switch (label) {
      case 0: return r <= s;                                              // disc
      case 1: return std::abs(r - s) <= 1.2;                              // ring
      case 2: return box <= 0.85 * s;                                     // square
      case 3: return std::abs(box - 0.85 * s) <= 1.0;                     // square outline
      case 4: return std::abs(dx) <= s && (std::abs(dy - h / 2) <= 1.0 || std::abs(dy + h / 2) <= 1.0);
      case 5: return std::abs(dy) <= s && (std::abs(dx - h / 2) <= 1.0 || std::abs(dx + h / 2) <= 1.0);
      case 6: return (std::abs(dx) <= 1.0 && std::abs(dy) <= s) || (std::abs(dy) <= 1.0 && std::abs(dx) <= s);
      case 7: return box <= h && (std::abs(dx - dy) <= 1.4 || std::abs(dx + dy) <= 1.4);
      case 8: return dy >= -h && dy <= h && std::abs(dx) <= (dy + h) / 2;  // triangle
      default:
        return (std::abs(dy + h) <= 1.0 && std::abs(dx) <= s) ||
               (std::abs(dx) <= 1.0 && dy >= -h && dy <= s);  // T
    }
  };
  const int side = kImageSide, plane = side * side;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const bool on = inside(x, y);
      for (int c = 0; c < 3; ++c) {
        const double v = (on ? fg[c] : bg[c]) + noise(rng);
        out[c * plane + y * side + x] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  std::uniform_int_distribution<int> pos(0, side - 2);
  for (int k = 0; k < 3; ++k) {
    const int y0 = pos(rng), x0 = pos(rng);
    std::array<double, 3> col{255.0 * u01(rng), 255.0 * u01(rng), 255.0 * u01(rng)};
    for (int y = y0; y < y0 + 2; ++y)
      for (int x = x0; x < x0 + 2; ++x)
        for (int c = 0; c < 3; ++c) out[c * plane + y * side + x] = static_cast<std::uint8_t>(col[c]);
  }
}

}  // namespace detail

/// `n` records of the ten-class shape task; record i depends only on (seed, i).
inline RawRecords synthetic_records(int n, std::uint64_t seed) {
  RawRecords r;
  r.labels.resize(n);
  r.pixels.resize(static_cast<std::size_t>(n) * kImagePixels);
  for (int i = 0; i < n; ++i) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(i));
    const int label = static_cast<int>(rng() % kNumClasses);
    r.labels[i] = static_cast<std::uint8_t>(label);
    detail::draw_shape(label, rng, r.pixels.data() + static_cast<std::size_t>(i) * kImagePixels);
  }
  return r;
}

/// Writes a complete CIFAR-10 style directory (five train batches plus the
/// test batch) holding the procedural shape task.
inline void write_synthetic_cifar10(const std::string& dir, int n_train, int n_test,
                                    std::uint64_t seed = 1) {
  namespace fs = std::filesystem;
  if (n_train < 5 || n_test < 1) throw ConfigError("synthetic set needs >= 5 train and >= 1 test records");
  fs::create_directories(dir);
  const RawRecords train = synthetic_records(n_train, seed);
  const auto files = cifar_train_files();
  int begin = 0;
  for (std::size_t f = 0; f < files.size(); ++f) {
    const int end = static_cast<int>((static_cast<long long>(n_train) * (f + 1)) / files.size());
    RawRecords part;
    part.labels.assign(train.labels.begin() + begin, train.labels.begin() + end);
    part.pixels.assign(train.pixels.begin() + static_cast<std::ptrdiff_t>(begin) * kImagePixels,
                       train.pixels.begin() + static_cast<std::ptrdiff_t>(end) * kImagePixels);
    write_cifar_file((fs::path(dir) / files[f]).string(), part);
    begin = end;
  }
  write_cifar_file((fs::path(dir) / "test_batch.bin").string(),
                   synthetic_records(n_test, seed + 0x5eed));
}

}  // namespace rrnet

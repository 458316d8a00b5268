#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <vector>

#include "tokenfusion/errors.hpp"
#include "tokenfusion/rng.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

/// One labelled raster, bytes in row-major interleaved HWC order.
struct Sample {
  int64_t height = 0;
  int64_t width = 0;
  int64_t channels = 0;
  std::vector<uint8_t> pixels;
  int64_t label = 0;
};

struct AugmentConfig {
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double max_rotation_deg = 15.0;

  void validate() const {
    require(hflip_prob >= 0.0 && hflip_prob <= 1.0, "augment: hflip_prob outside [0,1]");
    require(vflip_prob >= 0.0 && vflip_prob <= 1.0, "augment: vflip_prob outside [0,1]");
    require(max_rotation_deg >= 0.0, "augment: max_rotation_deg must be >= 0");
  }
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  int64_t num_classes = 0;
};

namespace detail {

inline double bilinear_at(const Sample& s, double y, double x, int64_t c) {
  // Edge padding: clamp source coordinates to the raster.
  const double yc = std::clamp(y, 0.0, static_cast<double>(s.height - 1));
  const double xc = std::clamp(x, 0.0, static_cast<double>(s.width - 1));
  const int64_t y0 = static_cast<int64_t>(std::floor(yc));
  const int64_t x0 = static_cast<int64_t>(std::floor(xc));
  const int64_t y1 = std::min(y0 + 1, s.height - 1);
  const int64_t x1 = std::min(x0 + 1, s.width - 1);
  const double fy = yc - static_cast<double>(y0);
  const double fx = xc - static_cast<double>(x0);
  auto px = [&](int64_t yy, int64_t xx) {
    return static_cast<double>(s.pixels[static_cast<size_t>((yy * s.width + xx) * s.channels + c)]);
  };
  const double top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
  const double bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
  return top * (1.0 - fy) + bot * fy;
}

}  // namespace detail

/// Center-crop normalization pipeline: resize to (S+32)x(S+32) with bilinear
/// half-pixel sampling, crop the central SxS window, scale to [0,1], then
/// normalize per channel. Returns a planar (3,S,S) tensor.
template <typename T>
Tensor<T> preprocess(const Sample& raw, int64_t target) {
  if (raw.channels != 3)
    throw DatasetError("preprocess: expected a 3-channel raster, got " +
                       std::to_string(raw.channels));
  if (target < 1) throw DatasetError("preprocess: target size must be positive");
  if (raw.height < 1 || raw.width < 1) throw DatasetError("preprocess: empty raster");

  static constexpr double kMean[3] = {0.485, 0.456, 0.406};
  static constexpr double kStd[3] = {0.229, 0.224, 0.225};

  const int64_t resized = target + 32;
  const int64_t off = (resized - target) / 2;
  const double sy = static_cast<double>(raw.height) / static_cast<double>(resized);
  const double sx = static_cast<double>(raw.width) / static_cast<double>(resized);

  Tensor<T> out(Shape{3, target, target});
  auto od = out.data();
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < target; ++y)
      for (int64_t x = 0; x < target; ++x) {
        const double src_y = (static_cast<double>(y + off) + 0.5) * sy - 0.5;
        const double src_x = (static_cast<double>(x + off) + 0.5) * sx - 0.5;
        const double v = detail::bilinear_at(raw, src_y, src_x, c) / 255.0;
        od[(c * target + y) * target + x] = static_cast<T>((v - kMean[c]) / kStd[c]);
      }
  return out;
}

/// Seeded flip/rotate pipeline on raw bytes. Exactly three random draws per
/// call regardless of configuration, so toggling one knob never shifts the
/// stream consumed by the others. A drawn angle of zero (always the case when
/// max_rotation_deg is 0) leaves the pixels bit-identical.
inline Sample augment(const Sample& img, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  const double u_h = rng.uniform(0.0, 1.0);
  const double u_v = rng.uniform(0.0, 1.0);
  const double angle_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);

  Sample out = img;
  auto at = [&](Sample& s, int64_t y, int64_t x, int64_t c) -> uint8_t& {
    return s.pixels[static_cast<size_t>((y * s.width + x) * s.channels + c)];
  };
  if (u_h < cfg.hflip_prob) {
    Sample flipped = out;
    for (int64_t y = 0; y < out.height; ++y)
      for (int64_t x = 0; x < out.width; ++x)
        for (int64_t c = 0; c < out.channels; ++c)
          at(flipped, y, x, c) = at(out, y, out.width - 1 - x, c);
    out = std::move(flipped);
  }
  if (u_v < cfg.vflip_prob) {
    Sample flipped = out;
    for (int64_t y = 0; y < out.height; ++y)
      for (int64_t x = 0; x < out.width; ++x)
        for (int64_t c = 0; c < out.channels; ++c)
          at(flipped, y, x, c) = at(out, out.height - 1 - y, x, c);
    out = std::move(flipped);
  }
  if (angle_deg != 0.0) {
    const double rad = angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = static_cast<double>(out.height - 1) / 2.0;
    const double cx = static_cast<double>(out.width - 1) / 2.0;
    Sample rotated = out;
    for (int64_t y = 0; y < out.height; ++y)
      for (int64_t x = 0; x < out.width; ++x) {
        // Inverse-map the destination pixel into the source frame.
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        const double src_y = cy + dy * cs - dx * sn;
        const double src_x = cx + dy * sn + dx * cs;
        for (int64_t c = 0; c < out.channels; ++c) {
          const double v = detail::bilinear_at(out, src_y, src_x, c);
          at(rotated, y, x, c) =
              static_cast<uint8_t>(std::clamp<long>(std::lround(v), 0L, 255L));
        }
      }
    out = std::move(rotated);
  }
  return out;
}

// ===================== loaders =====================

/// One CIFAR-10 batch file: 3073-byte records, 1 label byte followed by three
/// 1024-byte channel planes (R, G, B) of a 32x32 raster.
inline std::vector<Sample> load_cifar10_file(const std::string& path) {
  constexpr int64_t kRecord = 3073;
  constexpr int64_t kSide = 32;
  constexpr int64_t kPlane = kSide * kSide;

  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cifar10: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.empty() || bytes.size() % kRecord != 0)
    throw DatasetError("cifar10: " + path + " is truncated (" + std::to_string(bytes.size()) +
                       " bytes is not a multiple of 3073)");

  std::vector<Sample> samples;
  samples.reserve(bytes.size() / kRecord);
  for (size_t rec = 0; rec < bytes.size(); rec += kRecord) {
    Sample s;
    s.height = kSide;
    s.width = kSide;
    s.channels = 3;
    s.label = bytes[rec];
    if (s.label >= 10)
      throw DatasetError("cifar10: " + path + " has label " + std::to_string(s.label) +
                         " out of range");
    s.pixels.resize(static_cast<size_t>(kPlane * 3));
    for (int64_t c = 0; c < 3; ++c)
      for (int64_t p = 0; p < kPlane; ++p)
        s.pixels[static_cast<size_t>(p * 3 + c)] = bytes[rec + 1 + static_cast<size_t>(c * kPlane + p)];
    samples.push_back(std::move(s));
  }
  return samples;
}

/// Standard CIFAR-10 directory layout: data_batch_*.bin for training,
/// test_batch.bin for validation.
inline Dataset load_cifar10_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DatasetError("cifar10: " + dir + " is not a directory");
  std::vector<std::string> train_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("data_batch_", 0) == 0 && name.size() > 4 &&
        name.substr(name.size() - 4) == ".bin")
      train_files.push_back(entry.path().string());
  }
  std::sort(train_files.begin(), train_files.end());
  if (train_files.empty()) throw DatasetError("cifar10: no data_batch_*.bin in " + dir);

  Dataset ds;
  ds.num_classes = 10;
  for (const auto& f : train_files) {
    std::vector<Sample> part = load_cifar10_file(f);
    ds.train.insert(ds.train.end(), std::make_move_iterator(part.begin()),
                    std::make_move_iterator(part.end()));
  }
  const std::string test_path = (fs::path(dir) / "test_batch.bin").string();
  if (fs::exists(test_path))
    ds.val = load_cifar10_file(test_path);
  else
    ds.val = ds.train;
  return ds;
}

/// Class-dependent sinusoidal gratings: orientation and frequency index the
/// class, phase and a little pixel noise vary per sample. Learnable by a tiny
/// model yet non-trivial, and fully determined by the seed.
inline std::vector<Sample> make_synthetic(int64_t count, int64_t num_classes, int64_t side,
                                          uint64_t seed) {
  require(count >= 0, "synthetic: negative sample count");
  require(num_classes >= 1, "synthetic: need at least one class");
  require(side >= 1, "synthetic: raster side must be positive");
  Rng rng(seed);
  std::vector<Sample> samples;
  samples.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    const int64_t cls = i % num_classes;
    const double theta = std::numbers::pi * static_cast<double>(cls) /
                         static_cast<double>(num_classes);
    const double freq = 1.0 + static_cast<double>(cls % 4);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    Sample s;
    s.height = side;
    s.width = side;
    s.channels = 3;
    s.label = cls;
    s.pixels.resize(static_cast<size_t>(side * side * 3));
    const double cs = std::cos(theta), sn = std::sin(theta);
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x) {
        const double t = (static_cast<double>(x) * cs + static_cast<double>(y) * sn) /
                         static_cast<double>(side);
        const double wave = std::sin(2.0 * std::numbers::pi * freq * t + phase);
        for (int64_t c = 0; c < 3; ++c) {
          const double chan_shift = 12.0 * static_cast<double>(c - 1);
          const double noise = rng.uniform(-8.0, 8.0);
          const double v = 127.5 + 90.0 * wave + chan_shift + noise;
          s.pixels[static_cast<size_t>((y * side + x) * 3 + c)] =
              static_cast<uint8_t>(std::clamp<long>(std::lround(v), 0L, 255L));
        }
      }
    samples.push_back(std::move(s));
  }
  return samples;
}

/// Where a run's samples come from. `kind` selects the loader; the remaining
/// fields apply to the synthetic generator only.
struct DatasetSource {
  enum class Kind { Cifar10Dir, Cifar10File, Synthetic };
  Kind kind = Kind::Synthetic;
  std::string path;
  int64_t train_count = 64;
  int64_t val_count = 32;
  int64_t num_classes = 10;
  int64_t image_size = 32;
  uint64_t seed = 7;
};

inline Dataset load_dataset(const DatasetSource& src) {
  Dataset ds;
  switch (src.kind) {
    case DatasetSource::Kind::Cifar10Dir:
      ds = load_cifar10_dir(src.path);
      break;
    case DatasetSource::Kind::Cifar10File:
      // A single batch file has no held-out split; evaluate on the same
      // records.
      ds.train = load_cifar10_file(src.path);
      ds.val = ds.train;
      ds.num_classes = 10;
      break;
    case DatasetSource::Kind::Synthetic:
      ds.train = make_synthetic(src.train_count, src.num_classes, src.image_size, src.seed);
      ds.val = make_synthetic(src.val_count, src.num_classes, src.image_size, src.seed + 1);
      ds.num_classes = src.num_classes;
      break;
  }
  if (ds.train.empty()) throw DatasetError("load_dataset: empty training split");
  return ds;
}

/// Stacks preprocessed samples (selected by index) into a (B,3,S,S) batch.
template <typename T>
Tensor<T> preprocess_batch(const std::vector<Sample>& samples, const std::vector<int64_t>& idx,
                           int64_t target) {
  require(!idx.empty(), "preprocess_batch: empty index list");
  Tensor<T> batch(Shape{static_cast<int64_t>(idx.size()), 3, target, target});
  auto bd = batch.data();
  const int64_t per = 3 * target * target;
  for (size_t b = 0; b < idx.size(); ++b) {
    Tensor<T> one = preprocess<T>(samples[static_cast<size_t>(idx[b])], target);
    auto od = one.data();
    std::copy(od.begin(), od.end(), bd.begin() + static_cast<int64_t>(b) * per);
  }
  return batch;
}

}  // namespace tokenfusion

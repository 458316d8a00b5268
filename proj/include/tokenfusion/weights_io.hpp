#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tokenfusion/errors.hpp"
#include "tokenfusion/layers.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

// Flat little-endian container:
//   "TFWB" | u32 version (=1) | u64 tensor_count
//   then per tensor:
//   u32 name_len | name bytes | u32 rank | i64 extent * rank | u8 dtype | data
// dtype tag: 0 = float32, 1 = float64.

namespace detail {

constexpr char kWeightsMagic[4] = {'T', 'F', 'W', 'B'};
constexpr uint32_t kWeightsVersion = 1;

template <typename V>
void write_pod(std::ostream& out, V v) {
  static_assert(std::is_trivially_copyable_v<V>);
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& in, const std::string& what) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw WeightsMismatchError("weights: truncated file while reading " + what);
  return v;
}

template <typename T>
constexpr uint8_t dtype_tag() {
  if constexpr (std::is_same_v<T, float>)
    return 0;
  else
    return 1;
}

}  // namespace detail

template <typename T>
void save_weights(const std::string& path, const ParamRegistry<T>& reg) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightsMismatchError("weights: cannot open " + path + " for writing");
  out.write(detail::kWeightsMagic, 4);
  detail::write_pod<uint32_t>(out, detail::kWeightsVersion);
  detail::write_pod<uint64_t>(out, static_cast<uint64_t>(reg.entries().size()));
  for (const auto& [name, t] : reg.entries()) {
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d = 0; d < t.rank(); ++d) detail::write_pod<int64_t>(out, t.extent(d));
    detail::write_pod<uint8_t>(out, detail::dtype_tag<T>());
    const auto d = t.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(T)));
  }
  if (!out) throw WeightsMismatchError("weights: short write to " + path);
}

/// Loads a weights file into an existing registry. The registry fixes the
/// expected tensor names, order, shapes, and dtype; any disagreement is a
/// WeightsMismatchError rather than a silent partial load.
template <typename T>
void load_weights(const std::string& path, ParamRegistry<T>& reg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightsMismatchError("weights: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, detail::kWeightsMagic, 4) != 0)
    throw WeightsMismatchError("weights: " + path + " is not a TFWB file");
  const auto version = detail::read_pod<uint32_t>(in, "version");
  if (version != detail::kWeightsVersion)
    throw WeightsMismatchError("weights: unsupported version " + std::to_string(version));
  const auto count = detail::read_pod<uint64_t>(in, "tensor count");
  if (count != reg.entries().size())
    throw WeightsMismatchError("weights: file has " + std::to_string(count) +
                               " tensors, model expects " +
                               std::to_string(reg.entries().size()));

  for (const auto& [name, t] : reg.entries()) {
    const auto name_len = detail::read_pod<uint32_t>(in, "name length");
    std::string file_name(name_len, '\0');
    in.read(file_name.data(), name_len);
    if (!in) throw WeightsMismatchError("weights: truncated name record");
    if (file_name != name)
      throw WeightsMismatchError("weights: expected tensor '" + name + "', file has '" +
                                 file_name + "'");
    const auto rank = detail::read_pod<uint32_t>(in, "rank");
    if (static_cast<int64_t>(rank) != t.rank())
      throw WeightsMismatchError("weights: rank mismatch for " + name);
    for (int64_t d = 0; d < t.rank(); ++d) {
      const auto extent = detail::read_pod<int64_t>(in, "extent");
      if (extent != t.extent(d))
        throw WeightsMismatchError("weights: shape mismatch for " + name + " at axis " +
                                   std::to_string(d));
    }
    const auto tag = detail::read_pod<uint8_t>(in, "dtype");
    if (tag != detail::dtype_tag<T>())
      throw WeightsMismatchError("weights: dtype mismatch for " + name);
    Tensor<T> dst = t;  // shared handle; loading writes through to the model
    auto d = dst.data();
    in.read(reinterpret_cast<char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(T)));
    if (!in) throw WeightsMismatchError("weights: truncated data for " + name);
  }
  // Anything left over means the file disagrees with the declared count.
  char extra;
  in.read(&extra, 1);
  if (in) throw WeightsMismatchError("weights: trailing bytes after last tensor");
}

}  // namespace tokenfusion

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "noop/nd/io.hpp"
#include "noop/nd/layers.hpp"

namespace noop::nd {

// NOCK1 layout: "NOCK1", u32 count, then per tensor: u16 name length, name,
// u8 dtype (0 = f32, 1 = f64), u8 ndim, u32 dims[ndim], raw LE elements.

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "checkpoint supports f32/f64");
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

struct CheckpointEntry {
  std::string name;
  DType dtype;
  Shape shape;
  std::vector<double> values;  // widened; exact for both dtypes

  template <typename T>
  Tensor<T> as() const {
    return Tensor<T>(shape, std::vector<T>(values.begin(), values.end()));
  }
};

template <typename T>
void write_checkpoint(std::ostream& os, const std::vector<NamedTensor<T>>& tensors) {
  os.write("NOCK1", 5);
  le::write<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    le::write_string_u16(os, name);
    le::write<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
    le::write<std::uint8_t>(os, static_cast<std::uint8_t>(tensor.ndim()));
    for (auto d : tensor.shape()) le::write<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (T v : tensor.data()) le::write<T>(os, v);
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  write_checkpoint(os, tensors);
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
  le::expect_magic(is, "NOCK1");
  const auto count = le::read<std::uint32_t>(is, "tensor count");
  std::vector<CheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = le::read_string_u16(is, "tensor name");
    const auto code = le::read<std::uint8_t>(is, "dtype");
    if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code) + " for '" + e.name + "'");
    e.dtype = static_cast<DType>(code);
    const auto ndim = le::read<std::uint8_t>(is, "ndim");
    for (std::uint8_t d = 0; d < ndim; ++d) e.shape.push_back(le::read<std::uint32_t>(is, "dims"));
    const std::size_t n = numel(e.shape);
    e.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      e.values[j] = e.dtype == DType::F32 ? static_cast<double>(le::read<float>(is, "elements"))
                                          : le::read<double>(is, "elements");
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return read_checkpoint(is);
}

inline const CheckpointEntry* find_entry(const std::vector<CheckpointEntry>& entries, const std::string& name) {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

/// Overwrites every tensor of `dst` from the same-named checkpoint entry.
template <typename T>
void restore(const std::vector<CheckpointEntry>& entries, const ParamList<T>& dst) {
  ParamList<T> src;
  for (const auto& item : dst.items()) {
    const auto* e = find_entry(entries, item.name);
    if (e == nullptr) throw FormatError("checkpoint lacks tensor '" + item.name + "'");
    src.add(e->name, e->template as<T>());
  }
  copy_values(src, dst);
}

}  // namespace noop::nd

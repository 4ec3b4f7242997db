#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "noop/nd/io.hpp"
#include "noop/nd/random.hpp"
#include "noop/nd/tensor.hpp"

namespace noop::data {

using nd::FormatError;

/// Labelled images, pixels stored per image in H x W x C order as on disk.
struct Dataset {
  std::uint16_t height = 0, width = 0, channels = 0;
  std::vector<std::string> class_names;
  std::vector<std::uint16_t> labels;
  std::vector<float> pixels;
  std::string provenance;  // generator name and seed; not part of NDS1

  std::size_t size() const { return labels.size(); }
  std::size_t classes() const { return class_names.size(); }
  std::size_t image_size() const { return std::size_t{height} * width * channels; }

  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * image_size(), image_size());
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(classes(), 0);
    for (auto l : labels) counts.at(l) += 1;
    return counts;
  }
};

/// Throws std::invalid_argument describing the first violated invariant.
inline void validate(const Dataset& ds) {
  if (ds.height == 0 || ds.width == 0 || ds.channels == 0) throw std::invalid_argument("dataset: zero image extent");
  if (ds.classes() == 0) throw std::invalid_argument("dataset: no classes");
  if (ds.pixels.size() != ds.size() * ds.image_size()) {
    throw std::invalid_argument("dataset: pixel buffer does not match count x H x W x C");
  }
  for (auto l : ds.labels) {
    if (l >= ds.classes()) throw std::invalid_argument("dataset: label " + std::to_string(l) + " >= K");
  }
  const auto counts = ds.class_counts();
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) throw std::invalid_argument("dataset: class '" + ds.class_names[k] + "' has no samples");
  }
  for (float v : ds.pixels) {
    if (!(v >= -1.0f && v <= 1.0f)) throw std::invalid_argument("dataset: pixel outside [-1,1]");
  }
}

/// Images at `indices` as an [n, C, H, W] tensor.
template <typename T>
nd::Tensor<T> to_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t H = ds.height, W = ds.width, C = ds.channels;
  if (indices.empty()) throw std::invalid_argument("to_tensor: no images selected");
  std::vector<T> out(indices.size() * ds.image_size());
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto img = ds.image(indices[n]);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c)
          out[((n * C + c) * H + y) * W + x] = static_cast<T>(img[(y * W + x) * C + c]);
  }
  return nd::Tensor<T>({indices.size(), C, H, W}, std::move(out));
}

inline std::vector<std::size_t> labels_of(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(ds.labels.at(i));
  return out;
}

inline std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return idx;
}

struct FewShotSplit {
  std::vector<std::size_t> train;  // exactly N per class, ascending
  std::vector<std::size_t> test;   // the remainder, ascending
  std::size_t shots = 0;
  std::uint64_t seed = 0;
};

inline FewShotSplit few_shot_split(const Dataset& ds, std::size_t shots, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(ds.classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(ds.labels[i]).push_back(i);
  nd::Rng rng(seed);
  FewShotSplit split{{}, {}, shots, seed};
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& members = by_class[k];
    if (members.size() <= shots) {
      throw std::invalid_argument("few_shot_split: class '" + ds.class_names[k] + "' has " +
                                  std::to_string(members.size()) + " samples, need more than " +
                                  std::to_string(shots));
    }
    rng.shuffle(members);
    split.train.insert(split.train.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(shots));
    split.test.insert(split.test.end(), members.begin() + static_cast<std::ptrdiff_t>(shots), members.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

// NDS1: "NDS1", u32 count, u16 H, W, C, K, u16 labels[count],
// f32 pixels[count*H*W*C], then K names each as u16 length + UTF-8 bytes.

inline void write_dataset(std::ostream& os, const Dataset& ds) {
  validate(ds);
  if (ds.classes() > 0xffff) throw std::invalid_argument("dataset: too many classes for NDS1");
  os.write("NDS1", 4);
  nd::le::write<std::uint32_t>(os, static_cast<std::uint32_t>(ds.size()));
  nd::le::write<std::uint16_t>(os, ds.height);
  nd::le::write<std::uint16_t>(os, ds.width);
  nd::le::write<std::uint16_t>(os, ds.channels);
  nd::le::write<std::uint16_t>(os, static_cast<std::uint16_t>(ds.classes()));
  for (auto l : ds.labels) nd::le::write<std::uint16_t>(os, l);
  for (float v : ds.pixels) nd::le::write<float>(os, v);
  for (const auto& name : ds.class_names) nd::le::write_string_u16(os, name);
}

inline Dataset read_dataset(std::istream& is) {
  nd::le::expect_magic(is, "NDS1");
  Dataset ds;
  const auto count = nd::le::read<std::uint32_t>(is, "count");
  ds.height = nd::le::read<std::uint16_t>(is, "height");
  ds.width = nd::le::read<std::uint16_t>(is, "width");
  ds.channels = nd::le::read<std::uint16_t>(is, "channels");
  const auto k = nd::le::read<std::uint16_t>(is, "class count");
  ds.labels.resize(count);
  for (auto& l : ds.labels) {
    l = nd::le::read<std::uint16_t>(is, "labels");
    if (l >= k) throw FormatError("label " + std::to_string(l) + " out of range for " + std::to_string(k) + " classes");
  }
  ds.pixels.resize(std::size_t{count} * ds.image_size());
  for (auto& v : ds.pixels) v = nd::le::read<float>(is, "pixels");
  ds.class_names.resize(k);
  for (auto& name : ds.class_names) name = nd::le::read_string_u16(is, "class names");
  try {
    validate(ds);
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  write_dataset(os, ds);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open dataset: " + path.string());
  return read_dataset(is);
}

/// Binary PGM (P5) of one single-channel image, [-1,1] mapped linearly to 0..255.
inline void write_pgm(const Dataset& ds, std::size_t index, const std::filesystem::path& path) {
  if (ds.channels != 1) throw std::invalid_argument("write_pgm: single-channel images only");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << "P5\n" << ds.width << ' ' << ds.height << "\n255\n";
  for (float v : ds.image(index)) {
    const double level = std::round((static_cast<double>(v) + 1.0) * 127.5);
    os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(level, 0.0, 255.0))));
  }
}

}  // namespace noop::data

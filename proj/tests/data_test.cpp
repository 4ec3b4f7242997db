#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "noop/data/dataset.hpp"
#include "noop/data/generators.hpp"
#include "noop/spectral/spectral.hpp"

namespace data = noop::data;

namespace {

std::vector<double> as_double(std::span<const float> img) { return {img.begin(), img.end()}; }

double mean_ratio(const data::Dataset& ds) {
  double s = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) s += noop::spectral::high_freq_ratio(as_double(ds.image(i)), ds.height, ds.width, 0.3);
  return s / static_cast<double>(ds.size());
}

std::string bytes_of(const data::Dataset& ds) {
  std::ostringstream os;
  data::write_dataset(os, ds);
  return os.str();
}

}  // namespace

TEST(Shapes, DeterministicPerSeed) {
  EXPECT_EQ(bytes_of(data::gen_shapes(5, 16, 3)), bytes_of(data::gen_shapes(5, 16, 3)));
  EXPECT_NE(bytes_of(data::gen_shapes(5, 16, 3)), bytes_of(data::gen_shapes(5, 16, 4)));
}

TEST(Shapes, ExactClassHistogramAndRange) {
  const auto ds = data::gen_shapes(7, 16, 1);
  EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>{7, 7, 7, 7}));
  EXPECT_NO_THROW(data::validate(ds));
  EXPECT_EQ(ds.height, 16);
  EXPECT_EQ(ds.channels, 1);
}

TEST(Shapes, SizeBelowEightRejected) {
  EXPECT_THROW(data::gen_shapes(1, 7, 0), std::invalid_argument);
  EXPECT_THROW(data::gen_textures(1, 4, 0), std::invalid_argument);
  EXPECT_THROW(data::gen_shapes(0, 16, 0), std::invalid_argument);
}

TEST(Textures, DeterministicPerSeed) {
  EXPECT_EQ(bytes_of(data::gen_textures(5, 16, 3)), bytes_of(data::gen_textures(5, 16, 3)));
}

TEST(Textures, MostImagesAreHighFrequency) {
  const auto ds = data::gen_textures(50, 16, 2);
  std::size_t high = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    high += noop::spectral::high_freq_ratio(as_double(ds.image(i)), 16, 16, 0.3) >= 0.3 ? 1 : 0;
  EXPECT_GE(static_cast<double>(high), 0.9 * static_cast<double>(ds.size()));
}

TEST(Textures, StripeEnergySitsOnOneAxis) {
  const auto ds = data::gen_textures(20, 16, 5);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto kind = ds.labels[i];
    if (kind > 1) continue;
    const auto F = noop::spectral::dft2(as_double(ds.image(i)), 16, 16);
    double total = 0, axis = 0;
    for (std::size_t u = 0; u < 16; ++u)
      for (std::size_t v = 0; v < 16; ++v) {
        const double e = std::norm(F.at(u, v));
        total += e;
        // vertical stripes vary along columns: energy at zero row frequency
        if ((kind == 0 && u == 0) || (kind == 1 && v == 0)) axis += e;
      }
    EXPECT_GE(axis / total, 0.6) << "image " << i;
  }
}

TEST(Generators, TexturesAreSpectrallySeparatedFromShapes) {
  const double shapes = mean_ratio(data::gen_shapes(50, 16, 1));
  const double textures = mean_ratio(data::gen_textures(50, 16, 1));
  EXPECT_LT(shapes, textures);
  EXPECT_GE(textures - shapes, 0.2);
}

TEST(FewShot, Arithmetic) {
  const auto ds = data::gen_shapes(200, 16, 0);
  const auto split = data::few_shot_split(ds, 16, 9);
  EXPECT_EQ(split.train.size(), 64u);
  EXPECT_EQ(split.test.size(), 736u);
  std::vector<std::size_t> per(4, 0);
  for (auto i : split.train) per[ds.labels[i]] += 1;
  EXPECT_EQ(per, (std::vector<std::size_t>{16, 16, 16, 16}));
  std::vector<bool> seen(ds.size(), false);
  for (auto i : split.train) seen[i] = true;
  for (auto i : split.test) EXPECT_FALSE(seen[i]);
}

TEST(FewShot, LargestShotLeavesOnePerClass) {
  const auto ds = data::gen_shapes(5, 16, 0);
  const auto split = data::few_shot_split(ds, 4, 1);
  EXPECT_EQ(split.test.size(), 4u);
  EXPECT_THROW(data::few_shot_split(ds, 5, 1), std::invalid_argument);
}

TEST(FewShot, DeterministicPerSeed) {
  const auto ds = data::gen_shapes(20, 16, 0);
  const auto a = data::few_shot_split(ds, 4, 3), b = data::few_shot_split(ds, 4, 3);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.train, data::few_shot_split(ds, 4, 4).train);
}

TEST(Nds1, RoundTripIsBitExact) {
  const auto ds = data::gen_textures(3, 16, 11);
  std::stringstream ss(bytes_of(ds));
  const auto back = data::read_dataset(ss);
  EXPECT_EQ(bytes_of(back), bytes_of(ds));
  EXPECT_EQ(back.class_names, ds.class_names);
  EXPECT_EQ(back.labels, ds.labels);
}

TEST(Nds1, FileSizeFollowsHeader) {
  const auto ds = data::gen_shapes(3, 12, 0);
  const auto path = std::filesystem::temp_directory_path() / "noop_nds1_size.nds";
  data::save_dataset(ds, path);
  std::size_t names = 0;
  for (const auto& n : ds.class_names) names += 2 + n.size();
  const std::size_t count = ds.size();
  EXPECT_EQ(std::filesystem::file_size(path), 16 + 2 * count + 4 * count * 12 * 12 + names);
  std::filesystem::remove(path);
}

TEST(Nds1, CorruptInputsRejected) {
  auto bytes = bytes_of(data::gen_shapes(2, 8, 0));
  auto bad = bytes;
  bad[0] = 'X';
  std::istringstream magic(bad);
  EXPECT_THROW(data::read_dataset(magic), noop::nd::FormatError);

  std::istringstream truncated(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(data::read_dataset(truncated), noop::nd::FormatError);

  auto bad_label = bytes;
  bad_label[16] = 9;  // first label, K = 4
  std::istringstream label(bad_label);
  EXPECT_THROW(data::read_dataset(label), noop::nd::FormatError);
}

TEST(Tensors, NchwLayoutAndLabels) {
  const auto ds = data::gen_shapes(2, 8, 0);
  const std::vector<std::size_t> idx{3, 1};
  const auto t = data::to_tensor<double>(ds, idx);
  EXPECT_EQ(t.shape(), (noop::nd::Shape{2, 1, 8, 8}));
  EXPECT_EQ(t[64 + 9], static_cast<double>(ds.image(1)[9]));
  EXPECT_EQ(data::labels_of(ds, idx), (std::vector<std::size_t>{3, 1}));
}

TEST(Pgm, HeaderAndRange) {
  const auto ds = data::gen_shapes(1, 8, 0);
  const auto path = std::filesystem::temp_directory_path() / "noop_pgm_test.pgm";
  data::write_pgm(ds, 0, path);
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  std::size_t w = 0, h = 0, maxv = 0;
  is >> magic >> w >> h >> maxv;
  is.get();
  EXPECT_EQ(magic, "P5");
  EXPECT_EQ(w, 8u);
  EXPECT_EQ(maxv, 255u);
  std::string body((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  EXPECT_EQ(body.size(), 64u);
  std::filesystem::remove(path);
}

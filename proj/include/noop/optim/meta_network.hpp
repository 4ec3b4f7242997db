#pragma once

#include <stdexcept>

#include "noop/nd/layers.hpp"

namespace noop::optim {

/// Light U-Net mapping an image to a same-shape noise offset. Three stride-2
/// conv+BN+ReLU stages (8, 16, 32 channels), three upsample+skip+conv+BN+ReLU
/// stages back to full resolution, and a zero-initialised 1x1 head so the
/// offset is exactly 0 until training moves it.
template <typename T>
class MetaNetwork {
 public:
  MetaNetwork() = default;

  MetaNetwork(std::size_t channels, std::size_t image_size, std::uint64_t seed) : channels_(channels) {
    if (channels == 0 || image_size == 0 || image_size % 8 != 0) {
      throw std::invalid_argument("MetaNetwork: image size must be a positive multiple of 8");
    }
    nd::Rng rng(seed);
    d1_ = nd::Conv2d<T>(channels, 8, 3, 2, rng);
    d2_ = nd::Conv2d<T>(8, 16, 3, 2, rng);
    d3_ = nd::Conv2d<T>(16, 32, 3, 2, rng);
    u1_ = nd::Conv2d<T>(32 + 16, 16, 3, 1, rng);
    u2_ = nd::Conv2d<T>(16 + 8, 8, 3, 1, rng);
    u3_ = nd::Conv2d<T>(8 + channels, 8, 3, 1, rng);
    head_ = nd::Conv2d<T>(8, channels, 1, 1, rng, /*zero=*/true);
    bn_d1_ = nd::BatchNorm2d<T>(8);
    bn_d2_ = nd::BatchNorm2d<T>(16);
    bn_d3_ = nd::BatchNorm2d<T>(32);
    bn_u1_ = nd::BatchNorm2d<T>(16);
    bn_u2_ = nd::BatchNorm2d<T>(8);
    bn_u3_ = nd::BatchNorm2d<T>(8);
  }

  /// `training` selects batch statistics (and updates the running buffers)
  /// versus the running buffers.
  nd::Tensor<T> operator()(nd::Graph<T>& g, const nd::Tensor<T>& x, bool training) const {
    if (x.ndim() != 4 || x.dim(1) != channels_ || x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0) {
      throw nd::ShapeError("MetaNetwork: input " + nd::to_string(x.shape()) + " does not match the network");
    }
    auto block = [&](const nd::Conv2d<T>& conv, const nd::BatchNorm2d<T>& bn, const nd::Tensor<T>& in) {
      return nd::relu(g, bn(g, conv(g, in), training));
    };
    const auto h1 = block(d1_, bn_d1_, x);
    const auto h2 = block(d2_, bn_d2_, h1);
    const auto h3 = block(d3_, bn_d3_, h2);
    auto u = block(u1_, bn_u1_, nd::concat_channels(g, nd::upsample2x(g, h3), h2));
    u = block(u2_, bn_u2_, nd::concat_channels(g, nd::upsample2x(g, u), h1));
    u = block(u3_, bn_u3_, nd::concat_channels(g, nd::upsample2x(g, u), x));
    return head_(g, u);
  }

  /// Weights and batch-norm buffers, named "<prefix>.*".
  nd::ParamList<T> params(const std::string& prefix = "meta") const {
    nd::ParamList<T> list;
    d1_.collect(list, prefix + ".d1");
    bn_d1_.collect(list, prefix + ".bn_d1");
    d2_.collect(list, prefix + ".d2");
    bn_d2_.collect(list, prefix + ".bn_d2");
    d3_.collect(list, prefix + ".d3");
    bn_d3_.collect(list, prefix + ".bn_d3");
    u1_.collect(list, prefix + ".u1");
    bn_u1_.collect(list, prefix + ".bn_u1");
    u2_.collect(list, prefix + ".u2");
    bn_u2_.collect(list, prefix + ".bn_u2");
    u3_.collect(list, prefix + ".u3");
    bn_u3_.collect(list, prefix + ".bn_u3");
    head_.collect(list, prefix + ".head");
    return list;
  }

 private:
  std::size_t channels_ = 0;
  nd::Conv2d<T> d1_, d2_, d3_, u1_, u2_, u3_, head_;
  nd::BatchNorm2d<T> bn_d1_, bn_d2_, bn_d3_, bn_u1_, bn_u2_, bn_u3_;
};

}  // namespace noop::optim

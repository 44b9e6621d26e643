// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "dualedit/autograd.hpp"
#include "dualedit/scheduler.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit {

/// Fixed, exactly differentiable stand-in for a VAE.
///
/// encode: RGB image [3,H,W] in [0,1] -> latent [4,H,W]; channels 0..2 are the
/// pixels mapped affinely to [-1,1], channel 3 is their per-pixel mean.
/// decode: channels 0..2 mapped back to [0,1]; channel 3 is ignored.
class ToyCodec {
 public:
  static constexpr int kLatentChannels = 4;

  Latent encode(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
      throw InvalidArgument("ToyCodec::encode expects [3,H,W], got " + shape_str(image.shape()));
    }
    const int h = image.dim(1), w = image.dim(2);
    Tensor z(Shape{kLatentChannels, h, w});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double mean = 0.0;
        for (int c = 0; c < 3; ++c) {
          z.at(c, y, x) = 2.0 * image.at(c, y, x) - 1.0;
          mean += z.at(c, y, x) / 3.0;
        }
        z.at(3, y, x) = mean;
      }
    return Latent{std::move(z), 0};
  }

  ad::Var decode(const ad::Var& z) const {
    check_latent(z.shape());
    return ad::add_scalar(ad::scale(ad::slice0(z, 0, 3), 0.5), 0.5);
  }

  Tensor decode(const Tensor& z) const {
    ad::NoGradGuard no_grad;
    return decode(ad::constant(z)).value();
  }

 private:
  static void check_latent(const Shape& s) {
    if (s.size() != 3 || s[0] != kLatentChannels) {
      throw InvalidArgument("ToyCodec::decode expects [4,H,W], got " + shape_str(s));
    }
  }
};

}  // namespace dualedit
